//! Exact state-vector propagation and comparison metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::ansatz::{VariationalState, Wavefunction};
use crate::estimators::{cutoff_weight, CutoffDistributionSpec};
use crate::spin_model::{Hamiltonian, SpinConfiguration, DEFAULT_DENSE_CAP};
use crate::tdvp::Observer;
use crate::{Error, Result, C64};

/// Largest system handled by the matrix-free matrix-vector product.
pub const MATVEC_CAP: usize = 24;

/// A full state vector indexed by configuration index.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseState {
    amplitudes: DVector<C64>,
    n_sites: usize,
}

impl DenseState {
    pub fn new(amplitudes: DVector<C64>) -> Result<Self> {
        let len = amplitudes.len();
        if len == 0 || !len.is_power_of_two() {
            return Err(Error::ShapeMismatch(format!("state length {len} is not a power of two")));
        }
        if amplitudes.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NumericDomain("non-finite amplitude".into()));
        }
        if amplitudes.norm_squared() == 0.0 {
            return Err(Error::UndefinedState("zero state vector"));
        }
        Ok(Self { n_sites: len.trailing_zeros() as usize, amplitudes })
    }

    /// Normalized product state with every spin along +x.
    pub fn x_polarized(n_sites: usize) -> Result<Self> {
        check_cap(n_sites, MATVEC_CAP, "dense state")?;
        let dim = 1usize << n_sites;
        Self::new(DVector::from_element(dim, C64::new((dim as f64).sqrt().recip(), 0.0)))
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.norm()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self { amplitudes: &self.amplitudes / C64::new(n, 0.0), n_sites: self.n_sites }
    }
}

fn check_cap(n: usize, cap: usize, what: &'static str) -> Result<()> {
    if n > cap {
        Err(Error::ResourceLimit { what, n, cap })
    } else {
        Ok(())
    }
}

/// `H v` computed row by row from the local connections.
pub fn apply_hamiltonian(h: &Hamiltonian, v: &DVector<C64>) -> Result<DVector<C64>> {
    let n = h.n_sites();
    check_cap(n, MATVEC_CAP, "matrix-free matvec")?;
    if v.len() != 1usize << n {
        return Err(Error::ShapeMismatch(format!("vector of length {} for {n} sites", v.len())));
    }
    let mut out = DVector::<C64>::zeros(v.len());
    for (i, slot) in out.iter_mut().enumerate() {
        let s = SpinConfiguration::from_index(n, i as u64)?;
        *slot = h.connections(&s)?.entries.iter().map(|(sp, hij)| hij * v[sp.index() as usize]).sum();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KrylovConfig {
    pub dim: usize,
    pub tol: f64,
}

impl Default for KrylovConfig {
    fn default() -> Self {
        Self { dim: 30, tol: 1e-12 }
    }
}

const MAX_SPLIT_DEPTH: u32 = 40;

/// `exp(−iH dt) ψ` by Lanczos with the default subspace size.
pub fn krylov_propagate(h: &Hamiltonian, psi: &DenseState, dt: f64) -> Result<DenseState> {
    krylov_propagate_with(h, psi, dt, &KrylovConfig::default())
}

pub fn krylov_propagate_with(h: &Hamiltonian, psi: &DenseState, dt: f64, cfg: &KrylovConfig) -> Result<DenseState> {
    if psi.n_sites() != h.n_sites() {
        return Err(Error::ConfigurationShape { expected: h.n_sites(), got: psi.n_sites() });
    }
    if !dt.is_finite() {
        return Err(Error::NumericDomain(format!("time step {dt}")));
    }
    if cfg.dim == 0 {
        return Err(Error::InvalidConfig("Krylov dimension must be positive".into()));
    }
    let v = propagate_split(h, psi.amplitudes(), dt, cfg, 0)?;
    DenseState::new(v)
}

fn propagate_split(h: &Hamiltonian, v: &DVector<C64>, dt: f64, cfg: &KrylovConfig, depth: u32) -> Result<DVector<C64>> {
    if dt == 0.0 {
        return Ok(v.clone());
    }
    match lanczos_step(h, v, dt, cfg)? {
        Some(out) => Ok(out),
        None if depth < MAX_SPLIT_DEPTH => {
            let half = propagate_split(h, v, 0.5 * dt, cfg, depth + 1)?;
            propagate_split(h, &half, 0.5 * dt, cfg, depth + 1)
        }
        None => Err(Error::NumericDomain("Krylov propagation did not converge".into())),
    }
}

/// One Lanczos exponential, or `None` if the residual estimate stays above
/// tolerance for the full subspace.
fn lanczos_step(h: &Hamiltonian, v: &DVector<C64>, dt: f64, cfg: &KrylovConfig) -> Result<Option<DVector<C64>>> {
    let beta0 = v.norm();
    let dim = v.len();
    let m_max = cfg.dim.min(dim);
    let mut basis: Vec<DVector<C64>> = vec![v / C64::new(beta0, 0.0)];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();

    for j in 0..m_max {
        let mut w = apply_hamiltonian(h, &basis[j])?;
        let a = basis[j].dotc(&w).re;
        alpha.push(a);
        w.axpy(C64::new(-a, 0.0), &basis[j], C64::new(1.0, 0.0));
        if j > 0 {
            w.axpy(C64::new(-beta[j - 1], 0.0), &basis[j - 1], C64::new(1.0, 0.0));
        }
        for b in &basis {
            let proj = b.dotc(&w);
            w.axpy(-proj, b, C64::new(1.0, 0.0));
        }
        let b_next = w.norm();
        let coeffs = tridiagonal_exp_first_column(&alpha, &beta, dt);
        let breakdown = b_next <= 1e-14 * beta0.max(1.0) || j + 1 == dim;
        let residual = b_next * coeffs[j].norm();
        if breakdown || residual < cfg.tol {
            let mut out = DVector::<C64>::zeros(dim);
            for (c, b) in coeffs.iter().zip(&basis) {
                out.axpy(c * beta0, b, C64::new(1.0, 0.0));
            }
            return Ok(Some(out));
        }
        beta.push(b_next);
        basis.push(w / C64::new(b_next, 0.0));
    }
    Ok(None)
}

/// `exp(−i T dt) e₀` for the symmetric tridiagonal `T`.
fn tridiagonal_exp_first_column(alpha: &[f64], beta: &[f64], dt: f64) -> Vec<C64> {
    let m = alpha.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    (0..m)
        .map(|r| {
            (0..m)
                .map(|k| {
                    let q = eig.eigenvectors[(r, k)] * eig.eigenvectors[(0, k)];
                    C64::new(0.0, -eig.eigenvalues[k] * dt).exp() * q
                })
                .sum()
        })
        .collect()
}

/// All `2^N` amplitudes of a variational state.
pub fn variational_to_dense<W: Wavefunction>(state: &W) -> Result<DenseState> {
    let n = state.n_sites();
    check_cap(n, DEFAULT_DENSE_CAP, "dense conversion")?;
    let amps = SpinConfiguration::enumerate(n).map(|s| state.amplitude(&s)).collect::<Result<Vec<_>>>()?;
    DenseState::new(DVector::from_vec(amps))
}

/// `1 − |⟨a|b⟩|²/(‖a‖²‖b‖²)`.
pub fn infidelity(a: &DenseState, b: &DenseState) -> Result<f64> {
    if a.amplitudes.len() != b.amplitudes.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} amplitudes", a.amplitudes.len(), b.amplitudes.len())));
    }
    let overlap = a.amplitudes.dotc(&b.amplitudes).norm_sqr();
    let fid = overlap / (a.amplitudes.norm_squared() * b.amplitudes.norm_squared());
    Ok((1.0 - fid).clamp(0.0, 1.0))
}

/// `⟨Σ_i σˣ_i⟩ / ‖ψ‖²`.
pub fn observable_x_total(psi: &DenseState) -> Result<f64> {
    let n = psi.n_sites();
    let v = &psi.amplitudes;
    let mut acc = 0.0;
    for i in 0..v.len() {
        for site in 0..n {
            acc += (v[i].conj() * v[i ^ (1 << site)]).re;
        }
    }
    Ok(acc / v.norm_squared())
}

/// `⟨ψ|H|ψ⟩ / ‖ψ‖²`.
pub fn energy(h: &Hamiltonian, psi: &DenseState) -> Result<C64> {
    let hv = apply_hamiltonian(h, psi.amplitudes())?;
    Ok(psi.amplitudes.dotc(&hv) / psi.amplitudes.norm_squared())
}

/// `Σ_s q_ε(s) / Σ_s |ψ(s)|²` by enumeration.
pub fn exact_norm_ratio(psi: &DenseState, spec: &CutoffDistributionSpec) -> Result<f64> {
    let mut sq = 0.0;
    let mut sp = 0.0;
    for z in psi.amplitudes.iter() {
        let p = z.norm_sqr();
        sq += cutoff_weight(p, spec)?;
        sp += p;
    }
    Ok(sq / sp)
}

/// Largest Born weight `max_s |ψ(s)|²`.
pub fn max_psi2(psi: &DenseState) -> f64 {
    psi.amplitudes.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Stop once the infidelity drops below this.
    pub tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { max_iters: 300, tol: 1e-10 }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub state: VariationalState,
    pub infidelity: f64,
    pub iterations: usize,
}

fn infidelity_and_gradient(state: &VariationalState, target: &DVector<C64>, c: f64) -> Result<(f64, Vec<f64>)> {
    let n = state.n_sites();
    let k = state.n_params();
    let mut a = C64::new(0.0, 0.0);
    let mut b = 0.0;
    let mut da = vec![C64::new(0.0, 0.0); k];
    let mut db = vec![0.0; k];
    for (i, s) in SpinConfiguration::enumerate(n).enumerate() {
        let ag = state.evaluate(&s)?;
        let tc = target[i].conj();
        a += tc * ag.psi;
        b += ag.psi.norm_sqr();
        let pc = ag.psi.conj();
        for kk in 0..k {
            da[kk] += tc * ag.grad_psi[kk];
            db[kk] += 2.0 * (pc * ag.grad_psi[kk]).re;
        }
    }
    let a2 = a.norm_sqr();
    let inf = (1.0 - a2 / (b * c)).max(0.0);
    let grad = (0..k).map(|kk| -(2.0 * (a.conj() * da[kk]).re * b - a2 * db[kk]) / (b * b * c)).collect();
    Ok((inf, grad))
}

/// Minimizes the infidelity to `target` over the parameters with L-BFGS
/// and a backtracking line search.
pub fn fit_to_state(initial: &VariationalState, target: &DenseState, cfg: &FitConfig) -> Result<FitReport> {
    const MEMORY: usize = 10;
    check_cap(initial.n_sites(), DEFAULT_DENSE_CAP, "state fitting")?;
    if target.n_sites() != initial.n_sites() {
        return Err(Error::ConfigurationShape { expected: initial.n_sites(), got: target.n_sites() });
    }
    let c = target.amplitudes.norm_squared();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut state = initial.clone();
    let (mut inf, mut grad) = infidelity_and_gradient(&state, &target.amplitudes, c)?;
    let mut history: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut iterations = 0;
    while iterations < cfg.max_iters && inf > cfg.tol {
        iterations += 1;
        // two-loop recursion for the search direction
        let mut d: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope = dot(&grad, &d);
        if !(slope < 0.0) {
            history.clear();
            d = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
            if slope == 0.0 {
                break;
            }
        }
        let mut step = if history.is_empty() { 1.0 / dot(&d, &d).sqrt().max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..50 {
            let theta: Vec<f64> = state.theta().iter().zip(&d).map(|(t, di)| t + step * di).collect();
            let trial = state.with_theta(theta)?;
            let (ti, tg) = infidelity_and_gradient(&trial, &target.amplitudes, c)?;
            if ti <= inf + 1e-4 * step * slope {
                accepted = Some((trial, ti, tg));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, ti, tg)) = accepted else { break };
        let s: Vec<f64> = trial.theta().iter().zip(state.theta()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = tg.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        state = trial;
        inf = ti;
        grad = tg;
    }
    Ok(FitReport { state, infidelity: inf, iterations })
}

/// Propagates an exact reference alongside an evolving variational state
/// and reports the x-magnetizations and the infidelity.
pub struct ExactTracker {
    h: Hamiltonian,
    reference: DenseState,
    t: f64,
}

impl ExactTracker {
    pub fn new(h: Hamiltonian, initial: DenseState) -> Result<Self> {
        if initial.n_sites() != h.n_sites() {
            return Err(Error::ConfigurationShape { expected: h.n_sites(), got: initial.n_sites() });
        }
        Ok(Self { h, reference: initial, t: 0.0 })
    }

    pub fn reference(&self) -> &DenseState {
        &self.reference
    }

    /// Moves the reference to time `t`.
    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        if t != self.t {
            self.reference = krylov_propagate(&self.h, &self.reference, t - self.t)?;
            self.t = t;
        }
        Ok(())
    }
}

impl Observer for ExactTracker {
    fn columns(&self) -> Vec<String> {
        vec!["x_exact".into(), "x_total".into(), "infidelity".into()]
    }

    fn observe(&mut self, t: f64, state: &VariationalState) -> Result<Vec<f64>> {
        self.advance_to(t)?;
        let dense = variational_to_dense(state)?;
        Ok(vec![observable_x_total(&self.reference)?, observable_x_total(&dense)?, infidelity(&self.reference, &dense)?])
    }
}

/// Reports `⟨Σσˣ⟩` of the variational state.
#[derive(Clone, Copy, Debug, Default)]
pub struct XMagnetization;

impl Observer for XMagnetization {
    fn columns(&self) -> Vec<String> {
        vec!["x_total".into()]
    }

    fn observe(&mut self, _t: f64, state: &VariationalState) -> Result<Vec<f64>> {
        Ok(vec![observable_x_total(&variational_to_dense(state)?)?])
    }
}
