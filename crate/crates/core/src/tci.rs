//! Tensor-train cross interpolation of the centered local-energy and
//! gradient functions, and their contraction into the force and metric.
//!
//! Functions are indexed by one physical index per spin (0 = up, 1 = down),
//! followed for the gradient train by a trailing index `k < K` over the
//! variational parameters.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ansatz::{VariationalState, Wavefunction};
use crate::estimators::{moments_from_batch, SampleBatch};
use crate::spin_model::{Hamiltonian, SpinConfiguration, DEFAULT_DENSE_CAP};
use crate::{Error, Result, C64};

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// A 3-index tensor `(left bond, physical, right bond)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Core {
    left: usize,
    phys: usize,
    right: usize,
    /// Left unfolding, row `l·phys + p`, column `r`.
    data: DMatrix<C64>,
}

impl Core {
    pub fn zeros(left: usize, phys: usize, right: usize) -> Self {
        Self { left, phys, right, data: DMatrix::zeros(left * phys, right) }
    }

    pub fn from_left_unfolding(left: usize, phys: usize, data: DMatrix<C64>) -> Result<Self> {
        if data.nrows() != left * phys {
            return Err(Error::ShapeMismatch(format!(
                "unfolding has {} rows, expected {}·{}",
                data.nrows(),
                left,
                phys
            )));
        }
        Ok(Self { left, phys, right: data.ncols(), data })
    }

    pub fn from_fn(left: usize, phys: usize, right: usize, mut f: impl FnMut(usize, usize, usize) -> C64) -> Self {
        let data = DMatrix::from_fn(left * phys, right, |row, r| f(row / phys, row % phys, r));
        Self { left, phys, right, data }
    }

    pub fn left(&self) -> usize {
        self.left
    }

    pub fn phys(&self) -> usize {
        self.phys
    }

    pub fn right(&self) -> usize {
        self.right
    }

    #[inline]
    pub fn get(&self, l: usize, p: usize, r: usize) -> C64 {
        self.data[(l * self.phys + p, r)]
    }

    /// Matrix `A[:, p, :]`.
    pub fn slice(&self, p: usize) -> DMatrix<C64> {
        DMatrix::from_fn(self.left, self.right, |l, r| self.get(l, p, r))
    }

    pub fn left_unfolding(&self) -> &DMatrix<C64> {
        &self.data
    }

    /// Row `l`, column `p·right + r`.
    pub fn right_unfolding(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.left, self.phys * self.right, |l, col| self.get(l, col / self.right, col % self.right))
    }

    fn from_right_unfolding(phys: usize, m: &DMatrix<C64>) -> Self {
        let right = m.ncols() / phys;
        Self::from_fn(m.nrows(), phys, right, |l, p, r| m[(l, p * right + r)])
    }

    /// Multiplies the left bond by `m` (`m · A`).
    fn absorb_left(&self, m: &DMatrix<C64>) -> Self {
        let unfolded = m * self.right_unfolding();
        Self::from_right_unfolding(self.phys, &unfolded)
    }

    /// Multiplies the right bond by `m` (`A · m`).
    fn absorb_right(&self, m: &DMatrix<C64>) -> Self {
        Self { left: self.left, phys: self.phys, right: m.ncols(), data: &self.data * m }
    }
}

/// A one-dimensional tensor network with open boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorTrain {
    cores: Vec<Core>,
    ortho_center: Option<usize>,
}

impl TensorTrain {
    pub fn new(cores: Vec<Core>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::ShapeMismatch("tensor train needs at least one core".into()));
        }
        if cores[0].left != 1 || cores[cores.len() - 1].right != 1 {
            return Err(Error::ShapeMismatch("boundary bonds must have dimension 1".into()));
        }
        for (i, pair) in cores.windows(2).enumerate() {
            if pair[0].right != pair[1].left {
                return Err(Error::ShapeMismatch(format!(
                    "bond {i}: right dimension {} does not match left dimension {}",
                    pair[0].right, pair[1].left
                )));
            }
        }
        Ok(Self { cores, ortho_center: None })
    }

    /// All-zero train with bond dimension 1.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::new(dims.iter().map(|&d| Core::zeros(1, d, 1)).collect())
    }

    /// Random complex cores with the given inner bond dimensions.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], bonds: &[usize], rng: &mut R) -> Result<Self> {
        if bonds.len() + 1 != dims.len() {
            return Err(Error::ShapeMismatch(format!("{} sites need {} bonds", dims.len(), dims.len() - 1)));
        }
        let cores = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let l = if i == 0 { 1 } else { bonds[i - 1] };
                let r = if i + 1 == dims.len() { 1 } else { bonds[i] };
                Core::from_fn(l, d, r, |_, _, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            })
            .collect();
        Self::new(cores)
    }

    pub fn n_sites(&self) -> usize {
        self.cores.len()
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    pub fn phys_dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.phys).collect()
    }

    /// Inner bond dimensions, one per pair of neighbouring sites.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.cores[..self.cores.len() - 1].iter().map(|c| c.right).collect()
    }

    pub fn max_bond(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    pub fn ortho_center(&self) -> Option<usize> {
        self.ortho_center
    }

    fn check_index(&self, idx: &[usize]) -> Result<()> {
        if idx.len() != self.cores.len() {
            return Err(Error::ShapeMismatch(format!("index tuple of length {} for {} sites", idx.len(), self.cores.len())));
        }
        for (c, &i) in self.cores.iter().zip(idx) {
            if i >= c.phys {
                return Err(Error::IndexOutOfRange { index: i, bound: c.phys });
            }
        }
        Ok(())
    }

    /// The represented function at one index tuple.
    pub fn evaluate(&self, idx: &[usize]) -> Result<C64> {
        self.check_index(idx)?;
        let mut v = vec![ONE];
        for (core, &p) in self.cores.iter().zip(idx) {
            let mut next = vec![ZERO; core.right];
            for (l, vl) in v.iter().enumerate() {
                if *vl == ZERO {
                    continue;
                }
                for (r, slot) in next.iter_mut().enumerate() {
                    *slot += vl * core.get(l, p, r);
                }
            }
            v = next;
        }
        Ok(v[0])
    }

    /// All values in row-major order of the index tuple (first index slowest).
    pub fn to_dense(&self) -> Vec<C64> {
        let mut acc = DMatrix::<C64>::from_element(1, 1, ONE);
        for core in &self.cores {
            let rows = acc.nrows();
            let mut next = DMatrix::<C64>::zeros(rows * core.phys, core.right);
            for p in 0..core.phys {
                let block = &acc * core.slice(p);
                for i in 0..rows {
                    for r in 0..core.right {
                        next[(i * core.phys + p, r)] = block[(i, r)];
                    }
                }
            }
            acc = next;
        }
        acc.column(0).iter().copied().collect()
    }

    /// Tensor train of a full tensor (row-major, first index slowest) by
    /// successive SVDs, dropping singular values below `rel_tol·σ_max`.
    pub fn from_dense(values: &[C64], dims: &[usize], rel_tol: f64) -> Result<Self> {
        let total: usize = dims.iter().product();
        if values.len() != total || dims.is_empty() {
            return Err(Error::ShapeMismatch(format!("{} values for dimensions {dims:?}", values.len())));
        }
        let mut cores = Vec::with_capacity(dims.len());
        let mut rest = DMatrix::from_row_slice(1, total, values);
        let mut left = 1;
        for &d in &dims[..dims.len() - 1] {
            let cols = rest.ncols() / d;
            // rows (l, p), columns remaining indices
            let m = DMatrix::from_fn(left * d, cols, |row, c| rest[(row / d, (row % d) * cols + c)]);
            let svd = m.svd(true, true);
            let smax = svd.singular_values.max();
            let keep = svd.singular_values.iter().filter(|&&s| s > rel_tol * smax && s > 0.0).count().max(1);
            let u = svd.u.as_ref().expect("U").columns(0, keep).into_owned();
            let sv = DMatrix::from_diagonal(&svd.singular_values.rows(0, keep).map(|s| C64::new(s, 0.0)));
            let vt = svd.v_t.as_ref().expect("Vᵀ").rows(0, keep).into_owned();
            cores.push(Core::from_left_unfolding(left, d, u)?);
            rest = sv * vt;
            left = keep;
        }
        let d = dims[dims.len() - 1];
        cores.push(Core::from_fn(left, d, 1, |l, p, _| rest[(l, p)]));
        Self::new(cores)
    }

    /// Brings the train into mixed-canonical form around `site`.
    pub fn move_ortho_center(&self, site: usize) -> Result<Self> {
        let n = self.cores.len();
        if site >= n {
            return Err(Error::IndexOutOfRange { index: site, bound: n });
        }
        let mut cores = self.cores.clone();
        for i in 0..site {
            let qr = cores[i].left_unfolding().clone().qr();
            let (q, r) = (qr.q(), qr.r());
            let (left, phys) = (cores[i].left, cores[i].phys);
            cores[i] = Core::from_left_unfolding(left, phys, q)?;
            cores[i + 1] = cores[i + 1].absorb_left(&r);
        }
        for i in (site + 1..n).rev() {
            // M = L·Q from the QR decomposition of Mᴴ.
            let qr = cores[i].right_unfolding().adjoint().qr();
            let (q, r) = (qr.q(), qr.r());
            cores[i] = Core::from_right_unfolding(cores[i].phys, &q.adjoint());
            cores[i - 1] = cores[i - 1].absorb_right(&r.adjoint());
        }
        Ok(Self { cores, ortho_center: Some(site) })
    }

    /// `max |A†A − I|` over left unfoldings (`left = true`) or right
    /// unfoldings of core `i`.
    pub fn isometry_defect(&self, i: usize, left: bool) -> f64 {
        let gram = if left {
            let m = self.cores[i].left_unfolding();
            m.adjoint() * m
        } else {
            let m = self.cores[i].right_unfolding();
            &m * m.adjoint()
        };
        let k = gram.nrows();
        (gram - DMatrix::<C64>::identity(k, k)).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Left environment `E[a, b] = Σ conj(X)[…a] Y[…b]` over the first `n` sites.
fn overlap_environment(x: &TensorTrain, y: &TensorTrain, n: usize) -> DMatrix<C64> {
    let mut env = DMatrix::<C64>::from_element(1, 1, ONE);
    for site in 0..n {
        let (cx, cy) = (&x.cores[site], &y.cores[site]);
        let mut next = DMatrix::<C64>::zeros(cx.right, cy.right);
        for p in 0..cx.phys {
            next += cx.slice(p).adjoint() * &env * cy.slice(p);
        }
        env = next;
    }
    env
}

fn check_pair(t_e: &TensorTrain, t_g: &TensorTrain) -> Result<usize> {
    let n = t_e.n_sites();
    if t_g.n_sites() != n + 1 {
        return Err(Error::ShapeMismatch(format!(
            "gradient train has {} sites, expected {} spin sites plus a parameter site",
            t_g.n_sites(),
            n
        )));
    }
    for i in 0..n {
        if t_e.cores[i].phys != t_g.cores[i].phys {
            return Err(Error::ShapeMismatch(format!("physical dimension mismatch at site {i}")));
        }
    }
    Ok(n)
}

/// `F̂_k = Σ_s conj(f_grad(s, k)) f_E(s)` by a left-to-right zip-up.
pub fn contract_force(t_e: &TensorTrain, t_g: &TensorTrain) -> Result<DVector<C64>> {
    let n = check_pair(t_e, t_g)?;
    let env = overlap_environment(t_g, t_e, n);
    let last = &t_g.cores[n];
    Ok(DVector::from_fn(last.phys, |k, _| (0..last.left).map(|a| last.get(a, k, 0).conj() * env[(a, 0)]).sum()))
}

fn param_matrix(core: &Core) -> DMatrix<C64> {
    DMatrix::from_fn(core.left, core.phys, |a, k| core.get(a, k, 0))
}

/// `Ŝ = Γᴴ Γ` with Γ the parameter-site core; the train must be canonical
/// with its orthogonality centre on that site.
pub fn contract_qgt(t_g: &TensorTrain) -> Result<DMatrix<C64>> {
    let last = t_g.n_sites() - 1;
    if t_g.ortho_center != Some(last) {
        return Err(Error::Precondition(format!(
            "orthogonality centre must be at the parameter site {last}, found {:?}",
            t_g.ortho_center
        )));
    }
    let gamma = param_matrix(&t_g.cores[last]);
    Ok(gamma.adjoint() * gamma)
}

/// `Ŝ_kk' = Σ_s conj(f_grad(s, k)) f_grad(s, k')` contracting every site.
pub fn contract_qgt_full(t_g: &TensorTrain) -> DMatrix<C64> {
    let last = t_g.n_sites() - 1;
    let env = overlap_environment(t_g, t_g, last);
    let gamma = param_matrix(&t_g.cores[last]);
    gamma.adjoint() * env * gamma
}

/// `‖X − X_exact‖ / ‖X_exact‖` (Frobenius).
pub fn relative_error(x: &[C64], exact: &[C64]) -> Result<f64> {
    if x.len() != exact.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} entries", x.len(), exact.len())));
    }
    let denom: f64 = exact.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedReference);
    }
    let num: f64 = x.iter().zip(exact).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    Ok(num / denom)
}

/// A function on a grid of index tuples.
pub trait TciFunction: Sync {
    fn dims(&self) -> Vec<usize>;
    fn eval(&self, idx: &[usize]) -> Result<C64>;
}

/// Adapter turning a closure into a [`TciFunction`].
pub struct FnTarget<F> {
    pub dims: Vec<usize>,
    pub f: F,
}

impl<F: Fn(&[usize]) -> C64 + Sync> TciFunction for FnTarget<F> {
    fn dims(&self) -> Vec<usize> {
        self.dims.clone()
    }

    fn eval(&self, idx: &[usize]) -> Result<C64> {
        Ok((self.f)(idx))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// `(E_loc(s) − ψ(s)⟨H⟩)/√⟨ψ|ψ⟩`.
    ELoc,
    /// `(∂_kψ(s) − ψ(s)⟨ψ|∂_kψ⟩/⟨ψ|ψ⟩)/√⟨ψ|ψ⟩`.
    Grad,
}

/// Centered local-energy or gradient function with exact expectations.
pub struct TargetFunction<'a> {
    pub kind: TargetKind,
    state: &'a VariationalState,
    h: &'a Hamiltonian,
    pub exact_norm: f64,
    pub exact_energy: C64,
    pub exact_grad_overlap: DVector<C64>,
    cache: Mutex<HashMap<u64, Vec<C64>>>,
}

impl<'a> TargetFunction<'a> {
    pub fn new(kind: TargetKind, state: &'a VariationalState, h: &'a Hamiltonian) -> Result<Self> {
        let n = state.n_sites();
        if n > DEFAULT_DENSE_CAP {
            return Err(Error::ResourceLimit { what: "exact TCI expectations", n, cap: DEFAULT_DENSE_CAP });
        }
        let batch = SampleBatch::full(state, h)?;
        let exact_norm = batch.entries.iter().map(|e| e.p).sum();
        let q = moments_from_batch(&batch, false)?;
        Ok(Self {
            kind,
            state,
            h,
            exact_norm,
            exact_energy: q.m_psi_e,
            exact_grad_overlap: q.m_psi_grad,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn n_spin_sites(&self) -> usize {
        self.state.n_sites()
    }

    /// Distinct spin configurations evaluated so far.
    pub fn n_evaluated(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn values_at(&self, s: &SpinConfiguration) -> Result<Vec<C64>> {
        if let Some(v) = self.cache.lock().expect("cache lock").get(&s.index()) {
            return Ok(v.clone());
        }
        let inv_root = 1.0 / self.exact_norm.sqrt();
        let v = match self.kind {
            TargetKind::ELoc => {
                let psi = self.state.amplitude(s)?;
                let mut e_loc = ZERO;
                for (sp, hij) in &self.h.connections(s)?.entries {
                    e_loc += hij * self.state.amplitude(sp)?;
                }
                vec![(e_loc - psi * self.exact_energy) * inv_root]
            }
            TargetKind::Grad => {
                let ag = self.state.evaluate(s)?;
                ag.grad_psi
                    .iter()
                    .zip(self.exact_grad_overlap.iter())
                    .map(|(g, o)| (g - ag.psi * o) * inv_root)
                    .collect()
            }
        };
        self.cache.lock().expect("cache lock").insert(s.index(), v.clone());
        Ok(v)
    }
}

impl TciFunction for TargetFunction<'_> {
    fn dims(&self) -> Vec<usize> {
        let mut d = vec![2; self.state.n_sites()];
        if self.kind == TargetKind::Grad {
            d.push(self.state.n_params());
        }
        d
    }

    fn eval(&self, idx: &[usize]) -> Result<C64> {
        let n = self.state.n_sites();
        let expected = n + usize::from(self.kind == TargetKind::Grad);
        if idx.len() != expected {
            return Err(Error::ShapeMismatch(format!("index tuple of length {} for {expected} sites", idx.len())));
        }
        for &b in &idx[..n] {
            if b > 1 {
                return Err(Error::IndexOutOfRange { index: b, bound: 2 });
            }
        }
        let s = SpinConfiguration::from_bits(&idx[..n])?;
        let values = self.values_at(&s)?;
        match self.kind {
            TargetKind::ELoc => Ok(values[0]),
            TargetKind::Grad => {
                let k = idx[n];
                values.get(k).copied().ok_or(Error::IndexOutOfRange { index: k, bound: values.len() })
            }
        }
    }
}

/// Whether the stopping tolerance is absolute or relative to max |f| seen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ToleranceMode {
    Absolute,
    #[default]
    Relative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TciConfig {
    pub chi_max: usize,
    pub eps_tci: f64,
    pub max_sweeps: usize,
    /// Random starting points for rook search at each bond.
    pub pivot_candidates: usize,
    pub tolerance_mode: ToleranceMode,
    /// Bonds whose two-site matrix has at most this many entries are
    /// searched exhaustively; larger ones use rook search.
    pub full_search_max_entries: usize,
}

impl Default for TciConfig {
    fn default() -> Self {
        Self {
            chi_max: 64,
            eps_tci: 1e-4,
            max_sweeps: 20,
            pivot_candidates: 32,
            tolerance_mode: ToleranceMode::Relative,
            full_search_max_entries: 1 << 20,
        }
    }
}

impl TciConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chi_max == 0 {
            return Err(Error::InvalidConfig("chi_max must be at least 1".into()));
        }
        if !(self.eps_tci > 0.0) {
            return Err(Error::InvalidConfig(format!("eps_tci must be positive, got {}", self.eps_tci)));
        }
        if self.pivot_candidates == 0 {
            return Err(Error::InvalidConfig("pivot_candidates must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TciResult {
    pub train: TensorTrain,
    /// Every retained pivot as a full index tuple.
    pub pivots: Vec<Vec<usize>>,
    pub sweeps: usize,
    /// Largest interpolation error found during the last sweep.
    pub last_sweep_error: f64,
    pub converged: bool,
    /// No nonzero value was found among the initial probes.
    pub zero_function: bool,
}

struct Evaluator<'f, T: TciFunction + ?Sized> {
    f: &'f T,
    max_abs: f64,
}

impl<T: TciFunction + ?Sized> Evaluator<'_, T> {
    fn eval(&mut self, idx: &[usize]) -> Result<C64> {
        let v = self.f.eval(idx)?;
        self.max_abs = self.max_abs.max(v.norm());
        Ok(v)
    }
}

fn concat(parts: &[&[usize]]) -> Vec<usize> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Builds a tensor-train interpolation of `f` by two-site cross
/// interpolation. Pivots are re-selected at every bond on each sweep and
/// made nested before the cores are assembled.
pub fn tci_build<T: TciFunction + ?Sized>(f: &T, config: &TciConfig, seed: u64) -> Result<TciResult> {
    config.validate()?;
    let dims = f.dims();
    let l = dims.len();
    if l < 2 {
        return Err(Error::ShapeMismatch("cross interpolation needs at least two sites".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev = Evaluator { f, max_abs: 0.0 };

    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..config.pivot_candidates.max(16) {
        let idx: Vec<usize> = dims.iter().map(|&d| rng.random_range(0..d)).collect();
        let v = ev.eval(&idx)?.norm();
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((idx, v));
        }
    }
    let (x0, v0) = best.expect("at least one probe");
    if v0 == 0.0 {
        return Ok(TciResult {
            train: TensorTrain::zeros(&dims)?,
            pivots: Vec::new(),
            sweeps: 0,
            last_sweep_error: 0.0,
            converged: true,
            zero_function: true,
        });
    }

    // i_sets[b]: left multi-indices over sites 0..b; j_sets[b]: right
    // multi-indices over sites b..l. Bond b (between sites b and b+1) owns
    // the paired pivots i_sets[b+1][a] ⊕ j_sets[b+1][a].
    let mut i_sets: Vec<Vec<Vec<usize>>> = (0..=l).map(|b| vec![x0[..b].to_vec()]).collect();
    let mut j_sets: Vec<Vec<Vec<usize>>> = (0..=l).map(|b| vec![x0[b..].to_vec()]).collect();

    let mut sweeps = 0;
    let mut last_sweep_error = f64::INFINITY;
    let mut converged = false;
    let mut previous_bonds = Vec::new();
    while sweeps < config.max_sweeps {
        let forward = sweeps % 2 == 0;
        sweeps += 1;
        let mut sweep_error: f64 = 0.0;
        let bonds: Vec<usize> = if forward { (0..l - 1).collect() } else { (0..l - 1).rev().collect() };
        for b in bonds {
            sweep_error = sweep_error.max(update_bond(&mut ev, &dims, &mut i_sets, &mut j_sets, b, config, &mut rng)?);
        }
        last_sweep_error = sweep_error;
        let bond_dims: Vec<usize> = i_sets[1..l].iter().map(Vec::len).collect();
        let stable = bond_dims == previous_bonds;
        previous_bonds = bond_dims;
        // Stop only after a forward sweep, which leaves the left sets nested.
        if forward && sweeps > 1 && stable && sweep_error <= tolerance(config, ev.max_abs) {
            converged = true;
            break;
        }
        if !forward && sweeps == config.max_sweeps {
            sweeps += 1;
            for b in 0..l - 1 {
                last_sweep_error = last_sweep_error.max(update_bond(&mut ev, &dims, &mut i_sets, &mut j_sets, b, config, &mut rng)?);
            }
        }
    }
    nest_right_sets(&mut ev, &dims, &mut i_sets, &mut j_sets)?;

    let train = assemble_train(&mut ev, &dims, &i_sets, &j_sets)?;
    let pivots = (0..l - 1)
        .flat_map(|b| i_sets[b + 1].iter().zip(&j_sets[b + 1]).map(|(i, j)| concat(&[i, j])))
        .collect();
    Ok(TciResult { train, pivots, sweeps, last_sweep_error, converged, zero_function: false })
}

fn tolerance(config: &TciConfig, max_abs: f64) -> f64 {
    match config.tolerance_mode {
        ToleranceMode::Absolute => config.eps_tci,
        ToleranceMode::Relative => config.eps_tci * max_abs,
    }
}

/// The two-site matrix at one bond, rows `I_b × σ_b` and columns `σ_{b+1} × J_{b+2}`.
struct BondMatrix<'a> {
    left: &'a [Vec<usize>],
    right: &'a [Vec<usize>],
    d1: usize,
    d2: usize,
}

impl BondMatrix<'_> {
    fn rows(&self) -> usize {
        self.left.len() * self.d1
    }

    fn cols(&self) -> usize {
        self.d2 * self.right.len()
    }

    fn row_index(&self, i: usize) -> Vec<usize> {
        concat(&[&self.left[i / self.d1], &[i % self.d1]])
    }

    fn col_index(&self, j: usize) -> Vec<usize> {
        concat(&[&[j / self.right.len()], &self.right[j % self.right.len()]])
    }

    fn entry<T: TciFunction + ?Sized>(&self, ev: &mut Evaluator<'_, T>, i: usize, j: usize) -> Result<C64> {
        ev.eval(&concat(&[&self.row_index(i), &self.col_index(j)]))
    }
}

/// Re-selects the pivots of bond `b` from scratch on its two-site matrix
/// and returns the largest residual left over.
fn update_bond<T: TciFunction + ?Sized>(
    ev: &mut Evaluator<'_, T>,
    dims: &[usize],
    i_sets: &mut [Vec<Vec<usize>>],
    j_sets: &mut [Vec<Vec<usize>>],
    b: usize,
    config: &TciConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (new_rows, new_cols, err) = {
        let m = BondMatrix { left: &i_sets[b], right: &j_sets[b + 2], d1: dims[b], d2: dims[b + 1] };
        let tol = |max_abs: f64| tolerance(config, max_abs);
        let (added, err) = if m.rows() * m.cols() <= config.full_search_max_entries {
            full_search(ev, &m, config.chi_max, &tol)?
        } else {
            rook_search(ev, &m, config.chi_max, &tol, config.pivot_candidates, rng)?
        };
        let rows: Vec<Vec<usize>> = added.iter().map(|&(i, _)| m.row_index(i)).collect();
        let cols: Vec<Vec<usize>> = added.iter().map(|&(_, j)| m.col_index(j)).collect();
        (rows, cols, err)
    };
    if !new_rows.is_empty() {
        i_sets[b + 1] = new_rows;
        j_sets[b + 1] = new_cols;
    }
    Ok(err)
}

type Tol<'a> = dyn Fn(f64) -> f64 + 'a;

/// Greedy complete pivoting on the dense matrix. Returns the pivots and the
/// largest residual not taken.
fn full_search<T: TciFunction + ?Sized>(
    ev: &mut Evaluator<'_, T>,
    m: &BondMatrix<'_>,
    budget: usize,
    tol: &Tol<'_>,
) -> Result<(Vec<(usize, usize)>, f64)> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut e = DMatrix::<C64>::zeros(rows, cols);
    for i in 0..rows {
        let ri = m.row_index(i);
        for j in 0..cols {
            e[(i, j)] = ev.eval(&concat(&[&ri, &m.col_index(j)]))?;
        }
    }
    let added = complete_pivoting(&mut e, budget, |v| v <= tol(ev.max_abs));
    Ok((added.0, added.1))
}

/// Greedy LU with complete pivoting on `e` (overwritten by the residual).
/// Stops after `budget` pivots or once the largest residual satisfies `done`.
fn complete_pivoting(
    e: &mut DMatrix<C64>,
    budget: usize,
    mut done: impl FnMut(f64) -> bool,
) -> (Vec<(usize, usize)>, f64) {
    let (rows, cols) = e.shape();
    let mut used_rows = vec![false; rows];
    let mut used_cols = vec![false; cols];
    let mut added = Vec::new();
    loop {
        let (mut bi, mut bj, mut bv) = (0, 0, 0.0);
        for j in (0..cols).filter(|&j| !used_cols[j]) {
            for i in (0..rows).filter(|&i| !used_rows[i]) {
                let v = e[(i, j)].norm();
                if v > bv {
                    (bi, bj, bv) = (i, j, v);
                }
            }
        }
        if added.len() >= budget || bv == 0.0 || done(bv) {
            return (added, bv);
        }
        let piv = e[(bi, bj)];
        let col = e.column(bj).into_owned();
        let row = e.row(bi).into_owned() / piv;
        *e -= col * row;
        (used_rows[bi], used_cols[bj]) = (true, true);
        added.push((bi, bj));
    }
}

/// Rook search on the cross-factorized residual `Π − U V`.
fn rook_search<T: TciFunction + ?Sized>(
    ev: &mut Evaluator<'_, T>,
    m: &BondMatrix<'_>,
    budget: usize,
    tol: &Tol<'_>,
    candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<(usize, usize)>, f64)> {
    let (rows, cols) = (m.rows(), m.cols());
    // u: residual columns at the pivots, v: residual rows scaled by 1/pivot.
    let mut us: Vec<DVector<C64>> = Vec::new();
    let mut vs: Vec<DVector<C64>> = Vec::new();

    let residual_col = |ev: &mut Evaluator<'_, T>, us: &[DVector<C64>], vs: &[DVector<C64>], j: usize| -> Result<DVector<C64>> {
        let mut c = DVector::<C64>::zeros(rows);
        for i in 0..rows {
            c[i] = m.entry(ev, i, j)?;
        }
        for (u, v) in us.iter().zip(vs) {
            c.axpy(-v[j], u, ONE);
        }
        Ok(c)
    };
    let residual_row = |ev: &mut Evaluator<'_, T>, us: &[DVector<C64>], vs: &[DVector<C64>], i: usize| -> Result<DVector<C64>> {
        let mut r = DVector::<C64>::zeros(cols);
        for j in 0..cols {
            r[j] = m.entry(ev, i, j)?;
        }
        for (u, v) in us.iter().zip(vs) {
            r.axpy(-u[i], v, ONE);
        }
        Ok(r)
    };
    let mut used_rows = vec![false; rows];
    let mut used_cols = vec![false; cols];
    let argmax = |v: &DVector<C64>, used: &[bool]| -> (usize, f64) {
        v.iter()
            .enumerate()
            .filter(|(k, _)| !used[*k])
            .map(|(k, z)| (k, z.norm()))
            .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a })
    };

    let mut added = Vec::new();
    loop {
        let (mut bi, mut bj, mut bv) = (0, 0, 0.0);
        for _ in 0..candidates {
            let (mut i, mut j) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let mut val = -1.0;
            for _ in 0..4 {
                let (ni, cv) = argmax(&residual_col(ev, &us, &vs, j)?, &used_rows);
                let (nj, rv) = argmax(&residual_row(ev, &us, &vs, ni)?, &used_cols);
                if cv < 0.0 || rv < 0.0 {
                    break;
                }
                let improved = rv > val * (1.0 + 1e-12);
                (i, j, val) = (ni, nj, rv.max(cv));
                if !improved {
                    break;
                }
            }
            if val > bv {
                (bi, bj, bv) = (i, j, val);
            }
        }
        if added.len() >= budget || bv == 0.0 || bv <= tol(ev.max_abs) {
            return Ok((added, bv));
        }
        let col = residual_col(ev, &us, &vs, bj)?;
        let row = residual_row(ev, &us, &vs, bi)?;
        let piv = col[bi];
        us.push(col);
        vs.push(row / piv);
        (used_rows[bi], used_cols[bj]) = (true, true);
        added.push((bi, bj));
    }
}

/// Makes every right set nested, `J_ℓ ⊂ σ_ℓ × J_{ℓ+1}`, keeping the left
/// sets: for each site from the right, columns of `f(I_ℓ, σ_ℓ × J_{ℓ+1})`
/// are re-chosen by complete pivoting. Rows with no nonzero residual left
/// are dropped.
fn nest_right_sets<T: TciFunction + ?Sized>(
    ev: &mut Evaluator<'_, T>,
    dims: &[usize],
    i_sets: &mut [Vec<Vec<usize>>],
    j_sets: &mut [Vec<Vec<usize>>],
) -> Result<()> {
    let l = dims.len();
    for site in (1..l).rev() {
        let (left, right, d) = (&i_sets[site], &j_sets[site + 1], dims[site]);
        let col_index = |c: usize| concat(&[&[c / right.len()], &right[c % right.len()]]);
        let mut e = DMatrix::<C64>::zeros(left.len(), d * right.len());
        for (a, li) in left.iter().enumerate() {
            for c in 0..e.ncols() {
                e[(a, c)] = ev.eval(&concat(&[li, &col_index(c)]))?;
            }
        }
        let (picked, _) = complete_pivoting(&mut e, left.len(), |_| false);
        let rows = picked.iter().map(|&(a, _)| left[a].clone()).collect();
        let cols = picked.iter().map(|&(_, c)| col_index(c)).collect();
        i_sets[site] = rows;
        j_sets[site] = cols;
    }
    Ok(())
}

/// Cores `A_ℓ = T_ℓ P_ℓ⁻¹` from the pivot sets, with the last core `T_{L−1}`.
fn assemble_train<T: TciFunction + ?Sized>(
    ev: &mut Evaluator<'_, T>,
    dims: &[usize],
    i_sets: &[Vec<Vec<usize>>],
    j_sets: &[Vec<Vec<usize>>],
) -> Result<TensorTrain> {
    let l = dims.len();
    let mut cores = Vec::with_capacity(l);
    for site in 0..l {
        let (left, right) = (&i_sets[site], &j_sets[site + 1]);
        let d = dims[site];
        let mut t = DMatrix::<C64>::zeros(left.len() * d, right.len());
        for (a, li) in left.iter().enumerate() {
            for p in 0..d {
                for (c, rj) in right.iter().enumerate() {
                    t[(a * d + p, c)] = ev.eval(&concat(&[li, &[p], rj]))?;
                }
            }
        }
        if site + 1 < l {
            let pl = &i_sets[site + 1];
            let mut p = DMatrix::<C64>::zeros(pl.len(), right.len());
            for (a, li) in pl.iter().enumerate() {
                for (c, rj) in right.iter().enumerate() {
                    p[(a, c)] = ev.eval(&concat(&[li, rj]))?;
                }
            }
            // A = T P⁻¹  ⇔  Pᵀ Aᵀ = Tᵀ
            let lu = p.transpose().full_piv_lu();
            let at = lu
                .solve(&t.transpose())
                .ok_or_else(|| Error::NumericDomain(format!("singular pivot matrix at bond {site}")))?;
            t = at.transpose();
        }
        cores.push(Core::from_left_unfolding(left.len(), d, t)?);
    }
    TensorTrain::new(cores)
}

/// Largest `|TT(x) − f(x)|` over random probes and the single-site
/// neighbourhoods of the given pivots.
pub fn estimate_sup_error<T: TciFunction + ?Sized>(
    train: &TensorTrain,
    f: &T,
    pivots: &[Vec<usize>],
    n_random: usize,
    seed: u64,
) -> Result<f64> {
    let dims = f.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut check = |idx: &[usize]| -> Result<()> {
        worst = worst.max((train.evaluate(idx)? - f.eval(idx)?).norm());
        Ok(())
    };
    for _ in 0..n_random {
        let idx: Vec<usize> = dims.iter().map(|&d| rng.random_range(0..d)).collect();
        check(&idx)?;
    }
    for p in pivots {
        for site in 0..dims.len() {
            for v in 0..dims[site] {
                let mut idx = p.clone();
                idx[site] = v;
                check(&idx)?;
            }
        }
    }
    Ok(worst)
}
