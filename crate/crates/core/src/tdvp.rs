//! Equations of motion for the variational parameters and their time
//! integration.
//!
//! With real parameters the stationary-action form reads
//! `Im[Ŝ] θ̇ = Im[−iF̂]`, where Ŝ is the quantum geometric tensor and F̂ the
//! force. Im[Ŝ] is antisymmetric for Hermitian Ŝ.

use nalgebra::{DMatrix, DVector};

use crate::ansatz::{VariationalState, Wavefunction};
use crate::estimators::{derive_seed, estimate_quantities, Backend, TdvpQuantities};
use crate::spin_model::Hamiltonian;
use crate::{Error, Result, C64};

/// Singular values below this are always discarded.
pub const ABSOLUTE_SINGULAR_FLOOR: f64 = 1e-12;

/// `Ŝ_kk' = ⟨∂_kψ|∂_k'ψ⟩ − ⟨∂_kψ|ψ⟩⟨ψ|∂_k'ψ⟩` (normalized).
pub fn assemble_qgt(q: &TdvpQuantities) -> DMatrix<C64> {
    let g = &q.m_psi_grad;
    let k = g.len();
    DMatrix::from_fn(k, k, |a, b| q.m_grad2[(a, b)] - g[a].conj() * g[b])
}

/// `F̂_k = ⟨∂_kψ|H|ψ⟩ − ⟨∂_kψ|ψ⟩⟨H⟩` (normalized).
pub fn assemble_force(q: &TdvpQuantities) -> DVector<C64> {
    DVector::from_fn(q.m_grad_e.len(), |a, _| q.m_grad_e[a] - q.m_psi_grad[a].conj() * q.m_psi_e)
}

/// `S = Im[Ŝ]` made exactly antisymmetric, `F = Im[−iF̂] = −Re[F̂]`.
pub fn real_projection(s_hat: &DMatrix<C64>, f_hat: &DVector<C64>) -> (DMatrix<f64>, DVector<f64>) {
    let im = s_hat.map(|z| z.im);
    let s = (&im - im.transpose()) * 0.5;
    let f = f_hat.map(|z| (C64::new(0.0, -1.0) * z).im);
    (s, f)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regularization {
    /// Modes with singular value below `svd_cutoff·σ_max` are discarded.
    pub svd_cutoff: f64,
    pub diagonal_shift: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Self { svd_cutoff: 1e-8, diagonal_shift: 0.0 }
    }
}

impl Regularization {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.svd_cutoff) {
            return Err(Error::InvalidConfig(format!("svd_cutoff must lie in [0, 1), got {}", self.svd_cutoff)));
        }
        if !self.diagonal_shift.is_finite() {
            return Err(Error::InvalidConfig("diagonal_shift must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub theta_dot: DVector<f64>,
    pub kept_modes: usize,
}

/// Pseudo-inverse solve of `(S + shift·I) θ̇ = F` by SVD.
pub fn solve_update(s: &DMatrix<f64>, f: &DVector<f64>, reg: &Regularization) -> Result<Solution> {
    reg.validate()?;
    let k = f.len();
    if s.nrows() != k || s.ncols() != k {
        return Err(Error::ShapeMismatch(format!("S is {}x{}, F has {} entries", s.nrows(), s.ncols(), k)));
    }
    if k == 0 {
        return Err(Error::RankCollapse);
    }
    let mut a = s.clone();
    for i in 0..k {
        a[(i, i)] += reg.diagonal_shift;
    }
    let svd = a.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested Vᵀ");
    let sigma_max = svd.singular_values.max();
    let threshold = (reg.svd_cutoff * sigma_max).max(ABSOLUTE_SINGULAR_FLOOR);
    let mut theta_dot = DVector::<f64>::zeros(k);
    let mut kept = 0;
    for (m, &sv) in svd.singular_values.iter().enumerate() {
        if !(sv > threshold) {
            continue;
        }
        kept += 1;
        let coeff = u.column(m).dot(f) / sv;
        theta_dot.axpy(coeff, &vt.row(m).transpose(), 1.0);
    }
    if kept == 0 {
        return Err(Error::RankCollapse);
    }
    Ok(Solution { theta_dot, kept_modes: kept })
}

/// Normalized squared distance between the exact and the projected flow,
/// or `None` when the energy variance vanishes.
pub fn tdvp_residual(q: &TdvpQuantities, theta_dot: &DVector<f64>) -> Option<f64> {
    let var_h = q.energy_variance();
    if !(var_h > 1e-12 * q.m_e2.abs()) || !(var_h > 0.0) {
        return None;
    }
    let s_hat = assemble_qgt(q);
    let f_hat = assemble_force(q);
    let s_re = s_hat.map(|z| z.re);
    let quad = theta_dot.dot(&(&s_re * theta_dot));
    let lin = theta_dot.dot(&f_hat.map(|z| z.im));
    Some(((quad - 2.0 * lin + var_h) / var_h).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    Heun,
    Rk4,
}

/// What to do when every mode of S is discarded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RankCollapsePolicy {
    #[default]
    Abort,
    /// Use θ̇ = 0 for the affected stage and flag the step.
    Freeze,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_max: f64,
    pub regularization: Regularization,
    pub on_rank_collapse: RankCollapsePolicy,
    /// Base seed from which per-stage sampler seeds are derived.
    pub seed: u64,
    /// Attach per-component variances to committed-step rows.
    pub record_variances: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Heun,
            dt: 1e-3,
            t_max: 1.0,
            regularization: Regularization::default(),
            on_rank_collapse: RankCollapsePolicy::Abort,
            seed: 0,
            record_variances: false,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_max >= 0.0) || !self.t_max.is_finite() {
            return Err(Error::InvalidConfig(format!("t_max must be >= 0, got {}", self.t_max)));
        }
        self.regularization.validate()
    }

    pub fn n_steps(&self) -> usize {
        (self.t_max / self.dt - 1e-9).ceil().max(0.0) as usize
    }
}

/// Everything derived from one estimate at fixed parameters.
#[derive(Clone, Debug)]
pub struct TdvpStep {
    pub s: DMatrix<f64>,
    pub f: DVector<f64>,
    pub theta_dot: DVector<f64>,
    pub r_squared: Option<f64>,
    pub energy: C64,
    pub norm_ratio: f64,
    pub kept_modes: usize,
    pub frozen: bool,
    pub quantities: TdvpQuantities,
}

/// Solves the equations of motion from precomputed moments.
pub fn step_from_quantities(
    q: TdvpQuantities,
    reg: &Regularization,
    policy: RankCollapsePolicy,
) -> Result<TdvpStep> {
    let (s, f) = real_projection(&assemble_qgt(&q), &assemble_force(&q));
    let (theta_dot, kept_modes, frozen) = match solve_update(&s, &f, reg) {
        Ok(sol) => (sol.theta_dot, sol.kept_modes, false),
        Err(Error::RankCollapse) if policy == RankCollapsePolicy::Freeze => (DVector::zeros(f.len()), 0, true),
        Err(e) => return Err(e),
    };
    if theta_dot.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericDomain("non-finite parameter velocity".into()));
    }
    Ok(TdvpStep {
        r_squared: tdvp_residual(&q, &theta_dot),
        energy: q.m_psi_e,
        norm_ratio: q.norm_ratio,
        s,
        f,
        theta_dot,
        kept_modes,
        frozen,
        quantities: q,
    })
}

/// Estimates moments for `state` and solves for θ̇.
pub fn tdvp_step<W: Wavefunction>(
    state: &W,
    h: &Hamiltonian,
    backend: &Backend,
    reg: &Regularization,
    policy: RankCollapsePolicy,
    with_variances: bool,
) -> Result<TdvpStep> {
    step_from_quantities(estimate_quantities(state, h, backend, with_variances)?, reg, policy)
}

/// Receives every committed state during `evolve`.
pub trait Observer {
    fn columns(&self) -> Vec<String>;
    fn observe(&mut self, t: f64, state: &VariationalState) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub energy: C64,
    pub r_squared: Option<f64>,
    pub norm_ratio: f64,
    pub mean_var_grad_e: Option<f64>,
    pub mean_var_grad2: Option<f64>,
    /// A stage of the step starting here hit a rank collapse and was frozen.
    pub frozen: bool,
    pub observables: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub columns: Vec<String>,
    pub rows: Vec<TrajectoryRow>,
    pub final_state: VariationalState,
}

fn advance(state: &VariationalState, theta_dot: &DVector<f64>, h: f64, t: f64) -> Result<VariationalState> {
    let theta: Vec<f64> = state.theta().iter().zip(theta_dot.iter()).map(|(x, v)| x + h * v).collect();
    state.with_theta(theta).map_err(|e| match e {
        Error::NumericDomain(m) => Error::NumericDomain(format!("at t = {t}: {m}")),
        other => other,
    })
}

/// Integrates θ(t) from `initial` up to `config.t_max`, recording one row
/// per committed state (including t = 0 and the final time). The last step
/// is shortened to land on `t_max`.
pub fn evolve(
    initial: &VariationalState,
    h: &Hamiltonian,
    backend: &Backend,
    config: &IntegratorConfig,
    observers: &mut [&mut dyn Observer],
) -> Result<Trajectory> {
    config.validate()?;
    let reg = config.regularization;
    let policy = config.on_rank_collapse;
    let columns = observers.iter().flat_map(|o| o.columns()).collect();
    let n_steps = config.n_steps();
    let mut state = initial.clone();
    let mut backend = *backend;
    let mut rows = Vec::with_capacity(n_steps + 1);

    for step in 0..=n_steps {
        let t = (step as f64 * config.dt).min(config.t_max);
        let stage_backend = |b: &Backend, stage: u64| b.with_seed(derive_seed(config.seed, step as u64, stage));
        let k1 = tdvp_step(&state, h, &stage_backend(&backend, 0), &reg, policy, config.record_variances)?;
        let mut frozen = k1.frozen;
        let mut psi2_max = k1.quantities.batch_psi2_max;

        let mut observables = Vec::new();
        for o in observers.iter_mut() {
            observables.extend(o.observe(t, &state)?);
        }
        let variances = k1.quantities.variances.as_ref();
        rows.push(TrajectoryRow {
            t,
            energy: k1.energy,
            r_squared: k1.r_squared,
            norm_ratio: k1.norm_ratio,
            mean_var_grad_e: variances.map(|v| v.mean_grad_e()),
            mean_var_grad2: variances.map(|v| v.mean_grad2()),
            frozen,
            observables,
        });
        if step == n_steps {
            break;
        }

        let dt = ((step + 1) as f64 * config.dt).min(config.t_max) - t;
        let mut stage = |s: &VariationalState, idx: u64| -> Result<DVector<f64>> {
            let r = tdvp_step(s, h, &stage_backend(&backend, idx), &reg, policy, false)?;
            frozen |= r.frozen;
            psi2_max = psi2_max.max(r.quantities.batch_psi2_max);
            Ok(r.theta_dot)
        };
        let update = match config.scheme {
            Scheme::Heun => {
                let k2 = stage(&advance(&state, &k1.theta_dot, dt, t)?, 1)?;
                (&k1.theta_dot + k2) * 0.5
            }
            Scheme::Rk4 => {
                let k2 = stage(&advance(&state, &k1.theta_dot, 0.5 * dt, t)?, 1)?;
                let k3 = stage(&advance(&state, &k2, 0.5 * dt, t)?, 2)?;
                let k4 = stage(&advance(&state, &k3, dt, t)?, 3)?;
                (&k1.theta_dot + k2 * 2.0 + k3 * 2.0 + k4) / 6.0
            }
        };
        rows.last_mut().expect("row pushed").frozen = frozen;
        state = advance(&state, &update, dt, t)?;
        if backend.cutoff().is_some() && psi2_max > 0.0 {
            backend = backend.with_psi2_max(psi2_max);
        }
    }

    Ok(Trajectory { columns, rows, final_state: state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_system() {
        let s = DMatrix::<f64>::identity(3, 3);
        let f = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let sol = solve_update(&s, &f, &Regularization::default()).unwrap();
        assert!((sol.theta_dot - &f).norm() < 1e-15);
        assert_eq!(sol.kept_modes, 3);
    }

    #[test]
    fn small_modes_are_dropped() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-16]));
        let f = DVector::from_vec(vec![1.0, 1.0]);
        let sol = solve_update(&s, &f, &Regularization { svd_cutoff: 1e-8, diagonal_shift: 0.0 }).unwrap();
        assert!((sol.theta_dot[0] - 1.0).abs() < 1e-15);
        assert_eq!(sol.theta_dot[1], 0.0);
        assert_eq!(sol.kept_modes, 1);
    }

    #[test]
    fn zero_metric_collapses() {
        let s = DMatrix::<f64>::zeros(2, 2);
        let f = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(solve_update(&s, &f, &Regularization::default()), Err(Error::RankCollapse));
    }

    #[test]
    fn residual_of_random_psd_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = 12;
        let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        let s = a.transpose() * &a + DMatrix::identity(k, k) * 0.1;
        let f = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let sol = solve_update(&s, &f, &Regularization { svd_cutoff: 0.0, diagonal_shift: 0.0 }).unwrap();
        assert!((&s * &sol.theta_dot - &f).norm() < 1e-10 * f.norm());
    }

    #[test]
    fn antisymmetric_system_is_solved() {
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, -2.0, 0.0]);
        let f = DVector::from_vec(vec![1.0, 3.0]);
        let sol = solve_update(&s, &f, &Regularization { svd_cutoff: 0.0, diagonal_shift: 0.0 }).unwrap();
        assert!((&s * &sol.theta_dot - &f).norm() < 1e-14);
    }

    #[test]
    fn projection_of_real_input() {
        let s_hat = DMatrix::from_element(2, 2, C64::new(0.7, 0.0));
        let f_hat = DVector::from_vec(vec![C64::new(2.0, 0.0), C64::new(0.0, 5.0)]);
        let (s, f) = real_projection(&s_hat, &f_hat);
        assert_eq!(s, DMatrix::zeros(2, 2));
        assert_eq!(f, DVector::from_vec(vec![-2.0, 0.0]));
    }

    #[test]
    fn projection_is_antisymmetric() {
        let s_hat = DMatrix::from_row_slice(2, 2, &[C64::new(1.0, 0.0), C64::new(0.2, 0.3), C64::new(0.2, -0.3), C64::new(2.0, 0.0)]);
        let (s, _) = real_projection(&s_hat, &DVector::zeros(2));
        assert_eq!(s, -s.transpose());
        assert_eq!(s[(0, 1)], 0.3);
    }

    #[test]
    fn step_count_covers_t_max() {
        let cfg = IntegratorConfig { dt: 0.1, t_max: 1.0, ..Default::default() };
        assert_eq!(cfg.n_steps(), 10);
        let cfg = IntegratorConfig { dt: 0.3, t_max: 1.0, ..Default::default() };
        assert_eq!(cfg.n_steps(), 4);
        assert!(IntegratorConfig { dt: 0.0, ..Default::default() }.validate().is_err());
    }

    mod props {
        use super::*;
        use crate::ansatz::VariationalState;
        use crate::spin_model::Hamiltonian;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn projected_metric_is_antisymmetric(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let st = VariationalState::rbm_random(3, 2, 0.5, &mut rng).unwrap();
                let h = Hamiltonian::tfim(3, 1.0, 1.0).unwrap();
                let step = tdvp_step(&st, &h, &Backend::FullSummation, &Regularization::default(), RankCollapsePolicy::Abort, false).unwrap();
                prop_assert_eq!(&step.s, &(-step.s.transpose()));
                let s_hat = assemble_qgt(&step.quantities);
                prop_assert!((&s_hat - s_hat.adjoint()).norm() <= 1e-12 * s_hat.norm());
            }

            #[test]
            fn pseudo_inverse_solves_well_conditioned_systems(seed in any::<u64>(), k in 1usize..8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = DMatrix::<f64>::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
                let s = &a * a.transpose() + DMatrix::identity(k, k);
                let x = DVector::<f64>::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
                let f = &s * &x;
                let sol = solve_update(&s, &f, &Regularization { svd_cutoff: 0.0, diagonal_shift: 0.0 }).unwrap();
                prop_assert_eq!(sol.kept_modes, k);
                prop_assert!((&sol.theta_dot - &x).norm() <= 1e-10 * x.norm().max(1.0));
            }
        }
    }
}
