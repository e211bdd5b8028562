//! Experiment drivers behind the CLI subcommands.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use tvmc_core::ansatz::{AnsatzKind, VariationalState, Wavefunction};
use tvmc_core::estimators::{
    derive_seed, estimate_quantities, sample_batch, Backend, CutoffDistributionSpec, FloorMode,
};
use tvmc_core::exact_reference::{
    exact_norm_ratio, fit_to_state, max_psi2, variational_to_dense, DenseState, ExactTracker, FitConfig,
    XMagnetization, MATVEC_CAP,
};
use tvmc_core::spin_model::{Hamiltonian, DEFAULT_DENSE_CAP};
use tvmc_core::tci::{
    contract_force, contract_qgt, relative_error, tci_build, TargetFunction, TargetKind, TciFunction, TciResult,
};
use tvmc_core::tdvp::{assemble_force, assemble_qgt, evolve, Observer, Trajectory};
use tvmc_core::{Result as CoreResult, C64};

use crate::config::{AnsatzName, BackendName, ExperimentConfig, FloorModeName, Model};
use crate::error::{CliError, CliResult};
use crate::output::{self, Checkpoint};

pub const SUMMARY_SCHEMA: &str = "tvmc.summary.v1";
pub const TCI_SCHEMA: &str = "tvmc.tci_bench.v1";

/// Identifies one trajectory within a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunLabel {
    pub backend: String,
    pub epsilon: Option<f64>,
    pub n_samples: Option<usize>,
    pub repetition: usize,
    pub seed: u64,
}

impl RunLabel {
    pub fn name(&self) -> String {
        match (self.epsilon, self.n_samples) {
            (Some(eps), Some(ns)) => format!("{}_eps{eps:e}_ns{ns}_rep{}", self.backend, self.repetition),
            _ => format!("{}_rep{}", self.backend, self.repetition),
        }
    }

    pub fn is_full(&self) -> bool {
        self.backend == "full"
    }
}

/// Seed of the `rep`-th sampling realization; the initial state never depends on it.
pub fn repetition_seed(base: u64, rep: usize) -> u64 {
    derive_seed(base, rep as u64, 0)
}

fn backend_label(name: BackendName, eps: f64) -> &'static str {
    match name {
        BackendName::Full => "full",
        BackendName::Born => "born",
        BackendName::Cutoff if eps == 0.0 => "born",
        BackendName::Cutoff => "cutoff",
        BackendName::Categorical => "categorical",
    }
}

/// Every run of a sweep: an optional sampling-free baseline, then
/// sample size × cutoff × repetition.
pub fn sweep_jobs(cfg: &ExperimentConfig) -> Vec<RunLabel> {
    let full = RunLabel { backend: "full".into(), epsilon: None, n_samples: None, repetition: 0, seed: cfg.seed };
    if cfg.backend.backend == BackendName::Full {
        return vec![full];
    }
    let mut jobs = Vec::new();
    if cfg.sweep.include_full {
        jobs.push(full);
    }
    for ns in cfg.sample_sizes() {
        for &eps in &cfg.sweep.epsilons {
            for rep in 0..cfg.sweep.repetitions {
                jobs.push(RunLabel {
                    backend: backend_label(cfg.backend.backend, eps).into(),
                    epsilon: Some(eps),
                    n_samples: Some(ns),
                    repetition: rep,
                    seed: repetition_seed(cfg.seed, rep),
                });
            }
        }
    }
    jobs
}

/// The initial variational state: the x-polarized state for the
/// two-parameter ansatz, otherwise a small random RBM fitted to it.
pub fn initial_state(cfg: &ExperimentConfig, h: &Hamiltonian) -> CliResult<(VariationalState, f64)> {
    let n = h.n_sites();
    match cfg.ansatz.kind(n)? {
        AnsatzKind::DirectTwoParameter => {
            let r = C64::new(FRAC_1_SQRT_2, 0.0);
            Ok((VariationalState::direct(r, r)?, 0.0))
        }
        AnsatzKind::Rbm { n_visible, n_hidden } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.ansatz.init_seed);
            let start = VariationalState::rbm_random(n_visible, n_hidden, cfg.ansatz.init_std, &mut rng)?;
            if cfg.ansatz.fit_iters == 0 {
                let inf = tvmc_core::exact_reference::infidelity(
                    &DenseState::x_polarized(n)?,
                    &variational_to_dense(&start)?,
                )?;
                return Ok((start, inf));
            }
            let fit = FitConfig { max_iters: cfg.ansatz.fit_iters, ..FitConfig::default() };
            let report = fit_to_state(&start, &DenseState::x_polarized(n)?, &fit)?;
            Ok((report.state, report.infidelity))
        }
    }
}

fn floor_mode(name: FloorModeName) -> FloorMode {
    match name {
        FloorModeName::Absolute => FloorMode::Absolute,
        FloorModeName::Relative => FloorMode::Relative,
    }
}

/// Backend for one job; cutoff backends start from a pilot Born batch's
/// largest weight.
pub fn job_backend(
    cfg: &ExperimentConfig,
    label: &RunLabel,
    state: &VariationalState,
    h: &Hamiltonian,
) -> CliResult<Backend> {
    if label.is_full() {
        return Ok(Backend::FullSummation);
    }
    let bcfg = crate::config::BackendConfig {
        n_samples: label.n_samples.unwrap_or(cfg.backend.n_samples),
        seed: label.seed,
        ..cfg.backend.clone()
    };
    let eps = label.epsilon.unwrap_or(0.0);
    let probe = bcfg.build(eps, 1.0)?;
    if probe.cutoff().is_none() {
        return Ok(probe);
    }
    let pilot = Backend::BornMetropolis(bcfg.sampler().with_seed(derive_seed(label.seed, u64::MAX, 0)));
    let psi2_max = sample_batch(state, h, &pilot)?.max_psi2();
    bcfg.build(eps, psi2_max)
}

/// Reports the exact norm ratio of the cutoff distribution, with the cutoff
/// reference set to the exact largest weight.
pub struct ExactNormRatio {
    pub epsilon: f64,
    pub floor_mode: FloorMode,
}

impl Observer for ExactNormRatio {
    fn columns(&self) -> Vec<String> {
        vec!["norm_ratio_exact".into()]
    }

    fn observe(&mut self, _t: f64, state: &VariationalState) -> CoreResult<Vec<f64>> {
        if self.epsilon == 0.0 {
            return Ok(vec![1.0]);
        }
        let dense = variational_to_dense(state)?;
        let spec = CutoffDistributionSpec { epsilon: self.epsilon, psi2_max_tracked: max_psi2(&dense), floor_mode: self.floor_mode };
        Ok(vec![exact_norm_ratio(&dense, &spec)?])
    }
}

/// Keeps the parameters of every `every`-th committed state.
pub struct CheckpointRecorder {
    pub every: usize,
    step: usize,
    pub saved: Vec<Checkpoint>,
}

impl CheckpointRecorder {
    pub fn new(every: usize) -> Self {
        Self { every, step: 0, saved: Vec::new() }
    }
}

impl Observer for CheckpointRecorder {
    fn columns(&self) -> Vec<String> {
        Vec::new()
    }

    fn observe(&mut self, t: f64, state: &VariationalState) -> CoreResult<Vec<f64>> {
        if self.every > 0 && self.step % self.every == 0 {
            self.saved.push(Checkpoint { step: self.step, t, state: state.clone() });
        }
        self.step += 1;
        Ok(Vec::new())
    }
}

/// Scalar diagnostics of one trajectory.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub label: RunLabel,
    pub file: Option<String>,
    pub steps: usize,
    pub final_t: f64,
    pub final_energy: f64,
    pub final_infidelity: Option<f64>,
    pub final_x_total: Option<f64>,
    /// Largest `|x_total − x_exact|` over the whole run.
    pub max_deviation: Option<f64>,
    /// Same, restricted to the first half of the time window.
    pub max_deviation_early: Option<f64>,
    /// Same, restricted to the second half of the time window.
    pub max_deviation_late: Option<f64>,
    pub frozen_steps: usize,
    pub r_squared_max: Option<f64>,
    /// Every defined R² is finite.
    pub r_squared_finite: bool,
    pub norm_ratio_min: f64,
    pub norm_ratio_max: f64,
    /// Largest relative deviation of the sampled norm ratio from the exact one.
    pub norm_ratio_max_rel_error: Option<f64>,
}

fn column(traj: &Trajectory, name: &str) -> Option<usize> {
    traj.columns.iter().position(|c| c == name)
}

fn max_over<I: Iterator<Item = f64>>(it: I) -> Option<f64> {
    it.fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))))
}

pub fn summarize(label: &RunLabel, traj: &Trajectory) -> RunSummary {
    let last = traj.rows.last().expect("trajectory has rows");
    let t_max = last.t;
    let col = |name| column(traj, name);
    let dev = |keep: &dyn Fn(f64) -> bool| match (col("x_exact"), col("x_total")) {
        (Some(e), Some(x)) => max_over(
            traj.rows.iter().filter(|r| keep(r.t)).map(|r| (r.observables[x] - r.observables[e]).abs()),
        ),
        _ => None,
    };
    let rs: Vec<f64> = traj.rows.iter().filter_map(|r| r.r_squared).collect();
    RunSummary {
        label: label.clone(),
        file: None,
        steps: traj.rows.len() - 1,
        final_t: t_max,
        final_energy: last.energy.re,
        final_infidelity: col("infidelity").map(|i| last.observables[i]),
        final_x_total: col("x_total").map(|i| last.observables[i]),
        max_deviation: dev(&|_| true),
        max_deviation_early: dev(&|t| t <= 0.5 * t_max),
        max_deviation_late: dev(&|t| t >= 0.5 * t_max),
        frozen_steps: traj.rows.iter().filter(|r| r.frozen).count(),
        r_squared_max: max_over(rs.iter().copied()),
        r_squared_finite: rs.iter().all(|r| r.is_finite()),
        norm_ratio_min: traj.rows.iter().map(|r| r.norm_ratio).fold(f64::INFINITY, f64::min),
        norm_ratio_max: traj.rows.iter().map(|r| r.norm_ratio).fold(f64::NEG_INFINITY, f64::max),
        norm_ratio_max_rel_error: col("norm_ratio_exact").and_then(|i| {
            max_over(traj.rows.iter().map(|r| (r.norm_ratio - r.observables[i]).abs() / r.observables[i]))
        }),
    }
}

/// Mean, standard deviation and median over repetitions.
#[derive(Clone, Debug, Serialize)]
pub struct Stats {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single value).
    pub std: f64,
    pub median: f64,
}

impl Stats {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
        Self { values, mean, std, median }
    }
}

/// Final-time infidelity statistics at one sweep point.
#[derive(Clone, Debug, Serialize)]
pub struct PointSummary {
    pub backend: String,
    pub epsilon: Option<f64>,
    pub n_samples: Option<usize>,
    pub final_infidelity: Option<Stats>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentSummary {
    pub schema: &'static str,
    pub experiment: &'static str,
    pub config: ExperimentConfig,
    pub initial_fit_infidelity: f64,
    pub runs: Vec<RunSummary>,
    pub points: Vec<PointSummary>,
}

impl ExperimentSummary {
    /// The aggregated point matching a backend, cutoff and sample size.
    pub fn point(&self, backend: &str, epsilon: Option<f64>, n_samples: Option<usize>) -> Option<&PointSummary> {
        self.points.iter().find(|p| p.backend == backend && p.epsilon == epsilon && p.n_samples == n_samples)
    }
}

/// A finished experiment: the summary plus every trajectory in job order.
pub struct ExperimentResult {
    pub summary: ExperimentSummary,
    pub trajectories: Vec<Trajectory>,
    pub checkpoints: Vec<Vec<Checkpoint>>,
}

fn aggregate(runs: &[RunSummary]) -> Vec<PointSummary> {
    let mut points: Vec<PointSummary> = Vec::new();
    for r in runs {
        let key = (&r.label.backend, r.label.epsilon, r.label.n_samples);
        if points.iter().any(|p| (&p.backend, p.epsilon, p.n_samples) == key) {
            continue;
        }
        let values: Option<Vec<f64>> = runs
            .iter()
            .filter(|o| (&o.label.backend, o.label.epsilon, o.label.n_samples) == key)
            .map(|o| o.final_infidelity)
            .collect();
        points.push(PointSummary {
            backend: r.label.backend.clone(),
            epsilon: r.label.epsilon,
            n_samples: r.label.n_samples,
            final_infidelity: values.map(Stats::new),
        });
    }
    points
}

fn expect_model(cfg: &ExperimentConfig, model: Model, command: &str) -> CliResult<()> {
    if cfg.hamiltonian.model != model {
        return Err(CliError::Config(format!("{command} requires model {model:?}, got {:?}", cfg.hamiltonian.model)));
    }
    Ok(())
}

fn run_sweep(cfg: &ExperimentConfig, experiment: &'static str, out: Option<&Path>) -> CliResult<ExperimentResult> {
    cfg.validate()?;
    let h = cfg.hamiltonian.build()?;
    let n = h.n_sites();
    let (initial, fit_infidelity) = initial_state(cfg, &h)?;
    log::info!("{experiment}: initial fit infidelity {fit_infidelity:.3e}");
    let jobs = sweep_jobs(cfg);

    let results: Vec<(Trajectory, Vec<Checkpoint>)> = jobs
        .par_iter()
        .map(|label| -> CliResult<_> {
            let backend = job_backend(cfg, label, &initial, &h)?;
            let integ = cfg.integrator.build(label.seed, cfg.output.record_variances)?;
            let mut recorder = CheckpointRecorder::new(cfg.output.checkpoint_every);
            let mut tracker = if n <= MATVEC_CAP { Some(ExactTracker::new(h.clone(), DenseState::x_polarized(n)?)?) } else { None };
            let mut xmag = XMagnetization;
            let mut ratio = ExactNormRatio { epsilon: label.epsilon.unwrap_or(0.0), floor_mode: floor_mode(cfg.backend.floor_mode) };
            let mut observers: Vec<&mut dyn Observer> = Vec::new();
            match tracker.as_mut() {
                Some(t) => observers.push(t),
                None if n <= DEFAULT_DENSE_CAP => observers.push(&mut xmag),
                None => {}
            }
            if n <= DEFAULT_DENSE_CAP {
                observers.push(&mut ratio);
            }
            observers.push(&mut recorder);
            let traj = evolve(&initial, &h, &backend, &integ, &mut observers)?;
            log::info!("{experiment}: finished {}", label.name());
            Ok((traj, recorder.saved))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut runs: Vec<RunSummary> = jobs.iter().zip(&results).map(|(l, (t, _))| summarize(l, t)).collect();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        for (run, (traj, cps)) in runs.iter_mut().zip(&results) {
            let name = format!("{}.csv", run.label.name());
            output::write_trajectory(&dir.join(&name), traj)?;
            run.file = Some(name);
            if !cps.is_empty() {
                let cdir = dir.join("checkpoints").join(run.label.name());
                fs::create_dir_all(&cdir)?;
                for cp in cps {
                    output::write_checkpoint(&cdir, cp)?;
                }
            }
        }
    }
    let points = aggregate(&runs);
    let summary = ExperimentSummary {
        schema: SUMMARY_SCHEMA,
        experiment,
        config: cfg.clone(),
        initial_fit_infidelity: fit_infidelity,
        runs,
        points,
    };
    let (trajectories, checkpoints) = results.into_iter().unzip();
    let result = ExperimentResult { summary, trajectories, checkpoints };
    if let Some(dir) = out {
        output::write_json(&dir.join("summary.json"), &result.summary)?;
    }
    Ok(result)
}

/// Magnetization of every run side by side, one row per committed time.
pub fn magnetization_csv(result: &ExperimentResult) -> Option<String> {
    let first = result.trajectories.first()?;
    let e = column(first, "x_exact")?;
    let mut header = vec!["t".to_string(), "x_exact".to_string()];
    let mut cols = Vec::new();
    for (run, traj) in result.summary.runs.iter().zip(&result.trajectories) {
        if traj.rows.len() != first.rows.len() {
            return None;
        }
        header.push(format!("x_{}", run.label.name()));
        cols.push((traj, column(traj, "x_total")?));
    }
    let mut out = format!("# schema: {}\n{}\n", output::TRAJECTORY_SCHEMA, header.join(","));
    for (i, row) in first.rows.iter().enumerate() {
        let mut fields = vec![format!("{:.12e}", row.t), format!("{:.12e}", row.observables[e])];
        fields.extend(cols.iter().map(|(t, c)| format!("{:.12e}", t.rows[i].observables[*c])));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Some(out)
}

/// Rabi oscillation of one spin under `σʸ` for every configured cutoff.
pub fn run_single_spin(cfg: &ExperimentConfig, out: Option<&Path>) -> CliResult<ExperimentResult> {
    expect_model(cfg, Model::SingleSpinY, "run-single-spin")?;
    let result = run_sweep(cfg, "single_spin", out)?;
    if let (Some(dir), Some(text)) = (out, magnetization_csv(&result)) {
        fs::write(dir.join("magnetization.csv"), text)?;
    }
    Ok(result)
}

/// Tilted-Ising evolution with a final-infidelity table over cutoff,
/// sample size and repetition.
pub fn run_tilted_ising(cfg: &ExperimentConfig, out: Option<&Path>) -> CliResult<ExperimentResult> {
    expect_model(cfg, Model::TiltedIsing, "run-tilted-ising")?;
    if cfg.ansatz.ansatz != AnsatzName::Rbm {
        return Err(CliError::Config("run-tilted-ising requires the rbm ansatz".into()));
    }
    run_sweep(cfg, "tilted_ising", out)
}

/// Quench from the x-polarized state under the transverse-field Ising model.
pub fn run_tfim_quench(cfg: &ExperimentConfig, out: Option<&Path>) -> CliResult<ExperimentResult> {
    expect_model(cfg, Model::Tfim, "run-tfim")?;
    run_sweep(cfg, "tfim_quench", out)
}

/// Accuracy of one cross-interpolated QGT and force against full summation.
#[derive(Clone, Debug, Serialize)]
pub struct TciRow {
    pub step: usize,
    pub t: f64,
    /// `None` marks the exact-versus-exact sanity row.
    pub chi_max: Option<usize>,
    pub repetition: usize,
    pub seed: u64,
    pub delta_f: Option<f64>,
    pub delta_s: Option<f64>,
    pub max_bond_e: usize,
    pub max_bond_g: usize,
    pub sweeps_e: usize,
    pub sweeps_g: usize,
    pub converged_e: bool,
    pub converged_g: bool,
    /// Largest `|TT − f|` over the retained pivots, relative to the largest `|f|` there.
    pub pivot_error_e: f64,
    pub pivot_error_g: f64,
    pub evaluations_e: usize,
    pub evaluations_g: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TciSummary {
    pub schema: &'static str,
    pub config: ExperimentConfig,
    pub checkpoint_dir: String,
    pub rows: Vec<TciRow>,
}

fn pivot_error<T: TciFunction + ?Sized>(res: &TciResult, f: &T) -> CliResult<f64> {
    let mut err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for p in &res.pivots {
        let v = f.eval(p)?;
        err = err.max((res.train.evaluate(p)? - v).norm());
        scale = scale.max(v.norm());
    }
    Ok(if scale > 0.0 { err / scale } else { err })
}

fn rel_or_none(x: &[C64], exact: &[C64]) -> CliResult<Option<f64>> {
    match relative_error(x, exact) {
        Ok(d) => Ok(Some(d)),
        Err(tvmc_core::Error::UndefinedReference) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Cross-interpolated QGT and force at one state, compared with full summation.
pub fn tci_accuracy(
    state: &VariationalState,
    h: &Hamiltonian,
    cfg: &ExperimentConfig,
    chi_max: usize,
    seed: u64,
) -> CliResult<TciRow> {
    let q = estimate_quantities(state, h, &Backend::FullSummation, false)?;
    let (s_exact, f_exact) = (assemble_qgt(&q), assemble_force(&q));
    let tcfg = cfg.tci.config(chi_max)?;
    let te = TargetFunction::new(TargetKind::ELoc, state, h)?;
    let tg = TargetFunction::new(TargetKind::Grad, state, h)?;
    let re = tci_build(&te, &tcfg, derive_seed(seed, 1, 0))?;
    let rg = tci_build(&tg, &tcfg, derive_seed(seed, 2, 0))?;
    let f = contract_force(&re.train, &rg.train)?;
    let canon = rg.train.move_ortho_center(state.n_sites())?;
    let s = contract_qgt(&canon)?;
    Ok(TciRow {
        step: 0,
        t: 0.0,
        chi_max: Some(chi_max),
        repetition: 0,
        seed,
        delta_f: rel_or_none(f.as_slice(), f_exact.as_slice())?,
        delta_s: rel_or_none(s.as_slice(), s_exact.as_slice())?,
        max_bond_e: re.train.max_bond(),
        max_bond_g: rg.train.max_bond(),
        sweeps_e: re.sweeps,
        sweeps_g: rg.sweeps,
        converged_e: re.converged,
        converged_g: rg.converged,
        pivot_error_e: pivot_error(&re, &te)?,
        pivot_error_g: pivot_error(&rg, &tg)?,
        evaluations_e: te.n_evaluated(),
        evaluations_g: tg.n_evaluated(),
    })
}

fn sanity_row(cp: &Checkpoint, h: &Hamiltonian) -> CliResult<TciRow> {
    let q = estimate_quantities(&cp.state, h, &Backend::FullSummation, false)?;
    let (s, f) = (assemble_qgt(&q), assemble_force(&q));
    Ok(TciRow {
        step: cp.step,
        t: cp.t,
        chi_max: None,
        repetition: 0,
        seed: 0,
        delta_f: rel_or_none(f.as_slice(), f.as_slice())?,
        delta_s: rel_or_none(s.as_slice(), s.as_slice())?,
        max_bond_e: 0,
        max_bond_g: 0,
        sweeps_e: 0,
        sweeps_g: 0,
        converged_e: true,
        converged_g: true,
        pivot_error_e: 0.0,
        pivot_error_g: 0.0,
        evaluations_e: 0,
        evaluations_g: 0,
    })
}

/// Checkpoints whose time matches one of `times` (all when empty).
pub fn select_checkpoints(cps: Vec<Checkpoint>, times: &[f64]) -> CliResult<Vec<Checkpoint>> {
    if times.is_empty() {
        return Ok(cps);
    }
    let mut picked = Vec::new();
    for &t in times {
        let cp = cps
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .filter(|c| (c.t - t).abs() <= 1e-9 * t.abs().max(1.0))
            .ok_or_else(|| CliError::MissingCheckpoints(format!("no checkpoint at t = {t}")))?;
        picked.push(cp.clone());
    }
    Ok(picked)
}

/// Cross-interpolation accuracy over checkpoints × bond caps × repetitions.
pub fn run_tci_benchmark(cfg: &ExperimentConfig, checkpoint_dir: &Path, out: Option<&Path>) -> CliResult<TciSummary> {
    cfg.validate()?;
    let h = cfg.hamiltonian.build()?;
    let cps = select_checkpoints(output::read_checkpoints(checkpoint_dir)?, &cfg.tci.times)?;
    for cp in &cps {
        if cp.state.n_sites() != h.n_sites() {
            return Err(CliError::Config(format!(
                "checkpoint step {} has {} sites, Hamiltonian has {}",
                cp.step,
                cp.state.n_sites(),
                h.n_sites()
            )));
        }
    }
    let mut tasks = Vec::new();
    for ci in 0..cps.len() {
        for &chi in &cfg.tci.chi_max {
            for rep in 0..cfg.tci.repetitions {
                tasks.push((ci, chi, rep));
            }
        }
    }
    let computed = tasks
        .par_iter()
        .map(|&(ci, chi, rep)| {
            let cp = &cps[ci];
            let seed = derive_seed(repetition_seed(cfg.seed, rep), chi as u64, cp.step as u64);
            let mut row = tci_accuracy(&cp.state, &h, cfg, chi, seed)?;
            row.step = cp.step;
            row.t = cp.t;
            row.repetition = rep;
            log::info!("tci: t = {:.4} chi = {chi} rep = {rep} delta_s = {:?}", cp.t, row.delta_s);
            Ok(row)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(computed.len() + cps.len());
    for cp in &cps {
        rows.push(sanity_row(cp, &h)?);
    }
    rows.extend(computed);
    let summary = TciSummary {
        schema: TCI_SCHEMA,
        config: cfg.clone(),
        checkpoint_dir: checkpoint_dir.display().to_string(),
        rows,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        output::write_json(&dir.join("tci_bench.json"), &summary)?;
    }
    Ok(summary)
}

/// Resolves the checkpoint directory for `run-tci-bench`.
pub fn checkpoint_dir(cfg: &ExperimentConfig, explicit: Option<&Path>) -> CliResult<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.checkpoint_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::MissingCheckpoints("no checkpoint directory given".into()))
}
