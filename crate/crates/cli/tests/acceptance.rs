//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any fails. Pass criterion ids (`c1` .. `c8`) as arguments to
//! run a subset.

use std::f64::consts::FRAC_PI_4;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvmc_cli::experiments::{self, ExperimentResult, RunSummary};
use tvmc_cli::output::Checkpoint;
use tvmc_cli::{presets, CliResult, ExperimentConfig};
use tvmc_core::ansatz::{finite_difference_gradient, AnsatzKind, ScaledWavefunction, VariationalState, Wavefunction};
use tvmc_core::estimators::{
    estimate_quantities, moments_from_batch, sample_batch, Backend, CutoffDistributionSpec, SampleBatch,
    SamplerConfig, TdvpQuantities,
};
use tvmc_core::exact_reference::{exact_norm_ratio, max_psi2, variational_to_dense};
use tvmc_core::spin_model::{Hamiltonian, SpinConfiguration};
use tvmc_core::tdvp::{assemble_qgt, evolve, step_from_quantities, IntegratorConfig, RankCollapsePolicy, Regularization};
use tvmc_core::C64;

type Outcome = CliResult<(bool, String)>;

fn run_by<'a>(result: &'a ExperimentResult, backend: &str, eps: Option<f64>) -> Vec<&'a RunSummary> {
    result.summary.runs.iter().filter(|r| r.label.backend == backend && (eps.is_none() || r.label.epsilon == eps)).collect()
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

fn max_abs_diff(a: &DVector<C64>, b: &DVector<C64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn random_rbm(n: usize, m: usize, std: f64, seed: u64) -> VariationalState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VariationalState::rbm_random(n, m, std, &mut rng).expect("valid RBM")
}

fn cutoff_backend(eps: f64, psi2_max: f64, sampler: SamplerConfig) -> CliResult<Backend> {
    Ok(Backend::CutoffSnis { cutoff: CutoffDistributionSpec::new(eps, psi2_max)?, sampler })
}

fn c1() -> Outcome {
    let result = experiments::run_single_spin(&presets::preset("single_spin")?, None)?;
    let born = run_by(&result, "born", None)[0].max_deviation_late.unwrap_or(f64::NAN);
    let cut = run_by(&result, "cutoff", Some(0.1))[0].max_deviation.unwrap_or(f64::NAN);
    Ok((born > 0.2 && cut < 0.05, format!("born late max|dev| = {born:.3e} (> 0.2), cutoff max|dev| = {cut:.3e} (< 0.05)")))
}

fn c2() -> Outcome {
    let cfg = presets::preset("tilted_ising")?;
    let result = experiments::run_tilted_ising(&cfg, None)?;
    let ns = Some(cfg.backend.n_samples);
    let stat = |backend: &str, eps: f64| {
        result.summary.point(backend, Some(eps), ns).and_then(|p| p.final_infidelity.as_ref()).map_or(f64::NAN, |s| s.median)
    };
    let (born, cut) = (stat("born", 0.0), stat("cutoff", 1e-3));
    let ratio = born / cut;
    Ok((ratio >= 10.0, format!("median infidelity born {born:.3e}, cutoff {cut:.3e}, ratio {ratio:.1} (>= 10)")))
}

fn c3() -> Outcome {
    let h = Hamiltonian::tfim(4, 1.0, 1.0)?;

    // SNIS error against the sample count.
    let state = random_rbm(4, 4, 0.5, 11);
    let exact = estimate_quantities(&state, &h, &Backend::FullSummation, false)?.m_grad_e;
    let psi2_max = max_psi2(&variational_to_dense(&state)?);
    let cutoff = CutoffDistributionSpec::new(1e-2, psi2_max)?;
    let seeds = 20u64;
    let mut points = Vec::new();
    for ns in [100usize, 1_000, 10_000, 100_000] {
        let mut sq = 0.0;
        for seed in 0..seeds {
            let sampler = SamplerConfig { n_samples: ns, chains: 1, burn_in: 0, thin: 1, seed: 1000 + seed };
            let q = estimate_quantities(&state, &h, &Backend::ExactCategoricalSnis { cutoff, sampler }, false)?;
            sq += max_abs_diff(&q.m_grad_e, &exact).powi(2);
        }
        points.push(((ns as f64).log10(), (sq / seeds as f64).sqrt().log10()));
    }
    let n = points.len() as f64;
    let (mx, my) = (points.iter().map(|p| p.0).sum::<f64>() / n, points.iter().map(|p| p.1).sum::<f64>() / n);
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let intercept = my - slope * mx;
    let slope_ok = (slope + 0.5).abs() <= 0.15 && intercept.is_finite();

    // Born sampling on a state whose amplitude vanishes for every
    // configuration with the first spin up.
    let (nv, nh) = (4, 2);
    let mut theta = random_rbm(nv, nh, 0.3, 12).theta().to_vec();
    let b0 = nv;
    let w0 = nv + nh;
    theta[2 * b0] = 0.0;
    theta[2 * b0 + 1] = FRAC_PI_4;
    for site in 0..nv {
        theta[2 * (w0 + site)] = 0.0;
        theta[2 * (w0 + site) + 1] = if site == 0 { FRAC_PI_4 } else { 0.0 };
    }
    let rooted = VariationalState::new(AnsatzKind::Rbm { n_visible: nv, n_hidden: nh }, theta)?;
    let full = SampleBatch::full(&rooted, &h)?;
    let p_max = full.max_psi2();
    let p_sum: f64 = full.entries.iter().map(|e| e.p).sum();
    let n_roots = full.entries.iter().filter(|e| e.p <= 1e-20 * p_max).count();
    let exact_root = moments_from_batch(&full, false)?.m_grad_e;
    let mut born_limit = DVector::<C64>::zeros(exact_root.len());
    for e in full.entries.iter().filter(|e| e.p > 1e-20 * p_max) {
        for (k, g) in e.amp_grad.grad_psi.iter().enumerate() {
            born_limit[k] += g.conj() * e.e_loc_unnorm / p_sum;
        }
    }
    let bias = max_abs_diff(&born_limit, &exact_root);
    let reps = 5u64;
    let mut sq = 0.0;
    for seed in 0..reps {
        let sampler = SamplerConfig { n_samples: 100_000, chains: 16, burn_in: 100, thin: 2, seed: 2000 + seed };
        let q = estimate_quantities(&rooted, &h, &Backend::BornMetropolis(sampler), false)?;
        sq += max_abs_diff(&q.m_grad_e, &exact_root).powi(2);
    }
    let floor = (sq / reps as f64).sqrt();
    let floor_ok = n_roots == 8 && bias > 1e-3 && floor >= 0.5 * bias;

    Ok((
        slope_ok && floor_ok,
        format!(
            "slope {slope:.3} (-0.5 +/- 0.15), intercept {intercept:.3}; {n_roots} roots, exact Born bias {bias:.3e}, \
             Born error at 1e5 samples {floor:.3e} (>= bias/2)"
        ),
    ))
}

/// Full-summation TFIM quench at the given size with checkpoints every 25 steps.
fn quench_checkpoints(n: usize) -> CliResult<Vec<Checkpoint>> {
    let mut cfg: ExperimentConfig = presets::preset("tfim_quench_n8")?;
    cfg.hamiltonian.n = n;
    let result = experiments::run_tfim_quench(&cfg, None)?;
    Ok(result.checkpoints.into_iter().next().unwrap_or_default())
}

fn c4(snapshots: &[Checkpoint]) -> Outcome {
    let h = Hamiltonian::tfim(10, 1.0, 1.0)?;
    let (mut worst_err, mut worst_spread) = (0.0f64, 0.0f64);
    for cp in snapshots {
        let dense = variational_to_dense(&cp.state)?;
        let p_max = max_psi2(&dense);
        for eps in [1e-4, 1e-3, 1e-2] {
            let exact = exact_norm_ratio(&dense, &CutoffDistributionSpec::new(eps, p_max)?)?;
            let mut ratios = Vec::new();
            for rep in 0..5u64 {
                let sampler = SamplerConfig { n_samples: 40_000, chains: 16, burn_in: 100, thin: 4, seed: 300 + rep };
                let batch = sample_batch(&cp.state, &h, &cutoff_backend(eps, p_max, sampler)?)?;
                let r = moments_from_batch(&batch, false)?.norm_ratio;
                worst_err = worst_err.max((r - exact).abs() / exact);
                ratios.push(r);
            }
            let stats = experiments::Stats::new(ratios);
            worst_spread = worst_spread.max(stats.std / stats.mean);
        }
    }
    Ok((
        !snapshots.is_empty() && worst_err < 0.01 && worst_spread < 0.01,
        format!(
            "{} snapshots x 3 cutoffs x 5 seeds: max relative error {worst_err:.3e} (< 1e-2), max std/mean {worst_spread:.3e} (< 1e-2)",
            snapshots.len()
        ),
    ))
}

fn theta_dot(q: TdvpQuantities) -> CliResult<DVector<f64>> {
    Ok(step_from_quantities(q, &Regularization::default(), RankCollapsePolicy::Abort)?.theta_dot)
}

fn c5() -> Outcome {
    let h = Hamiltonian::tfim(6, 1.0, 0.7)?;
    let state = random_rbm(6, 2, 0.3, 21);
    let psi2_max = max_psi2(&variational_to_dense(&state)?);
    let sampler = SamplerConfig { n_samples: 2_000, chains: 4, burn_in: 20, thin: 1, seed: 5 };
    let mut batch = sample_batch(&state, &h, &cutoff_backend(1e-2, psi2_max, sampler)?)?;
    let base = theta_dot(moments_from_batch(&batch, false)?)?;
    let mut q_dev: f64 = 0.0;
    for c in [1e-3, 7.0, 1e4] {
        batch.scale_q(c);
        q_dev = q_dev.max(rel(&theta_dot(moments_from_batch(&batch, false)?)?, &base));
        batch.scale_q(1.0 / c);
    }

    let factor = C64::from_polar(3.7, 0.4);
    let scaled = ScaledWavefunction { inner: &state, factor };
    let mut psi_dev: f64 = 0.0;
    let full = theta_dot(estimate_quantities(&state, &h, &Backend::FullSummation, false)?)?;
    psi_dev = psi_dev.max(rel(&theta_dot(estimate_quantities(&scaled, &h, &Backend::FullSummation, false)?)?, &full));
    let cat = |p: f64| -> CliResult<Backend> {
        Ok(Backend::ExactCategoricalSnis { cutoff: CutoffDistributionSpec::new(1e-2, p)?, sampler })
    };
    let sampled = theta_dot(estimate_quantities(&state, &h, &cat(psi2_max)?, false)?)?;
    let sampled_scaled =
        theta_dot(estimate_quantities(&scaled, &h, &cat(psi2_max * factor.norm_sqr())?, false)?)?;
    psi_dev = psi_dev.max(rel(&sampled_scaled, &sampled));
    Ok((
        q_dev < 1e-12 && psi_dev < 1e-10,
        format!("q rescaling {q_dev:.3e} (< 1e-12), psi rescaling {psi_dev:.3e} (< 1e-10)"),
    ))
}

/// Largest energy excursion per unit time under full-summation Heun evolution.
fn drift_rate(state: &VariationalState, h: &Hamiltonian, dt: f64, t_max: f64) -> CliResult<f64> {
    let cfg = IntegratorConfig { dt, t_max, ..Default::default() };
    let traj = evolve(state, h, &Backend::FullSummation, &cfg, &mut [])?;
    let e0 = traj.rows[0].energy.re;
    Ok(traj.rows.iter().map(|r| (r.energy.re - e0).abs()).fold(0.0, f64::max) / t_max)
}

fn c6() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();

    let plus = VariationalState::direct(C64::new(0.5f64.sqrt(), 0.0), C64::new(0.5f64.sqrt(), 0.0))?;
    let cases = [
        ("single spin", plus, Hamiltonian::SingleSpinY),
        ("N=4 TFIM", random_rbm(4, 4, 0.3, 31), Hamiltonian::tfim(4, 1.0, 1.0)?),
    ];
    for (name, state, h) in &cases {
        let dts = [0.02, 0.01, 0.005];
        let rates = dts.iter().map(|&dt| drift_rate(state, h, dt, 1.0)).collect::<CliResult<Vec<_>>>()?;
        // Constant fixed from the coarsest step with 50% headroom.
        let c = 1.5 * rates[0] / (dts[0] * dts[0]);
        let pass = rates.iter().zip(&dts).all(|(r, dt)| *r < 1e-6 + c * dt * dt);
        ok &= pass;
        notes.push(format!("{name} drift/t {:.2e} {:.2e} {:.2e} with C = {c:.3e}", rates[0], rates[1], rates[2]));
    }

    let h = Hamiltonian::tfim(6, 1.0, 1.0)?;
    let state = random_rbm(6, 6, 0.4, 32);
    let q = estimate_quantities(&state, &h, &Backend::FullSummation, false)?;
    let s: DMatrix<C64> = assemble_qgt(&q);
    let herm = (&s - s.adjoint()).norm() / s.norm();
    let min_eig = s.clone().symmetric_eigenvalues().min();
    ok &= herm < 1e-12 && min_eig >= -1e-10;
    notes.push(format!("QGT hermiticity {herm:.1e}, min eigenvalue {min_eig:.2e}"));

    let mut fd_err: f64 = 0.0;
    for s in SpinConfiguration::enumerate(6) {
        let analytic = state.evaluate(&s)?.grad_psi;
        let fd = finite_difference_gradient(&state, &s, 1e-5)?;
        let scale = analytic.iter().map(|g| g.norm()).fold(0.0, f64::max);
        let err = analytic.iter().zip(&fd).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        fd_err = fd_err.max(err / scale);
    }
    ok &= fd_err < 1e-6;
    notes.push(format!("finite-difference gradient error {fd_err:.2e}"));
    Ok((ok, notes.join("; ")))
}

fn c7(tmp: &Path, n10_final: Option<&Checkpoint>) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let bench = presets::preset("tci_bench_n8")?;

    let h6 = Hamiltonian::tfim(6, 1.0, 1.0)?;
    let small = random_rbm(6, 3, 0.5, 41);
    let row = experiments::tci_accuracy(&small, &h6, &bench, 1 << 12, 1)?;
    let (df, ds) = (row.delta_f.unwrap_or(f64::NAN), row.delta_s.unwrap_or(f64::NAN));
    ok &= df < 1e-8 && ds < 1e-8;
    notes.push(format!("N=6 K={}: dF {df:.1e}, dS {ds:.1e}", small.theta().len()));

    let cp_dir = tmp.join("n8");
    let mut quench = presets::preset("tfim_quench_n8")?;
    quench.output.checkpoint_every = 25;
    experiments::run_tfim_quench(&quench, Some(&cp_dir))?;
    let table = experiments::run_tci_benchmark(&bench, &cp_dir.join("checkpoints").join("full_rep0"), None)?;
    let chis = bench.tci.chi_max.clone();
    let mut steps: Vec<usize> = table.rows.iter().map(|r| r.step).collect();
    steps.sort_unstable();
    steps.dedup();
    let floor = 1e-10;
    let (mut monotone, mut worst_top, mut worst_pivot) = (true, 0.0f64, 0.0f64);
    for &step in &steps {
        let mut prev = [f64::INFINITY; 2];
        for &chi in &chis {
            let rows: Vec<_> = table.rows.iter().filter(|r| r.step == step && r.chi_max == Some(chi)).collect();
            let med = [
                median(rows.iter().map(|r| r.delta_f.unwrap_or(f64::NAN)).collect()),
                median(rows.iter().map(|r| r.delta_s.unwrap_or(f64::NAN)).collect()),
            ];
            for k in 0..2 {
                monotone &= med[k] <= prev[k] || med[k] <= floor;
            }
            prev = med;
            if chi == *chis.last().expect("bond caps") {
                worst_top = worst_top.max(med[0]).max(med[1]);
            }
            for r in &rows {
                worst_pivot = worst_pivot.max(r.pivot_error_e).max(r.pivot_error_g);
            }
        }
    }
    ok &= monotone && worst_top < 1e-2 && worst_pivot <= 1e-10 && !steps.is_empty();
    notes.push(format!(
        "N=8 over {} checkpoints: medians non-increasing {monotone}, worst median at chi {} {worst_top:.1e} (< 1e-2), \
         max pivot error {worst_pivot:.1e}",
        steps.len(),
        chis.last().expect("bond caps")
    ));

    match n10_final {
        Some(cp) => {
            let h10 = Hamiltonian::tfim(10, 1.0, 1.0)?;
            let capped = experiments::tci_accuracy(&cp.state, &h10, &bench, 8, 2)?.delta_s.unwrap_or(f64::NAN);
            let wide = experiments::tci_accuracy(&cp.state, &h10, &bench, 256, 2)?.delta_s.unwrap_or(f64::NAN);
            ok &= capped > 1e-2 && capped > 10.0 * wide;
            notes.push(format!("N=10 t={:.2}: dS(chi 8) {capped:.2e}, dS(chi 256) {wide:.2e}", cp.t));
        }
        None => {
            ok = false;
            notes.push("N=10 checkpoint missing".into());
        }
    }
    Ok((ok, notes.join("; ")))
}

fn c8() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();

    let spin = experiments::run_single_spin(&presets::preset("single_spin")?, None)?;
    let r2 = run_by(&spin, "full", None)[0].r_squared_max.unwrap_or(f64::NAN);
    ok &= r2 < 1e-10;
    notes.push(format!("single spin max R2 {r2:.1e} (< 1e-10)"));

    let cfg = presets::preset("tfim_quench_l12")?;
    let result = experiments::run_tfim_quench(&cfg, None)?;
    let ns = Some(cfg.backend.n_samples);
    let stats = |backend: &str, eps: f64| result.summary.point(backend, Some(eps), ns).and_then(|p| p.final_infidelity.clone());
    let eps = *cfg.sweep.epsilons.iter().find(|e| **e > 0.0).expect("a positive cutoff");
    match (stats("born", 0.0), stats("cutoff", eps)) {
        (Some(b), Some(c)) => {
            let sigma = ((b.std.powi(2) + c.std.powi(2)) / b.values.len() as f64).sqrt();
            let pass = c.mean <= b.mean + 2.0 * sigma;
            ok &= pass;
            notes.push(format!(
                "L=12 final infidelity cutoff {:.3e} +/- {:.1e}, born {:.3e} +/- {:.1e}, bound {:.3e}",
                c.mean,
                c.std,
                b.mean,
                b.std,
                b.mean + 2.0 * sigma
            ));
        }
        _ => {
            ok = false;
            notes.push("L=12 infidelities missing".into());
        }
    }
    let finite = result.summary.runs.iter().all(|r| r.r_squared_finite);
    let worst = result.summary.runs.iter().filter_map(|r| r.r_squared_max).fold(0.0, f64::max);
    ok &= finite;
    notes.push(format!("quench R2 finite {finite}, largest {worst:.3e}"));
    Ok((ok, notes.join("; ")))
}

fn main() -> ExitCode {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).map(|a| a.to_lowercase()).collect();
    let wanted = |id: &str| selected.is_empty() || selected.iter().any(|s| s == id);
    let tmp = tempfile::tempdir().expect("temporary directory");

    let needs_n10 = wanted("c4") || wanted("c7");
    let n10 = if needs_n10 { quench_checkpoints(10) } else { Ok(Vec::new()) };

    let mut failures = 0;
    let mut report = |id: &str, title: &str, f: &dyn Fn() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "{} {id} {title}: {detail} [{:.0} s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    };

    let snapshots = || -> CliResult<&Vec<Checkpoint>> {
        n10.as_ref().map_err(|e| tvmc_cli::CliError::Config(format!("N=10 quench failed: {e}")))
    };
    report("c1", "single-spin bias", &c1);
    report("c2", "tilted-Ising infidelity gain", &c2);
    report("c3", "importance-sampling convergence and Born floor", &c3);
    report("c4", "norm-ratio estimation", &|| c4(snapshots()?));
    report("c5", "update invariances", &c5);
    report("c6", "conservation and solver contracts", &c6);
    report("c7", "cross-interpolation accuracy", &|| c7(tmp.path(), snapshots()?.last()));
    report("c8", "residuals and twelve-site quench", &c8);

    if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
