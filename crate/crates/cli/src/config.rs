//! JSON experiment configuration.

use serde::{Deserialize, Serialize};
use tvmc_core::ansatz::AnsatzKind;
use tvmc_core::estimators::{Backend, CutoffDistributionSpec, FloorMode, SamplerConfig};
use tvmc_core::spin_model::Hamiltonian;
use tvmc_core::tci::{TciConfig, ToleranceMode};
use tvmc_core::tdvp::{IntegratorConfig, RankCollapsePolicy, Regularization, Scheme};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    SingleSpinY,
    TiltedIsing,
    Tfim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianConfig {
    pub model: Model,
    #[serde(rename = "N", default = "one")]
    pub n: usize,
    #[serde(rename = "J", default)]
    pub j: f64,
    #[serde(default = "one_f")]
    pub g: f64,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

impl HamiltonianConfig {
    pub fn build(&self) -> CliResult<Hamiltonian> {
        Ok(match self.model {
            Model::SingleSpinY => {
                if self.n != 1 {
                    return Err(CliError::Config(format!("single_spin_y requires N = 1, got {}", self.n)));
                }
                Hamiltonian::SingleSpinY
            }
            Model::TiltedIsing => Hamiltonian::tilted_ising(self.n, self.j, self.g)?,
            Model::Tfim => Hamiltonian::tfim(self.n, self.j, self.g)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnsatzName {
    Direct2,
    Rbm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnsatzConfig {
    pub ansatz: AnsatzName,
    #[serde(default = "default_density")]
    pub hidden_density: f64,
    /// Standard deviation of the random initial parameters.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Seed of the initial parameters; repetitions never change it.
    #[serde(default)]
    pub init_seed: u64,
    /// Iterations of the pre-fit to the x-polarized state.
    #[serde(default = "default_fit_iters")]
    pub fit_iters: usize,
}

fn default_density() -> f64 {
    2.0
}

fn default_init_std() -> f64 {
    0.01
}

fn default_fit_iters() -> usize {
    300
}

impl Default for AnsatzConfig {
    fn default() -> Self {
        Self {
            ansatz: AnsatzName::Rbm,
            hidden_density: default_density(),
            init_std: default_init_std(),
            init_seed: 0,
            fit_iters: default_fit_iters(),
        }
    }
}

impl AnsatzConfig {
    pub fn kind(&self, n_sites: usize) -> CliResult<AnsatzKind> {
        match self.ansatz {
            AnsatzName::Direct2 => {
                if n_sites != 1 {
                    return Err(CliError::Config("direct2 ansatz requires N = 1".into()));
                }
                Ok(AnsatzKind::DirectTwoParameter)
            }
            AnsatzName::Rbm => {
                if !(self.hidden_density > 0.0) {
                    return Err(CliError::Config(format!("hidden_density must be positive, got {}", self.hidden_density)));
                }
                let n_hidden = ((self.hidden_density * n_sites as f64).round() as usize).max(1);
                Ok(AnsatzKind::Rbm { n_visible: n_sites, n_hidden })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendName {
    Full,
    Born,
    Cutoff,
    Categorical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorModeName {
    Absolute,
    Relative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub backend: BackendName,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_floor")]
    pub floor_mode: FloorModeName,
}

fn default_samples() -> usize {
    1000
}

fn default_chains() -> usize {
    16
}

fn default_burn_in() -> usize {
    100
}

fn default_thin() -> usize {
    2
}

fn default_floor() -> FloorModeName {
    FloorModeName::Relative
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            backend: BackendName::Full,
            epsilon: 0.0,
            n_samples: default_samples(),
            chains: default_chains(),
            burn_in: default_burn_in(),
            thin: default_thin(),
            seed: 0,
            floor_mode: default_floor(),
        }
    }
}

impl BackendConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { n_samples: self.n_samples, chains: self.chains, burn_in: self.burn_in, thin: self.thin, seed: self.seed }
    }

    /// The backend for a given cutoff; `psi2_max` seeds the cutoff reference.
    /// A cutoff of zero on the `cutoff` backend means plain Born sampling.
    pub fn build(&self, epsilon: f64, psi2_max: f64) -> CliResult<Backend> {
        let sampler = self.sampler();
        let cutoff = CutoffDistributionSpec {
            epsilon,
            psi2_max_tracked: psi2_max,
            floor_mode: match self.floor_mode {
                FloorModeName::Absolute => FloorMode::Absolute,
                FloorModeName::Relative => FloorMode::Relative,
            },
        };
        let backend = match self.backend {
            BackendName::Full => Backend::FullSummation,
            BackendName::Born => Backend::BornMetropolis(sampler),
            BackendName::Cutoff if epsilon == 0.0 => Backend::BornMetropolis(sampler),
            BackendName::Cutoff => Backend::CutoffSnis { cutoff, sampler },
            BackendName::Categorical => Backend::ExactCategoricalSnis { cutoff, sampler },
        };
        if let Some(s) = backend.sampler() {
            s.validate()?;
        }
        if let Some(c) = backend.cutoff() {
            c.validate()?;
        }
        Ok(backend)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.backend != BackendName::Full {
            self.sampler().validate()?;
        }
        if !(self.epsilon >= 0.0) {
            return Err(CliError::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Heun,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseName {
    Abort,
    Freeze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    #[serde(default = "default_scheme")]
    pub scheme: SchemeName,
    pub dt: f64,
    pub t_max: f64,
    #[serde(default = "default_svd_cutoff")]
    pub svd_cutoff: f64,
    #[serde(default)]
    pub diagonal_shift: f64,
    #[serde(default = "default_collapse")]
    pub on_rank_collapse: CollapseName,
}

fn default_scheme() -> SchemeName {
    SchemeName::Heun
}

fn default_svd_cutoff() -> f64 {
    1e-8
}

fn default_collapse() -> CollapseName {
    CollapseName::Freeze
}

impl IntegratorSection {
    pub fn build(&self, seed: u64, record_variances: bool) -> CliResult<IntegratorConfig> {
        let cfg = IntegratorConfig {
            scheme: match self.scheme {
                SchemeName::Heun => Scheme::Heun,
                SchemeName::Rk4 => Scheme::Rk4,
            },
            dt: self.dt,
            t_max: self.t_max,
            regularization: Regularization { svd_cutoff: self.svd_cutoff, diagonal_shift: self.diagonal_shift },
            on_rank_collapse: match self.on_rank_collapse {
                CollapseName::Abort => RankCollapsePolicy::Abort,
                CollapseName::Freeze => RankCollapsePolicy::Freeze,
            },
            seed,
            record_variances,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Points swept by an experiment: cutoffs, sample sizes and repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    /// Empty means: use `backend.n_samples`.
    #[serde(default)]
    pub n_samples: Vec<usize>,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    /// Also run with exact full summation as a sampling-free baseline.
    #[serde(default = "yes")]
    pub include_full: bool,
}

fn default_epsilons() -> Vec<f64> {
    vec![0.0]
}

fn default_reps() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { epsilons: default_epsilons(), n_samples: Vec::new(), repetitions: 1, include_full: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TciSection {
    #[serde(default = "default_chis")]
    pub chi_max: Vec<usize>,
    #[serde(default = "default_eps_tci")]
    pub eps_tci: f64,
    #[serde(default = "default_tci_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "default_candidates")]
    pub pivot_candidates: usize,
    /// Checkpoint times to evaluate; empty means all available.
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default)]
    pub absolute_tolerance: bool,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
}

fn default_chis() -> Vec<usize> {
    vec![8, 16, 32, 64]
}

fn default_eps_tci() -> f64 {
    1e-4
}

fn default_tci_sweeps() -> usize {
    20
}

fn default_candidates() -> usize {
    32
}

impl Default for TciSection {
    fn default() -> Self {
        Self {
            chi_max: default_chis(),
            eps_tci: default_eps_tci(),
            max_sweeps: default_tci_sweeps(),
            pivot_candidates: default_candidates(),
            times: Vec::new(),
            absolute_tolerance: false,
            repetitions: 1,
        }
    }
}

impl TciSection {
    pub fn config(&self, chi_max: usize) -> CliResult<TciConfig> {
        let cfg = TciConfig {
            chi_max,
            eps_tci: self.eps_tci,
            max_sweeps: self.max_sweeps,
            pivot_candidates: self.pivot_candidates,
            tolerance_mode: if self.absolute_tolerance { ToleranceMode::Absolute } else { ToleranceMode::Relative },
            ..TciConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Write a parameter checkpoint every this many committed steps (0 = never).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Record per-component variance means on committed steps.
    #[serde(default = "yes")]
    pub record_variances: bool,
    /// Directory holding checkpoints for `run-tci-bench`.
    #[serde(default)]
    pub checkpoint_dir: Option<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { checkpoint_every: 0, record_variances: true, checkpoint_dir: None }
    }
}

/// A complete experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub description: String,
    pub hamiltonian: HamiltonianConfig,
    #[serde(default)]
    pub ansatz: AnsatzConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub tci: TciSection,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section against the engine's constraints.
    pub fn validate(&self) -> CliResult<()> {
        let h = self.hamiltonian.build()?;
        self.ansatz.kind(h.n_sites())?;
        self.backend.validate()?;
        self.integrator.build(self.seed, false)?;
        if self.sweep.repetitions == 0 {
            return Err(CliError::Config("repetitions must be at least 1".into()));
        }
        for &eps in &self.sweep.epsilons {
            if !(eps >= 0.0) || !eps.is_finite() {
                return Err(CliError::Config(format!("epsilon values must be finite and >= 0, got {eps}")));
            }
        }
        for &n in &self.sweep.n_samples {
            BackendConfig { n_samples: n, ..self.backend.clone() }.validate()?;
        }
        for &chi in &self.tci.chi_max {
            self.tci.config(chi)?;
        }
        Ok(())
    }

    pub fn sample_sizes(&self) -> Vec<usize> {
        if self.sweep.n_samples.is_empty() {
            vec![self.backend.n_samples]
        } else {
            self.sweep.n_samples.clone()
        }
    }
}
