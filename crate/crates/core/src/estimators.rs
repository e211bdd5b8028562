//! Expectation values entering the equations of motion.
//!
//! Every backend reduces to the same weighted sum over unique sampled
//! configurations, `Σ_u n_u r_u X_u / Σ_u n_u w_u`, with per-configuration
//! factors `r` and `w` set by the backend:
//!
//! | backend          | integrand X             | r     | w     |
//! |------------------|-------------------------|-------|-------|
//! | full summation   | ψ*, ∂ψ*, E_loc          | 1     | p     |
//! | Born sampling    | 1, ∂log ψ*, local ratio | 1     | 1     |
//! | cutoff SNIS      | ψ*, ∂ψ*, E_loc          | 1/q   | p/q   |

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ansatz::{AmplitudeAndGradient, Wavefunction};
use crate::spin_model::{Hamiltonian, SpinConfiguration, DEFAULT_DENSE_CAP};
use crate::{Error, Result, C64};

/// How the floor of the cutoff distribution scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FloorMode {
    /// `q = ε` below threshold.
    Absolute,
    /// `q = ε·max|ψ|²` below threshold.
    #[default]
    Relative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffDistributionSpec {
    pub epsilon: f64,
    pub psi2_max_tracked: f64,
    pub floor_mode: FloorMode,
}

impl CutoffDistributionSpec {
    pub fn new(epsilon: f64, psi2_max_tracked: f64) -> Result<Self> {
        let spec = Self { epsilon, psi2_max_tracked, floor_mode: FloorMode::Relative };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.epsilon > 0.0 && !(self.psi2_max_tracked > 0.0 && self.psi2_max_tracked.is_finite()) {
            return Err(Error::InvalidReference(self.psi2_max_tracked));
        }
        Ok(())
    }
}

/// Sampling weight `q_ε` for a configuration with Born weight `psi2`.
pub fn cutoff_weight(psi2: f64, spec: &CutoffDistributionSpec) -> Result<f64> {
    if !(psi2 >= 0.0) {
        return Err(Error::NumericDomain(format!("Born weight must be >= 0, got {psi2}")));
    }
    if spec.epsilon == 0.0 {
        return Ok(psi2);
    }
    spec.validate()?;
    if psi2 / spec.psi2_max_tracked > spec.epsilon {
        Ok(psi2)
    } else {
        Ok(match spec.floor_mode {
            FloorMode::Relative => spec.epsilon * spec.psi2_max_tracked,
            FloorMode::Absolute => spec.epsilon,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Total number of samples over all chains.
    pub n_samples: usize,
    pub chains: usize,
    /// Discarded sweeps per chain; one sweep is N proposed flips.
    pub burn_in: usize,
    /// Sweeps between recorded samples.
    pub thin: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_samples: 1000, chains: 16, burn_in: 100, thin: 2, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.chains == 0 {
            return Err(Error::InvalidConfig("n_samples and chains must be positive".into()));
        }
        if self.n_samples % self.chains != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_samples ({}) must be divisible by chains ({})",
                self.n_samples, self.chains
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig("thin must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mixes a base seed with stream indices into an independent 64-bit seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ a.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ b)
}

const MAX_START_ATTEMPTS: usize = 4096;

/// Metropolis–Hastings with single-spin-flip proposals, chains run in parallel.
pub fn metropolis_sample<F>(n_sites: usize, weight_fn: F, cfg: &SamplerConfig) -> Result<Vec<SpinConfiguration>>
where
    F: Fn(&SpinConfiguration) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let per_chain = cfg.n_samples / cfg.chains;
    let chains: Vec<Result<Vec<SpinConfiguration>>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, c as u64, 0x5A3F));
            run_chain(n_sites, &weight_fn, per_chain, cfg, &mut rng)
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.n_samples);
    for chain in chains {
        out.extend(chain?);
    }
    Ok(out)
}

fn run_chain<F>(
    n_sites: usize,
    weight_fn: &F,
    n_keep: usize,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SpinConfiguration>>
where
    F: Fn(&SpinConfiguration) -> Result<f64>,
{
    let span = 1u64 << n_sites;
    let mut current = None;
    for _ in 0..MAX_START_ATTEMPTS {
        let s = SpinConfiguration::from_index(n_sites, rng.random_range(0..span))?;
        let w = weight_fn(&s)?;
        check_weight(w)?;
        if w > 0.0 {
            current = Some((s, w));
            break;
        }
    }
    let (mut s, mut w) = current.ok_or(Error::DegenerateTarget)?;

    let sweep = |s: &mut SpinConfiguration, w: &mut f64, rng: &mut ChaCha8Rng| -> Result<()> {
        for _ in 0..n_sites {
            let site = rng.random_range(0..n_sites);
            let proposal = s.flipped(site);
            let wp = weight_fn(&proposal)?;
            check_weight(wp)?;
            if wp >= *w || rng.random::<f64>() * *w < wp {
                *s = proposal;
                *w = wp;
            }
        }
        Ok(())
    };

    for _ in 0..cfg.burn_in {
        sweep(&mut s, &mut w, rng)?;
    }
    let mut out = Vec::with_capacity(n_keep);
    while out.len() < n_keep {
        for _ in 0..cfg.thin {
            sweep(&mut s, &mut w, rng)?;
        }
        out.push(s);
    }
    Ok(out)
}

fn check_weight(w: f64) -> Result<()> {
    if w >= 0.0 && w.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericDomain(format!("sampling weight must be finite and >= 0, got {w}")))
    }
}

/// Independent draws from the exactly normalized weight table over all
/// `2^N` configurations.
pub fn exact_categorical_sample<F>(
    n_sites: usize,
    weight_fn: F,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<SpinConfiguration>>
where
    F: Fn(&SpinConfiguration) -> Result<f64>,
{
    if n_sites > DEFAULT_DENSE_CAP {
        return Err(Error::ResourceLimit { what: "exact categorical sampling", n: n_sites, cap: DEFAULT_DENSE_CAP });
    }
    let table = SpinConfiguration::enumerate(n_sites)
        .map(|s| {
            let w = weight_fn(&s)?;
            check_weight(w)?;
            Ok(w)
        })
        .collect::<Result<Vec<f64>>>()?;
    categorical_from_table(n_sites, &table, n_samples, seed)
}

fn categorical_from_table(n_sites: usize, table: &[f64], n_samples: usize, seed: u64) -> Result<Vec<SpinConfiguration>> {
    let dist = WeightedIndex::new(table).map_err(|_| Error::DegenerateTarget)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xCA7, 0));
    (0..n_samples)
        .map(|_| SpinConfiguration::from_index(n_sites, dist.sample(&mut rng) as u64))
        .collect()
}

/// Self-normalized importance-sampling mean `Σ w f / Σ w`.
pub fn snis_mean(values: &[C64], w: &[f64]) -> Result<C64> {
    let sw = weight_sum(values.len(), w)?;
    Ok(values.iter().zip(w).map(|(f, wi)| f * *wi).sum::<C64>() / sw)
}

/// Inverse sample mean of the importance weights `p/q`.
pub fn norm_ratio(w: &[f64]) -> Result<f64> {
    let sw = weight_sum(w.len(), w)?;
    Ok(w.len() as f64 / sw)
}

/// Delta-method variance `mean(w²|f − μ̂|²) / mean(w)²`.
pub fn snis_component_variance(values: &[C64], w: &[f64]) -> Result<f64> {
    let mu = snis_mean(values, w)?;
    let n = w.len() as f64;
    let mean_w = w.iter().sum::<f64>() / n;
    let num = values.iter().zip(w).map(|(f, wi)| wi * wi * (f - mu).norm_sqr()).sum::<f64>() / n;
    Ok(num / (mean_w * mean_w))
}

fn weight_sum(n: usize, w: &[f64]) -> Result<f64> {
    if n != w.len() {
        return Err(Error::ShapeMismatch(format!("{n} values but {} weights", w.len())));
    }
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) || !sw.is_finite() {
        return Err(Error::DegenerateWeights(sw));
    }
    Ok(sw)
}

/// How batch entries are turned into moment contributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Exact sum over every configuration.
    Full,
    /// Samples drawn from |ψ|², log-derivative integrands.
    Born,
    /// Samples drawn from q, raw-amplitude integrands reweighted by 1/q.
    Snis,
}

/// One unique configuration of a batch and its multiplicity.
#[derive(Clone, Debug)]
pub struct BatchEntry {
    pub config: SpinConfiguration,
    pub count: usize,
    /// Born weight |ψ(s)|².
    pub p: f64,
    /// Sampling weight.
    pub q: f64,
    /// Importance weight p/q.
    pub w: f64,
    pub amp_grad: AmplitudeAndGradient,
    /// `E_loc(s) = Σ_{s'} H_{s,s'} ψ(s')`.
    pub e_loc_unnorm: C64,
    /// `E_loc(s)/ψ(s)`, absent at roots of ψ.
    pub e_loc_ratio: Option<C64>,
}

/// Evaluated samples, aggregated over repeated configurations.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub weighting: Weighting,
    pub n_samples: usize,
    pub entries: Vec<BatchEntry>,
}

impl SampleBatch {
    /// Evaluates amplitudes, gradients and local energies for a list of
    /// samples; `q_of_p` maps a Born weight to the sampling weight.
    pub fn from_samples<W, Q>(
        state: &W,
        h: &Hamiltonian,
        samples: &[SpinConfiguration],
        weighting: Weighting,
        q_of_p: Q,
    ) -> Result<Self>
    where
        W: Wavefunction,
        Q: Fn(f64) -> Result<f64> + Sync,
    {
        let mut counts: BTreeMap<SpinConfiguration, usize> = BTreeMap::new();
        for s in samples {
            if s.n_sites() != state.n_sites() {
                return Err(Error::ConfigurationShape { expected: state.n_sites(), got: s.n_sites() });
            }
            *counts.entry(*s).or_default() += 1;
        }
        let unique: Vec<(SpinConfiguration, usize)> = counts.into_iter().collect();
        Self::from_counts(state, h, &unique, samples.len(), weighting, q_of_p)
    }

    /// Every configuration once, `q ≡ 1`.
    pub fn full<W: Wavefunction>(state: &W, h: &Hamiltonian) -> Result<Self> {
        let n = state.n_sites();
        if n > DEFAULT_DENSE_CAP {
            return Err(Error::ResourceLimit { what: "full summation", n, cap: DEFAULT_DENSE_CAP });
        }
        let unique: Vec<_> = SpinConfiguration::enumerate(n).map(|s| (s, 1)).collect();
        let total = unique.len();
        Self::from_counts(state, h, &unique, total, Weighting::Full, |_| Ok(1.0))
    }

    fn from_counts<W, Q>(
        state: &W,
        h: &Hamiltonian,
        unique: &[(SpinConfiguration, usize)],
        n_samples: usize,
        weighting: Weighting,
        q_of_p: Q,
    ) -> Result<Self>
    where
        W: Wavefunction,
        Q: Fn(f64) -> Result<f64> + Sync,
    {
        if h.n_sites() != state.n_sites() {
            return Err(Error::ConfigurationShape { expected: state.n_sites(), got: h.n_sites() });
        }
        let amps: Vec<AmplitudeAndGradient> =
            unique.par_iter().map(|(s, _)| state.evaluate(s)).collect::<Result<_>>()?;
        let known: BTreeMap<SpinConfiguration, C64> =
            unique.iter().zip(&amps).map(|((s, _), a)| (*s, a.psi)).collect();

        let entries = unique
            .par_iter()
            .zip(amps.into_par_iter())
            .map(|(&(config, count), amp_grad)| {
                let conns = h.connections(&config)?;
                let mut e_loc = C64::new(0.0, 0.0);
                for (sp, hij) in &conns.entries {
                    let psi = match known.get(sp) {
                        Some(v) => *v,
                        None => state.amplitude(sp)?,
                    };
                    e_loc += hij * psi;
                }
                let p = amp_grad.psi.norm_sqr();
                let q = if weighting == Weighting::Full { 1.0 } else { q_of_p(p)? };
                if !(q > 0.0) || !q.is_finite() {
                    return Err(Error::NumericDomain(format!("sampled configuration has sampling weight {q}")));
                }
                let e_loc_ratio = (amp_grad.psi != C64::new(0.0, 0.0)).then(|| e_loc / amp_grad.psi);
                Ok(BatchEntry { config, count, p, q, w: p / q, amp_grad, e_loc_unnorm: e_loc, e_loc_ratio })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { weighting, n_samples, entries })
    }

    /// Multiplies every sampling weight by `c`.
    pub fn scale_q(&mut self, c: f64) {
        for e in &mut self.entries {
            e.q *= c;
            e.w = e.p / e.q;
        }
    }

    pub fn max_psi2(&self) -> f64 {
        self.entries.iter().map(|e| e.p).fold(0.0, f64::max)
    }

    pub fn n_params(&self) -> usize {
        self.entries.first().map_or(0, |e| e.amp_grad.grad_psi.len())
    }
}

/// Per-component Delta-method variances of the sampled moments.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentVariances {
    pub grad_e: DVector<f64>,
    pub grad2: DMatrix<f64>,
}

impl MomentVariances {
    pub fn mean_grad_e(&self) -> f64 {
        self.grad_e.mean()
    }

    pub fn mean_grad2(&self) -> f64 {
        self.grad2.mean()
    }
}

/// Raw moments from which the metric and force are assembled.
#[derive(Clone, Debug, PartialEq)]
pub struct TdvpQuantities {
    /// `⟨∂_kψ* ∂_k'ψ⟩/⟨ψ|ψ⟩`.
    pub m_grad2: DMatrix<C64>,
    /// `⟨∂_kψ* E_loc⟩/⟨ψ|ψ⟩`.
    pub m_grad_e: DVector<C64>,
    /// `⟨ψ* ∂_kψ⟩/⟨ψ|ψ⟩`.
    pub m_psi_grad: DVector<C64>,
    /// `⟨ψ* E_loc⟩/⟨ψ|ψ⟩`, the energy.
    pub m_psi_e: C64,
    /// `⟨|E_loc|²⟩/⟨ψ|ψ⟩ = ⟨H²⟩`.
    pub m_e2: f64,
    pub norm_ratio: f64,
    pub variances: Option<MomentVariances>,
    /// Largest |ψ|² among the evaluated configurations.
    pub batch_psi2_max: f64,
    pub n_samples: usize,
}

impl TdvpQuantities {
    pub fn n_params(&self) -> usize {
        self.m_psi_grad.len()
    }

    /// `⟨H²⟩ − |⟨H⟩|²`.
    pub fn energy_variance(&self) -> f64 {
        self.m_e2 - self.m_psi_e.norm_sqr()
    }
}

struct Contribution<'a> {
    count: f64,
    r: f64,
    w: f64,
    psi_conj: C64,
    grad: std::borrow::Cow<'a, [C64]>,
    e: C64,
}

fn contributions(batch: &SampleBatch) -> Result<Vec<Contribution<'_>>> {
    use std::borrow::Cow;
    batch
        .entries
        .iter()
        .map(|e| {
            let count = e.count as f64;
            Ok(match batch.weighting {
                Weighting::Full => Contribution {
                    count,
                    r: 1.0,
                    w: e.p,
                    psi_conj: e.amp_grad.psi.conj(),
                    grad: Cow::Borrowed(&e.amp_grad.grad_psi),
                    e: e.e_loc_unnorm,
                },
                Weighting::Snis => Contribution {
                    count,
                    r: 1.0 / e.q,
                    w: e.w,
                    psi_conj: e.amp_grad.psi.conj(),
                    grad: Cow::Borrowed(&e.amp_grad.grad_psi),
                    e: e.e_loc_unnorm,
                },
                Weighting::Born => {
                    let glog = e.amp_grad.grad_log_psi().ok_or_else(|| {
                        Error::NumericDomain("Born estimator received a configuration with ψ = 0".into())
                    })?;
                    Contribution {
                        count,
                        r: 1.0,
                        w: 1.0,
                        psi_conj: C64::new(1.0, 0.0),
                        grad: Cow::Owned(glog),
                        e: e.e_loc_ratio.unwrap_or_default(),
                    }
                }
            })
        })
        .collect()
}

/// Splits a complex matrix whose rows are `scale_u · g_u` into real parts.
fn split_rows(contribs: &[Contribution<'_>], k: usize, scale: impl Fn(&Contribution<'_>) -> f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let u = contribs.len();
    let mut re = DMatrix::<f64>::zeros(u, k);
    let mut im = DMatrix::<f64>::zeros(u, k);
    for (row, c) in contribs.iter().enumerate() {
        let f = scale(c);
        for (col, g) in c.grad.iter().enumerate() {
            re[(row, col)] = f * g.re;
            im[(row, col)] = f * g.im;
        }
    }
    (re, im)
}

/// `Σ_u conj(a_u)_k a_u,k'` from the real and imaginary row blocks.
fn hermitian_gram(re: &DMatrix<f64>, im: &DMatrix<f64>) -> DMatrix<C64> {
    let real = re.tr_mul(re) + im.tr_mul(im);
    let cross = re.tr_mul(im);
    let k = real.nrows();
    let mut out = DMatrix::<C64>::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            out[(a, b)] = C64::new(real[(a, b)], cross[(a, b)] - cross[(b, a)]);
        }
    }
    out
}

/// Reduces a batch to the four moments, the norm ratio and optionally the
/// per-component variances.
pub fn moments_from_batch(batch: &SampleBatch, with_variances: bool) -> Result<TdvpQuantities> {
    if batch.entries.is_empty() {
        return Err(Error::DegenerateWeights(0.0));
    }
    let k = batch.n_params();
    let contribs = contributions(batch)?;
    let d: f64 = contribs.iter().map(|c| c.count * c.w).sum();
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::DegenerateWeights(d));
    }

    let mut m_grad_e = DVector::<C64>::zeros(k);
    let mut m_psi_grad = DVector::<C64>::zeros(k);
    let mut m_psi_e = C64::new(0.0, 0.0);
    let mut m_e2 = 0.0;
    for c in &contribs {
        let f = c.count * c.r;
        for (kk, g) in c.grad.iter().enumerate() {
            m_grad_e[kk] += g.conj() * c.e * f;
            m_psi_grad[kk] += c.psi_conj * g * f;
        }
        m_psi_e += c.psi_conj * c.e * f;
        m_e2 += c.e.norm_sqr() * f;
    }
    m_grad_e /= C64::new(d, 0.0);
    m_psi_grad /= C64::new(d, 0.0);
    m_psi_e /= d;
    m_e2 /= d;

    let (re, im) = split_rows(&contribs, k, |c| (c.count * c.r).sqrt());
    let mut m_grad2 = hermitian_gram(&re, &im);
    m_grad2 /= C64::new(d, 0.0);
    let m_grad2 = (&m_grad2 + m_grad2.adjoint()) * C64::new(0.5, 0.0);

    let norm_ratio = match batch.weighting {
        Weighting::Snis => batch.n_samples as f64 / d,
        Weighting::Full | Weighting::Born => 1.0,
    };

    let variances = with_variances.then(|| {
        let ns = batch.n_samples as f64;
        let scale = ns / (d * d);
        let mut grad_e = DVector::<f64>::zeros(k);
        for c in &contribs {
            for (kk, g) in c.grad.iter().enumerate() {
                grad_e[kk] += c.count * (g.conj() * c.e * c.r - m_grad_e[kk] * c.w).norm_sqr();
            }
        }
        grad_e *= scale;

        // Σ n |r g*_k g_k' − w μ|² expanded into Gram products.
        let mut abs2 = DMatrix::<f64>::zeros(contribs.len(), k);
        for (row, c) in contribs.iter().enumerate() {
            let f = c.count.sqrt() * c.r;
            for (col, g) in c.grad.iter().enumerate() {
                abs2[(row, col)] = f * g.norm_sqr();
            }
        }
        let t1 = abs2.tr_mul(&abs2);
        let (re_w, im_w) = split_rows(&contribs, k, |c| (c.count * c.r * c.w).sqrt());
        let t2 = hermitian_gram(&re_w, &im_w);
        let w2: f64 = contribs.iter().map(|c| c.count * c.w * c.w).sum();
        let grad2 = DMatrix::from_fn(k, k, |a, b| {
            let mu = m_grad2[(a, b)];
            ((t1[(a, b)] - 2.0 * (mu.conj() * t2[(a, b)]).re + mu.norm_sqr() * w2) * scale).max(0.0)
        });
        MomentVariances { grad_e, grad2 }
    });

    Ok(TdvpQuantities {
        m_grad2,
        m_grad_e,
        m_psi_grad,
        m_psi_e,
        m_e2,
        norm_ratio,
        variances,
        batch_psi2_max: batch.max_psi2(),
        n_samples: batch.n_samples,
    })
}

/// Estimation backend.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Backend {
    FullSummation,
    BornMetropolis(SamplerConfig),
    CutoffSnis { cutoff: CutoffDistributionSpec, sampler: SamplerConfig },
    ExactCategoricalSnis { cutoff: CutoffDistributionSpec, sampler: SamplerConfig },
}

impl Backend {
    pub fn sampler(&self) -> Option<&SamplerConfig> {
        match self {
            Backend::FullSummation => None,
            Backend::BornMetropolis(s) => Some(s),
            Backend::CutoffSnis { sampler, .. } | Backend::ExactCategoricalSnis { sampler, .. } => Some(sampler),
        }
    }

    pub fn cutoff(&self) -> Option<&CutoffDistributionSpec> {
        match self {
            Backend::CutoffSnis { cutoff, .. } | Backend::ExactCategoricalSnis { cutoff, .. } => Some(cutoff),
            _ => None,
        }
    }

    /// Same backend with the sampler seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut b = *self;
        match &mut b {
            Backend::FullSummation => {}
            Backend::BornMetropolis(s) => s.seed = seed,
            Backend::CutoffSnis { sampler, .. } | Backend::ExactCategoricalSnis { sampler, .. } => sampler.seed = seed,
        }
        b
    }

    /// Same backend with a new cutoff reference `max|ψ|²`.
    pub fn with_psi2_max(&self, psi2_max: f64) -> Self {
        let mut b = *self;
        if let Backend::CutoffSnis { cutoff, .. } | Backend::ExactCategoricalSnis { cutoff, .. } = &mut b {
            cutoff.psi2_max_tracked = psi2_max;
        }
        b
    }
}

/// Draws (or enumerates) a batch for `state` according to `backend`.
pub fn sample_batch<W: Wavefunction>(state: &W, h: &Hamiltonian, backend: &Backend) -> Result<SampleBatch> {
    let n = state.n_sites();
    match backend {
        Backend::FullSummation => SampleBatch::full(state, h),
        Backend::BornMetropolis(sampler) => {
            let samples = metropolis_sample(n, |s| Ok(state.amplitude(s)?.norm_sqr()), sampler)?;
            SampleBatch::from_samples(state, h, &samples, Weighting::Born, Ok)
        }
        Backend::CutoffSnis { cutoff, sampler } => {
            cutoff.validate()?;
            let q = |p: f64| cutoff_weight(p, cutoff);
            let samples = metropolis_sample(n, |s| q(state.amplitude(s)?.norm_sqr()), sampler)?;
            SampleBatch::from_samples(state, h, &samples, Weighting::Snis, q)
        }
        Backend::ExactCategoricalSnis { cutoff, sampler } => {
            cutoff.validate()?;
            let q = |p: f64| cutoff_weight(p, cutoff);
            let samples = exact_categorical_sample(n, |s| q(state.amplitude(s)?.norm_sqr()), sampler.n_samples, sampler.seed)?;
            SampleBatch::from_samples(state, h, &samples, Weighting::Snis, q)
        }
    }
}

/// Samples with `backend` and reduces to the TDVP moments.
pub fn estimate_quantities<W: Wavefunction>(
    state: &W,
    h: &Hamiltonian,
    backend: &Backend,
    with_variances: bool,
) -> Result<TdvpQuantities> {
    let batch = sample_batch(state, h, backend)?;
    moments_from_batch(&batch, with_variances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ansatz::VariationalState;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn cutoff_weight_branches() {
        let spec = CutoffDistributionSpec::new(0.01, 1.0).unwrap();
        assert_eq!(cutoff_weight(0.5, &spec).unwrap(), 0.5);
        let spec = CutoffDistributionSpec::new(1e-3, 1.0).unwrap();
        assert_eq!(cutoff_weight(0.0, &spec).unwrap(), 1e-3);
        let spec = CutoffDistributionSpec::new(2.0, 0.7).unwrap();
        for p in [0.0, 0.1, 0.7] {
            assert_eq!(cutoff_weight(p, &spec).unwrap(), 1.4);
        }
    }

    #[test]
    fn cutoff_weight_reference_errors() {
        let spec = CutoffDistributionSpec { epsilon: 0.1, psi2_max_tracked: 0.0, floor_mode: FloorMode::Relative };
        assert!(matches!(cutoff_weight(0.3, &spec), Err(Error::InvalidReference(_))));
        let born = CutoffDistributionSpec { epsilon: 0.0, psi2_max_tracked: 0.0, floor_mode: FloorMode::Relative };
        assert_eq!(cutoff_weight(0.0, &born).unwrap(), 0.0);
    }

    #[test]
    fn absolute_floor() {
        let spec = CutoffDistributionSpec { epsilon: 0.1, psi2_max_tracked: 4.0, floor_mode: FloorMode::Absolute };
        assert_eq!(cutoff_weight(0.2, &spec).unwrap(), 0.1);
        assert_eq!(cutoff_weight(1.0, &spec).unwrap(), 1.0);
    }

    #[test]
    fn snis_mean_examples() {
        assert_eq!(snis_mean(&[c(1.0), c(3.0)], &[1.0, 1.0]).unwrap(), c(2.0));
        assert_eq!(snis_mean(&[c(1.0), c(3.0)], &[2.0, 0.0]).unwrap(), c(1.0));
        assert_eq!(snis_mean(&[c(1.0), c(3.0)], &[1.0, 3.0]).unwrap(), c(2.5));
        assert!(matches!(snis_mean(&[c(1.0)], &[0.0]), Err(Error::DegenerateWeights(_))));
    }

    #[test]
    fn norm_ratio_examples() {
        assert_eq!(norm_ratio(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(norm_ratio(&[2.0, 0.0]).unwrap(), 1.0);
        assert_eq!(norm_ratio(&[0.5, 0.5]).unwrap(), 2.0);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(snis_component_variance(&[c(4.0), c(4.0)], &[0.3, 2.0]).unwrap(), 0.0);
        assert_eq!(snis_component_variance(&[c(0.0), c(2.0)], &[1.0, 1.0]).unwrap(), 1.0);
        let f = [c(1.0), c(5.0), c(-2.0)];
        let mean = (1.0 + 5.0 - 2.0) / 3.0;
        let plain = f.iter().map(|x| (x.re - mean).powi(2)).sum::<f64>() / 3.0;
        assert!((snis_component_variance(&f, &[1.0; 3]).unwrap() - plain).abs() < 1e-14);
    }

    #[test]
    fn uniform_weight_always_accepts() {
        // With a constant target every proposal is accepted, so consecutive
        // samples of one chain differ by exactly `thin·N` flips in parity.
        let cfg = SamplerConfig { n_samples: 64, chains: 1, burn_in: 0, thin: 1, seed: 9 };
        let samples = metropolis_sample(3, |_| Ok(1.0), &cfg).unwrap();
        for pair in samples.windows(2) {
            let flips = (pair[0].index() ^ pair[1].index()).count_ones() % 2;
            assert_eq!(flips, 1);
        }
    }

    #[test]
    fn metropolis_is_deterministic() {
        let cfg = SamplerConfig { n_samples: 200, chains: 4, burn_in: 5, thin: 1, seed: 42 };
        let w = |s: &SpinConfiguration| Ok(1.0 + s.index() as f64);
        assert_eq!(metropolis_sample(4, w, &cfg).unwrap(), metropolis_sample(4, w, &cfg).unwrap());
    }

    #[test]
    fn metropolis_rejects_zero_target() {
        let cfg = SamplerConfig { n_samples: 4, chains: 1, burn_in: 0, thin: 1, seed: 0 };
        assert_eq!(metropolis_sample(3, |_| Ok(0.0), &cfg), Err(Error::DegenerateTarget));
        let bad = SamplerConfig { n_samples: 10, chains: 3, ..cfg };
        assert!(matches!(metropolis_sample(3, |_| Ok(1.0), &bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn categorical_point_mass() {
        let table = [1.0, 0.0, 0.0, 0.0];
        let samples = exact_categorical_sample(2, |s| Ok(table[s.index() as usize]), 500, 1).unwrap();
        assert!(samples.iter().all(|s| s.index() == 0));
        assert_eq!(exact_categorical_sample(2, |_| Ok(0.0), 5, 1), Err(Error::DegenerateTarget));
        assert!(matches!(
            exact_categorical_sample(15, |_| Ok(1.0), 5, 1),
            Err(Error::ResourceLimit { .. })
        ));
    }

    #[test]
    fn full_moments_match_brute_force() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let st = VariationalState::rbm_random(4, 3, 0.4, &mut rng).unwrap();
        let h = Hamiltonian::tfim(4, 1.0, 0.8).unwrap();
        let q = estimate_quantities(&st, &h, &Backend::FullSummation, false).unwrap();

        let hm = h.dense_matrix().unwrap();
        let configs: Vec<_> = SpinConfiguration::enumerate(4).collect();
        let psi = DVector::from_iterator(16, configs.iter().map(|s| st.amplitude(s).unwrap()));
        let hpsi = &hm * &psi;
        let norm = psi.norm_squared();
        let k = st.n_params();
        let grads: Vec<Vec<C64>> = configs.iter().map(|s| st.evaluate(s).unwrap().grad_psi).collect();
        let energy = psi.dotc(&hpsi) / norm;
        assert!((q.m_psi_e - energy).norm() < 1e-12 * energy.norm().max(1.0));
        assert!((q.m_e2 - hpsi.norm_squared() / norm).abs() < 1e-12 * q.m_e2);
        for a in 0..k {
            let ge: C64 = (0..16).map(|i| grads[i][a].conj() * hpsi[i]).sum::<C64>() / norm;
            let pg: C64 = (0..16).map(|i| psi[i].conj() * grads[i][a]).sum::<C64>() / norm;
            assert!((q.m_grad_e[a] - ge).norm() < 1e-12 * (1.0 + ge.norm()));
            assert!((q.m_psi_grad[a] - pg).norm() < 1e-12 * (1.0 + pg.norm()));
            for b in 0..k {
                let g2: C64 = (0..16).map(|i| grads[i][a].conj() * grads[i][b]).sum::<C64>() / norm;
                assert!((q.m_grad2[(a, b)] - g2).norm() < 1e-12 * (1.0 + g2.norm()));
            }
        }
        assert_eq!(q.m_grad2, q.m_grad2.adjoint());
        assert_eq!(q.norm_ratio, 1.0);
    }

    #[test]
    fn snis_with_epsilon_zero_equals_born_on_same_samples() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let st = VariationalState::rbm_random(5, 5, 0.3, &mut rng).unwrap();
        let h = Hamiltonian::tfim(5, 1.0, 1.0).unwrap();
        let cfg = SamplerConfig { n_samples: 400, chains: 4, burn_in: 10, thin: 1, seed: 3 };
        let samples = metropolis_sample(5, |s| Ok(st.amplitude(s)?.norm_sqr()), &cfg).unwrap();
        let born = moments_from_batch(&SampleBatch::from_samples(&st, &h, &samples, Weighting::Born, Ok).unwrap(), true).unwrap();
        let snis = moments_from_batch(&SampleBatch::from_samples(&st, &h, &samples, Weighting::Snis, Ok).unwrap(), true).unwrap();
        assert!((born.m_psi_e - snis.m_psi_e).norm() < 1e-12 * born.m_psi_e.norm());
        assert!((&born.m_grad_e - &snis.m_grad_e).norm() < 1e-12 * born.m_grad_e.norm());
        assert!((&born.m_grad2 - &snis.m_grad2).norm() < 1e-12 * born.m_grad2.norm());
        assert!((snis.norm_ratio - 1.0).abs() < 1e-12);
        let (vb, vs) = (born.variances.unwrap(), snis.variances.unwrap());
        assert!((&vb.grad_e - &vs.grad_e).norm() < 1e-9 * vb.grad_e.norm());
    }

    #[test]
    fn grad2_variances_match_direct_sum() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let st = VariationalState::rbm_random(3, 2, 0.5, &mut rng).unwrap();
        let h = Hamiltonian::tfim(3, 1.0, 1.0).unwrap();
        let spec = CutoffDistributionSpec::new(0.3, 1.0).unwrap();
        let backend = Backend::ExactCategoricalSnis {
            cutoff: spec,
            sampler: SamplerConfig { n_samples: 300, chains: 1, burn_in: 0, thin: 1, seed: 5 },
        };
        let batch = sample_batch(&st, &h, &backend).unwrap();
        let q = moments_from_batch(&batch, true).unwrap();
        let v = q.variances.unwrap();
        let (a, b) = (1, 4);
        let mut f = Vec::new();
        let mut w = Vec::new();
        for e in &batch.entries {
            for _ in 0..e.count {
                f.push(e.amp_grad.grad_psi[a].conj() * e.amp_grad.grad_psi[b] / e.p);
                w.push(e.w);
            }
        }
        let direct = snis_component_variance(&f, &w).unwrap();
        assert!((direct - v.grad2[(a, b)]).abs() < 1e-9 * direct.max(1e-12));
    }

    mod props {
        use super::*;
        use crate::ansatz::VariationalState;
        use crate::spin_model::Hamiltonian;
        use proptest::prelude::*;
        use rand::SeedableRng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn cutoff_weight_is_bounded_below(psi2 in 0.0f64..2.0, eps in 1e-6f64..0.5, max in 0.1f64..2.0) {
                let spec = CutoffDistributionSpec::new(eps, max).unwrap();
                let q = cutoff_weight(psi2, &spec).unwrap();
                prop_assert!(q >= psi2.min(eps * max));
                prop_assert!(q > 0.0);
                prop_assert!(q == psi2 || q == eps * max);
            }

            #[test]
            fn seeds_are_distinct_across_streams(seed in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
                prop_assert_ne!(derive_seed(seed, a, b), derive_seed(seed, a + 1, b));
                prop_assert_ne!(derive_seed(seed, a, b), derive_seed(seed, a, b + 1));
            }

            #[test]
            fn moments_ignore_global_q_scale(seed in any::<u64>(), log_c in -6.0f64..6.0) {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let st = VariationalState::rbm_random(3, 2, 0.4, &mut rng).unwrap();
                let h = Hamiltonian::tfim(3, 1.0, 0.8).unwrap();
                let sampler = SamplerConfig { n_samples: 300, chains: 3, burn_in: 5, thin: 1, seed };
                let backend = Backend::ExactCategoricalSnis { cutoff: CutoffDistributionSpec::new(0.05, 1.0).unwrap(), sampler };
                let mut batch = sample_batch(&st, &h, &backend).unwrap();
                let a = moments_from_batch(&batch, false).unwrap();
                batch.scale_q(10f64.powf(log_c));
                let b = moments_from_batch(&batch, false).unwrap();
                prop_assert!((&a.m_grad_e - &b.m_grad_e).norm() <= 1e-12 * a.m_grad_e.norm());
                prop_assert!((&a.m_grad2 - &b.m_grad2).norm() <= 1e-12 * a.m_grad2.norm());
                prop_assert!((a.m_psi_e - b.m_psi_e).norm() <= 1e-12 * a.m_psi_e.norm().max(1.0));
            }
        }
    }
}
