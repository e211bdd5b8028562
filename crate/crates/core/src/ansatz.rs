//! Variational wavefunctions over real parameter vectors.
//!
//! Complex parameters are stored as interleaved `(Re, Im)` pairs so that the
//! equations of motion run over a real vector θ. For a holomorphic
//! parameterization this gives `∂ψ/∂(Im p) = i ∂ψ/∂(Re p)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::spin_model::SpinConfiguration;
use crate::{Error, Result, C64};

/// Amplitude `ψ(s)` together with its parameter gradient `∂ψ/∂θ_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmplitudeAndGradient {
    pub psi: C64,
    pub grad_psi: Vec<C64>,
}

impl AmplitudeAndGradient {
    /// `log ψ(s)`, undefined at an exact root.
    pub fn log_psi(&self) -> Option<C64> {
        (self.psi != C64::new(0.0, 0.0)).then(|| self.psi.ln())
    }

    /// `∂_k log ψ(s) = ∂_k ψ / ψ`, undefined at an exact root.
    pub fn grad_log_psi(&self) -> Option<Vec<C64>> {
        if self.psi == C64::new(0.0, 0.0) {
            return None;
        }
        let inv = self.psi.inv();
        Some(self.grad_psi.iter().map(|g| g * inv).collect())
    }
}

/// Anything that can be evaluated like a variational state.
pub trait Wavefunction: Sync {
    fn n_sites(&self) -> usize;
    fn n_params(&self) -> usize;
    fn amplitude(&self, s: &SpinConfiguration) -> Result<C64>;
    fn evaluate(&self, s: &SpinConfiguration) -> Result<AmplitudeAndGradient>;

    fn check_shape(&self, s: &SpinConfiguration) -> Result<()> {
        if s.n_sites() != self.n_sites() {
            return Err(Error::ConfigurationShape { expected: self.n_sites(), got: s.n_sites() });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnsatzKind {
    /// Single spin `α|↓⟩ + β|↑⟩` with θ = (Re α, Im α, Re β, Im β).
    DirectTwoParameter,
    /// Restricted Boltzmann machine with visible biases `a`, hidden biases
    /// `b` and weights `W`, all complex.
    Rbm { n_visible: usize, n_hidden: usize },
}

impl AnsatzKind {
    pub fn n_sites(&self) -> usize {
        match *self {
            AnsatzKind::DirectTwoParameter => 1,
            AnsatzKind::Rbm { n_visible, .. } => n_visible,
        }
    }

    pub fn n_params(&self) -> usize {
        match *self {
            AnsatzKind::DirectTwoParameter => 4,
            AnsatzKind::Rbm { n_visible, n_hidden } => 2 * (n_visible + n_hidden + n_visible * n_hidden),
        }
    }
}

/// An ansatz together with its current real parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState {
    kind: AnsatzKind,
    theta: Vec<f64>,
}

impl VariationalState {
    pub fn new(kind: AnsatzKind, theta: Vec<f64>) -> Result<Self> {
        if let AnsatzKind::Rbm { n_visible, n_hidden } = kind {
            if n_visible == 0 || n_visible > crate::spin_model::MAX_SITES || n_hidden == 0 {
                return Err(Error::InvalidConfig(format!(
                    "RBM needs 1..={} visible and at least one hidden unit (got {n_visible}, {n_hidden})",
                    crate::spin_model::MAX_SITES
                )));
            }
        }
        if theta.len() != kind.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} expects {} parameters, got {}",
                kind,
                kind.n_params(),
                theta.len()
            )));
        }
        if let Some(k) = theta.iter().position(|t| !t.is_finite()) {
            return Err(Error::NumericDomain(format!("parameter {k} is {}", theta[k])));
        }
        Ok(Self { kind, theta })
    }

    pub fn direct(alpha: C64, beta: C64) -> Result<Self> {
        Self::new(AnsatzKind::DirectTwoParameter, vec![alpha.re, alpha.im, beta.re, beta.im])
    }

    /// RBM with every parameter drawn i.i.d. from `N(0, std²)`.
    pub fn rbm_random<R: Rng + ?Sized>(n_visible: usize, n_hidden: usize, std: f64, rng: &mut R) -> Result<Self> {
        let kind = AnsatzKind::Rbm { n_visible, n_hidden };
        let normal = Normal::new(0.0, std).map_err(|e| Error::NumericDomain(e.to_string()))?;
        let theta = (0..kind.n_params()).map(|_| normal.sample(rng)).collect();
        Self::new(kind, theta)
    }

    pub fn rbm_zeros(n_visible: usize, n_hidden: usize) -> Result<Self> {
        let kind = AnsatzKind::Rbm { n_visible, n_hidden };
        Self::new(kind, vec![0.0; kind.n_params()])
    }

    pub fn kind(&self) -> AnsatzKind {
        self.kind
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.kind, theta)
    }

    #[inline]
    fn cparam(&self, c: usize) -> C64 {
        C64::new(self.theta[2 * c], self.theta[2 * c + 1])
    }

    fn rbm_hidden_angles(&self, s: &SpinConfiguration, n_visible: usize, n_hidden: usize) -> Vec<C64> {
        let w0 = n_visible + n_hidden;
        (0..n_hidden)
            .map(|j| {
                let mut acc = self.cparam(n_visible + j);
                let row = w0 + j * n_visible;
                for i in 0..n_visible {
                    acc += self.cparam(row + i) * s.spin(i);
                }
                acc
            })
            .collect()
    }

    fn rbm_visible_factor(&self, s: &SpinConfiguration, n_visible: usize) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for i in 0..n_visible {
            acc += self.cparam(i) * s.spin(i);
        }
        acc.exp()
    }
}

fn finite_or_err(z: C64, what: &str) -> Result<C64> {
    if z.re.is_finite() && z.im.is_finite() {
        Ok(z)
    } else {
        Err(Error::NumericDomain(format!("{what} evaluated to {z}")))
    }
}

impl Wavefunction for VariationalState {
    fn n_sites(&self) -> usize {
        self.kind.n_sites()
    }

    fn n_params(&self) -> usize {
        self.kind.n_params()
    }

    fn amplitude(&self, s: &SpinConfiguration) -> Result<C64> {
        self.check_shape(s)?;
        let psi = match self.kind {
            AnsatzKind::DirectTwoParameter => {
                if s.bit(0) == 1 {
                    self.cparam(0)
                } else {
                    self.cparam(1)
                }
            }
            AnsatzKind::Rbm { n_visible, n_hidden } => {
                let angles = self.rbm_hidden_angles(s, n_visible, n_hidden);
                let hidden: C64 = angles.iter().map(|t| 2.0 * t.cosh()).product();
                self.rbm_visible_factor(s, n_visible) * hidden
            }
        };
        finite_or_err(psi, "amplitude")
    }

    fn evaluate(&self, s: &SpinConfiguration) -> Result<AmplitudeAndGradient> {
        self.check_shape(s)?;
        let zero = C64::new(0.0, 0.0);
        let i = C64::new(0.0, 1.0);
        match self.kind {
            AnsatzKind::DirectTwoParameter => {
                let one = C64::new(1.0, 0.0);
                let (psi, grad_psi) = if s.bit(0) == 1 {
                    (self.cparam(0), vec![one, i, zero, zero])
                } else {
                    (self.cparam(1), vec![zero, zero, one, i])
                };
                Ok(AmplitudeAndGradient { psi, grad_psi })
            }
            AnsatzKind::Rbm { n_visible, n_hidden } => {
                let angles = self.rbm_hidden_angles(s, n_visible, n_hidden);
                let cosh2: Vec<C64> = angles.iter().map(|t| 2.0 * t.cosh()).collect();
                let vis = self.rbm_visible_factor(s, n_visible);

                // Π_{l≠j} 2cosh θ_l via prefix/suffix products keeps the
                // gradient exact at roots of a single hidden factor.
                let mut prefix = vec![C64::new(1.0, 0.0); n_hidden + 1];
                for j in 0..n_hidden {
                    prefix[j + 1] = prefix[j] * cosh2[j];
                }
                let mut suffix = C64::new(1.0, 0.0);
                let mut d_hidden = vec![zero; n_hidden];
                for j in (0..n_hidden).rev() {
                    d_hidden[j] = vis * 2.0 * angles[j].sinh() * prefix[j] * suffix;
                    suffix *= cosh2[j];
                }
                let psi = finite_or_err(vis * prefix[n_hidden], "amplitude")?;

                let mut grad_psi = vec![zero; self.kind.n_params()];
                let mut put = |c: usize, d: C64| {
                    grad_psi[2 * c] = d;
                    grad_psi[2 * c + 1] = i * d;
                };
                for site in 0..n_visible {
                    put(site, s.spin(site) * psi);
                }
                let w0 = n_visible + n_hidden;
                for j in 0..n_hidden {
                    put(n_visible + j, d_hidden[j]);
                    for site in 0..n_visible {
                        put(w0 + j * n_visible + site, s.spin(site) * d_hidden[j]);
                    }
                }
                if grad_psi.iter().any(|g| !g.re.is_finite() || !g.im.is_finite()) {
                    return Err(Error::NumericDomain("non-finite amplitude gradient".into()));
                }
                Ok(AmplitudeAndGradient { psi, grad_psi })
            }
        }
    }
}

/// A wavefunction multiplied by a global constant, `ψ(s) → c·ψ(s)`.
#[derive(Clone, Debug)]
pub struct ScaledWavefunction<'a, W: Wavefunction> {
    pub inner: &'a W,
    pub factor: C64,
}

impl<W: Wavefunction> Wavefunction for ScaledWavefunction<'_, W> {
    fn n_sites(&self) -> usize {
        self.inner.n_sites()
    }

    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn amplitude(&self, s: &SpinConfiguration) -> Result<C64> {
        Ok(self.factor * self.inner.amplitude(s)?)
    }

    fn evaluate(&self, s: &SpinConfiguration) -> Result<AmplitudeAndGradient> {
        let mut ag = self.inner.evaluate(s)?;
        ag.psi *= self.factor;
        ag.grad_psi.iter_mut().for_each(|g| *g *= self.factor);
        Ok(ag)
    }
}

/// Central-difference gradient `(ψ(θ + h e_k) − ψ(θ − h e_k)) / 2h`.
pub fn finite_difference_gradient(state: &VariationalState, s: &SpinConfiguration, h: f64) -> Result<Vec<C64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {h}")));
    }
    let mut theta = state.theta().to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let t0 = theta[k];
        theta[k] = t0 + h;
        let plus = state.with_theta(theta.clone())?.amplitude(s)?;
        theta[k] = t0 - h;
        let minus = state.with_theta(theta.clone())?.amplitude(s)?;
        theta[k] = t0;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}
