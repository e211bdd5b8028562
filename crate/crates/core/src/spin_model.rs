//! Spin-1/2 chains in the σᶻ computational basis.
//!
//! Configurations are stored as bit strings: bit `i` of the integer index is
//! site `i`, with bit value 0 meaning spin up (+1) and 1 meaning spin down
//! (−1). All Hamiltonians act on open chains and are matrix-free: a row of
//! the Hamiltonian is produced on demand by [`Hamiltonian::connections`].

use nalgebra::DMatrix;

use crate::{Error, Result, C64};

/// Largest system for which [`Hamiltonian::dense_matrix`] builds a matrix
/// unless the caller overrides the cap.
pub const DEFAULT_DENSE_CAP: usize = 14;

/// Bit-string storage limits the chain length.
pub const MAX_SITES: usize = 63;

/// A computational-basis label `|s₁ … s_N⟩`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpinConfiguration {
    n_sites: usize,
    bits: u64,
}

impl SpinConfiguration {
    pub fn from_index(n_sites: usize, index: u64) -> Result<Self> {
        if n_sites == 0 || n_sites > MAX_SITES {
            return Err(Error::InvalidConfig(format!(
                "site count {n_sites} outside 1..={MAX_SITES}"
            )));
        }
        if index >> n_sites != 0 {
            return Err(Error::IndexOutOfRange { index: index as usize, bound: 1 << n_sites });
        }
        Ok(Self { n_sites, bits: index })
    }

    /// Builds a configuration from spin values in `{+1, −1}`.
    pub fn from_spins(spins: &[i8]) -> Result<Self> {
        let mut bits = 0u64;
        for (i, &s) in spins.iter().enumerate() {
            match s {
                1 => {}
                -1 => bits |= 1 << i,
                other => {
                    return Err(Error::InvalidConfig(format!("spin value {other} at site {i}")))
                }
            }
        }
        Self::from_index(spins.len(), bits)
    }

    pub fn all_up(n_sites: usize) -> Result<Self> {
        Self::from_index(n_sites, 0)
    }

    #[inline]
    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    #[inline]
    pub fn index(&self) -> u64 {
        self.bits
    }

    /// Spin value at `site` as ±1.
    #[inline]
    pub fn spin(&self, site: usize) -> f64 {
        if (self.bits >> site) & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Local basis index at `site`: 0 for up, 1 for down.
    #[inline]
    pub fn bit(&self, site: usize) -> usize {
        ((self.bits >> site) & 1) as usize
    }

    pub fn spins(&self) -> Vec<i8> {
        (0..self.n_sites).map(|i| self.spin(i) as i8).collect()
    }

    #[inline]
    pub fn flipped(&self, site: usize) -> Self {
        Self { n_sites: self.n_sites, bits: self.bits ^ (1 << site) }
    }

    /// Builds a configuration from per-site basis indices (0 = up, 1 = down).
    pub fn from_bits(bits: &[usize]) -> Result<Self> {
        let mut index = 0u64;
        for (i, &b) in bits.iter().enumerate() {
            if b > 1 {
                return Err(Error::IndexOutOfRange { index: b, bound: 2 });
            }
            index |= (b as u64) << i;
        }
        Self::from_index(bits.len(), index)
    }

    /// Every configuration of an `n_sites` chain in index order.
    pub fn enumerate(n_sites: usize) -> impl Iterator<Item = SpinConfiguration> {
        (0..1u64 << n_sites).map(move |bits| SpinConfiguration { n_sites, bits })
    }
}

/// Nonzero entries `(s′, H_{s,s′})` of one Hamiltonian row, diagonal first.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalConnections {
    pub entries: Vec<(SpinConfiguration, C64)>,
}

impl LocalConnections {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `Σ_{s′} H_{s,s′} ψ(s′)` for an arbitrary amplitude function.
    pub fn apply<F: FnMut(&SpinConfiguration) -> C64>(&self, mut psi: F) -> C64 {
        self.entries.iter().map(|(sp, h)| h * psi(sp)).sum()
    }
}

/// Open-chain spin Hamiltonians.
#[derive(Clone, Debug, PartialEq)]
pub enum Hamiltonian {
    /// `H = σʸ` on a single site.
    SingleSpinY,
    /// `H = −J Σ σᶻᵢσᶻᵢ₊₁ + g Σ σʸᵢ`.
    TiltedIsing { n_sites: usize, j: f64, g: f64 },
    /// `H = −J Σ σᶻᵢσᶻᵢ₊₁ + g Σ σˣᵢ`.
    Tfim { n_sites: usize, j: f64, g: f64 },
}

impl Hamiltonian {
    pub fn tfim(n_sites: usize, j: f64, g: f64) -> Result<Self> {
        let h = Hamiltonian::Tfim { n_sites, j, g };
        h.validate()?;
        Ok(h)
    }

    pub fn tilted_ising(n_sites: usize, j: f64, g: f64) -> Result<Self> {
        let h = Hamiltonian::TiltedIsing { n_sites, j, g };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Hamiltonian::SingleSpinY => Ok(()),
            Hamiltonian::TiltedIsing { n_sites, j, g } | Hamiltonian::Tfim { n_sites, j, g } => {
                if n_sites == 0 || n_sites > MAX_SITES {
                    return Err(Error::InvalidConfig(format!(
                        "site count {n_sites} outside 1..={MAX_SITES}"
                    )));
                }
                if !j.is_finite() || !g.is_finite() {
                    return Err(Error::NumericDomain(format!("couplings J={j}, g={g}")));
                }
                Ok(())
            }
        }
    }

    pub fn n_sites(&self) -> usize {
        match *self {
            Hamiltonian::SingleSpinY => 1,
            Hamiltonian::TiltedIsing { n_sites, .. } | Hamiltonian::Tfim { n_sites, .. } => n_sites,
        }
    }

    fn check(&self, s: &SpinConfiguration) -> Result<()> {
        if s.n_sites() != self.n_sites() {
            return Err(Error::ConfigurationShape { expected: self.n_sites(), got: s.n_sites() });
        }
        Ok(())
    }

    fn zz_energy(s: &SpinConfiguration, j: f64) -> f64 {
        let bond_sum: f64 = (0..s.n_sites().saturating_sub(1)).map(|i| s.spin(i) * s.spin(i + 1)).sum();
        -j * bond_sum
    }

    /// Row `s` of the Hamiltonian: the diagonal entry followed by one entry
    /// per single-spin flip.
    pub fn connections(&self, s: &SpinConfiguration) -> Result<LocalConnections> {
        self.check(s)?;
        let n = s.n_sites();
        let mut entries = Vec::with_capacity(n + 1);
        match *self {
            Hamiltonian::SingleSpinY => {
                entries.push((*s, C64::new(0.0, 0.0)));
                entries.push((s.flipped(0), sigma_y_element(s, 0)));
            }
            Hamiltonian::TiltedIsing { j, g, .. } => {
                entries.push((*s, C64::new(Self::zz_energy(s, j), 0.0)));
                if g != 0.0 {
                    for i in 0..n {
                        entries.push((s.flipped(i), g * sigma_y_element(s, i)));
                    }
                }
            }
            Hamiltonian::Tfim { j, g, .. } => {
                entries.push((*s, C64::new(Self::zz_energy(s, j), 0.0)));
                if g != 0.0 {
                    for i in 0..n {
                        entries.push((s.flipped(i), C64::new(g, 0.0)));
                    }
                }
            }
        }
        Ok(LocalConnections { entries })
    }

    /// Dense `2^N × 2^N` matrix for `N ≤` [`DEFAULT_DENSE_CAP`].
    pub fn dense_matrix(&self) -> Result<DMatrix<C64>> {
        self.dense_matrix_capped(DEFAULT_DENSE_CAP)
    }

    pub fn dense_matrix_capped(&self, cap: usize) -> Result<DMatrix<C64>> {
        let n = self.n_sites();
        if n > cap {
            return Err(Error::ResourceLimit { what: "dense matrix", n, cap });
        }
        let dim = 1usize << n;
        let mut m = DMatrix::<C64>::zeros(dim, dim);
        for s in SpinConfiguration::enumerate(n) {
            for (sp, h) in self.connections(&s)?.entries {
                m[(s.index() as usize, sp.index() as usize)] += h;
            }
        }
        Ok(m)
    }
}

/// `⟨s|σʸᵢ|s′⟩` with `s′ = s` flipped at site `i`: `⟨↑|σʸ|↓⟩ = −i`,
/// `⟨↓|σʸ|↑⟩ = i`.
#[inline]
fn sigma_y_element(s: &SpinConfiguration, site: usize) -> C64 {
    if s.bit(site) == 0 {
        C64::new(0.0, -1.0)
    } else {
        C64::new(0.0, 1.0)
    }
}
