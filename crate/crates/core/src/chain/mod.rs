//! Lattice Markov chains on ℤ⁺ described by their state-dependent jump law.
//!
//! A chain is specified by the distribution of the increment ξ(x) at every
//! state x. Built-in families are parameterised so that the first two jump
//! moments follow the critical Lamperti profile m₁(x) ∼ −μ/x, m₂(x) → b.

mod families;
mod moments;
mod validate;

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use families::{
    make_birth_death, make_birth_death_up, make_heavy_up_jump, make_left_skip_free,
    make_origin_jump_chain, JumpFactor, JumpWeight, ORIGIN_JUMP_BASE,
};
pub use moments::{moments, MomentTable};
pub use validate::{
    exersion_check, rec3_ratio, truncation_irreducibility, validate_assumptions, Check,
    CheckStatus, Diagnostics,
};

/// Tolerance on the total mass of a jump law.
pub const LAW_SUM_TOL: f64 = 1e-12;

/// Distribution of the increment ξ(x) at a single state.
///
/// Offsets are distinct; zero-probability offsets are dropped on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpLaw {
    offsets: Vec<i64>,
    probs: Vec<f64>,
}

impl JumpLaw {
    pub fn try_new(offsets: Vec<i64>, probs: Vec<f64>) -> std::result::Result<Self, String> {
        if offsets.len() != probs.len() {
            return Err(format!(
                "{} offsets but {} probabilities",
                offsets.len(),
                probs.len()
            ));
        }
        let mut pairs: Vec<(i64, f64)> = Vec::with_capacity(offsets.len());
        let mut total = 0.0;
        for (&o, &p) in offsets.iter().zip(&probs) {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("probability {p} at offset {o} outside [0,1]"));
            }
            total += p;
            pairs.push((o, p));
        }
        pairs.sort_by_key(|&(o, _)| o);
        if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(format!("offset {} repeated", w[0].0));
        }
        if (total - 1.0).abs() > LAW_SUM_TOL {
            return Err(format!("probabilities sum to {total}"));
        }
        pairs.retain(|&(_, p)| p > 0.0);
        let (offsets, probs) = pairs.into_iter().unzip();
        Ok(JumpLaw { offsets, probs })
    }

    /// Builds a law from `(offset, probability)` pairs, merging duplicates.
    pub fn from_pairs(pairs: &[(i64, f64)]) -> std::result::Result<Self, String> {
        let mut sorted = pairs.to_vec();
        sorted.sort_by_key(|&(o, _)| o);
        let mut merged: Vec<(i64, f64)> = Vec::with_capacity(sorted.len());
        for (o, p) in sorted {
            match merged.last_mut() {
                Some(e) if e.0 == o => e.1 += p,
                _ => merged.push((o, p)),
            }
        }
        let (o, p) = merged.into_iter().unzip();
        Self::try_new(o, p)
    }

    pub fn offsets(&self) -> &[i64] {
        &self.offsets
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.offsets.iter().copied().zip(self.probs.iter().copied())
    }

    /// P{ξ = offset}.
    pub fn prob(&self, offset: i64) -> f64 {
        self.offsets
            .binary_search(&offset)
            .map_or(0.0, |i| self.probs[i])
    }

    /// E ξ^k.
    pub fn moment(&self, k: i32) -> f64 {
        self.iter().map(|(o, p)| p * (o as f64).powi(k)).sum()
    }

    /// E |ξ|^s.
    pub fn abs_moment(&self, s: f64) -> f64 {
        self.iter().map(|(o, p)| p * (o as f64).abs().powf(s)).sum()
    }

    /// P{ξ ≤ t}.
    pub fn cdf(&self, t: f64) -> f64 {
        self.iter()
            .filter(|&(o, _)| (o as f64) <= t)
            .map(|(_, p)| p)
            .sum()
    }

    pub fn min_offset(&self) -> i64 {
        self.offsets.first().copied().unwrap_or(0)
    }

    pub fn max_offset(&self) -> i64 {
        self.offsets.last().copied().unwrap_or(0)
    }
}

/// Behaviour of the third jump moment m₃(x) as x → ∞.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "m3")]
pub enum M3Mode {
    Converges(f64),
    Oscillates,
    Undeclared,
}

/// Declared asymptotic moment profile: m₁(x) ∼ −μ/x, m₂(x) → b.
///
/// `mu` is signed; transient families with drift +μ/x carry a negative `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftProfile {
    pub mu: f64,
    pub b: f64,
    pub m3_mode: M3Mode,
    pub delta: f64,
    #[serde(rename = "A")]
    pub a_trunc: f64,
}

impl DriftProfile {
    pub fn new(mu: f64, b: f64, m3_mode: M3Mode, delta: f64, a_trunc: f64) -> Result<Self> {
        if !(mu.is_finite() && b.is_finite() && delta.is_finite() && a_trunc.is_finite()) {
            return Err(Error::param("drift profile entries must be finite"));
        }
        if b <= 0.0 {
            return Err(Error::param(format!("b must be positive, got {b}")));
        }
        if delta <= 0.0 {
            return Err(Error::param(format!("delta must be positive, got {delta}")));
        }
        if a_trunc <= 0.0 {
            return Err(Error::param(format!("A must be positive, got {a_trunc}")));
        }
        Ok(DriftProfile {
            mu,
            b,
            m3_mode,
            delta,
            a_trunc,
        })
    }

    /// 2μ > b: the regime with a regularly varying stationary tail.
    pub fn tail_regime(&self) -> bool {
        2.0 * self.mu > self.b
    }

    /// ρ = 2μ/b + 1.
    pub fn rho(&self) -> f64 {
        2.0 * self.mu / self.b + 1.0
    }

    /// C₀ = m₃(ρ−2)/(3b), when m₃ converges.
    pub fn c0(&self) -> Option<f64> {
        match self.m3_mode {
            M3Mode::Converges(m3) => Some(m3 * (self.rho() - 2.0) / (3.0 * self.b)),
            _ => None,
        }
    }
}

/// Anything with a jump law at every state of ℤ⁺.
pub trait Chain: Send + Sync {
    fn law(&self, x: u64) -> Cow<'_, JumpLaw>;

    /// Right endpoint x₀ of the boundary set B = [0, x₀].
    fn boundary(&self) -> u64;

    fn tag(&self) -> &str;
}

type LawFn = dyn Fn(u64) -> JumpLaw + Send + Sync;

#[derive(Clone)]
pub(crate) enum Family {
    BirthDeath {
        mu: f64,
        b: f64,
        sign: f64,
        clip: u64,
    },
    LeftSkipFree {
        mu: f64,
        b: f64,
        m3_low: f64,
        m3_high: f64,
        clip: u64,
    },
    OriginJump {
        base: Box<ChainSpec>,
        factor: JumpFactor,
        weight: JumpWeight,
    },
    HeavyUp {
        tail_index: f64,
    },
    Custom(Arc<LawFn>),
}

/// A chain on ℤ⁺ with its declared drift profile and boundary set.
///
/// Laws up to the materialised window are stored explicitly; beyond it the
/// family formula is evaluated on demand.
#[derive(Clone)]
pub struct ChainSpec {
    family: Family,
    pub profile: DriftProfile,
    pub boundary_x0: u64,
    pub family_tag: String,
    clipped: Vec<u64>,
    cache: Arc<Vec<JumpLaw>>,
}

impl fmt::Debug for ChainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChainSpec")
            .field("family_tag", &self.family_tag)
            .field("profile", &self.profile)
            .field("boundary_x0", &self.boundary_x0)
            .field("window", &self.cache.len())
            .finish()
    }
}

impl ChainSpec {
    pub(crate) fn from_family(
        family: Family,
        profile: DriftProfile,
        boundary_x0: u64,
        family_tag: impl Into<String>,
    ) -> Self {
        ChainSpec {
            family,
            profile,
            boundary_x0,
            family_tag: family_tag.into(),
            clipped: Vec::new(),
            cache: Arc::new(Vec::new()),
        }
    }

    /// A chain defined by an arbitrary law function.
    pub fn custom<F>(
        tag: impl Into<String>,
        profile: DriftProfile,
        boundary_x0: u64,
        law: F,
    ) -> Self
    where
        F: Fn(u64) -> JumpLaw + Send + Sync + 'static,
    {
        Self::from_family(Family::Custom(Arc::new(law)), profile, boundary_x0, tag)
    }

    /// Stores laws 0..=n explicitly, checking that none leaves ℤ⁺.
    pub fn with_window(mut self, n: u64) -> Result<Self> {
        let laws = (0..=n)
            .map(|x| {
                let law = self.family_law(x);
                if law.min_offset() < -(x as i64) {
                    return Err(Error::InvalidLaw {
                        state: x,
                        reason: format!("offset {} leaves ℤ⁺", law.min_offset()),
                    });
                }
                Ok(law)
            })
            .collect::<Result<Vec<_>>>()?;
        self.cache = Arc::new(laws);
        Ok(self)
    }

    pub fn window(&self) -> u64 {
        self.cache.len() as u64
    }

    /// States where the origin-jump probability had to be clipped to 1.
    pub fn clipped_states(&self) -> &[u64] {
        &self.clipped
    }

    fn family_law(&self, x: u64) -> JumpLaw {
        match &self.family {
            Family::BirthDeath { mu, b, sign, clip } => {
                families::birth_death_law(*mu, *b, *sign, *clip, x)
            }
            Family::LeftSkipFree {
                mu,
                b,
                m3_low,
                m3_high,
                clip,
            } => families::left_skip_free_law(*mu, *b, *m3_low, *m3_high, *clip, x),
            Family::OriginJump {
                base,
                factor,
                weight,
            } => families::origin_jump_law(base, *factor, *weight, x).0,
            Family::HeavyUp { tail_index } => families::heavy_up_law(*tail_index, x),
            Family::Custom(f) => f(x),
        }
    }
}

impl Chain for ChainSpec {
    fn law(&self, x: u64) -> Cow<'_, JumpLaw> {
        match self.cache.get(x as usize) {
            Some(l) => Cow::Borrowed(l),
            None => Cow::Owned(self.family_law(x)),
        }
    }

    fn boundary(&self) -> u64 {
        self.boundary_x0
    }

    fn tag(&self) -> &str {
        &self.family_tag
    }
}

impl<C: Chain + ?Sized> Chain for &C {
    fn law(&self, x: u64) -> Cow<'_, JumpLaw> {
        (**self).law(x)
    }
    fn boundary(&self) -> u64 {
        (**self).boundary()
    }
    fn tag(&self) -> &str {
        (**self).tag()
    }
}

/// Largest upward jump among states 0..=n.
pub fn max_up_jump<C: Chain + ?Sized>(chain: &C, n: u64) -> u64 {
    (0..=n)
        .map(|x| chain.law(x).max_offset().max(0) as u64)
        .max()
        .unwrap_or(0)
}
