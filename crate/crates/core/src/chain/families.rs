//! Built-in parameterised families.

use serde::{Deserialize, Serialize};

use super::{ChainSpec, DriftProfile, Family, JumpLaw, M3Mode};
use crate::error::{Error, Result};

fn law(pairs: &[(i64, f64)], x: u64) -> JumpLaw {
    JumpLaw::from_pairs(pairs)
        .unwrap_or_else(|e| panic!("built-in family produced an invalid law at {x}: {e}"))
}

fn check_mu_b(mu: f64, b: f64) -> Result<()> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(Error::param(format!("b must lie in (0,1], got {b}")));
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::param(format!("mu must be positive, got {mu}")));
    }
    Ok(())
}

fn clip_point(mu: f64, b: f64) -> u64 {
    ((2.0 * mu / b).ceil() as u64).max(1)
}

pub(super) fn birth_death_law(mu: f64, b: f64, sign: f64, clip: u64, x: u64) -> JumpLaw {
    if x == 0 {
        return law(&[(1, b / 2.0), (0, 1.0 - b / 2.0)], x);
    }
    let d = sign * mu / x.max(clip) as f64;
    law(&[(1, (b - d) / 2.0), (-1, (b + d) / 2.0), (0, 1.0 - b)], x)
}

/// Nearest-neighbour chain with m₁(x) = −μ/x and m₂(x) = b for x ≥ ⌈2μ/b⌉.
///
/// Below the clip point x_c = ⌈2μ/b⌉ the law is frozen at its value at x_c.
/// The boundary set is B = [0, x_c].
pub fn make_birth_death(mu: f64, b: f64) -> Result<ChainSpec> {
    check_mu_b(mu, b)?;
    let clip = clip_point(mu, b);
    let profile = DriftProfile::new(mu, b, M3Mode::Converges(0.0), 1.0, 1.0)?;
    Ok(ChainSpec::from_family(
        Family::BirthDeath {
            mu,
            b,
            sign: 1.0,
            clip,
        },
        profile,
        clip,
        "birth_death",
    ))
}

/// Mirror of [`make_birth_death`] with drift +μ/x; transient when 2μ > b.
///
/// The declared profile carries −μ.
pub fn make_birth_death_up(mu: f64, b: f64) -> Result<ChainSpec> {
    check_mu_b(mu, b)?;
    let clip = clip_point(mu, b);
    let profile = DriftProfile::new(-mu, b, M3Mode::Converges(0.0), 1.0, 1.0)?;
    Ok(ChainSpec::from_family(
        Family::BirthDeath {
            mu,
            b,
            sign: -1.0,
            clip,
        },
        profile,
        clip,
        "birth_death_up",
    ))
}

/// Weights (q₋, q₁, q₂) on offsets (−1, +1, +2) matching the first three moments.
pub(crate) fn skip_free_weights(mu: f64, b: f64, m3: f64, x: f64) -> (f64, f64, f64) {
    let m1 = -mu / x;
    let q2 = (m3 - m1) / 6.0;
    let q1 = (b + m1 - 6.0 * q2) / 2.0;
    let qm = b - q1 - 4.0 * q2;
    (qm, q1, q2)
}

fn skip_free_feasible(mu: f64, b: f64, m3: f64, x: f64) -> std::result::Result<(), String> {
    let (qm, q1, q2) = skip_free_weights(mu, b, m3, x);
    let tol = 1e-15;
    if qm < -tol || q1 < -tol || q2 < -tol {
        return Err(format!(
            "negative weight (q-={qm:.3e}, q1={q1:.3e}, q2={q2:.3e}) for m3={m3}"
        ));
    }
    if qm + q1 + q2 > 1.0 + tol {
        return Err(format!("weights sum to {} > 1 for m3={m3}", qm + q1 + q2));
    }
    Ok(())
}

/// Feasible for all large x iff 0 ≤ m₃ < b and m₃ ≥ 2(b − 1).
fn asymptotically_feasible(b: f64, m3: f64) -> bool {
    m3 >= 0.0 && m3 < b && m3 >= 2.0 * (b - 1.0)
}

pub(super) fn left_skip_free_law(
    mu: f64,
    b: f64,
    m3_low: f64,
    m3_high: f64,
    clip: u64,
    x: u64,
) -> JumpLaw {
    if x == 0 {
        return law(&[(1, b / 2.0), (0, 1.0 - b / 2.0)], x);
    }
    let m3 = if x.is_multiple_of(2) { m3_low } else { m3_high };
    let (qm, q1, q2) = skip_free_weights(mu, b, m3, x.max(clip) as f64);
    let stay = (1.0 - qm - q1 - q2).max(0.0);
    law(&[(-1, qm), (1, q1), (2, q2), (0, stay)], x)
}

/// Chain with jumps in {−1, 0, +1, +2} whose third moment alternates between
/// `m3_low` (even states) and `m3_high` (odd states).
///
/// Moments are exact from the computed clip point on; below it the weights of
/// the clip point are reused. The boundary set is B = [0, clip].
pub fn make_left_skip_free(mu: f64, b: f64, m3_low: f64, m3_high: f64) -> Result<ChainSpec> {
    check_mu_b(mu, b)?;
    for m3 in [m3_low, m3_high] {
        if !m3.is_finite() {
            return Err(Error::param("third-moment targets must be finite"));
        }
        if !asymptotically_feasible(b, m3) {
            let first = (1u64..)
                .take(1 << 20)
                .find_map(|x| {
                    skip_free_feasible(mu, b, m3, x as f64)
                        .err()
                        .map(|r| (x, r))
                })
                .unwrap_or((1, format!("m3={m3} infeasible for large states")));
            return Err(Error::Infeasible {
                state: first.0,
                reason: first.1,
            });
        }
    }
    // Each constraint is violated only below a threshold of order μ/b.
    let scan = (64.0 * mu / b).ceil() as u64
        + [m3_low, m3_high]
            .iter()
            .map(|&m| (2.0 * mu / (b - m)).ceil() as u64)
            .max()
            .unwrap_or(0)
        + 2;
    let mut clip = 1;
    for x in 1..=scan {
        let bad = [m3_low, m3_high]
            .iter()
            .any(|&m| skip_free_feasible(mu, b, m, x as f64).is_err());
        if bad {
            clip = x + 1;
        }
    }
    let m3_mode = if m3_low == m3_high {
        M3Mode::Converges(m3_low)
    } else {
        M3Mode::Oscillates
    };
    let profile = DriftProfile::new(mu, b, m3_mode, 1.0, 1.0)?;
    Ok(ChainSpec::from_family(
        Family::LeftSkipFree {
            mu,
            b,
            m3_low,
            m3_high,
            clip,
        },
        profile,
        clip,
        "left_skip_free",
    ))
}

/// Default (μ, b) of the upward birth-death base for the origin-jump chain.
///
/// With f = m₂/x the full chain has m₁ ≤ f and the transience ratio
/// condition only for 2b < μ ≤ 3b. Cycle lengths then have tail index
/// b/(2μ + b), so μ near 2b gives the most returns to B per run.
pub const ORIGIN_JUMP_BASE: (f64, f64) = (2.2, 1.0);

/// Choice of f(x) in the origin-jump probability f(x)p(x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpFactor {
    M2OverX,
}

/// Choice of p(x) in the origin-jump probability f(x)p(x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpWeight {
    OneOverOnePlusX,
}

/// Returns the law and whether f(x)p(x) exceeded 1.
pub(super) fn origin_jump_law(
    base: &ChainSpec,
    factor: JumpFactor,
    weight: JumpWeight,
    x: u64,
) -> (JumpLaw, bool) {
    use super::Chain;
    let base_law = base.law(x).into_owned();
    if x == 0 {
        return (base_law, false);
    }
    let xf = x as f64;
    let f = match factor {
        JumpFactor::M2OverX => base_law.moment(2) / xf,
    };
    let p = match weight {
        JumpWeight::OneOverOnePlusX => 1.0 / (1.0 + xf),
    };
    let raw = f * p;
    let q = raw.min(1.0);
    let mut pairs: Vec<(i64, f64)> = base_law.iter().map(|(o, w)| (o, (1.0 - q) * w)).collect();
    pairs.push((-(x as i64), q));
    (law(&pairs, x), raw > 1.0)
}

/// Adds a jump to the origin with probability f(x)p(x) to a transient base.
///
/// The remaining mass is the base law scaled by 1 − f(x)p(x). Asymptotically
/// m₁ gains −b/x and m₂ gains b, so the declared profile is
/// (μ_base + b_base, 2·b_base).
pub fn make_origin_jump_chain(
    base: ChainSpec,
    factor: JumpFactor,
    weight: JumpWeight,
) -> Result<ChainSpec> {
    let p = base.profile;
    // 2x·m₁/m₂ → −2μ/b for the base.
    let limit = -2.0 * p.mu / p.b;
    if limit <= 1.0 {
        return Err(Error::param(format!(
            "base chain must have 2x·m1/m2 ≥ 1+ε asymptotically; its limit is {limit}"
        )));
    }
    let clipped: Vec<u64> = (1..=1000u64)
        .filter(|&x| origin_jump_law(&base, factor, weight, x).1)
        .collect();
    let profile = DriftProfile::new(
        p.mu + p.b,
        2.0 * p.b,
        M3Mode::Undeclared,
        p.delta,
        p.a_trunc,
    )?;
    let x0 = base.boundary_x0;
    let mut spec = ChainSpec::from_family(
        Family::OriginJump {
            base: Box::new(base),
            factor,
            weight,
        },
        profile,
        x0,
        "origin_jump",
    );
    spec.clipped = clipped;
    Ok(spec)
}

/// Largest up-jump at state x for the heavy-tailed family.
pub(crate) fn heavy_cap(x: u64) -> u64 {
    (10 * (x + 1)).min(100_000)
}

pub(super) fn heavy_up_law(tail_index: f64, x: u64) -> JumpLaw {
    let cap = heavy_cap(x);
    let w: Vec<f64> = (1..=cap)
        .map(|k| (k as f64).powf(-(tail_index + 1.0)))
        .collect();
    let z: f64 = w.iter().sum();
    let mut pairs: Vec<(i64, f64)> = w
        .iter()
        .enumerate()
        .map(|(k, wk)| (k as i64 + 1, 0.5 * wk / z))
        .collect();
    pairs.push((if x == 0 { 0 } else { -1 }, 0.5));
    law(&pairs, x)
}

/// Up-jumps with a Pareto(`tail_index`) profile truncated at 10(x+1), down-jumps −1.
///
/// The truncation keeps each law finite while E|ξ(x)|^s grows without bound in
/// x whenever s > `tail_index`. The declared profile (μ=2, b=1) is nominal.
pub fn make_heavy_up_jump(tail_index: f64) -> Result<ChainSpec> {
    if !(tail_index > 0.0 && tail_index.is_finite()) {
        return Err(Error::param(format!(
            "tail index must be positive, got {tail_index}"
        )));
    }
    let profile = DriftProfile::new(2.0, 1.0, M3Mode::Undeclared, 1.0, 1.0)?;
    Ok(ChainSpec::from_family(
        Family::HeavyUp { tail_index },
        profile,
        4,
        "heavy_up_jump",
    ))
}

#[cfg(test)]
mod tests {
    use super::super::Chain;
    use super::*;

    #[test]
    fn birth_death_examples() {
        let c = make_birth_death(1.0, 1.0).unwrap();
        let l = c.law(10);
        assert!((l.prob(1) - 0.45).abs() < 1e-15);
        assert!((l.prob(-1) - 0.55).abs() < 1e-15);
        assert_eq!(l.prob(0), 0.0);
        let l0 = c.law(0);
        assert_eq!(l0.prob(1), 0.5);
        assert_eq!(l0.prob(-1), 0.0);
        assert_eq!(l0.prob(0), 0.5);

        let c = make_birth_death(2.0, 1.0).unwrap();
        assert_eq!(c.boundary_x0, 4);
        let l = c.law(4);
        assert_eq!(l.prob(1), 0.25);
        assert_eq!(l.prob(-1), 0.75);
    }

    #[test]
    fn birth_death_rejects() {
        assert!(make_birth_death(1.0, 1.5).is_err());
        assert!(make_birth_death(0.0, 1.0).is_err());
        assert!(make_birth_death(-1.0, 0.5).is_err());
    }

    #[test]
    fn birth_death_exact_drift() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        for x in 4..200u64 {
            let l = c.law(x);
            assert!((x as f64 * l.moment(1) + 2.0).abs() < 1e-13);
            assert!((l.moment(2) - 1.0).abs() < 1e-15);
        }
        let up = make_birth_death_up(2.0, 1.0).unwrap();
        assert_eq!(up.profile.mu, -2.0);
        assert!((100.0 * up.law(100).moment(1) - 2.0).abs() < 1e-13);
    }

    #[test]
    fn skip_free_weights_solve_system() {
        let (mu, b, m3, x) = (2.0, 1.0, 0.75, 37.0);
        let (qm, q1, q2) = skip_free_weights(mu, b, m3, x);
        assert!((-qm + q1 + 2.0 * q2 + mu / x).abs() < 1e-15);
        assert!((qm + q1 + 4.0 * q2 - b).abs() < 1e-15);
        assert!((-qm + q1 + 8.0 * q2 - m3).abs() < 1e-15);
    }

    #[test]
    fn left_skip_free_clip_and_infeasible() {
        let c = make_left_skip_free(2.0, 1.0, 0.25, 0.75).unwrap();
        assert_eq!(c.boundary_x0, 16);
        assert_eq!(c.profile.m3_mode, M3Mode::Oscillates);
        match make_left_skip_free(2.0, 1.0, 0.5, 1.5) {
            Err(Error::Infeasible { state, .. }) => assert_eq!(state, 1),
            other => panic!("expected infeasible, got {other:?}"),
        }
        let c = make_left_skip_free(2.0, 1.0, 0.5, 0.5).unwrap();
        assert_eq!(c.profile.m3_mode, M3Mode::Converges(0.5));
    }

    #[test]
    fn origin_jump_mass() {
        let base = make_birth_death_up(3.0, 1.0).unwrap();
        let c =
            make_origin_jump_chain(base, JumpFactor::M2OverX, JumpWeight::OneOverOnePlusX).unwrap();
        assert!(c.clipped_states().is_empty());
        let x = 1000u64;
        let q = c.law(x).prob(-(x as i64));
        assert!((q * (x as f64).powi(2) - 1.0).abs() < 2e-3);
        assert!(make_origin_jump_chain(
            make_birth_death(2.0, 1.0).unwrap(),
            JumpFactor::M2OverX,
            JumpWeight::OneOverOnePlusX
        )
        .is_err());
    }

    #[test]
    fn heavy_law_is_valid() {
        let c = make_heavy_up_jump(2.5).unwrap();
        for x in [0u64, 1, 7, 100] {
            let l = c.law(x);
            assert_eq!(l.max_offset() as u64, heavy_cap(x));
            assert!(l.min_offset() >= -(x as i64));
        }
    }
}
