//! Exact stationary distributions on a truncation window [0, N].
//!
//! Skip-free chains use the product formula; other bounded-jump chains use
//! GTH state reduction on the reflecting truncation, where jumps that would
//! leave [0, N] land on N. Both methods are subtraction-free, so tail
//! probabilities far below machine epsilon relative to π(0) keep full
//! relative accuracy.

use std::io::Write;

use serde::Serialize;

use crate::banded::Banded;
use crate::chain::{truncation_irreducibility, Chain};
use crate::error::{Error, Result};
use crate::quad;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ProductFormula,
    GlobalBalance,
}

/// π(0..=N) normalised on the window, with suffix tails.
///
/// `tail[x]` is Σ_{x<y≤N} π(y). `tail_mass_bound` estimates the mass beyond
/// N, in units of the window normalisation, from a power law fitted to the
/// local decay of π near N.
#[derive(Debug, Clone, Serialize)]
pub struct StationaryTable {
    pub probs: Vec<f64>,
    pub tail: Vec<f64>,
    pub truncation_n: u64,
    pub tail_mass_bound: f64,
    pub method: Method,
    /// ‖πP_N − π‖∞ for the reflecting truncation P_N.
    pub residual: f64,
    /// Max relative change of the corrected tail on [0, N/2] when N doubles.
    pub doubling_change: Option<f64>,
}

impl StationaryTable {
    fn new(probs: Vec<f64>, n: u64, beyond: f64, method: Method, residual: f64) -> Self {
        let mut tail = vec![0.0; probs.len()];
        for x in (0..probs.len().saturating_sub(1)).rev() {
            tail[x] = tail[x + 1] + probs[x + 1];
        }
        StationaryTable {
            probs,
            tail,
            truncation_n: n,
            tail_mass_bound: beyond,
            method,
            residual,
            doubling_change: None,
        }
    }

    /// Window tail plus the extrapolated mass beyond N.
    pub fn tail_estimate(&self, x: u64) -> f64 {
        self.tail[x as usize] + self.tail_mass_bound
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,pi,tail")?;
        for (x, (p, t)) in self.probs.iter().zip(&self.tail).enumerate() {
            writeln!(w, "{x},{p:e},{t:e}")?;
        }
        Ok(())
    }
}

/// Σ_{k>N} c·(k/N)^{−α} ≈ c·(N/(α−1) − 1/2), where c = π(N).
fn power_tail_mass(pi_n: f64, alpha: f64, n: u64) -> f64 {
    if pi_n == 0.0 {
        return 0.0;
    }
    if !(alpha > 1.0) {
        return f64::INFINITY;
    }
    pi_n * (n as f64 / (alpha - 1.0) - 0.5).max(0.0)
}

/// ‖πP_N − π‖∞ for the reflecting truncation.
pub fn balance_residual<C: Chain + ?Sized>(chain: &C, probs: &[f64]) -> f64 {
    let n = probs.len() as i64 - 1;
    let mut out = vec![0.0; probs.len()];
    for (x, &px) in probs.iter().enumerate() {
        for (o, p) in chain.law(x as u64).iter() {
            let y = (x as i64 + o).clamp(0, n) as usize;
            out[y] += px * p;
        }
    }
    out.iter()
        .zip(probs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn normalise_log(logw: &[f64]) -> Vec<f64> {
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Product formula π(x) = π(0)∏_{k=1}^{x} p₊(k−1)/p₋(k) for jumps in {−1, 0, +1}.
pub fn stationary_skip_free<C: Chain + ?Sized>(chain: &C, n: u64) -> Result<StationaryTable> {
    if n == 0 {
        return Err(Error::param("truncation N must be positive"));
    }
    let mut logw = Vec::with_capacity(n as usize + 1);
    logw.push(0.0);
    let mut p_up_prev: f64 = 0.0;
    for x in 0..=n + 1 {
        let l = chain.law(x);
        if l.min_offset() < -1 || l.max_offset() > 1 {
            return Err(Error::param(format!(
                "state {x} has jumps outside {{-1,0,1}}; product formula needs a skip-free chain"
            )));
        }
        if x >= 1 {
            let pm = l.prob(-1);
            if pm == 0.0 {
                return Err(Error::FormulaUndefined { state: x });
            }
            if x <= n {
                let prev: f64 = logw[x as usize - 1];
                logw.push(prev + p_up_prev.ln() - pm.ln());
            } else {
                // Local decay rate of π at N from the first omitted ratio.
                let probs = normalise_log(&logw);
                let ratio = p_up_prev / pm;
                let alpha = -ratio.ln() / ((n as f64 + 1.0) / n as f64).ln();
                let beyond = power_tail_mass(probs[n as usize], alpha, n);
                let residual = balance_residual(chain, &probs);
                return Ok(StationaryTable::new(
                    probs,
                    n,
                    beyond,
                    Method::ProductFormula,
                    residual,
                ));
            }
        }
        p_up_prev = l.prob(1);
    }
    unreachable!("loop returns at x = N + 1")
}

fn reflecting_band<C: Chain + ?Sized>(chain: &C, n: u64) -> Banded {
    let mut kl = 0usize;
    let mut ku = 0usize;
    for x in 0..=n {
        let l = chain.law(x);
        kl = kl.max((-l.min_offset()).max(0) as usize);
        ku = ku.max(l.max_offset().max(0) as usize);
    }
    let size = n as usize + 1;
    let mut p = Banded::zeros(size, kl.min(size - 1), ku.min(size - 1));
    for x in 0..=n {
        for (o, q) in chain.law(x).iter() {
            let y = (x as i64 + o).clamp(0, n as i64) as usize;
            p.add(x as usize, y, q);
        }
    }
    p
}

/// GTH state reduction; returns π normalised on [0, N].
fn gth(mut p: Banded) -> Result<Vec<f64>> {
    let size = p.n();
    let (kl, ku) = (p.lower(), p.upper());
    let mut s = vec![0.0; size];
    for k in (1..size).rev() {
        let lo = k.saturating_sub(kl);
        let sk: f64 = (lo..k).map(|j| p.get(k, j)).sum();
        if sk <= 0.0 {
            return Err(Error::Reducible {
                component: vec![k as u64],
            });
        }
        s[k] = sk;
        for i in k.saturating_sub(ku)..k {
            let pik = p.get(i, k);
            if pik == 0.0 {
                continue;
            }
            let f = pik / sk;
            for j in lo..k {
                let pkj = p.get(k, j);
                if pkj != 0.0 {
                    p.add(i, j, f * pkj);
                }
            }
        }
    }
    let mut pi = vec![0.0; size];
    pi[0] = 1.0;
    for k in 1..size {
        pi[k] = (k.saturating_sub(ku)..k)
            .map(|i| pi[i] * p.get(i, k))
            .sum::<f64>()
            / s[k];
    }
    let z: f64 = pi.iter().sum();
    Ok(pi.into_iter().map(|v| v / z).collect())
}

fn gb_table<C: Chain + ?Sized>(chain: &C, n: u64) -> Result<StationaryTable> {
    truncation_irreducibility(chain, n)?;
    let band = reflecting_band(chain, n);
    let jump = band.lower().max(band.upper()) as u64;
    let probs = gth(band)?;
    let residual = balance_residual(chain, &probs);
    // Two-state blocks smooth out parity effects in π.
    let a = n / 2;
    let b = n.saturating_sub(2 * jump + 2).max(a + 1);
    let block = |x: u64| probs[x as usize] + probs[(x + 1).min(n) as usize];
    let beyond = if b < n && a >= 1 && block(a) > 0.0 && block(b) > 0.0 {
        let alpha = -(block(b) / block(a)).ln() / (b as f64 / a as f64).ln();
        let pi_n = 0.5 * block(b) * (b as f64 / n as f64).powf(alpha);
        power_tail_mass(pi_n, alpha, n)
    } else {
        0.0
    };
    Ok(StationaryTable::new(
        probs,
        n,
        beyond,
        Method::GlobalBalance,
        residual,
    ))
}

/// Max relative difference of the corrected tails on [0, N/2].
pub fn corrected_tail_change(a: &StationaryTable, b: &StationaryTable) -> f64 {
    let half = a.truncation_n.min(b.truncation_n) / 2;
    (0..=half)
        .map(|x| {
            let (u, v) = (a.tail_estimate(x), b.tail_estimate(x));
            if u == 0.0 && v == 0.0 {
                0.0
            } else {
                (u - v).abs() / u.abs().max(v.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Stationary law of the reflecting truncation by GTH state reduction.
///
/// The truncation bias is measured by re-solving at 2N.
pub fn stationary_global_balance<C: Chain + ?Sized>(chain: &C, n: u64) -> Result<StationaryTable> {
    if n < 4 {
        return Err(Error::param("truncation N must be at least 4"));
    }
    let mut t = gb_table(chain, n)?;
    let t2 = gb_table(chain, 2 * n)?;
    t.doubling_change = Some(corrected_tail_change(&t, &t2));
    Ok(t)
}

/// Solves at N and 2N with the same method and reports the tail change.
pub fn doubling_check<F>(n: u64, solve: F) -> Result<f64>
where
    F: Fn(u64) -> Result<StationaryTable>,
{
    let a = solve(n)?;
    let b = solve(2 * n)?;
    Ok(corrected_tail_change(&a, &b))
}

fn diffusion_log_density(mu: f64, b: f64, x: f64) -> f64 {
    // ∫_0^x 2m₁/m₂ with m₁(y) = −μ/max(y,1), m₂ = b, split at the kink.
    let g = |y: f64| -2.0 * mu / (b * y.max(1.0));
    let i = if x <= 1.0 {
        quad::integrate(g, 0.0, x, 1e-13)
    } else {
        quad::integrate(g, 0.0, 1.0, 1e-13) + quad::integrate(g, 1.0, x, 1e-13)
    };
    (2.0 / b).ln() + i
}

fn check_diffusion(mu: f64, b: f64) -> Result<()> {
    if !(b > 0.0) || !(2.0 * mu > b) {
        return Err(Error::param(format!(
            "invariant density is not integrable unless 2mu > b > 0 (mu={mu}, b={b})"
        )));
    }
    Ok(())
}

/// Invariant density of the diffusion with drift −μ/max(x,1) and variance b,
/// normalised so that Σ p(x_i)·Δx = 1 on a uniform grid.
pub fn diffusion_density(mu: f64, b: f64, grid: &[f64]) -> Result<Vec<f64>> {
    check_diffusion(mu, b)?;
    if grid.len() < 2 {
        return Err(Error::param("density grid needs at least two points"));
    }
    let dx = grid[1] - grid[0];
    if !(dx > 0.0)
        || grid
            .windows(2)
            .any(|w| ((w[1] - w[0]) - dx).abs() > 1e-9 * dx.max(1.0))
        || grid[0] < 0.0
    {
        return Err(Error::param(
            "density grid must be uniform, increasing and nonnegative",
        ));
    }
    let raw: Vec<f64> = grid
        .iter()
        .map(|&x| diffusion_log_density(mu, b, x).exp())
        .collect();
    let z: f64 = raw.iter().sum::<f64>() * dx;
    Ok(raw.into_iter().map(|v| v / z).collect())
}

/// ∫_x^∞ p / ∫_0^∞ p for the same diffusion.
pub fn diffusion_tail(mu: f64, b: f64, x: f64) -> Result<f64> {
    check_diffusion(mu, b)?;
    let f = |y: f64| diffusion_log_density(mu, b, y).exp();
    let total = quad::integrate(f, 0.0, 1.0, 1e-12) + quad::integrate_to_infinity(f, 1.0, 1e-12);
    let upper = if x < 1.0 {
        quad::integrate(f, x, 1.0, 1e-12) + quad::integrate_to_infinity(f, 1.0, 1e-12)
    } else {
        quad::integrate_to_infinity(f, x, 1e-12)
    };
    Ok(upper / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::*;

    fn uniform_chain() -> ChainSpec {
        let p = DriftProfile::new(1.0, 0.6, M3Mode::Undeclared, 1.0, 1.0).unwrap();
        ChainSpec::custom("uniform", p, 0, |x| {
            if x == 0 {
                JumpLaw::try_new(vec![0, 1], vec![0.7, 0.3]).unwrap()
            } else {
                JumpLaw::try_new(vec![-1, 0, 1], vec![0.3, 0.4, 0.3]).unwrap()
            }
        })
    }

    #[test]
    fn equal_ratios_give_uniform_law() {
        let t = stationary_skip_free(&uniform_chain(), 99).unwrap();
        for p in &t.probs {
            assert!((p - 0.01).abs() < 1e-15);
        }
        assert!(t.tail_mass_bound.is_infinite());
        assert!(t.residual < 1e-15);
    }

    #[test]
    fn product_formula_rejects_missing_down_jump() {
        let p = DriftProfile::new(1.0, 0.6, M3Mode::Undeclared, 1.0, 1.0).unwrap();
        let c = ChainSpec::custom("stuck", p, 0, |x| {
            if x == 3 || x == 0 {
                JumpLaw::try_new(vec![0, 1], vec![0.5, 0.5]).unwrap()
            } else {
                JumpLaw::try_new(vec![-1, 1], vec![0.5, 0.5]).unwrap()
            }
        });
        assert!(matches!(
            stationary_skip_free(&c, 10),
            Err(Error::FormulaUndefined { state: 3 })
        ));
        assert!(
            stationary_skip_free(&make_left_skip_free(2.0, 1.0, 0.25, 0.75).unwrap(), 10).is_err()
        );
    }

    #[test]
    fn table_invariants() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        let t = stationary_skip_free(&c, 500).unwrap();
        let s: f64 = t.probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(t.tail.windows(2).all(|w| w[0] >= w[1]));
        assert!((t.tail[0] - (1.0 - t.probs[0])).abs() < 1e-14);
        assert_eq!(t.tail[500], 0.0);
        assert!(t.residual < 1e-15);
    }

    #[test]
    fn local_exponent_of_birth_death() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        let t = stationary_skip_free(&c, 2000).unwrap();
        let (x1, x) = (50usize, 500usize);
        let slope = (t.probs[x] / t.probs[x1]).ln() / (x as f64 / x1 as f64).ln();
        assert!((slope + 4.0).abs() < 0.05, "{slope}");
    }

    #[test]
    fn global_balance_matches_product_formula() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        let a = stationary_skip_free(&c, 400).unwrap();
        let b = stationary_global_balance(&c, 400).unwrap();
        for x in 0..=200 {
            assert!((a.probs[x] - b.probs[x]).abs() <= 1e-8 * a.probs[x].max(1e-300) + 1e-15);
        }
        assert!(b.residual < 1e-10);
        assert!(b.doubling_change.unwrap() < 5e-3);
    }

    #[test]
    fn reducible_truncation_rejected() {
        let p = DriftProfile::new(1.0, 0.6, M3Mode::Undeclared, 1.0, 1.0).unwrap();
        let c = ChainSpec::custom("split", p, 0, |x| {
            if x >= 5 || x == 0 {
                JumpLaw::try_new(vec![0, 1], vec![0.5, 0.5]).unwrap()
            } else {
                JumpLaw::try_new(vec![-1, 1], vec![0.5, 0.5]).unwrap()
            }
        });
        match stationary_global_balance(&c, 10) {
            Err(Error::Reducible { component }) => assert_eq!(component, vec![5, 6, 7, 8, 9, 10]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn diffusion_examples() {
        let grid: Vec<f64> = (0..=200_000).map(|i| i as f64 * 0.01).collect();
        let d = diffusion_density(2.0, 1.0, &grid).unwrap();
        let s: f64 = d.iter().sum::<f64>() * 0.01;
        assert!((s - 1.0).abs() < 1e-6);
        // p ∝ x^{-4} beyond 1.
        let ratio = d[100_000] / d[50_000];
        assert!((ratio - 2f64.powi(-4)).abs() < 1e-10);
        let t = diffusion_tail(2.0, 1.0, 100.0).unwrap() / diffusion_tail(2.0, 1.0, 50.0).unwrap();
        assert!((t - 0.125).abs() < 1e-8);
        assert!(diffusion_density(0.5, 1.0, &grid).is_err());
        assert!(diffusion_density(2.0, 1.0, &[0.0, 1.0, 3.0]).is_err());
    }
}
