//! The harmonic function V of the chain killed on entering B = [0, x₀].
//!
//! V = U + g, where g(x) = E_x Σ_{n<τ_B} u(X_n) and u is the drift of U. On a
//! window (x₀, N] the killed Green system (I − P_killed)g = u is solved with
//! g ≡ 0 beyond N, so V is extended by U outside the window.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::banded::Banded;
use crate::chain::{Chain, ChainSpec, M3Mode};
use crate::error::{Error, Result};
use crate::lyapunov::{drift, RateFunctions, TestFunction};
use crate::mc::sample_offset;

/// Relative residual tolerance of an accepted solve on interior states.
pub const RESIDUAL_TOL: f64 = 1e-9;
/// Relative change of V on the inner half tolerated under doubling N.
pub const DOUBLING_TOL: f64 = 1e-3;

/// Largest down- and up-jump over states in (lo, hi].
fn jump_span<C: Chain + ?Sized>(chain: &C, lo: u64, hi: u64) -> (usize, usize) {
    (lo + 1..=hi).fold((0, 0), |(d, u), x| {
        let l = chain.law(x);
        (
            d.max((-l.min_offset()).max(0) as usize),
            u.max(l.max_offset().max(0) as usize),
        )
    })
}

/// Solves (I − P_killed)g = u on (x₀, N] with g ≡ 0 outside, where u is the
/// drift of `f`. Entry i of the result is g(x₀ + 1 + i).
pub fn killed_green_solve<C, T>(chain: &C, x0: u64, n: u64, f: &T) -> Result<Vec<f64>>
where
    C: Chain + ?Sized,
    T: TestFunction + ?Sized,
{
    if n <= x0 {
        return Err(Error::param(format!("window ({x0}, {n}] is empty")));
    }
    let size = (n - x0) as usize;
    let (kl, ku) = jump_span(chain, x0, n);
    let mut a = Banded::zeros(size, kl.min(size - 1), ku.min(size - 1));
    for x in x0 + 1..=n {
        let i = (x - x0 - 1) as usize;
        a.add(i, i, 1.0);
        for (o, p) in chain.law(x).iter() {
            let y = x as i64 + o;
            if y > x0 as i64 && y <= n as i64 {
                a.add(i, (y as u64 - x0 - 1) as usize, -p);
            }
        }
    }
    let rhs: Vec<f64> = (x0 + 1..=n)
        .into_par_iter()
        .map(|x| drift(chain, f, x))
        .collect();
    a.solve(&rhs)
}

/// V on [0, N] with its comparison functions.
#[derive(Debug, Clone, Serialize)]
pub struct HarmonicTable {
    pub grid: Vec<u64>,
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    #[serde(rename = "U")]
    pub u: Vec<f64>,
    #[serde(rename = "expR")]
    pub exp_r: Vec<f64>,
    #[serde(rename = "C0")]
    pub c0: Option<f64>,
    /// |V(x) − Σ_{y>x₀} P(x,y)V(y)| / |V(x)| on (x₀, N]; zero on B.
    pub residual: Vec<f64>,
    pub boundary_x0: u64,
    pub truncation_n: u64,
    pub max_jump: u64,
    /// Max relative change of V on (x₀, N/2] when N doubles.
    pub doubling_change: f64,
    /// Set when `doubling_change` exceeds the tolerance.
    pub unstable: bool,
    /// Smallest x₁ with V > 0 on (x₁, N].
    pub positive_from: Option<u64>,
    /// inf of V over (x₀, N].
    pub min_v: f64,
    #[serde(skip)]
    pub rates: RateFunctions,
}

impl HarmonicTable {
    /// V on the window, U beyond it.
    pub fn value_ext(&self, x: u64) -> f64 {
        match self.v.get(x as usize) {
            Some(&v) => v,
            None => self.rates.u(x as f64),
        }
    }

    /// Largest residual over (x₀, N − J].
    pub fn interior_residual(&self) -> f64 {
        let hi = self.truncation_n.saturating_sub(self.max_jump) as usize;
        let lo = self.boundary_x0 as usize + 1;
        if hi < lo {
            return 0.0;
        }
        self.residual[lo..=hi].iter().cloned().fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,V,U,expR,residual")?;
        for i in 0..self.grid.len() {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e}",
                self.grid[i], self.v[i], self.u[i], self.exp_r[i], self.residual[i]
            )?;
        }
        Ok(())
    }
}

/// V on [0, N] for test function `f`, V = f + g on (x₀, N] and the harmonic
/// extension on B.
fn solve_v<C, T>(chain: &C, x0: u64, n: u64, f: &T) -> Result<Vec<f64>>
where
    C: Chain + ?Sized,
    T: TestFunction + ?Sized,
{
    let g = killed_green_solve(chain, x0, n, f)?;
    let mut v = vec![0.0; n as usize + 1];
    for x in x0 + 1..=n {
        v[x as usize] = f.value(x) + g[(x - x0 - 1) as usize];
    }
    let ext = |y: u64| if y <= n { v[y as usize] } else { f.value(y) };
    let on_b: Vec<f64> = (0..=x0)
        .map(|z| {
            chain
                .law(z)
                .iter()
                .filter(|&(o, _)| z as i64 + o > x0 as i64)
                .map(|(o, p)| p * ext((z as i64 + o) as u64))
                .sum()
        })
        .collect();
    v[..=x0 as usize].copy_from_slice(&on_b);
    Ok(v)
}

fn relative_residuals<C: Chain + ?Sized, F: Fn(u64) -> f64 + Sync>(
    chain: &C,
    x0: u64,
    n: u64,
    v_ext: F,
) -> Vec<f64> {
    (0..=n)
        .into_par_iter()
        .map(|x| {
            if x <= x0 {
                return 0.0;
            }
            let pv: f64 = chain
                .law(x)
                .iter()
                .filter(|&(o, _)| x as i64 + o > x0 as i64)
                .map(|(o, p)| p * v_ext((x as i64 + o) as u64))
                .sum();
            let vx = v_ext(x);
            (vx - pv).abs() / vx.abs().max(f64::MIN_POSITIVE)
        })
        .collect()
}

/// Computes V for `spec` on [0, N] and checks it against a solve on [0, 2N].
pub fn harmonic_solve(spec: &ChainSpec, n: u64) -> Result<HarmonicTable> {
    let x0 = spec.boundary_x0;
    if n < 10 * x0.max(1) {
        return Err(Error::param(format!(
            "need N >= 10*x0 = {}, got {n}",
            10 * x0.max(1)
        )));
    }
    if !spec.profile.tail_regime() {
        return Err(Error::Classification {
            expected: "positive recurrent with 2mu > b",
            detail: format!("declared mu={}, b={}", spec.profile.mu, spec.profile.b),
        });
    }
    let rates = RateFunctions::for_spec(spec)?;
    let u_tab = rates.u_table(2 * n + 1);
    let uc = rates.u_c(0.0);
    let v = solve_v(spec, x0, n, &uc)?;
    let v2 = solve_v(spec, x0, 2 * n, &uc)?;
    let doubling_change = (x0 + 1..=n / 2)
        .map(|x| {
            let (a, b) = (v[x as usize], v2[x as usize]);
            (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max);
    let residual = relative_residuals(spec, x0, n, |y| {
        if y <= n {
            v[y as usize]
        } else {
            u_tab
                .get(y as usize)
                .copied()
                .unwrap_or_else(|| rates.u(y as f64))
        }
    });
    let (max_down, max_up) = jump_span(spec, x0, n);
    let mut positive_from = None;
    for x in (x0..=n).rev() {
        if x == x0 || v[x as usize] <= 0.0 {
            positive_from = Some(x);
            break;
        }
    }
    let min_v = v[x0 as usize + 1..]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let c0 = match spec.profile.m3_mode {
        M3Mode::Converges(_) => spec.profile.c0(),
        _ => None,
    };
    Ok(HarmonicTable {
        grid: (0..=n).collect(),
        u: u_tab[..=n as usize].to_vec(),
        exp_r: (0..=n).map(|x| rates.exp_r(x as f64)).collect(),
        v,
        c0,
        residual,
        boundary_x0: x0,
        truncation_n: n,
        max_jump: max_down.max(max_up) as u64,
        doubling_change,
        unstable: doubling_change > DOUBLING_TOL,
        positive_from,
        min_v,
        rates,
    })
}

/// Relative deviation |E_x{V(X_n); τ_B > n} − V(x)| / V(x).
///
/// Uses exact kernel powers for n ≤ 20, otherwise Monte Carlo with
/// `mc = (seed, replicas)`.
pub fn harmonic_identity_check<C: Chain + ?Sized>(
    chain: &C,
    table: &HarmonicTable,
    n: u32,
    x: u64,
    mc: Option<(u64, u64)>,
) -> Result<f64> {
    let (x0, big_n) = (table.boundary_x0, table.truncation_n);
    if x <= x0 || x > big_n / 2 {
        return Err(Error::param(format!("x must lie in ({x0}, {}]", big_n / 2)));
    }
    let vx = table.v[x as usize];
    let expect = if n <= 20 {
        let mut dist = vec![0.0; big_n as usize + 1];
        dist[x as usize] = 1.0;
        let mut escaped = 0.0;
        for _ in 0..n {
            let mut next = vec![0.0; dist.len()];
            for (z, &w) in dist.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, p) in chain.law(z as u64).iter() {
                    let y = z as i64 + o;
                    if y <= x0 as i64 {
                        continue;
                    }
                    if y > big_n as i64 {
                        escaped += w * p;
                        continue;
                    }
                    next[y as usize] += w * p;
                }
            }
            dist = next;
        }
        if escaped > 0.0 {
            return Err(Error::param(
                "kernel powers left the window; lower n or raise N",
            ));
        }
        dist.iter().zip(&table.v).map(|(w, v)| w * v).sum::<f64>()
    } else {
        let (seed, reps) = mc.ok_or_else(|| Error::param("n > 20 needs Monte Carlo parameters"))?;
        let total: f64 = (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r);
                let mut z = x;
                for _ in 0..n {
                    let o = sample_offset(&chain.law(z), &mut rng);
                    let y = z as i64 + o;
                    if y <= x0 as i64 {
                        return 0.0;
                    }
                    z = y as u64;
                }
                table.value_ext(z)
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        total / reps as f64
    };
    Ok((expect - vx).abs() / vx.abs())
}

/// Drift of U_C at one state, raw and divided by e^{R(x)}/x².
#[derive(Debug, Clone, Copy, Serialize)]
pub struct UcDrift {
    pub c: f64,
    pub x: u64,
    pub drift: f64,
    pub normalized: f64,
    /// (ρ−1)b(C₀−C)/2, when C₀ is defined.
    pub predicted: Option<f64>,
}

pub fn u_c_drift(spec: &ChainSpec, c: f64, x: u64) -> Result<UcDrift> {
    let rates = RateFunctions::for_spec(spec)?;
    if x <= rates.x0 {
        return Err(Error::param(format!("x must exceed x0 = {}", rates.x0)));
    }
    let d = drift(spec, &rates.u_c(c), x);
    let xf = x as f64;
    let predicted = spec
        .profile
        .c0()
        .filter(|_| matches!(spec.profile.m3_mode, M3Mode::Converges(_)))
        .map(|c0| (rates.rho - 1.0) * rates.b * (c0 - c) / 2.0);
    Ok(UcDrift {
        c,
        x,
        drift: d,
        normalized: d * xf * xf / rates.exp_r(xf),
        predicted,
    })
}

/// Constants (C₁, C₂) with drift of U_{C₁} < 0 and drift of U_{C₂} > 0 at
/// every state in `xs`.
///
/// The drift of U_C is affine in C with negative slope, so the extremes of
/// the root −u₀(x)/u_e(x) over `xs`, widened by `margin`, give both constants.
pub fn sandwich_constants(spec: &ChainSpec, xs: &[u64], margin: f64) -> Result<(f64, f64)> {
    let rates = RateFunctions::for_spec(spec)?;
    let u0 = rates.u_c(0.0);
    let e = |x: u64| {
        if x <= rates.x0 {
            0.0
        } else {
            rates.exp_r(x as f64)
        }
    };
    let roots: Vec<f64> = xs
        .par_iter()
        .map(|&x| {
            let a = drift(spec, &u0, x);
            let b = drift(spec, &e, x);
            if b >= 0.0 {
                f64::NAN
            } else {
                -a / b
            }
        })
        .collect();
    if roots.iter().any(|r| r.is_nan()) {
        return Err(Error::param(
            "drift of e^R is not negative on the whole scan range",
        ));
    }
    let hi = roots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = roots.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((hi + margin, lo - margin))
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichViolation {
    pub x: u64,
    pub y: u64,
    pub lower: f64,
    pub middle: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichReport {
    pub c1: f64,
    pub c2: f64,
    pub checked: usize,
    pub violations: Vec<SandwichViolation>,
}

impl SandwichReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks U(x+y)−U(x) + C₂Δe^R ≤ V(x+y)−V(x) ≤ U(x+y)−U(x) + C₁Δe^R.
pub fn skip_free_sandwich_check(
    spec: &ChainSpec,
    table: &HarmonicTable,
    c1: f64,
    c2: f64,
    xs: &[u64],
    ys: &[u64],
) -> Result<SandwichReport> {
    let n = table.truncation_n;
    if (table.boundary_x0 + 1..=n).any(|x| spec.law(x).min_offset() < -1) {
        return Err(Error::param("sandwich check needs a left-skip-free chain"));
    }
    let rates = table.rates;
    let pairs: Vec<(u64, u64)> = xs
        .iter()
        .flat_map(|&x| ys.iter().map(move |&y| (x, y)))
        .filter(|&(x, y)| x + y <= n)
        .collect();
    let violations: Vec<SandwichViolation> = pairs
        .par_iter()
        .filter_map(|&(x, y)| {
            let (xf, yf) = (x as f64, (x + y) as f64);
            let du = rates.u_increment(xf, yf);
            let de = rates.exp_r_increment(xf, yf);
            let lower = du + c2 * de;
            let upper = du + c1 * de;
            let middle = table.v[(x + y) as usize] - table.v[x as usize];
            let slack = 1e-12 * table.v[(x + y) as usize].abs();
            (middle < lower - slack || middle > upper + slack).then_some(SandwichViolation {
                x,
                y,
                lower,
                middle,
                upper,
            })
        })
        .collect();
    Ok(SandwichReport {
        c1,
        c2,
        checked: pairs.len(),
        violations,
    })
}

/// Comparison of the harmonic functions generated by U and by an alternative.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    /// max |V_alt − V| on (x₀, N/2].
    pub max_abs_diff: f64,
    /// max V on (x₀, N/2].
    pub max_v: f64,
    /// U_alt(N)/U(N).
    pub tail_ratio: f64,
    /// Whether the ratio is within 1% of 1 at N.
    pub asymptotically_equivalent: bool,
}

/// Solves for V with U and with `u_alt` and compares the two on (x₀, N/2].
///
/// Rejects `u_alt` unless it vanishes on B and is positive on (x₀, N].
pub fn u_equivalence_check<T: TestFunction + ?Sized>(
    spec: &ChainSpec,
    n: u64,
    u_alt: &T,
) -> Result<EquivalenceReport> {
    let x0 = spec.boundary_x0;
    if let Some(z) = (0..=x0).find(|&z| u_alt.value(z) != 0.0) {
        return Err(Error::param(format!(
            "alternative U is nonzero at {z} in B"
        )));
    }
    if let Some(z) = (x0 + 1..=n).find(|&z| !(u_alt.value(z) > 0.0)) {
        return Err(Error::param(format!(
            "alternative U is not positive at {z}"
        )));
    }
    let rates = RateFunctions::for_spec(spec)?;
    let base = solve_v(spec, x0, n, &rates.u_c(0.0))?;
    let alt = solve_v(spec, x0, n, u_alt)?;
    let range = x0 as usize + 1..=n as usize / 2;
    let max_abs_diff = range
        .clone()
        .map(|i| (base[i] - alt[i]).abs())
        .fold(0.0, f64::max);
    let max_v = range.map(|i| base[i]).fold(0.0, f64::max);
    let tail_ratio = u_alt.value(n) / rates.u(n as f64);
    Ok(EquivalenceReport {
        max_abs_diff,
        max_v,
        tail_ratio,
        asymptotically_equivalent: (tail_ratio - 1.0).abs() < 0.01,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{make_birth_death, make_left_skip_free};

    #[test]
    fn solve_is_harmonic_and_close_to_u() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        let t = harmonic_solve(&c, 1000).unwrap();
        assert!(t.interior_residual() <= RESIDUAL_TOL);
        assert!(!t.unstable, "{}", t.doubling_change);
        assert_eq!(t.c0, Some(0.0));
        let r = t.v[400] / t.u[400];
        assert!((r - 1.0).abs() < 0.05, "{r}");
        assert!(t.min_v > 0.0);
        assert_eq!(t.positive_from, Some(4));
    }

    #[test]
    fn solve_rejects_short_window_and_wrong_regime() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        assert!(harmonic_solve(&c, 30).is_err());
        let c = make_birth_death(0.4, 1.0).unwrap();
        assert!(harmonic_solve(&c, 1000).is_err());
    }

    #[test]
    fn green_solve_is_linear() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        let r = RateFunctions::for_spec(&c).unwrap();
        let u = r.u_c(0.0);
        let g = killed_green_solve(&c, 4, 600, &u).unwrap();
        let alpha = 3.7;
        struct Scaled<'a>(f64, &'a crate::lyapunov::UC);
        impl TestFunction for Scaled<'_> {
            fn value(&self, x: u64) -> f64 {
                self.0 * self.1.value(x)
            }
            fn increment(&self, x: u64, y: u64) -> f64 {
                self.0 * self.1.increment(x, y)
            }
        }
        let g2 = killed_green_solve(&c, 4, 600, &Scaled(alpha, &u)).unwrap();
        for (a, b) in g.iter().zip(&g2) {
            assert!((alpha * a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn identity_at_small_n() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        let t = harmonic_solve(&c, 1000).unwrap();
        assert_eq!(harmonic_identity_check(&c, &t, 0, 50, None).unwrap(), 0.0);
        assert!(harmonic_identity_check(&c, &t, 1, 50, None).unwrap() <= 1e-9);
        assert!(harmonic_identity_check(&c, &t, 20, 50, None).unwrap() <= 1e-7);
        assert!(harmonic_identity_check(&c, &t, 40, 50, None).is_err());
    }

    #[test]
    fn sandwich_degenerate_increment() {
        let c = make_left_skip_free(2.0, 1.0, 0.25, 0.75).unwrap();
        let t = harmonic_solve(&c, 2000).unwrap();
        let rep = skip_free_sandwich_check(&c, &t, 1.0, 0.0, &[300], &[0]).unwrap();
        assert!(rep.pass());
        assert_eq!(rep.checked, 1);
    }

    #[test]
    fn equivalence_rejects_bad_alternatives() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        let r = RateFunctions::for_spec(&c).unwrap();
        let shifted = |x: u64| r.u(x as f64) + 1.0;
        assert!(u_equivalence_check(&c, 400, &shifted).is_err());
        let negative = |x: u64| -r.u(x as f64);
        assert!(u_equivalence_check(&c, 400, &negative).is_err());
        let same = r.u_c(0.0);
        let rep = u_equivalence_check(&c, 400, &same).unwrap();
        assert_eq!(rep.max_abs_diff, 0.0);
        assert!(rep.asymptotically_equivalent);
    }
}
