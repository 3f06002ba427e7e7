//! Doob transform of the chain killed on B by its harmonic function V.
//!
//! P̂(x, y) = V(y)·P(x, y)·1{y > x₀} / V(x). Inside (x₀, N − J] the rows are
//! stochastic because V is harmonic there; above N − J they read V from the
//! extension U + c_tail·e^R and are renormalized, with the deviation kept in
//! `edge_deviation`. From z ≤ x₀ the chain jumps straight to the entrance law,
//! so simulations may start anywhere.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{Chain, ChainSpec, JumpLaw, MomentTable};
use crate::error::{Error, Result};
use crate::harmonic::HarmonicTable;
use crate::lyapunov::{return_probability_bound, RateFunctions};
use crate::mc::{return_probability, SimConfig};
use crate::stationary::StationaryTable;

pub const ROW_SUM_TOL: f64 = 1e-9;

/// V on [0, N] from the table, U + c_tail·e^R above.
#[derive(Debug, Clone)]
struct Extension {
    v: Vec<f64>,
    u_far: Vec<f64>,
    c_tail: f64,
    rates: RateFunctions,
}

impl Extension {
    fn value(&self, y: u64) -> f64 {
        if let Some(&v) = self.v.get(y as usize) {
            return v;
        }
        let yf = y as f64;
        let u = self
            .u_far
            .get(y as usize)
            .copied()
            .unwrap_or_else(|| self.rates.u(yf));
        u + self.c_tail * self.rates.exp_r(yf)
    }
}

pub struct TransformedChain {
    base: ChainSpec,
    ext: Extension,
    pub boundary_x0: u64,
    pub truncation_n: u64,
    pub max_jump: u64,
    /// Limits of x·m̂₁ and m̂₂: μ + b and b.
    pub hat_mu: f64,
    pub hat_b: f64,
    /// Entrance law ∝ Σ_{z∈B} π(z)P(z, y)V(y) on y > x₀.
    pub init: Vec<(u64, f64)>,
    /// Σ_{z∈B} π(z)V(z), the normalizer of the entrance law.
    pub boundary_integral: f64,
    /// max |row sum − 1| over (x₀, N − J].
    pub row_sum_deviation: f64,
    /// max |row sum − 1| over (N − J, cache_cap] before renormalization.
    pub edge_deviation: f64,
    /// States (x₀, x₁] excluded because V ≤ 0 there.
    pub excluded_up_to: u64,
    cache: Vec<JumpLaw>,
    cache_from: u64,
    init_law: Vec<JumpLaw>,
    tag: String,
}

impl std::fmt::Debug for TransformedChain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransformedChain")
            .field("tag", &self.tag)
            .field("boundary_x0", &self.boundary_x0)
            .field("truncation_n", &self.truncation_n)
            .field("row_sum_deviation", &self.row_sum_deviation)
            .finish()
    }
}

fn hat_row<C: Chain + ?Sized>(
    chain: &C,
    x: u64,
    floor: u64,
    vx: f64,
    v: impl Fn(u64) -> f64,
) -> Result<(Vec<(i64, f64)>, f64)> {
    let mut row = Vec::new();
    let mut sum = 0.0;
    for (o, p) in chain.law(x).iter() {
        let y = x as i64 + o;
        if y <= floor as i64 {
            continue;
        }
        let vy = v(y as u64);
        if vy < 0.0 {
            return Err(Error::NonPositiveHarmonic {
                state: y as u64,
                value: vy,
            });
        }
        let q = p * vy / vx;
        if q > 0.0 {
            row.push((o, q));
            sum += q;
        }
    }
    Ok((row, sum))
}

impl TransformedChain {
    /// Transform with an arbitrary positive V given on [0, N].
    ///
    /// Laws are cached on (x₁, cache_cap]; rows in (x₁, N − J] must already
    /// be stochastic.
    pub fn from_values(
        base: &ChainSpec,
        v: Vec<f64>,
        c_tail: f64,
        pi: &[f64],
        cache_cap: u64,
    ) -> Result<Self> {
        let x0 = base.boundary_x0;
        let n = v.len() as u64 - 1;
        if n <= x0 + 1 {
            return Err(Error::param(format!(
                "window (x0, N] = ({x0}, {n}] is too short"
            )));
        }
        let rates = RateFunctions::for_spec(base)?;
        let cache_cap = cache_cap.max(n);
        let j = crate::chain::max_up_jump(base, n).max(
            (x0 + 1..=n)
                .map(|x| (-base.law(x).min_offset()).max(0) as u64)
                .max()
                .unwrap_or(0),
        );
        // Support starts above the last state with V ≤ 0.
        let x1 = (x0 + 1..=n)
            .rev()
            .find(|&x| v[x as usize] <= 0.0)
            .unwrap_or(x0);
        let ext = Extension {
            u_far: rates.u_table(cache_cap.saturating_mul(4).min(16 * n)),
            v,
            c_tail,
            rates,
        };
        let rows: Vec<(JumpLaw, f64)> = (x1 + 1..=cache_cap)
            .into_par_iter()
            .map(|x| {
                let vx = ext.value(x);
                if !(vx > 0.0) {
                    return Err(Error::NonPositiveHarmonic {
                        state: x,
                        value: vx,
                    });
                }
                let (row, sum) = hat_row(base, x, x1, vx, |y| ext.value(y))?;
                if x + j <= n && (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::RowSum { state: x, sum });
                }
                let scaled: Vec<(i64, f64)> = row.into_iter().map(|(o, q)| (o, q / sum)).collect();
                let law = JumpLaw::from_pairs(&scaled)
                    .map_err(|reason| Error::InvalidLaw { state: x, reason })?;
                Ok((law, sum))
            })
            .collect::<Result<_>>()?;
        let interior_hi = n.saturating_sub(j);
        let mut row_dev: f64 = 0.0;
        let mut edge_dev: f64 = 0.0;
        for (k, (_, s)) in rows.iter().enumerate() {
            let x = x1 + 1 + k as u64;
            if x <= interior_hi {
                row_dev = row_dev.max((s - 1.0).abs());
            } else {
                edge_dev = edge_dev.max((s - 1.0).abs());
            }
        }
        let mut entrance: BTreeMap<u64, f64> = BTreeMap::new();
        for z in 0..=x0 {
            let pz = pi.get(z as usize).copied().unwrap_or(0.0);
            if pz == 0.0 {
                continue;
            }
            for (o, p) in base.law(z).iter() {
                let y = z as i64 + o;
                if y > x1 as i64 {
                    *entrance.entry(y as u64).or_default() += pz * p * ext.value(y as u64);
                }
            }
        }
        let boundary_integral: f64 = entrance.values().sum();
        if !(boundary_integral > 0.0) {
            return Err(Error::param("entrance law from B has no mass above x0"));
        }
        let init: Vec<(u64, f64)> = entrance
            .into_iter()
            .map(|(y, w)| (y, w / boundary_integral))
            .collect();
        let init_law = (0..=x1)
            .map(|z| {
                let pairs: Vec<(i64, f64)> = init
                    .iter()
                    .map(|&(y, p)| (y as i64 - z as i64, p))
                    .collect();
                JumpLaw::from_pairs(&pairs).map_err(|reason| Error::InvalidLaw { state: z, reason })
            })
            .collect::<Result<_>>()?;
        Ok(TransformedChain {
            tag: format!("hat:{}", base.family_tag),
            hat_mu: base.profile.mu + base.profile.b,
            hat_b: base.profile.b,
            base: base.clone(),
            ext,
            boundary_x0: x0,
            truncation_n: n,
            max_jump: j,
            init,
            boundary_integral,
            row_sum_deviation: row_dev,
            edge_deviation: edge_dev,
            excluded_up_to: x1,
            cache: rows.into_iter().map(|r| r.0).collect(),
            cache_from: x1 + 1,
            init_law,
        })
    }

    /// V at y, from the table on [0, N] and the extension above.
    pub fn v(&self, y: u64) -> f64 {
        self.ext.value(y)
    }

    pub fn c_tail(&self) -> f64 {
        self.ext.c_tail
    }

    /// Upper end of the stochastic interior, N − J.
    pub fn interior_end(&self) -> u64 {
        self.truncation_n.saturating_sub(self.max_jump)
    }

    pub fn base(&self) -> &ChainSpec {
        &self.base
    }

    /// Simulation config that starts from the entrance law.
    pub fn entrance_config(&self, seed: u64, n_steps: u64, n_replicas: u64) -> SimConfig {
        let mut cfg = SimConfig::new(seed, n_steps, n_replicas, self.boundary_x0 + 1);
        cfg.initial = Some(self.init.clone());
        cfg
    }

    /// Kernel triplets `x,y,p` for x in (x₁, N].
    pub fn write_kernel_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,p")?;
        for x in self.cache_from..=self.truncation_n {
            for (o, p) in self.law(x).iter() {
                writeln!(w, "{},{},{:e}", x, x as i64 + o, p)?;
            }
        }
        Ok(())
    }

    pub fn write_init_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "y,p")?;
        for (y, p) in &self.init {
            writeln!(w, "{y},{p:e}")?;
        }
        Ok(())
    }
}

impl Chain for TransformedChain {
    fn law(&self, x: u64) -> Cow<'_, JumpLaw> {
        if x < self.cache_from {
            return Cow::Borrowed(&self.init_law[x as usize]);
        }
        if let Some(l) = self.cache.get((x - self.cache_from) as usize) {
            return Cow::Borrowed(l);
        }
        let vx = self.ext.value(x);
        let (row, sum) = hat_row(&self.base, x, self.excluded_up_to, vx, |y| {
            self.ext.value(y)
        })
        .expect("extension is positive above the cache");
        let scaled: Vec<(i64, f64)> = row.into_iter().map(|(o, q)| (o, q / sum)).collect();
        Cow::Owned(JumpLaw::from_pairs(&scaled).expect("normalized row"))
    }

    fn boundary(&self) -> u64 {
        self.boundary_x0
    }

    fn tag(&self) -> &str {
        &self.tag
    }
}

/// Builds P̂ from the harmonic table and the stationary law of `spec`.
///
/// c_tail is the median of (V − U)/e^R over [N/4, N/2], where the solve is
/// stable under doubling.
pub fn transform(
    spec: &ChainSpec,
    harm: &HarmonicTable,
    stat: &StationaryTable,
) -> Result<TransformedChain> {
    if harm.boundary_x0 != spec.boundary_x0 {
        return Err(Error::param(
            "harmonic table was computed for a different boundary",
        ));
    }
    if let Some(x1) = harm.positive_from {
        if x1 + 1 > harm.truncation_n / 4 {
            return Err(Error::NonPositiveHarmonic {
                state: x1,
                value: harm.v[x1 as usize],
            });
        }
    } else {
        return Err(Error::NonPositiveHarmonic {
            state: harm.truncation_n,
            value: harm.v[harm.truncation_n as usize],
        });
    }
    let n = harm.truncation_n;
    let mut ratios: Vec<f64> = (n / 4..=n / 2)
        .map(|x| (harm.v[x as usize] - harm.u[x as usize]) / harm.exp_r[x as usize])
        .collect();
    ratios.sort_by(|a, b| a.total_cmp(b));
    let c_tail = ratios[ratios.len() / 2];
    TransformedChain::from_values(spec, harm.v.clone(), c_tail, &stat.probs, 4 * n)
}

/// Exact moments of P̂ on a grid inside (x₁, N − J].
pub fn transformed_moments(tc: &TransformedChain, grid: &[u64]) -> Result<MomentTable> {
    if let Some(&x) = grid
        .iter()
        .find(|&&x| x <= tc.excluded_up_to || x > tc.interior_end())
    {
        return Err(Error::param(format!(
            "state {x} outside the stochastic interior ({}, {}]",
            tc.excluded_up_to,
            tc.interior_end()
        )));
    }
    let p = tc.base.profile;
    let power = (2.0 * (p.mu + p.b) / p.b).max(0.0) + 3.0 + p.delta;
    MomentTable::of_chain(tc, grid, p.delta, power, p.a_trunc)
}

/// max over y of |P̂ⁿ(x, y) − (V(y)/V(x))·P_killedⁿ(x, y)| / P̂ⁿ(x, y).
///
/// Requires x + n·J ≤ N − J so every path stays on exact rows.
pub fn kernel_power_check(tc: &TransformedChain, x: u64, n: u32) -> Result<f64> {
    let reach = x + n as u64 * tc.max_jump;
    if x <= tc.excluded_up_to || reach > tc.interior_end() {
        return Err(Error::param(format!(
            "paths from {x} in {n} steps leave ({}, {}]",
            tc.excluded_up_to,
            tc.interior_end()
        )));
    }
    let step = |dist: &BTreeMap<u64, f64>, chain: &dyn Chain, floor: u64| {
        let mut out: BTreeMap<u64, f64> = BTreeMap::new();
        for (&z, &m) in dist {
            for (o, p) in chain.law(z).iter() {
                let y = z as i64 + o;
                if y > floor as i64 {
                    *out.entry(y as u64).or_default() += m * p;
                }
            }
        }
        out
    };
    let mut hat = BTreeMap::from([(x, 1.0)]);
    let mut killed = hat.clone();
    for _ in 0..n {
        hat = step(&hat, tc, tc.excluded_up_to);
        killed = step(&killed, &tc.base, tc.boundary_x0);
    }
    let vx = tc.v(x);
    let mut worst: f64 = 0.0;
    for (&y, &k) in &killed {
        let h = hat.get(&y).copied().unwrap_or(0.0);
        let pred = tc.v(y) / vx * k;
        if h > 0.0 {
            worst = worst.max((h - pred).abs() / h);
        } else if pred > 0.0 {
            worst = f64::INFINITY;
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReturnCheck {
    pub y: u64,
    pub x: u64,
    pub estimate: f64,
    pub stderr: f64,
    pub bound: f64,
    pub delta: f64,
    /// Replicas stop above this level.
    pub escape: u64,
    /// (x/escape)^δ, the most that returns from above `escape` can add.
    pub escape_correction: f64,
    /// Replicas still between x and `escape` when the step budget ran out.
    pub unresolved: f64,
    pub pass: bool,
}

/// Monte Carlo P̂_y{hit [0, x]} against (x/y)^δ; see [`return_check`].
pub fn transformed_return_check(
    tc: &TransformedChain,
    y: u64,
    x: u64,
    delta: f64,
    escape: u64,
    cfg: &SimConfig,
) -> Result<ReturnCheck> {
    if x < tc.boundary_x0 {
        return Err(Error::param(format!(
            "need x >= x0 = {}, got {x}",
            tc.boundary_x0
        )));
    }
    return_check(tc, y, x, delta, escape, cfg)
}

/// Monte Carlo P_y{hit [0, x]} against (x/y)^δ for any chain.
///
/// Replicas stop above `escape`. Returns from there are bounded by
/// (x/escape)^δ, and replicas that run out of steps may still return; both
/// are added to the estimate before comparing.
pub fn return_check<C: Chain + ?Sized>(
    chain: &C,
    y: u64,
    x: u64,
    delta: f64,
    escape: u64,
    cfg: &SimConfig,
) -> Result<ReturnCheck> {
    if !(y > x && escape > y) {
        return Err(Error::param(format!(
            "need escape > y > x, got {escape}, {y}, {x}"
        )));
    }
    let est = return_probability(chain, y, x, escape, cfg)?;
    let bound = return_probability_bound(x, y, delta);
    let escape_correction = return_probability_bound(x, escape, delta);
    Ok(ReturnCheck {
        y,
        x,
        estimate: est.probability,
        stderr: est.stderr,
        bound,
        delta,
        escape,
        escape_correction,
        unresolved: est.unresolved,
        pass: est.probability + escape_correction + est.unresolved <= bound + 3.0 * est.stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::make_birth_death;
    use crate::harmonic::harmonic_solve;
    use crate::stationary::stationary_skip_free;

    fn canonical() -> (ChainSpec, TransformedChain) {
        let c = make_birth_death(2.0, 1.0).unwrap();
        let h = harmonic_solve(&c, 1000).unwrap();
        let s = stationary_skip_free(&c, 1000).unwrap();
        let tc = transform(&c, &h, &s).unwrap();
        (c, tc)
    }

    #[test]
    fn rows_are_stochastic_and_moments_converge() {
        let (_, tc) = canonical();
        assert!(
            tc.row_sum_deviation <= ROW_SUM_TOL,
            "{}",
            tc.row_sum_deviation
        );
        let m = transformed_moments(&tc, &[200]).unwrap();
        let xm1 = 200.0 * m.m1[0];
        assert!((xm1 - 3.0).abs() <= 0.15, "{xm1}");
        assert!((m.m2[0] - 1.0).abs() <= 0.05, "{}", m.m2[0]);
        let d = 2.0 * xm1 + m.m2[0];
        assert!((d - 7.0).abs() <= 0.7, "{d}");
        assert!(transformed_moments(&tc, &[1000]).is_err());
    }

    #[test]
    fn constant_v_is_rejected() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        let s = stationary_skip_free(&c, 300).unwrap();
        let err =
            TransformedChain::from_values(&c, vec![1.0; 301], 0.0, &s.probs, 300).unwrap_err();
        assert!(matches!(err, Error::RowSum { .. }), "{err}");
    }

    #[test]
    fn kernel_powers_match_killed_chain() {
        let (_, tc) = canonical();
        for x in [5, 20, 150] {
            assert!(kernel_power_check(&tc, x, 10).unwrap() <= 1e-8);
        }
        assert!(kernel_power_check(&tc, 995, 10).is_err());
    }

    #[test]
    fn never_enters_b_and_entrance_law_is_normalized() {
        let (_, tc) = canonical();
        let s: f64 = tc.init.iter().map(|p| p.1).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(tc.init.iter().all(|p| p.0 > tc.boundary_x0));
        for z in 0..=tc.boundary_x0 {
            assert!(tc
                .law(z)
                .iter()
                .all(|(o, _)| z as i64 + o > tc.boundary_x0 as i64));
        }
        let cfg = tc.entrance_config(3, 2000, 50);
        let b = crate::mc::simulate(&tc, &cfg).unwrap();
        assert!(b.replicas.iter().all(|t| t.min_state > tc.boundary_x0));
    }

    #[test]
    fn rows_beyond_window_are_laws() {
        let (_, tc) = canonical();
        for x in [1000, 2500, 5000] {
            let l = tc.law(x);
            let s: f64 = l.probs().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(x as f64 * l.moment(1) > 2.5);
        }
        assert!(tc.edge_deviation < 1e-2, "{}", tc.edge_deviation);
    }
}
