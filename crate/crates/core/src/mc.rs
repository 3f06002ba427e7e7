//! Seeded trajectory simulation and Monte Carlo checks of the limit theorems.
//!
//! Replica r draws from `ChaCha8Rng::seed_from_u64(seed)` on stream r, so
//! results do not depend on thread scheduling. Replica results are collected
//! in index order before any reduction.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::chain::{Chain, ChainSpec, DriftProfile, JumpLaw, M3Mode};
use crate::error::{Error, Result};
use crate::lyapunov::{passage_bounds, DriftReport, PassageBounds};
use crate::stationary::StationaryTable;

/// Budget cap on steps × replicas unless `LAMPERTI_MAX_EVENTS` overrides it.
pub const DEFAULT_MAX_EVENTS: u128 = 10_000_000_000;

pub fn max_events() -> u128 {
    std::env::var("LAMPERTI_MAX_EVENTS")
        .ok()
        .and_then(|s| s.trim().parse::<f64>().ok())
        .filter(|v| *v >= 1.0)
        .map_or(DEFAULT_MAX_EVENTS, |v| v as u128)
}

/// Inverse-CDF draw of an offset.
pub(crate) fn sample_offset<R: Rng + ?Sized>(law: &JumpLaw, rng: &mut R) -> i64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (o, p) in law.iter() {
        acc += p;
        if u < acc {
            return o;
        }
    }
    law.max_offset()
}

fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Flattened cumulative jump tables for states 0..=cap, with a slow path above.
pub struct Stepper<'a, C: Chain + ?Sized> {
    chain: &'a C,
    start: Vec<u32>,
    offsets: Vec<i32>,
    cum: Vec<f64>,
}

impl<'a, C: Chain + ?Sized> Stepper<'a, C> {
    pub fn new(chain: &'a C, cap: u64) -> Result<Self> {
        let laws: Vec<JumpLaw> = (0..=cap)
            .into_par_iter()
            .map(|x| chain.law(x).into_owned())
            .collect();
        let mut start = Vec::with_capacity(laws.len() + 1);
        let mut offsets = Vec::new();
        let mut cum = Vec::new();
        for (x, l) in laws.iter().enumerate() {
            if l.min_offset() < -(x as i64) {
                return Err(Error::SupportExit { state: x as u64 });
            }
            start.push(offsets.len() as u32);
            let mut acc = 0.0;
            for (o, p) in l.iter() {
                acc += p;
                offsets.push(o as i32);
                cum.push(acc);
            }
            // Rounding in the running sum must not leave a gap below 1.
            if let Some(last) = cum.last_mut() {
                *last = f64::INFINITY;
            }
        }
        start.push(offsets.len() as u32);
        Ok(Stepper {
            chain,
            start,
            offsets,
            cum,
        })
    }

    #[inline]
    pub fn step<R: Rng + ?Sized>(&self, x: u64, rng: &mut R) -> Result<u64> {
        let xi = x as usize;
        if xi + 1 < self.start.len() {
            let u: f64 = rng.random();
            let (a, b) = (self.start[xi] as usize, self.start[xi + 1] as usize);
            let mut k = a;
            while k + 1 < b && u >= self.cum[k] {
                k += 1;
            }
            return Ok((x as i64 + self.offsets[k] as i64) as u64);
        }
        let l = self.chain.law(x);
        let y = x as i64 + sample_offset(&l, rng);
        if y < 0 {
            return Err(Error::SupportExit { state: x });
        }
        Ok(y as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub seed: u64,
    pub n_steps: u64,
    pub n_replicas: u64,
    pub x_start: u64,
    pub record_stride: u64,
    /// Initial law; overrides `x_start` when present.
    pub initial: Option<Vec<(u64, f64)>>,
    /// States 0..=table_cap use precomputed jump tables.
    pub table_cap: u64,
}

impl SimConfig {
    pub fn new(seed: u64, n_steps: u64, n_replicas: u64, x_start: u64) -> Self {
        SimConfig {
            seed,
            n_steps,
            n_replicas,
            x_start,
            record_stride: 0,
            initial: None,
            table_cap: 4096,
        }
    }

    pub fn check_budget(&self) -> Result<()> {
        let requested = self.n_steps as u128 * self.n_replicas as u128;
        let cap = max_events();
        if requested > cap {
            return Err(Error::Budget { requested, cap });
        }
        if self.n_replicas == 0 {
            return Err(Error::param("need at least one replica"));
        }
        Ok(())
    }

    fn start_state<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.initial {
            None => self.x_start,
            Some(law) => {
                let total: f64 = law.iter().map(|p| p.1).sum();
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                for &(x, p) in law {
                    acc += p;
                    if u < acc {
                        return x;
                    }
                }
                law.last().map_or(self.x_start, |p| p.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub replica: u64,
    pub start: u64,
    /// States at steps 0, s, 2s, … for stride s; empty when s = 0.
    pub path: Vec<u64>,
    #[serde(rename = "final")]
    pub final_state: u64,
    pub max_state: u64,
    pub min_state: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryBatch {
    pub seed: u64,
    pub n_steps: u64,
    pub replicas: Vec<Trajectory>,
}

impl TrajectoryBatch {
    /// One JSON record per replica, without the recorded path.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.replicas {
            let rec = serde_json::json!({
                "replica": t.replica,
                "seed": self.seed,
                "steps": self.n_steps,
                "start": t.start,
                "final": t.final_state,
                "max": t.max_state,
                "min": t.min_state,
            });
            writeln!(w, "{rec}")?;
        }
        Ok(())
    }
}

/// Runs `n_replicas` independent trajectories of `n_steps` steps.
pub fn simulate<C: Chain + ?Sized>(chain: &C, cfg: &SimConfig) -> Result<TrajectoryBatch> {
    cfg.check_budget()?;
    let stepper = Stepper::new(chain, cfg.table_cap)?;
    let replicas = (0..cfg.n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(cfg.seed, r);
            let start = cfg.start_state(&mut rng);
            let mut x = start;
            let (mut lo, mut hi) = (x, x);
            let mut path = Vec::new();
            if cfg.record_stride > 0 {
                path.push(x);
            }
            for n in 1..=cfg.n_steps {
                x = stepper.step(x, &mut rng)?;
                lo = lo.min(x);
                hi = hi.max(x);
                if cfg.record_stride > 0 && n % cfg.record_stride == 0 {
                    path.push(x);
                }
            }
            Ok(Trajectory {
                replica: r,
                start,
                path,
                final_state: x,
                max_state: hi,
                min_state: lo,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch {
        seed: cfg.seed,
        n_steps: cfg.n_steps,
        replicas,
    })
}

/// Final states only, for large runs.
pub fn final_states<C: Chain + ?Sized>(chain: &C, cfg: &SimConfig) -> Result<Vec<u64>> {
    cfg.check_budget()?;
    let stepper = Stepper::new(chain, cfg.table_cap)?;
    (0..cfg.n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(cfg.seed, r);
            let mut x = cfg.start_state(&mut rng);
            for _ in 0..cfg.n_steps {
                x = stepper.step(x, &mut rng)?;
            }
            Ok(x)
        })
        .collect()
}

/// Kolmogorov–Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct GammaTest {
    pub ks_stat: f64,
    pub mean: f64,
    pub var: f64,
    pub target_mean: f64,
    pub target_var: f64,
    /// |mean − target| / target.
    pub mean_err: f64,
    /// |var − target| / target.
    pub var_err: f64,
    pub shape: f64,
    pub scale: f64,
    pub samples: usize,
}

/// Compares X_n²/n with the Gamma law of mean m = 2μ_eff + b, variance 2bm.
pub fn gamma_limit_test<C: Chain + ?Sized>(
    chain: &C,
    mu_eff: f64,
    b: f64,
    cfg: &SimConfig,
) -> Result<GammaTest> {
    let m = 2.0 * mu_eff + b;
    if !(m > 0.0 && b > 0.0) {
        return Err(Error::param(format!(
            "Gamma target needs 2mu+b > 0 and b > 0 (mu={mu_eff}, b={b})"
        )));
    }
    if cfg.n_steps == 0 {
        return Err(Error::param("Gamma test needs n_steps >= 1"));
    }
    let n = cfg.n_steps as f64;
    let sample: Vec<f64> = final_states(chain, cfg)?
        .into_iter()
        .map(|x| (x as f64) * (x as f64) / n)
        .collect();
    let shape = m / (2.0 * b);
    let scale = 2.0 * b;
    let dist = Gamma::new(shape, 1.0 / scale).map_err(|e| Error::param(e.to_string()))?;
    let ks = ks_distance(&sample, |v| dist.cdf(v));
    let k = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / k;
    let var = sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    let target_var = 2.0 * b * m;
    Ok(GammaTest {
        ks_stat: ks,
        mean,
        var,
        target_mean: m,
        target_var,
        mean_err: (mean - m).abs() / m,
        var_err: (var - target_var).abs() / target_var,
        shape,
        scale,
        samples: sample.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RenewalEstimate {
    pub x_grid: Vec<u64>,
    #[serde(rename = "H")]
    pub h: Vec<f64>,
    pub horizon: u64,
    pub stderr: Vec<f64>,
    /// Fraction of replicas at or below 2x at the horizon.
    pub censored_fraction: Vec<f64>,
    /// censored_fraction · c·(1+x²), with c the largest H(x)/(1+x²) on the grid.
    pub censored_error: Vec<f64>,
    pub replicas: u64,
}

impl RenewalEstimate {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,H,stderr,censored_error")?;
        for i in 0..self.x_grid.len() {
            writeln!(
                w,
                "{},{:e},{:e},{:e}",
                self.x_grid[i], self.h[i], self.stderr[i], self.censored_error[i]
            )?;
        }
        Ok(())
    }

    pub fn at(&self, x: u64) -> Option<(f64, f64)> {
        let i = self.x_grid.iter().position(|&g| g == x)?;
        Some((self.h[i], self.stderr[i]))
    }
}

/// H(x) = E #{0 ≤ n ≤ horizon : X_n ≤ x}, horizon = max(n_steps, ⌈factor·max(x)²⌉).
pub fn renewal_estimate<C: Chain + ?Sized>(
    chain: &C,
    x_grid: &[u64],
    horizon_factor: f64,
    cfg: &SimConfig,
) -> Result<RenewalEstimate> {
    if !(horizon_factor >= 20.0) {
        return Err(Error::param(format!(
            "horizon factor must be >= 20, got {horizon_factor}"
        )));
    }
    if x_grid.is_empty() {
        return Err(Error::param("renewal grid is empty"));
    }
    let mut grid = x_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let xmax = *grid.last().unwrap();
    let horizon = cfg
        .n_steps
        .max((horizon_factor * (xmax as f64).powi(2)).ceil() as u64);
    let run = SimConfig {
        n_steps: horizon,
        ..cfg.clone()
    };
    run.check_budget()?;
    let stepper = Stepper::new(chain, run.table_cap)?;
    let per_rep: Vec<(Vec<f64>, u64)> = (0..run.n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(run.seed, r);
            let mut x = run.start_state(&mut rng);
            let mut occ = vec![0u64; xmax as usize + 1];
            if x <= xmax {
                occ[x as usize] += 1;
            }
            for _ in 0..horizon {
                x = stepper.step(x, &mut rng)?;
                if x <= xmax {
                    occ[x as usize] += 1;
                }
            }
            let mut cum = 0u64;
            let mut acc = Vec::with_capacity(grid.len());
            let mut z = 0usize;
            for &g in &grid {
                while z <= g as usize {
                    cum += occ[z];
                    z += 1;
                }
                acc.push(cum as f64);
            }
            Ok((acc, x))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = per_rep.len() as f64;
    let mut h = vec![0.0; grid.len()];
    let mut sq = vec![0.0; grid.len()];
    for (v, _) in &per_rep {
        for i in 0..grid.len() {
            h[i] += v[i];
            sq[i] += v[i] * v[i];
        }
    }
    let stderr: Vec<f64> = (0..grid.len())
        .map(|i| {
            let m = h[i] / k;
            let var = (sq[i] / k - m * m).max(0.0) * k / (k - 1.0).max(1.0);
            (var / k).sqrt()
        })
        .collect();
    for v in h.iter_mut() {
        *v /= k;
    }
    let c = grid
        .iter()
        .zip(&h)
        .map(|(&x, &v)| v / (1.0 + (x as f64).powi(2)))
        .fold(0.0, f64::max);
    let censored_fraction: Vec<f64> = grid
        .iter()
        .map(|&g| per_rep.iter().filter(|(_, end)| *end <= 2 * g).count() as f64 / k)
        .collect();
    let censored_error = grid
        .iter()
        .zip(&censored_fraction)
        .map(|(&g, f)| f * c * (1.0 + (g as f64).powi(2)))
        .collect();
    Ok(RenewalEstimate {
        x_grid: grid,
        h,
        horizon,
        stderr,
        censored_fraction,
        censored_error,
        replicas: run.n_replicas,
    })
}

/// H_y(x) from several starts with one constant c fitted on the lowest start.
#[derive(Debug, Clone, Serialize)]
pub struct UniformRenewalBound {
    pub starts: Vec<u64>,
    pub c: f64,
    pub estimates: Vec<RenewalEstimate>,
    /// Whether H_y(x) ≤ c(1+x²) + 3·stderr for every start and grid point.
    pub holds: bool,
}

pub fn renewal_uniform_bound<C: Chain + ?Sized>(
    chain: &C,
    starts: &[u64],
    x_grid: &[u64],
    horizon_factor: f64,
    cfg: &SimConfig,
) -> Result<UniformRenewalBound> {
    let mut starts = starts.to_vec();
    starts.sort_unstable();
    let estimates = starts
        .iter()
        .map(|&y| {
            let c = SimConfig {
                x_start: y,
                initial: None,
                ..cfg.clone()
            };
            renewal_estimate(chain, x_grid, horizon_factor, &c)
        })
        .collect::<Result<Vec<_>>>()?;
    let first = estimates
        .first()
        .ok_or_else(|| Error::param("need at least one starting state"))?;
    let c = first
        .x_grid
        .iter()
        .zip(&first.h)
        .map(|(&x, &v)| v / (1.0 + (x as f64).powi(2)))
        .fold(0.0, f64::max);
    let holds = estimates.iter().all(|e| {
        e.x_grid
            .iter()
            .enumerate()
            .all(|(i, &x)| e.h[i] <= c * (1.0 + (x as f64).powi(2)) + 3.0 * e.stderr[i])
    });
    Ok(UniformRenewalBound {
        starts,
        c,
        estimates,
        holds,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PassageRecord {
    pub x: u64,
    pub mean: f64,
    pub stderr: f64,
    pub censored_fraction: f64,
    /// Mean visits to [0, x₀] before T(x), used in the closed-form bound.
    pub visits_below_x0: f64,
    pub bounds: PassageBounds,
    /// Median of T(x)/x².
    pub t0: f64,
    /// (t, P{T(x) > t·x²}) on [t₀, 3t₀].
    pub tail: Vec<(f64, f64)>,
    /// Least-squares slope of log P{T(x) > t·x²} on [t₀, 3t₀].
    pub tail_slope: f64,
    /// Slope on the first half of the fit range is at least the slope on the second.
    pub concave: bool,
}

/// Up-crossing times T(x) = min{n ≥ 1 : X_n > x} from `cfg.x_start`.
///
/// Replicas run until they exceed max(x_list) or `n_steps` elapse; unfinished
/// crossings are censored.
pub fn passage_time_suite<C: Chain + ?Sized>(
    chain: &C,
    report: &DriftReport,
    x_list: &[u64],
    cfg: &SimConfig,
) -> Result<Vec<PassageRecord>> {
    cfg.check_budget()?;
    if x_list.is_empty() {
        return Err(Error::param("passage suite needs at least one level"));
    }
    let y = cfg.x_start;
    // x₀ in the bound depends on x; the count uses each level's own x₀.
    let shapes: Vec<PassageBounds> = x_list
        .iter()
        .map(|&x| passage_bounds(chain, report, x.max(y), y, 0.0, None))
        .collect::<Result<_>>()?;
    let xmax = *x_list.iter().max().unwrap();
    let stepper = Stepper::new(chain, cfg.table_cap.max(xmax + 64))?;
    let per_rep: Vec<Vec<(Option<u64>, u64)>> = (0..cfg.n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(cfg.seed, r);
            let mut x = cfg.x_start;
            let mut out: Vec<(Option<u64>, u64)> = vec![(None, 0); x_list.len()];
            let mut below = vec![0u64; x_list.len()];
            let mut remaining = x_list.len();
            for (i, s) in shapes.iter().enumerate() {
                if x <= s.x0 {
                    below[i] += 1;
                }
            }
            for n in 1..=cfg.n_steps {
                x = stepper.step(x, &mut rng)?;
                for (i, &lvl) in x_list.iter().enumerate() {
                    if out[i].0.is_some() {
                        continue;
                    }
                    if x > lvl {
                        out[i] = (Some(n), below[i]);
                        remaining -= 1;
                    } else if x <= shapes[i].x0 {
                        below[i] += 1;
                    }
                }
                if remaining == 0 {
                    break;
                }
            }
            for i in 0..x_list.len() {
                if out[i].0.is_none() {
                    out[i].1 = below[i];
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = per_rep.len() as f64;
    x_list
        .iter()
        .enumerate()
        .map(|(i, &lvl)| {
            let mut times: Vec<f64> = per_rep
                .iter()
                .filter_map(|r| r[i].0.map(|t| t as f64))
                .collect();
            let done = times.len() as f64;
            let censored = 1.0 - done / k;
            let mean = times.iter().sum::<f64>() / done.max(1.0);
            let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (done - 1.0).max(1.0);
            let visits = per_rep.iter().map(|r| r[i].1 as f64).sum::<f64>() / k;
            let bounds = passage_bounds(chain, report, lvl.max(y), y, visits, None)?;
            times.sort_by(|a, b| a.total_cmp(b));
            let x2 = (lvl as f64).powi(2).max(1.0);
            let t0 = if times.is_empty() {
                f64::NAN
            } else {
                times[times.len() / 2] / x2
            };
            let surv = |t: f64| {
                let over = per_rep
                    .iter()
                    .filter(|r| r[i].0.is_none_or(|v| v as f64 > t * x2))
                    .count();
                over as f64 / k
            };
            let tail: Vec<(f64, f64)> = (0..=20)
                .map(|j| {
                    let t = t0 * (1.0 + 2.0 * j as f64 / 20.0);
                    (t, surv(t))
                })
                .collect();
            let pts: Vec<(f64, f64)> = tail
                .iter()
                .filter(|p| p.1 > 0.0)
                .map(|&(t, q)| (t, q.ln()))
                .collect();
            let slope = if pts.len() >= 2 {
                crate::analysis::least_squares(&pts).0
            } else {
                f64::NAN
            };
            let mid = pts.len() / 2;
            let concave = pts.len() >= 4 && {
                let a = crate::analysis::least_squares(&pts[..=mid]).0;
                let b = crate::analysis::least_squares(&pts[mid..]).0;
                a >= b - 0.05 * a.abs().max(b.abs())
            };
            let bounds = PassageBounds {
                tail_rate_hint: Some(t0),
                ..bounds
            };
            Ok(PassageRecord {
                x: lvl,
                mean,
                stderr: (var / done.max(1.0)).sqrt(),
                censored_fraction: censored,
                visits_below_x0: visits,
                bounds,
                t0,
                tail,
                tail_slope: slope,
                concave,
            })
        })
        .collect()
}

/// Monte Carlo estimate of P_y{X_n ≤ x for some n ≥ 1} within `cfg.n_steps`.
#[derive(Debug, Clone, Serialize)]
pub struct ReturnEstimate {
    pub y: u64,
    pub x: u64,
    pub probability: f64,
    pub stderr: f64,
    /// Fraction of replicas that neither returned nor escaped in time.
    pub unresolved: f64,
    pub replicas: u64,
}

/// Replicas start at y and stop on entering [0, x] or on exceeding `escape`.
///
/// Stopping at `escape` drops returns from above it, which the caller bounds
/// separately (for instance by (x/escape)^δ).
pub fn return_probability<C: Chain + ?Sized>(
    chain: &C,
    y: u64,
    x: u64,
    escape: u64,
    cfg: &SimConfig,
) -> Result<ReturnEstimate> {
    if y <= x {
        return Err(Error::param(format!("need y > x, got y={y}, x={x}")));
    }
    cfg.check_budget()?;
    let stepper = Stepper::new(chain, cfg.table_cap.max(escape + 64))?;
    // Some(true): returned, Some(false): escaped, None: out of steps.
    let outcomes: Vec<Option<bool>> = (0..cfg.n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(cfg.seed, r);
            let mut z = y;
            for _ in 0..cfg.n_steps {
                z = stepper.step(z, &mut rng)?;
                if z <= x {
                    return Ok(Some(true));
                }
                if z > escape {
                    return Ok(Some(false));
                }
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;
    let k = outcomes.len() as f64;
    let p = outcomes.iter().filter(|o| **o == Some(true)).count() as f64 / k;
    let open = outcomes.iter().filter(|o| o.is_none()).count() as f64 / k;
    Ok(ReturnEstimate {
        y,
        x,
        probability: p,
        stderr: (p * (1.0 - p) / k).sqrt().max(1.0 / k),
        unresolved: open,
        replicas: cfg.n_replicas,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OccupationEstimate {
    /// Empirical π on [0, len), from completed cycles only.
    pub probs: Vec<f64>,
    pub cycles: u64,
    pub mean_cycle_length: f64,
    pub steps_in_cycles: u64,
}

impl OccupationEstimate {
    /// ½ Σ_{y ≤ upto} |π̂(y) − π(y)|.
    pub fn tv_distance(&self, exact: &StationaryTable, upto: u64) -> f64 {
        0.5 * (0..=upto as usize)
            .map(|y| {
                let a = self.probs.get(y).copied().unwrap_or(0.0);
                let b = exact.probs.get(y).copied().unwrap_or(0.0);
                (a - b).abs()
            })
            .sum::<f64>()
    }
}

/// Regeneration estimator of π from returns to B = [0, x₀].
///
/// A cycle ends at every step spent in B. Occupation before the first visit
/// and after the last one is discarded; π̂ counts states on [0, `upto`].
pub fn stationary_occupation<C: Chain + ?Sized>(
    chain: &C,
    x0: u64,
    upto: u64,
    cfg: &SimConfig,
    min_cycles: u64,
) -> Result<OccupationEstimate> {
    cfg.check_budget()?;
    let stepper = Stepper::new(chain, cfg.table_cap)?;
    let per_rep: Vec<(Vec<u64>, u64, u64)> = (0..cfg.n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(cfg.seed, r);
            let mut x = cfg.start_state(&mut rng);
            let mut occ = vec![0u64; upto as usize + 1];
            let mut pending = vec![0u64; upto as usize + 1];
            let mut touched: Vec<usize> = Vec::new();
            let (mut cycles, mut steps, mut pend_steps) = (0u64, 0u64, 0u64);
            let mut started = x <= x0;
            for _ in 0..cfg.n_steps {
                if started {
                    if x <= upto {
                        if pending[x as usize] == 0 {
                            touched.push(x as usize);
                        }
                        pending[x as usize] += 1;
                    }
                    pend_steps += 1;
                }
                x = stepper.step(x, &mut rng)?;
                if x <= x0 {
                    if started {
                        cycles += 1;
                        steps += pend_steps;
                        pend_steps = 0;
                        for &z in &touched {
                            occ[z] += pending[z];
                            pending[z] = 0;
                        }
                        touched.clear();
                    }
                    started = true;
                }
            }
            Ok((occ, cycles, steps))
        })
        .collect::<Result<_>>()?;
    let mut occ = vec![0u64; upto as usize + 1];
    let (mut cycles, mut steps) = (0u64, 0u64);
    for (o, c, s) in &per_rep {
        for (a, b) in occ.iter_mut().zip(o) {
            *a += b;
        }
        cycles += c;
        steps += s;
    }
    if cycles < min_cycles {
        return Err(Error::InsufficientCycles {
            cycles,
            required: min_cycles,
        });
    }
    Ok(OccupationEstimate {
        probs: occ.iter().map(|&c| c as f64 / steps as f64).collect(),
        cycles,
        mean_cycle_length: steps as f64 / cycles as f64,
        steps_in_cycles: steps,
    })
}

/// Reflected simple random walk: ±1 with probability ½, 0 ↦ 1 with probability ½.
///
/// X_n²/n tends to a χ²₁ law, so it serves as a zero-drift control for the
/// Gamma test.
pub fn reflected_walk() -> ChainSpec {
    let profile = DriftProfile::new(0.0, 1.0, M3Mode::Converges(0.0), 1.0, 1.0)
        .expect("constant profile is valid");
    ChainSpec::custom("reflected_walk", profile, 0, |x| {
        if x == 0 {
            JumpLaw::try_new(vec![0, 1], vec![0.5, 0.5]).expect("valid law")
        } else {
            JumpLaw::try_new(vec![-1, 1], vec![0.5, 0.5]).expect("valid law")
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{make_birth_death, make_birth_death_up};
    use crate::lyapunov::classify;

    #[test]
    fn determinism() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        let mut cfg = SimConfig::new(7, 500, 8, 10);
        cfg.record_stride = 10;
        let a = simulate(&c, &cfg).unwrap();
        let b = simulate(&c, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.replicas[0].path.len(), 51);
        cfg.seed = 8;
        assert_ne!(simulate(&c, &cfg).unwrap(), a);
    }

    #[test]
    fn frozen_chain_is_constant() {
        let p = DriftProfile::new(1.0, 1.0, M3Mode::Undeclared, 1.0, 1.0).unwrap();
        let c = ChainSpec::custom("frozen", p, 0, |_| {
            JumpLaw::try_new(vec![0], vec![1.0]).unwrap()
        });
        let mut cfg = SimConfig::new(1, 100, 3, 42);
        cfg.record_stride = 1;
        let b = simulate(&c, &cfg).unwrap();
        for t in &b.replicas {
            assert!(t.path.iter().all(|&x| x == 42));
        }
    }

    #[test]
    fn one_step_birth_death() {
        let c = make_birth_death(1.0, 1.0).unwrap();
        let cfg = SimConfig::new(3, 1, 100_000, 10);
        let ends = final_states(&c, &cfg).unwrap();
        let up = ends.iter().filter(|&&x| x == 11).count() as f64 / 1e5;
        let sd = (0.45f64 * 0.55 / 1e5).sqrt();
        assert!((up - 0.45).abs() < 3.0 * sd, "{up}");
    }

    #[test]
    fn budget_cap() {
        let c = make_birth_death(1.0, 1.0).unwrap();
        let cfg = SimConfig::new(3, 1 << 40, 1 << 30, 10);
        assert!(matches!(simulate(&c, &cfg), Err(Error::Budget { .. })));
    }

    #[test]
    fn ks_of_exact_quantiles_is_small() {
        let s: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_distance(&s, |v| v.clamp(0.0, 1.0)) <= 0.0005 + 1e-12);
    }

    #[test]
    fn renewal_is_monotone() {
        let c = make_birth_death_up(2.0, 1.0).unwrap();
        let cfg = SimConfig::new(5, 0, 50, 0);
        let r = renewal_estimate(&c, &[5, 10, 20], 20.0, &cfg).unwrap();
        assert!(r.h.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.h[0] >= 1.0);
        assert_eq!(r.horizon, 8000);
        let longer = renewal_estimate(&c, &[5, 10, 20], 40.0, &cfg).unwrap();
        for (a, b) in r.h.iter().zip(&longer.h) {
            assert!(a <= b);
        }
        assert!(renewal_estimate(&c, &[5], 10.0, &cfg).is_err());
    }

    #[test]
    fn deterministic_up_drift_crosses_in_one_step() {
        let p = DriftProfile::new(-1.0, 1.0, M3Mode::Undeclared, 1.0, 1.0).unwrap();
        let c = ChainSpec::custom("up", p, 0, |_| {
            JumpLaw::try_new(vec![1], vec![1.0]).unwrap()
        });
        let grid: Vec<u64> = (10..=200).step_by(10).collect();
        let rep = crate::lyapunov::classify_chain(&c, None, &grid).unwrap();
        let cfg = SimConfig::new(1, 10, 20, 30);
        let recs = passage_time_suite(&c, &rep, &[5, 30], &cfg).unwrap();
        assert_eq!(recs[0].mean, 1.0);
        assert_eq!(recs[1].mean, 1.0);
        assert_eq!(recs[0].censored_fraction, 0.0);
    }

    #[test]
    fn transient_chain_has_few_cycles() {
        let c = make_birth_death_up(2.0, 1.0).unwrap();
        let cfg = SimConfig::new(11, 1_000_000, 1, 0);
        assert!(matches!(
            stationary_occupation(&c, c.boundary_x0, 50, &cfg, 100),
            Err(Error::InsufficientCycles { .. })
        ));
        let rep = classify(&c, &(10..=1000).step_by(10).collect::<Vec<_>>()).unwrap();
        assert!(rep.delta.is_some());
    }
}
