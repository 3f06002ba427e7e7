//! Mean drifts of test functions, the rate functions r, R, U, ℓ, and drift
//! classification of chains.
//!
//! The rate function is r(x) = (2μ/b)·x/(1+x²), so R(x) = (μ/b)·ln(1+x²),
//! e^{R(x)} = (1+x²)^{μ/b} and U(x) = ∫_{x₀}^{x} e^{R(y)} dy for x > x₀.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{rec3_ratio, Chain, ChainSpec};
use crate::error::{Error, Result};
use crate::quad;

/// Relative tolerance of every U quadrature.
pub const U_REL_TOL: f64 = 1e-12;

/// A real function on ℤ⁺ with increments V(y) − V(x).
pub trait TestFunction: Sync {
    fn value(&self, x: u64) -> f64;

    fn increment(&self, x: u64, y: u64) -> f64 {
        self.value(y) - self.value(x)
    }
}

impl<F: Fn(u64) -> f64 + Sync> TestFunction for F {
    fn value(&self, x: u64) -> f64 {
        self(x)
    }
}

/// V(x) = x², with increments computed as 2x·k + k².
pub struct Square;

impl TestFunction for Square {
    fn value(&self, x: u64) -> f64 {
        (x as f64) * (x as f64)
    }

    fn increment(&self, x: u64, y: u64) -> f64 {
        let k = y as f64 - x as f64;
        2.0 * x as f64 * k + k * k
    }
}

/// E V(x + ξ(x)) − V(x).
pub fn drift<C, V>(chain: &C, v: &V, x: u64) -> f64
where
    C: Chain + ?Sized,
    V: TestFunction + ?Sized,
{
    chain
        .law(x)
        .iter()
        .map(|(o, p)| p * v.increment(x, (x as i64 + o) as u64))
        .sum()
}

/// r, R, e^R, U and ℓ at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rate {
    pub r: f64,
    #[serde(rename = "R")]
    pub big_r: f64,
    #[serde(rename = "expR")]
    pub exp_r: f64,
    #[serde(rename = "U")]
    pub u: f64,
    pub ell: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFunctions {
    pub mu: f64,
    pub b: f64,
    pub rho: f64,
    pub x0: u64,
}

impl RateFunctions {
    pub fn new(mu: f64, b: f64, x0: u64) -> Result<Self> {
        if !(b > 0.0 && b.is_finite() && mu.is_finite()) {
            return Err(Error::param(format!(
                "need finite mu and b > 0, got mu={mu}, b={b}"
            )));
        }
        Ok(RateFunctions {
            mu,
            b,
            rho: 2.0 * mu / b + 1.0,
            x0,
        })
    }

    pub fn for_spec(spec: &ChainSpec) -> Result<Self> {
        Self::new(spec.profile.mu, spec.profile.b, spec.boundary_x0)
    }

    fn k(&self) -> f64 {
        self.mu / self.b
    }

    pub fn r(&self, x: f64) -> f64 {
        2.0 * self.k() * x / (1.0 + x * x)
    }

    pub fn big_r(&self, x: f64) -> f64 {
        self.k() * (x * x).ln_1p()
    }

    pub fn exp_r(&self, x: f64) -> f64 {
        (1.0 + x * x).powf(self.k())
    }

    /// ℓ(x) = x^{2μ/b}/e^{R(x)}, with ℓ(0) = 1.
    pub fn ell(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 1.0;
        }
        (x * x / (1.0 + x * x)).powf(self.k())
    }

    /// ∫_{max(x,x₀)}^{max(y,x₀)} e^R.
    pub fn u_increment(&self, x: f64, y: f64) -> f64 {
        let lo = x.max(self.x0 as f64);
        let hi = y.max(self.x0 as f64);
        quad::integrate(|s| self.exp_r(s), lo, hi, U_REL_TOL)
    }

    pub fn u(&self, x: f64) -> f64 {
        self.u_increment(self.x0 as f64, x)
    }

    /// e^{R(y)} − e^{R(x)} without cancellation.
    pub fn exp_r_increment(&self, x: f64, y: f64) -> f64 {
        self.exp_r(x) * (self.big_r(y) - self.big_r(x)).exp_m1()
    }

    pub fn rate(&self, x: f64) -> Result<Rate> {
        if !(x >= 0.0) {
            return Err(Error::param(format!("rate functions need x >= 0, got {x}")));
        }
        Ok(Rate {
            r: self.r(x),
            big_r: self.big_r(x),
            exp_r: self.exp_r(x),
            u: self.u(x),
            ell: self.ell(x),
        })
    }

    /// U(0..=n), accumulated over unit intervals.
    pub fn u_table(&self, n: u64) -> Vec<f64> {
        let steps: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|k| self.u_increment(k as f64, k as f64 + 1.0))
            .collect();
        let mut out = Vec::with_capacity(n as usize + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for s in steps {
            acc += s;
            out.push(acc);
        }
        out
    }

    /// The test function U_C = U + C·e^R off B, zero on B.
    pub fn u_c(&self, c: f64) -> UC {
        UC { rates: *self, c }
    }
}

/// U_C(x) = U(x) + C·e^{R(x)} for x > x₀ and 0 on B.
#[derive(Debug, Clone, Copy)]
pub struct UC {
    pub rates: RateFunctions,
    pub c: f64,
}

impl TestFunction for UC {
    fn value(&self, x: u64) -> f64 {
        if x <= self.rates.x0 {
            return 0.0;
        }
        let xf = x as f64;
        self.rates.u(xf) + self.c * self.rates.exp_r(xf)
    }

    fn increment(&self, x: u64, y: u64) -> f64 {
        let x0 = self.rates.x0;
        if x <= x0 || y <= x0 {
            return self.value(y) - self.value(x);
        }
        let (xf, yf) = (x as f64, y as f64);
        self.rates.u_increment(xf, yf) + self.c * self.rates.exp_r_increment(xf, yf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    PositiveRecurrent,
    Transient,
    Inconclusive,
}

/// Drift of x² on a grid with the resulting classification.
///
/// `drift` holds 2x·m₁ + m₂; `normalized` holds the drift of U divided by
/// e^{R(x)}/x².
#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub grid: Vec<u64>,
    pub drift: Vec<f64>,
    pub normalized: Vec<f64>,
    pub classification: Classification,
    pub certificate: String,
    pub epsilon: f64,
    pub threshold: Option<u64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
}

impl DriftReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,drift,normalized")?;
        for i in 0..self.grid.len() {
            writeln!(
                w,
                "{},{:e},{:e}",
                self.grid[i], self.drift[i], self.normalized[i]
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "classification": self.classification,
            "certificate": self.certificate,
            "epsilon": self.epsilon,
            "threshold": self.threshold,
            "gamma": self.gamma,
            "delta": self.delta,
        })
    }
}

const DELTA_SCAN: [f64; 3] = [1.0, 0.5, 0.25];

/// Largest δ in {1, 0.5, 0.25} with (1+δ)/(1−γ)^{2+δ} < 1+ε and
/// P{ξ(x) ≤ −γx}·x^{2+δ}/m₂(x) vanishing or decaying on `upper`.
fn return_delta<C: Chain + ?Sized>(chain: &C, upper: &[u64], eps: f64, gamma: f64) -> Option<f64> {
    DELTA_SCAN.into_iter().find(|&d| {
        if (1.0 + d) / (1.0 - gamma).powf(2.0 + d) >= 1.0 + eps {
            return false;
        }
        let vals: Vec<f64> = upper
            .iter()
            .map(|&x| {
                let l = chain.law(x);
                let xf = x as f64;
                l.cdf(-gamma * xf) * xf.powf(2.0 + d) / l.moment(2)
            })
            .collect();
        vals.iter().all(|&v| v == 0.0) || decays(upper, &vals)
    })
}

fn decays(grid: &[u64], vals: &[f64]) -> bool {
    let pts: Vec<(f64, f64)> = grid
        .iter()
        .zip(vals)
        .map(|(&x, &v)| ((x as f64).ln(), v.max(1e-300).ln()))
        .collect();
    pts.len() >= 2 && crate::analysis::least_squares(&pts).0 < -0.1
}

/// Classifies any chain by the drift of x² on `grid`.
///
/// ε is the infimum over the upper half of the grid of |2x·m₁ + m₂| (recurrent
/// side) or of 2x·m₁/m₂ − 1 (transient side). The transient verdict also needs
/// P{ξ(x) ≤ −γx} to be negligible against m₂(x)(1+x)^{−1.5}/x.
pub fn classify_chain<C: Chain + ?Sized>(
    chain: &C,
    rates: Option<&RateFunctions>,
    grid: &[u64],
) -> Result<DriftReport> {
    if grid.len() < 2 {
        return Err(Error::param(
            "classification grid needs at least two states",
        ));
    }
    let rows: Vec<(f64, f64, f64)> = grid
        .par_iter()
        .map(|&x| {
            let l = chain.law(x);
            let d2 = drift(chain, &Square, x);
            let norm = match rates {
                Some(r) => {
                    let xf = x as f64;
                    drift(chain, &r.u_c(0.0), x) * xf * xf / r.exp_r(xf)
                }
                None => f64::NAN,
            };
            (d2, norm, 2.0 * x as f64 * l.moment(1) / l.moment(2))
        })
        .collect();
    let drift_v: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let normalized: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let half = grid.len() / 2;
    let upper = &grid[half..];

    let sup_upper = drift_v[half..]
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut report = DriftReport {
        grid: grid.to_vec(),
        drift: drift_v.clone(),
        normalized,
        classification: Classification::Inconclusive,
        certificate: String::new(),
        epsilon: 0.0,
        threshold: None,
        gamma: None,
        delta: None,
    };

    if sup_upper < 0.0 {
        let eps = -sup_upper;
        let mut thr = grid[grid.len() - 1];
        for i in (0..grid.len()).rev() {
            if drift_v[i] <= -eps {
                thr = grid[i];
            } else {
                break;
            }
        }
        report.classification = Classification::PositiveRecurrent;
        report.epsilon = eps;
        report.threshold = Some(thr);
        report.certificate = format!(
            "Lamperti drift criterion: 2x*m1 + m2 <= -{eps:.6} for all grid states x >= {thr}"
        );
        return Ok(report);
    }

    let ratio_inf = rows[half..]
        .iter()
        .map(|r| r.2)
        .fold(f64::INFINITY, f64::min);
    let eps = ratio_inf - 1.0;
    if eps > 0.0 {
        let mut thr = grid[grid.len() - 1];
        for i in (0..grid.len()).rev() {
            if rows[i].2 >= 1.0 + eps {
                thr = grid[i];
            } else {
                break;
            }
        }
        let gamma = (1.0 - 1.0 / (1.0 + eps).sqrt()) / 2.0;
        let ratios: Vec<f64> = upper
            .iter()
            .map(|&x| rec3_ratio(chain, x, gamma, |y| (1.0 + y).powf(-1.5)))
            .collect();
        let vacuous = ratios.iter().all(|&r| r == 0.0);
        report.epsilon = eps;
        report.threshold = Some(thr);
        report.gamma = Some(gamma);
        if vacuous || decays(upper, &ratios) {
            report.classification = Classification::Transient;
            report.delta = return_delta(chain, upper, eps, gamma);
            report.certificate = format!(
                "transience: 2x*m1/m2 >= 1+{eps:.6} for grid states x >= {thr}; \
                 P{{xi(x) <= -{gamma:.4}x}} = o(m2(x)p(x)/x) with p(x)=(1+x)^-1.5 ({})",
                if vacuous {
                    "no such jumps on the upper grid"
                } else {
                    "decaying on the grid, extrapolated"
                }
            );
        } else {
            report.certificate = format!(
                "2x*m1/m2 >= 1+{eps:.6} for grid states x >= {thr}, but large negative jumps \
                 violate the integrable-majorant condition; drift test inconclusive"
            );
        }
        return Ok(report);
    }

    report.certificate =
        "neither the recurrence nor the transience drift condition holds on the upper half-grid"
            .into();
    Ok(report)
}

/// Classifies a `ChainSpec`, with U normalisation from its profile.
pub fn classify(spec: &ChainSpec, grid: &[u64]) -> Result<DriftReport> {
    let rates = RateFunctions::for_spec(spec)?;
    classify_chain(spec, Some(&rates), grid)
}

/// Drift of log(1+x); an eventually negative drift witnesses recurrence.
#[derive(Debug, Clone, Serialize)]
pub struct LogDriftReport {
    pub grid: Vec<u64>,
    pub drift: Vec<f64>,
    /// Smallest grid state from which every later drift is negative.
    pub negative_from: Option<u64>,
}

pub fn log_drift_check<C: Chain + ?Sized>(chain: &C, grid: &[u64]) -> LogDriftReport {
    let f = |x: u64| (x as f64).ln_1p();
    let d: Vec<f64> = grid.par_iter().map(|&x| drift(chain, &f, x)).collect();
    let mut from = None;
    for i in (0..grid.len()).rev() {
        if d[i] < 0.0 {
            from = Some(grid[i]);
        } else {
            break;
        }
    }
    LogDriftReport {
        grid: grid.to_vec(),
        drift: d,
        negative_from: from,
    }
}

/// Closed-form bounds for a transient chain.
#[derive(Debug, Clone, Serialize)]
pub struct PassageBounds {
    /// Bound on E_y T(x) for x ≥ y.
    pub mean_bound: Option<f64>,
    /// Same bound with x² replaced by (x + J)², J the largest up-jump below x.
    pub mean_bound_overshoot: Option<f64>,
    /// Bound (x/y)^δ on the probability of ever entering [0, x] from y > x.
    pub return_bound: Option<f64>,
    /// Observational: smallest t₀ from simulation, when supplied.
    pub tail_rate_hint: Option<f64>,
    pub epsilon: f64,
    pub epsilon0: f64,
    pub x0: u64,
    pub c_x: Option<f64>,
}

/// Evaluates the up-crossing and return bounds.
///
/// The mean bound uses ε from the certificate and the smallest x₀ with
/// 2z·m₁ + m₂ ≥ ε for all z in (x₀, x]; ε₀ covers the drift on [0, x₀].
/// `h_y_x0` is the expected number of visits of [0, x₀] from y.
pub fn passage_bounds<C: Chain + ?Sized>(
    chain: &C,
    report: &DriftReport,
    x: u64,
    y: u64,
    h_y_x0: f64,
    tail_rate_hint: Option<f64>,
) -> Result<PassageBounds> {
    if report.classification != Classification::Transient {
        return Err(Error::Classification {
            expected: "transient",
            detail: report.certificate.clone(),
        });
    }
    let eps = report.epsilon;
    let mut out = PassageBounds {
        mean_bound: None,
        mean_bound_overshoot: None,
        return_bound: None,
        tail_rate_hint,
        epsilon: eps,
        epsilon0: 0.0,
        x0: 0,
        c_x: None,
    };
    if x >= y {
        let d: Vec<f64> = (0..=x).map(|z| drift(chain, &Square, z)).collect();
        let mut x0 = x;
        while x0 > 0 && d[x0 as usize] >= eps {
            x0 -= 1;
        }
        let eps0 = d[..=x0 as usize].iter().fold(0.0f64, |a, &v| a.max(-v));
        let c_x = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let jump = (0..=x)
            .map(|z| chain.law(z).max_offset().max(0))
            .max()
            .unwrap_or(0) as f64;
        let (xf, yf) = (x as f64, y as f64);
        let slack = (eps + eps0) * h_y_x0;
        let raw = (xf * xf - yf * yf + c_x + slack) / eps;
        let over = ((xf + jump).powi(2) - yf * yf + c_x + slack) / eps;
        out.mean_bound = Some(raw.max(1.0));
        out.mean_bound_overshoot = Some(over.max(1.0));
        out.epsilon0 = eps0;
        out.x0 = x0;
        out.c_x = Some(c_x);
    }
    if y > x {
        let delta = report.delta.ok_or_else(|| {
            Error::param("no feasible delta for the return bound in the certificate")
        })?;
        out.return_bound = Some(return_probability_bound(x, y, delta));
    }
    Ok(out)
}

/// (x/y)^δ.
pub fn return_probability_bound(x: u64, y: u64, delta: f64) -> f64 {
    (x as f64 / y as f64).powf(delta)
}
