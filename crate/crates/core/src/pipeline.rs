//! Config-driven end-to-end runs and report bundles.
//!
//! A bundle directory holds CSV tables, per-stage JSON, `summary.json` with
//! one verdict per check, `report.md`, and `metadata.json`. Only
//! `metadata.json` carries a timestamp, so bundles from the same config and
//! seed are otherwise byte-identical.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{fit_tail, predict_constant, FitWindow, TailTolerances};
use crate::chain::{
    make_birth_death, make_birth_death_up, make_heavy_up_jump, make_left_skip_free,
    make_origin_jump_chain, max_up_jump, validate_assumptions, Chain, ChainSpec, CheckStatus,
    JumpFactor, JumpWeight, ORIGIN_JUMP_BASE,
};
use crate::error::{Error, Result};
use crate::harmonic::{harmonic_solve, u_c_drift};
use crate::htransform::{return_check, transform, transformed_moments};
use crate::lyapunov::{classify, Classification};
use crate::mc::{
    gamma_limit_test, passage_time_suite, renewal_estimate, stationary_occupation, SimConfig,
};
use crate::stationary::{stationary_global_balance, stationary_skip_free, StationaryTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    BirthDeath,
    BirthDeathUp,
    LeftSkipFree,
    OriginJump,
    HeavyUp,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub family: FamilyName,
    pub mu: Option<f64>,
    pub b: Option<f64>,
    pub m3_low: Option<f64>,
    pub m3_high: Option<f64>,
    pub tail_index: Option<f64>,
    /// Overrides of the declared profile and boundary.
    pub delta: Option<f64>,
    #[serde(rename = "A")]
    pub a_trunc: Option<f64>,
    pub x0: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Auto,
    ProductFormula,
    GlobalBalance,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    #[serde(rename = "N")]
    pub n: u64,
    pub method: SolveMethod,
    /// [lo, hi]; defaults to [N/40, N/4].
    pub fit_window: Option<[u64; 2]>,
    /// Product-formula and global-balance tables must agree to this.
    pub gb_tol: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            n: 2000,
            method: SolveMethod::Auto,
            fit_window: None,
            gb_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub seed: u64,
    pub gamma_steps: u64,
    pub gamma_replicas: u64,
    pub renewal_x: u64,
    pub renewal_replicas: u64,
    pub horizon_factor: f64,
    pub passage_levels: Vec<u64>,
    pub passage_replicas: u64,
    pub return_y: u64,
    pub return_x: u64,
    pub return_replicas: u64,
    pub occupation_steps: u64,
    pub occupation_replicas: u64,
    pub occupation_upto: u64,
    pub regeneration_steps: u64,
    pub min_cycles: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            seed: 1,
            gamma_steps: 100_000,
            gamma_replicas: 5000,
            renewal_x: 100,
            renewal_replicas: 1000,
            horizon_factor: 20.0,
            passage_levels: vec![50, 100, 200],
            passage_replicas: 2000,
            return_y: 400,
            return_x: 40,
            return_replicas: 2000,
            occupation_steps: 2_500_000,
            occupation_replicas: 8,
            occupation_upto: 50,
            regeneration_steps: 10_000_000,
            min_cycles: 100,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub exponent: f64,
    pub flatness: f64,
    pub harmonic_residual: f64,
    pub v_over_u: f64,
    pub doubling: f64,
    pub uc_drift: f64,
    pub row_sum: f64,
    pub hat_moments: f64,
    pub ks: f64,
    pub gamma_mean: f64,
    pub renewal: f64,
    pub prefactor_lo: f64,
    pub prefactor_hi: f64,
    pub occupation_tv: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            exponent: 0.1,
            flatness: 0.1,
            harmonic_residual: 1e-9,
            v_over_u: 0.05,
            doubling: 1e-3,
            uc_drift: 0.1,
            row_sum: 1e-9,
            hat_moments: 0.05,
            ks: 0.05,
            gamma_mean: 0.05,
            renewal: 0.1,
            prefactor_lo: 0.8,
            prefactor_hi: 1.25,
            occupation_tv: 0.01,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub chain: ChainConfig,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())]
        .bytes()
        .filter(|&c| c == b'\n')
        .count()
        + 1
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map(|s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            line: None,
            msg: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: None, msg });
        if self.solve.n < 20 {
            return bad(format!("N must be at least 20, got {}", self.solve.n));
        }
        if let Some([lo, hi]) = self.solve.fit_window {
            if !(1 <= lo && lo < hi) {
                return bad(format!("fit_window needs 1 <= lo < hi, got [{lo}, {hi}]"));
            }
        }
        if !(self.mc.horizon_factor >= 20.0) {
            return bad(format!(
                "horizon_factor must be >= 20, got {}",
                self.mc.horizon_factor
            ));
        }
        if self.mc.return_y <= self.mc.return_x {
            return bad("return_y must exceed return_x".into());
        }
        Ok(())
    }

    pub fn fit_window(&self) -> FitWindow {
        match self.solve.fit_window {
            Some([lo, hi]) => FitWindow { lo, hi },
            None => FitWindow::default_for(self.solve.n),
        }
    }

    /// The chain declared by `[chain]`, with any profile overrides applied.
    pub fn build_chain(&self) -> Result<ChainSpec> {
        let c = &self.chain;
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::Config {
                line: None,
                msg: format!("family {:?} needs `{name}`", c.family),
            })
        };
        let mut spec = match c.family {
            FamilyName::BirthDeath => make_birth_death(need(c.mu, "mu")?, need(c.b, "b")?)?,
            FamilyName::BirthDeathUp => make_birth_death_up(need(c.mu, "mu")?, need(c.b, "b")?)?,
            FamilyName::LeftSkipFree => make_left_skip_free(
                need(c.mu, "mu")?,
                need(c.b, "b")?,
                need(c.m3_low, "m3_low")?,
                need(c.m3_high, "m3_high")?,
            )?,
            FamilyName::OriginJump => {
                let base = make_birth_death_up(
                    c.mu.unwrap_or(ORIGIN_JUMP_BASE.0),
                    c.b.unwrap_or(ORIGIN_JUMP_BASE.1),
                )?;
                make_origin_jump_chain(base, JumpFactor::M2OverX, JumpWeight::OneOverOnePlusX)?
            }
            FamilyName::HeavyUp => make_heavy_up_jump(need(c.tail_index, "tail_index")?)?,
        };
        if let Some(d) = c.delta {
            spec.profile.delta = d;
        }
        if let Some(a) = c.a_trunc {
            spec.profile.a_trunc = a;
        }
        if let Some(x0) = c.x0 {
            spec.boundary_x0 = x0;
        }
        Ok(spec)
    }
}

/// CLI-level overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trunc_n: Option<u64>,
    pub fit_window: Option<FitWindow>,
    pub gb_tol: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut Config) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.mc.seed = s;
        }
        if let Some(n) = self.trunc_n {
            cfg.solve.n = n;
        }
        if let Some(w) = self.fit_window {
            cfg.solve.fit_window = Some([w.lo, w.hi]);
        }
        if let Some(t) = self.gb_tol {
            cfg.solve.gb_tol = t;
        }
        cfg.check()
    }
}

/// Log-spaced states in [lo, hi].
pub fn log_grid(lo: u64, hi: u64, k: usize) -> Vec<u64> {
    let (a, b) = ((lo.max(1) as f64).ln(), (hi.max(lo + 1) as f64).ln());
    let mut g: Vec<u64> = (0..k)
        .map(|i| {
            (a + (b - a) * i as f64 / (k - 1).max(1) as f64)
                .exp()
                .round() as u64
        })
        .collect();
    g.dedup();
    g
}

/// Grid for moment checks and classification.
pub fn analysis_grid(spec: &ChainSpec, n: u64) -> Vec<u64> {
    let lo = (2 * spec.boundary_x0 + 2).max(10);
    log_grid(lo, (n / 2).max(lo + 1), 48)
}

pub fn is_skip_free<C: Chain + ?Sized>(chain: &C, n: u64) -> bool {
    max_up_jump(chain, n) <= 1 && (0..=n).all(|x| chain.law(x).min_offset() >= -1)
}

/// Solves with the configured method; `Auto` picks the product formula for
/// skip-free chains.
pub fn solve_stationary(spec: &ChainSpec, n: u64, method: SolveMethod) -> Result<StationaryTable> {
    match method {
        SolveMethod::ProductFormula => stationary_skip_free(spec, n),
        SolveMethod::GlobalBalance => stationary_global_balance(spec, n),
        SolveMethod::Auto if is_skip_free(spec, n) => stationary_skip_free(spec, n),
        SolveMethod::Auto => stationary_global_balance(spec, n),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub values: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Positive recurrent with 2μ > b: stationary tail and transform checks.
    Full,
    /// Positive recurrent with 2μ ≤ b: stationary solve only.
    Recurrent,
    /// Transient: passage, return, renewal and Gamma checks on the chain.
    Transient,
    /// No drift certificate: regeneration count only.
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub family: String,
    pub branch: Branch,
    pub message: Option<String>,
    pub checks: Vec<CheckResult>,
    pub all_pass: bool,
    pub aborted_at: Option<String>,
}

struct Bundle {
    dir: PathBuf,
}

impl Bundle {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Bundle {
            dir: dir.to_path_buf(),
        })
    }

    fn file(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn json(&self, name: &str, v: &impl Serialize) -> Result<()> {
        let mut w = self.file(name)?;
        serde_json::to_writer_pretty(&mut w, v)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn csv(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = self.file(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn rel_err(a: f64, target: f64) -> f64 {
    (a - target).abs() / target.abs()
}

struct Run<'a> {
    cfg: &'a Config,
    spec: ChainSpec,
    bundle: Bundle,
    checks: Vec<CheckResult>,
    branch: Branch,
    message: Option<String>,
    notes: Vec<String>,
}

impl Run<'_> {
    fn check(&mut self, name: &'static str, pass: bool, detail: String, values: Value) {
        self.checks.push(CheckResult {
            name,
            pass,
            detail,
            values,
        });
    }

    fn stage<T>(
        &mut self,
        name: &'static str,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        f(self).map_err(|e| e.at_stage(name))
    }

    fn summary(&self, aborted_at: Option<String>) -> Summary {
        Summary {
            family: self.spec.family_tag.clone(),
            branch: self.branch,
            message: self.message.clone(),
            all_pass: aborted_at.is_none() && self.checks.iter().all(|c| c.pass),
            checks: self.checks.clone(),
            aborted_at,
        }
    }

    fn full_branch(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let n = cfg.solve.n;
        let tol = &cfg.tolerances;
        let spec = self.spec.clone();

        let stat = self.stage("stationary", |r| {
            let stat = solve_stationary(&spec, n, cfg.solve.method)?;
            r.bundle.csv("stationary.csv", |w| stat.write_csv(w))?;
            if is_skip_free(&spec, n) {
                let pf = stationary_skip_free(&spec, n)?;
                let gb = stationary_global_balance(&spec, n)?;
                let diff = pf
                    .probs
                    .iter()
                    .zip(&gb.probs)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                r.check(
                    "cross_oracle",
                    diff <= cfg.solve.gb_tol,
                    format!(
                        "max |pi_product - pi_balance| = {diff:.3e} (tol {:.0e})",
                        cfg.solve.gb_tol
                    ),
                    json!({ "max_abs_diff": diff, "tol": cfg.solve.gb_tol }),
                );
            }
            Ok(stat)
        })?;

        let harm = self.stage("harmonic", |r| {
            let h = harmonic_solve(&spec, n)?;
            r.bundle.csv("harmonic.csv", |w| h.write_csv(w))?;
            let x = 500.min(n / 4).max(spec.boundary_x0 + 1);
            let ratio = h.v[x as usize] / h.u[x as usize];
            let res = h.interior_residual();
            let pass = res <= tol.harmonic_residual
                && (ratio - 1.0).abs() <= tol.v_over_u
                && h.doubling_change < tol.doubling;
            r.check(
                "harmonicity",
                pass,
                format!(
                    "residual {res:.2e}, V/U({x}) = {ratio:.5}, doubling change {:.2e}",
                    h.doubling_change
                ),
                json!({ "residual": res, "x": x, "v_over_u": ratio, "doubling_change": h.doubling_change }),
            );
            if let Some(c0) = h.c0 {
                let rates = h.rates;
                let scale = (rates.rho - 1.0) * rates.b;
                let mut rows = Vec::new();
                let mut ok = true;
                for c in [c0 - 1.0, c0, c0 + 1.0] {
                    let d = u_c_drift(&spec, c, x)?;
                    let pred = d.predicted.unwrap_or(f64::NAN);
                    // The prediction vanishes at C₀; compare on the scale of the ±1 cases there.
                    let good = if (c - c0).abs() < 0.5 {
                        (d.normalized - pred).abs() <= tol.uc_drift * scale / 2.0
                    } else {
                        rel_err(d.normalized, pred) <= tol.uc_drift
                    };
                    ok &= good;
                    rows.push(json!({ "C": c, "normalized": d.normalized, "predicted": pred, "pass": good }));
                }
                r.check("uc_drift", ok, format!("U_C drift at x = {x} for C in C0 +- 1"), Value::Array(rows));
            }
            Ok(h)
        })?;

        let tc = self.stage("transform", |r| {
            let tc = transform(&spec, &harm, &stat)?;
            r.bundle.csv("kernel.csv", |w| tc.write_kernel_csv(w))?;
            r.bundle.csv("init.csv", |w| tc.write_init_csv(w))?;
            Ok(tc)
        })?;

        self.stage("transformed_moments", |r| {
            let hi = tc.interior_end();
            let grid = log_grid(tc.excluded_up_to + 1, hi, 48);
            let m = transformed_moments(&tc, &grid)?;
            r.bundle.csv("transformed_moments.csv", |w| m.write_csv(w))?;
            let x = 200.min(hi / 2).max(tc.excluded_up_to + 1);
            let mx = transformed_moments(&tc, &[x])?;
            let xm1 = x as f64 * mx.m1[0];
            let m2 = mx.m2[0];
            let pass = tc.row_sum_deviation <= tol.row_sum
                && rel_err(xm1, tc.hat_mu) <= tol.hat_moments
                && rel_err(m2, tc.hat_b) <= tol.hat_moments;
            r.check(
                "transform_stochastic",
                pass,
                format!(
                    "row sums within {:.1e}; x*m1({x}) = {xm1:.4} (target {}), m2 = {m2:.4} (target {})",
                    tc.row_sum_deviation, tc.hat_mu, tc.hat_b
                ),
                json!({
                    "row_sum_deviation": tc.row_sum_deviation,
                    "edge_deviation": tc.edge_deviation,
                    "x": x, "x_m1": xm1, "m2": m2,
                    "target_mu": tc.hat_mu, "target_b": tc.hat_b,
                }),
            );
            Ok(())
        })?;

        let mc = &cfg.mc;
        let ren = self.stage("renewal", |r| {
            let x = mc.renewal_x;
            let cfg_r = tc.entrance_config(mc.seed, 0, mc.renewal_replicas);
            let e = renewal_estimate(&tc, &[(x / 4).max(1), (x / 2).max(1), x], mc.horizon_factor, &cfg_r)?;
            r.bundle.csv("renewal_hat.csv", |w| e.write_csv(w))?;
            let (h, se) = e.at(x).expect("grid contains x");
            let kappa = h / (x as f64).powi(2);
            let target = 1.0 / (2.0 * (tc.hat_mu - tc.hat_b) + tc.hat_b);
            r.check(
                "renewal",
                rel_err(kappa, target) <= tol.renewal,
                format!("H_hat({x})/x^2 = {kappa:.4} (target {target:.4})"),
                json!({ "x": x, "kappa": kappa, "stderr": se / (x as f64).powi(2), "target": target }),
            );
            Ok(e)
        })?;

        self.stage("gamma", |r| {
            let cfg_g =
                tc.entrance_config(mc.seed.wrapping_add(1), mc.gamma_steps, mc.gamma_replicas);
            let g = gamma_limit_test(&tc, tc.hat_mu, tc.hat_b, &cfg_g)?;
            r.bundle.json("gamma.json", &g)?;
            r.check(
                "gamma_limit",
                g.ks_stat <= tol.ks && g.mean_err <= tol.gamma_mean,
                format!(
                    "KS = {:.4}, mean {:.4} vs {:.4} (shape {}, scale {})",
                    g.ks_stat, g.mean, g.target_mean, g.shape, g.scale
                ),
                serde_json::to_value(&g)?,
            );
            Ok(())
        })?;

        let mut fit = self.stage("fit_tail", |r| {
            let fit = fit_tail(
                &stat,
                &harm.rates,
                cfg.fit_window(),
                TailTolerances {
                    exponent: tol.exponent,
                    flatness: tol.flatness,
                },
            )?;
            r.bundle.csv("tail_fit.csv", |w| {
                writeln!(w, "x,tail,ratio")?;
                for &(x, q) in &fit.ell_ratio {
                    writeln!(w, "{x},{:e},{q:e}", stat.tail_estimate(x) / (1.0 + stat.tail_mass_bound))?;
                }
                Ok(())
            })?;
            r.check(
                "tail_exponent",
                fit.verdict.exponent,
                format!(
                    "slope {:.4} +- {:.4} on [{}, {}] (theory {:.4})",
                    fit.exponent_fit, fit.exponent_stderr, fit.window.lo, fit.window.hi, fit.exponent_theory
                ),
                json!({ "fit": fit.exponent_fit, "stderr": fit.exponent_stderr, "theory": fit.exponent_theory,
                        "window": fit.window, "shrunk": fit.shrunk }),
            );
            r.check(
                "slowly_varying_factor",
                fit.verdict.flat,
                format!("ratio max/min = {:.4} on the upper half-window", fit.flatness),
                json!({ "flatness": fit.flatness, "c_empirical": fit.c_empirical }),
            );
            Ok(fit)
        })?;

        self.stage("predict_constant", |r| {
            let p = predict_constant(&stat, &harm, &tc, Some(&ren))?;
            fit.c_predicted = Some(p.c_predicted);
            r.bundle.json("tail_fit.json", &fit)?;
            r.bundle.json("prefactor.json", &p)?;
            let ratio = fit.c_empirical / p.c_predicted;
            r.check(
                "prefactor",
                ratio >= tol.prefactor_lo && ratio <= tol.prefactor_hi,
                format!(
                    "c_empirical / c_predicted = {:.4} / {:.4} = {ratio:.4}",
                    fit.c_empirical, p.c_predicted
                ),
                json!({ "c_empirical": fit.c_empirical, "c_predicted": p.c_predicted, "ratio": ratio,
                        "c_predicted_mc": p.c_predicted_mc, "c_predicted_mc_stderr": p.c_predicted_mc_stderr }),
            );
            Ok(())
        })?;

        self.stage("occupation", |r| {
            let upto = mc.occupation_upto.min(n);
            let mut cfg_o = SimConfig::new(
                mc.seed.wrapping_add(2),
                mc.occupation_steps,
                mc.occupation_replicas,
                0,
            );
            cfg_o.table_cap = n;
            let occ = stationary_occupation(&spec, spec.boundary_x0, upto, &cfg_o, mc.min_cycles)?;
            let tv = occ.tv_distance(&stat, upto);
            r.check(
                "occupation",
                tv <= tol.occupation_tv,
                format!(
                    "TV distance on [0, {upto}] = {tv:.4} over {} cycles",
                    occ.cycles
                ),
                json!({ "tv": tv, "cycles": occ.cycles, "upto": upto }),
            );
            Ok(())
        })?;
        Ok(())
    }

    fn transient_branch(
        &mut self,
        report: &crate::lyapunov::DriftReport,
        moments_ok: bool,
    ) -> Result<()> {
        let cfg = self.cfg;
        let mc = &cfg.mc;
        let tol = &cfg.tolerances;
        let spec = self.spec.clone();
        let p = spec.profile;
        // The profile stores the signed drift coefficient; upward drift is −μ.
        let mu_up = -p.mu;

        self.stage("passage", |r| {
            let levels = &mc.passage_levels;
            let top = levels.iter().copied().max().unwrap_or(1);
            let steps = (mc.horizon_factor * (top as f64).powi(2)) as u64;
            let cfg_p = SimConfig::new(mc.seed, steps, mc.passage_replicas, 0);
            let recs = passage_time_suite(&spec, report, levels, &cfg_p)?;
            r.bundle.json("passage.json", &recs)?;
            let ok = recs.iter().all(|q| {
                q.censored_fraction == 0.0 && q.bounds.mean_bound.is_some_and(|m| q.mean <= m)
            });
            let detail = recs
                .iter()
                .map(|q| {
                    format!(
                        "E T({}) = {:.1}, bound {:.1}",
                        q.x,
                        q.mean,
                        q.bounds.mean_bound.unwrap_or(f64::NAN)
                    )
                })
                .collect::<Vec<_>>()
                .join("; ");
            r.check("passage_bounds", ok, detail, serde_json::to_value(&recs)?);
            Ok(())
        })?;

        self.stage("return", |r| {
            let delta = report.delta.ok_or_else(|| Error::Classification {
                expected: "transient with a return exponent",
                detail: "no admissible delta".into(),
            })?;
            let (y, x) = (mc.return_y, mc.return_x);
            let escape = 2 * y;
            // Escape from y to 2y takes about 3y²/(2μ+b) steps; 4·(2y)² leaves ample room.
            let steps = 4 * escape * escape;
            let cfg_r = SimConfig::new(mc.seed.wrapping_add(1), steps, mc.return_replicas, y);
            let c = return_check(&spec, y, x, delta, escape, &cfg_r)?;
            r.check(
                "return_probability",
                c.pass,
                format!(
                    "P = {:.4} + {:.4} (escape) + {:.4} (unresolved) vs (x/y)^delta = {:.4}",
                    c.estimate, c.escape_correction, c.unresolved, c.bound
                ),
                serde_json::to_value(&c)?,
            );
            Ok(())
        })?;

        if !moments_ok {
            self.message = Some(format!(
                "{}; moment condition fails, limit theorems skipped",
                self.message.take().unwrap_or_default()
            ));
            return Ok(());
        }
        if 2.0 * mu_up > p.b {
            self.stage("renewal", |r| {
                let x = mc.renewal_x;
                let cfg_r = SimConfig::new(mc.seed.wrapping_add(2), 0, mc.renewal_replicas, 0);
                let e = renewal_estimate(
                    &spec,
                    &[(x / 4).max(1), (x / 2).max(1), x],
                    mc.horizon_factor,
                    &cfg_r,
                )?;
                r.bundle.csv("renewal.csv", |w| e.write_csv(w))?;
                let (h, _) = e.at(x).expect("grid contains x");
                let kappa = h / (x as f64).powi(2);
                let target = 1.0 / (2.0 * mu_up - p.b);
                r.check(
                    "renewal",
                    rel_err(kappa, target) <= tol.renewal,
                    format!("H({x})/x^2 = {kappa:.4} (target {target:.4})"),
                    json!({ "x": x, "kappa": kappa, "target": target }),
                );
                Ok(())
            })?;
        }

        self.stage("gamma", |r| {
            let cfg_g = SimConfig::new(
                mc.seed.wrapping_add(3),
                mc.gamma_steps,
                mc.gamma_replicas,
                0,
            );
            let g = gamma_limit_test(&spec, mu_up, p.b, &cfg_g)?;
            r.bundle.json("gamma.json", &g)?;
            r.check(
                "gamma_limit",
                g.ks_stat <= tol.ks && g.mean_err <= tol.gamma_mean,
                format!(
                    "KS = {:.4}, mean {:.4} vs {:.4}",
                    g.ks_stat, g.mean, g.target_mean
                ),
                serde_json::to_value(&g)?,
            );
            Ok(())
        })
    }

    fn inconclusive_branch(&mut self, rec1: bool, rec3: bool) -> Result<()> {
        let mc = &self.cfg.mc;
        let spec = self.spec.clone();
        self.stage("regeneration", |r| {
            let steps = mc.regeneration_steps;
            let cfg_o = SimConfig::new(mc.seed, steps, 1, spec.boundary_x0);
            let cycles = match stationary_occupation(&spec, spec.boundary_x0, 0, &cfg_o, 0) {
                Ok(o) => o.cycles,
                Err(e) => return Err(e),
            };
            let witnessed = cycles >= mc.min_cycles;
            r.check(
                "recurrence_witness",
                witnessed,
                format!(
                    "{cycles} returns to B in {steps} steps (need {})",
                    mc.min_cycles
                ),
                json!({ "cycles": cycles, "steps": steps, "min_cycles": mc.min_cycles }),
            );
            if rec1 {
                r.check(
                    "counterexample",
                    witnessed && !rec3,
                    format!(
                        "transience ratio condition holds, large-jump condition {}, recurrence {}",
                        if rec3 { "holds" } else { "fails" },
                        if witnessed {
                            "witnessed"
                        } else {
                            "not witnessed"
                        }
                    ),
                    json!({ "rec1": rec1, "rec3": rec3, "recurrent": witnessed }),
                );
            }
            Ok(())
        })
    }
}

fn write_report(dir: &Path, cfg: &Config, s: &Summary) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join("report.md"))?);
    writeln!(w, "# Run report: {}\n", s.family)?;
    writeln!(w, "| parameter | value |\n|---|---|")?;
    writeln!(w, "| family | {:?} |", cfg.chain.family)?;
    if let Some(mu) = cfg.chain.mu {
        writeln!(w, "| mu | {mu} |")?;
    }
    if let Some(b) = cfg.chain.b {
        writeln!(w, "| b | {b} |")?;
    }
    writeln!(w, "| N | {} |", cfg.solve.n)?;
    writeln!(w, "| seed | {} |", cfg.mc.seed)?;
    writeln!(w, "| branch | {:?} |", s.branch)?;
    writeln!(w)?;
    if let Some(m) = &s.message {
        writeln!(w, "> {m}\n")?;
    }
    if let Some(a) = &s.aborted_at {
        writeln!(w, "**Aborted** at stage `{a}`.\n")?;
    }
    writeln!(w, "## Checks\n")?;
    writeln!(w, "| check | result | detail |\n|---|---|---|")?;
    for c in &s.checks {
        writeln!(
            w,
            "| {} | {} | {} |",
            c.name,
            if c.pass { "pass" } else { "FAIL" },
            c.detail
        )?;
    }
    writeln!(w, "\nOverall: {}", if s.all_pass { "pass" } else { "fail" })?;
    w.flush()?;
    Ok(())
}

fn write_metadata(dir: &Path, config_path: Option<&Path>) -> Result<()> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = json!({
        "created_unix": secs,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config_path.map(|p| p.display().to_string()),
    });
    fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(())
}

/// Runs every stage that applies to the configured chain and writes the
/// bundle to `out_dir`.
///
/// A failing stage still leaves its predecessors' artifacts and a summary
/// naming the stage, then returns [`Error::Stage`].
pub fn run_pipeline(cfg: &Config, out_dir: &Path, config_path: Option<&Path>) -> Result<Summary> {
    let spec = cfg.build_chain()?;
    let bundle = Bundle::create(out_dir)?;
    write_metadata(out_dir, config_path)?;
    bundle.json("config.json", cfg)?;
    let mut run = Run {
        cfg,
        spec,
        bundle,
        checks: Vec::new(),
        branch: Branch::Inconclusive,
        message: None,
        notes: Vec::new(),
    };
    let result = drive(&mut run);
    let aborted = match &result {
        Err(Error::Stage { stage, .. }) => Some(stage.to_string()),
        Err(_) => Some("setup".to_string()),
        Ok(()) => None,
    };
    if let Err(e) = &result {
        run.notes.push(e.to_string());
    }
    let mut summary = run.summary(aborted);
    if let (Some(_), Some(note)) = (&summary.aborted_at, run.notes.last()) {
        summary.message = Some(match summary.message.take() {
            Some(m) => format!("{m}; {note}"),
            None => note.clone(),
        });
    }
    run.bundle.json("summary.json", &summary)?;
    write_report(out_dir, cfg, &summary)?;
    result.map(|_| summary)
}

fn drive(run: &mut Run<'_>) -> Result<()> {
    let n = run.cfg.solve.n;
    let spec = run.spec.clone();
    let grid = analysis_grid(&spec, n);
    let diag = run.stage("validate", |r| {
        let d = validate_assumptions(&spec, &grid)?;
        let m = crate::chain::moments(&spec, &grid)?;
        r.bundle.csv("moments.csv", |w| m.write_csv(w))?;
        r.bundle.json("diagnostics.json", &d)?;
        Ok(d)
    })?;
    let report = run.stage("classify", |r| {
        let rep = classify(&spec, &grid)?;
        r.bundle.csv("drift.csv", |w| rep.write_csv(w))?;
        r.bundle.json("classification.json", &rep.summary_json())?;
        Ok(rep)
    })?;
    match report.classification {
        Classification::PositiveRecurrent if spec.profile.tail_regime() => {
            run.branch = Branch::Full;
            run.full_branch()
        }
        Classification::PositiveRecurrent => {
            run.branch = Branch::Recurrent;
            run.message =
                Some("positive recurrent but 2mu <= b; tail asymptotics not checked".into());
            run.stage("stationary", |r| {
                let stat = solve_stationary(&spec, n, r.cfg.solve.method)?;
                r.bundle.csv("stationary.csv", |w| stat.write_csv(w))
            })
        }
        Classification::Transient => {
            run.branch = Branch::Transient;
            run.message =
                Some("not positive recurrent; stationary tail asymptotics inapplicable".into());
            let moments_ok = diag
                .get("moment_cond1")
                .is_some_and(|c| c.status == CheckStatus::Pass);
            run.transient_branch(&report, moments_ok)
        }
        Classification::Inconclusive => {
            run.branch = Branch::Inconclusive;
            run.message = Some("no drift certificate; checking regeneration only".into());
            let pass = |name: &str| {
                diag.get(name)
                    .is_some_and(|c| c.status == CheckStatus::Pass)
            };
            run.inconclusive_branch(pass("rec1"), pass("rec3"))
        }
    }
}

/// Config of the canonical chain (μ = 2, b = 1, N = 2000, seed 1).
pub const CANONICAL_CONFIG: &str = r#"[chain]
family = "birth_death"
mu = 2.0
b = 1.0

[solve]
N = 2000

[mc]
seed = 1
"#;
