//! Numerical checks of the standing assumptions on a finite grid.

use std::collections::VecDeque;

use serde::Serialize;

use super::{moments, Chain, ChainSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Inconclusive,
}

/// Outcome of one assumption check; `witness` is the state that decided it.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub status: CheckStatus,
    pub witness: Option<u64>,
    pub value: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub family: String,
    pub checks: Vec<Check>,
}

impl Diagnostics {
    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Pass)
    }
}

/// Least-squares slope of log v against log x over the upper half of the grid.
fn growth_slope(grid: &[u64], values: &[f64]) -> f64 {
    let start = grid.len() / 2;
    let pts: Vec<(f64, f64)> = grid[start..]
        .iter()
        .zip(&values[start..])
        .filter(|&(&x, _)| x > 0)
        .map(|(&x, &v)| ((x as f64).ln(), v.abs().max(1e-300).ln()))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    crate::analysis::least_squares(&pts).0
}

fn argmax(grid: &[u64], values: &[f64]) -> (u64, f64) {
    grid.iter()
        .zip(values)
        .map(|(&x, &v)| (x, v))
        .fold(
            (grid[0], f64::NEG_INFINITY),
            |a, b| if b.1 > a.1 { b } else { a },
        )
}

/// Sequences whose log-log slope stays below this are treated as bounded.
const GROWTH_TOL: f64 = 0.1;

fn bounded_check(name: &'static str, grid: &[u64], values: &[f64], what: &str) -> Check {
    let (w, v) = argmax(grid, values);
    let slope = growth_slope(grid, values);
    let status = if grid.len() < 4 {
        CheckStatus::Inconclusive
    } else if slope <= GROWTH_TOL {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Check {
        name,
        status,
        witness: Some(w),
        value: v,
        detail: format!("{what}: sup on grid {v:.4e} at x={w}, log-log growth slope {slope:.3}"),
    }
}

/// P{ξ(x) ≤ −γx} divided by m₂(x)p(x)/x.
pub fn rec3_ratio<C, P>(chain: &C, x: u64, gamma: f64, p: P) -> f64
where
    C: Chain + ?Sized,
    P: Fn(f64) -> f64,
{
    let l = chain.law(x);
    let xf = x as f64;
    let lhs = l.cdf(-gamma * xf);
    lhs / (l.moment(2) * p(xf) / xf)
}

/// Checks that every state of [0, n] reaches 0 under the reflecting truncation.
pub fn truncation_irreducibility<C: Chain + ?Sized>(chain: &C, n: u64) -> Result<()> {
    let size = n as usize + 1;
    let mut preds: Vec<Vec<u32>> = vec![Vec::new(); size];
    for x in 0..=n {
        for (o, _) in chain.law(x).iter() {
            let y = (x as i64 + o).clamp(0, n as i64) as usize;
            if y != x as usize {
                preds[y].push(x as u32);
            }
        }
    }
    let mut seen = vec![false; size];
    seen[0] = true;
    let mut queue = VecDeque::from([0usize]);
    while let Some(y) = queue.pop_front() {
        for &x in &preds[y] {
            if !seen[x as usize] {
                seen[x as usize] = true;
                queue.push_back(x as usize);
            }
        }
    }
    let component: Vec<u64> = (0..=n).filter(|&x| !seen[x as usize]).collect();
    if component.is_empty() {
        Ok(())
    } else {
        Err(Error::Reducible { component })
    }
}

/// Excursion condition on the truncation [0, n]: every x in (x₀, x₁] reaches
/// (x₁, n] along a positive-probability path that avoids B = [0, x₀].
///
/// Paths are searched up to length n²; the returned value is the longest
/// shortest-path length over the starting states.
pub fn exersion_check<C: Chain + ?Sized>(chain: &C, x0: u64, x1: u64, n: u64) -> Check {
    let name = "exersions";
    if x1 <= x0 || x1 >= n {
        return Check {
            name,
            status: CheckStatus::Inconclusive,
            witness: None,
            value: f64::NAN,
            detail: format!("need x0 < x1 < N, got x0={x0}, x1={x1}, N={n}"),
        };
    }
    let horizon = n.saturating_mul(n);
    let size = (n - x0) as usize;
    let idx = |x: u64| (x - x0 - 1) as usize;
    let mut preds: Vec<Vec<u32>> = vec![Vec::new(); size];
    for x in x0 + 1..=n {
        for (o, _) in chain.law(x).iter() {
            let y = x as i64 + o;
            if y > x0 as i64 && y <= n as i64 && y != x as i64 {
                preds[idx(y as u64)].push(x as u32);
            }
        }
    }
    let mut dist = vec![u64::MAX; size];
    let mut queue = VecDeque::new();
    for y in x1 + 1..=n {
        dist[idx(y)] = 0;
        queue.push_back(y);
    }
    // States above x₁ step once more to stay above x₁ at time n(x) ≥ 1.
    while let Some(y) = queue.pop_front() {
        let d = dist[idx(y)];
        if d >= horizon {
            continue;
        }
        for &x in &preds[idx(y)] {
            let i = idx(x as u64);
            if dist[i] == u64::MAX {
                dist[i] = d + 1;
                queue.push_back(x as u64);
            }
        }
    }
    let unreached = (x0 + 1..=x1).find(|&x| dist[idx(x)] == u64::MAX);
    match unreached {
        Some(x) => Check {
            name,
            status: CheckStatus::Fail,
            witness: Some(x),
            value: f64::INFINITY,
            detail: format!("no path from {x} above {x1} avoiding [0,{x0}] within {horizon} steps"),
        },
        None => {
            let (w, d) = (x0 + 1..=x1)
                .map(|x| (x, dist[idx(x)]))
                .max_by_key(|&(_, d)| d)
                .unwrap_or((x1, 0));
            Check {
                name,
                status: CheckStatus::Pass,
                witness: Some(w),
                value: d as f64,
                detail: format!(
                    "every state in ({x0},{x1}] exceeds {x1} avoiding B; longest path {d} from {w}"
                ),
            }
        }
    }
}

/// Evaluates the standing assumptions of the declared regime on `grid`.
///
/// Chains declaring m₁ ∼ −μ/x with μ > 0 get the tail-asymptotics conditions;
/// chains declaring drift to the right get the transience conditions. The
/// grid should lie above the boundary set.
pub fn validate_assumptions(spec: &ChainSpec, grid: &[u64]) -> Result<Diagnostics> {
    let t = moments(spec, grid)?;
    let p = spec.profile;
    let mut checks = Vec::new();

    let (wm2, min_m2) =
        t.grid.iter().zip(&t.m2).fold(
            (grid[0], f64::INFINITY),
            |a, (&x, &v)| if v < a.1 { (x, v) } else { a },
        );
    checks.push(Check {
        name: "m2_positive",
        status: if min_m2 > 0.0 {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        witness: Some(wm2),
        value: min_m2,
        detail: format!("min m2 on grid {min_m2:.4e} at x={wm2}"),
    });

    let up_only = grid
        .iter()
        .copied()
        .find(|&x| x > spec.boundary_x0 && spec.law(x).min_offset() >= 0);
    checks.push(Check {
        name: "downward_jump",
        status: if up_only.is_none() {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        witness: up_only,
        value: up_only.map_or(0.0, |x| x as f64),
        detail: match up_only {
            Some(x) => format!("no negative offset at x={x}"),
            None => "every grid state above B has a negative offset".into(),
        },
    });

    checks.push(bounded_check(
        "moment_cond1",
        grid,
        &t.abs3pd,
        &format!("E|xi|^(3+{})", p.delta),
    ));

    if p.mu > 0.0 {
        let k = 2.0 * p.mu / p.b;
        let scaled: Vec<f64> = grid
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let xf = x as f64;
                let r = k * xf / (1.0 + xf * xf);
                (2.0 * t.m1[i] / t.m2[i] + r).abs() * xf.powf(2.0 + p.delta)
            })
            .collect();
        checks.push(bounded_check(
            "r_cond2",
            grid,
            &scaled,
            &format!("|2m1/m2 + r(x)|·x^(2+{})", p.delta),
        ));
        let scaled: Vec<f64> = grid
            .iter()
            .zip(&t.trunc_upper)
            .map(|(&x, &v)| v / (x as f64).powf(k))
            .collect();
        checks.push(bounded_check(
            "cond_xi_u2",
            grid,
            &scaled,
            "E{xi^(2mu/b+3+delta); xi > A x}/x^(2mu/b)",
        ));
        let n = *grid.iter().max().unwrap_or(&0);
        let x1 = 2 * spec.boundary_x0 + 2;
        checks.push(exersion_check(spec, spec.boundary_x0, x1, n.max(x1 + 1)));
    } else {
        let half = grid.len() / 2;
        let (wr, ratio) = grid[half..]
            .iter()
            .zip(&t.m1[half..])
            .zip(&t.m2[half..])
            .map(|((&x, m1), m2)| (x, 2.0 * x as f64 * m1 / m2))
            .fold(
                (grid[half], f64::INFINITY),
                |a, b| if b.1 < a.1 { b } else { a },
            );
        let eps = ratio - 1.0;
        checks.push(Check {
            name: "rec1",
            status: if eps > 0.0 {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            witness: Some(wr),
            value: eps,
            detail: format!("inf of 2x·m1/m2 over the upper half-grid is {ratio:.4} at x={wr}"),
        });
        if eps > 0.0 {
            let gamma = (1.0 - 1.0 / (1.0 + eps).sqrt()) / 2.0;
            let ratios: Vec<f64> = grid
                .iter()
                .map(|&x| rec3_ratio(spec, x, gamma, |y| (1.0 + y).powf(-1.5)))
                .collect();
            let vacuous = ratios[half..].iter().all(|&r| r == 0.0);
            let mut c = bounded_check("rec3", grid, &ratios, "P{xi <= -gamma x}/(m2 p(x)/x)");
            let slope = growth_slope(grid, &ratios);
            c.status = if vacuous || slope < -GROWTH_TOL {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            };
            c.detail = format!(
                "gamma={gamma:.4}, p(x)=(1+x)^-1.5; {}; ratio slope {slope:.3}",
                if vacuous {
                    "no jumps below -gamma x on the upper grid"
                } else {
                    "large negative jumps present"
                }
            );
            checks.push(c);
        }
    }

    Ok(Diagnostics {
        family: spec.family_tag.clone(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::*;

    fn grid(lo: u64, hi: u64, n: usize) -> Vec<u64> {
        let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
        let mut g: Vec<u64> = (0..n)
            .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp().round() as u64)
            .collect();
        g.dedup();
        g
    }

    #[test]
    fn birth_death_passes_everything() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        let d = validate_assumptions(&c, &grid(10, 1000, 60)).unwrap();
        assert!(d.all_pass(), "{d:#?}");
        let r = d.get("r_cond2").unwrap();
        assert!(r.value <= 4.0 + 1e-9);
    }

    #[test]
    fn heavy_jumps_break_moment_condition() {
        let c = make_heavy_up_jump(2.5).unwrap();
        let d = validate_assumptions(&c, &grid(10, 1000, 20)).unwrap();
        assert_eq!(d.get("moment_cond1").unwrap().status, CheckStatus::Fail);
    }

    #[test]
    fn origin_jump_breaks_rec3() {
        let base = make_birth_death_up(3.0, 1.0).unwrap();
        let c =
            make_origin_jump_chain(base, JumpFactor::M2OverX, JumpWeight::OneOverOnePlusX).unwrap();
        let d = validate_assumptions(&c, &grid(10, 1000, 40)).unwrap();
        assert_eq!(d.get("rec1").unwrap().status, CheckStatus::Pass);
        assert_eq!(d.get("rec3").unwrap().status, CheckStatus::Fail);
        // Against p(x) = 1/(1+x) the ratio tends to a positive constant.
        let r = rec3_ratio(&c, 1000, 0.1, |y| 1.0 / (1.0 + y));
        assert!(r > 0.4 && r < 0.6, "{r}");
    }

    #[test]
    fn positive_drift_family_is_transient_type() {
        let c = make_birth_death_up(2.0, 1.0).unwrap();
        let d = validate_assumptions(&c, &grid(10, 1000, 40)).unwrap();
        let r1 = d.get("rec1").unwrap();
        assert!((r1.value - 3.0).abs() < 1e-9);
        assert_eq!(d.get("rec3").unwrap().status, CheckStatus::Pass);
    }

    #[test]
    fn irreducibility_detects_absorbing_state() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        truncation_irreducibility(&c, 100).unwrap();
        let p = c.profile;
        let stuck = ChainSpec::custom("stuck", p, 0, |x| {
            if x == 7 {
                JumpLaw::try_new(vec![0], vec![1.0]).unwrap()
            } else if x == 0 {
                JumpLaw::try_new(vec![1], vec![1.0]).unwrap()
            } else {
                JumpLaw::try_new(vec![-1, 1], vec![0.5, 0.5]).unwrap()
            }
        });
        match truncation_irreducibility(&stuck, 10) {
            Err(Error::Reducible { component }) => {
                assert_eq!(component, (7..=10).collect::<Vec<_>>())
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exersions_fail_when_upward_moves_are_blocked() {
        let c = make_birth_death(2.0, 1.0).unwrap();
        assert_eq!(exersion_check(&c, 4, 20, 200).status, CheckStatus::Pass);
        let p = c.profile;
        let down = ChainSpec::custom("down", p, 4, |x| {
            if x == 0 {
                JumpLaw::try_new(vec![0], vec![1.0]).unwrap()
            } else {
                JumpLaw::try_new(vec![-1], vec![1.0]).unwrap()
            }
        });
        let chk = exersion_check(&down, 4, 20, 200);
        assert_eq!(chk.status, CheckStatus::Fail);
        assert_eq!(chk.witness, Some(5));
    }
}
