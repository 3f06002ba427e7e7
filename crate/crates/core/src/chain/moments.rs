use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::{Chain, ChainSpec};
use crate::error::{Error, Result};

/// Jump moments at a grid of states.
///
/// `trunc_upper` holds E{ξ^{2μ/b+3+δ}; ξ > A·x}.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentTable {
    pub grid: Vec<u64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub m3: Vec<f64>,
    pub abs3pd: Vec<f64>,
    pub trunc_upper: Vec<f64>,
}

impl MomentTable {
    /// Evaluates the moments of any chain; `trunc_power` is the exponent of
    /// the truncated upper moment and `a_trunc` its slope.
    pub fn of_chain<C: Chain + ?Sized>(
        chain: &C,
        grid: &[u64],
        delta: f64,
        trunc_power: f64,
        a_trunc: f64,
    ) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::param("moment grid is empty"));
        }
        let rows: Vec<[f64; 5]> = grid
            .par_iter()
            .map(|&x| {
                let l = chain.law(x);
                let cut = a_trunc * x as f64;
                let tu = l
                    .iter()
                    .filter(|&(o, _)| o as f64 > cut)
                    .map(|(o, p)| p * (o as f64).powf(trunc_power))
                    .sum();
                [
                    l.moment(1),
                    l.moment(2),
                    l.moment(3),
                    l.abs_moment(3.0 + delta),
                    tu,
                ]
            })
            .collect();
        let col = |i: usize| rows.iter().map(|r| r[i]).collect::<Vec<_>>();
        Ok(MomentTable {
            grid: grid.to_vec(),
            m1: col(0),
            m2: col(1),
            m3: col(2),
            abs3pd: col(3),
            trunc_upper: col(4),
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,m1,m2,m3,abs3pd")?;
        for i in 0..self.grid.len() {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e}",
                self.grid[i], self.m1[i], self.m2[i], self.m3[i], self.abs3pd[i]
            )?;
        }
        Ok(())
    }
}

/// Exact jump moments of `spec` on `grid`, using its declared δ and A.
pub fn moments(spec: &ChainSpec, grid: &[u64]) -> Result<MomentTable> {
    let p = spec.profile;
    let power = (2.0 * p.mu / p.b).max(0.0) + 3.0 + p.delta;
    MomentTable::of_chain(spec, grid, p.delta, power, p.a_trunc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{make_birth_death, make_left_skip_free};

    #[test]
    fn birth_death_moments() {
        let c = make_birth_death(1.0, 1.0).unwrap();
        let t = moments(&c, &[10, 50]).unwrap();
        assert!((t.m1[0] + 0.1).abs() < 1e-15);
        assert!((t.m2[0] - 1.0).abs() < 1e-15);
        assert_eq!(t.m3, t.m1);
        assert_eq!(t.trunc_upper, vec![0.0, 0.0]);
    }

    #[test]
    fn oscillating_third_moment() {
        let c = make_left_skip_free(2.0, 1.0, 0.25, 0.75).unwrap();
        let t = moments(&c, &[100_000, 100_001]).unwrap();
        assert!((t.m3[0] - 0.25).abs() < 1e-10);
        assert!((t.m3[1] - 0.75).abs() < 1e-10);
        assert!((t.m1[0] * 100_000.0 + 2.0).abs() < 1e-9);
        assert!((t.m2[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn empty_grid_rejected() {
        let c = make_birth_death(1.0, 1.0).unwrap();
        assert!(moments(&c, &[]).is_err());
    }

    #[test]
    fn csv_header() {
        let c = make_birth_death(1.0, 1.0).unwrap();
        let mut buf = Vec::new();
        moments(&c, &[1, 2]).unwrap().write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("x,m1,m2,m3,abs3pd\n"));
        assert_eq!(s.lines().count(), 3);
    }
}
