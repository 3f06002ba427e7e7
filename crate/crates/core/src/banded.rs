//! Banded square matrices and LU without pivoting.

use crate::error::{Error, Result};

/// Row-major band storage: entry (i, j) with −kl ≤ j − i ≤ ku.
#[derive(Debug, Clone)]
pub struct Banded {
    n: usize,
    kl: usize,
    ku: usize,
    data: Vec<f64>,
}

impl Banded {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Banded {
            n,
            kl,
            ku,
            data: vec![0.0; n * (kl + ku + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lower(&self) -> usize {
        self.kl
    }

    pub fn upper(&self) -> usize {
        self.ku
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        if j + self.kl < i || j > i + self.ku || i >= self.n || j >= self.n {
            return None;
        }
        Some(i * (self.kl + self.ku + 1) + (j + self.kl - i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `v` at (i, j); panics outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self
            .slot(i, j)
            .unwrap_or_else(|| panic!("({i},{j}) outside band ({},{})", self.kl, self.ku));
        self.data[s] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self
            .slot(i, j)
            .unwrap_or_else(|| panic!("({i},{j}) outside band ({},{})", self.kl, self.ku));
        self.data[s] = v;
    }

    /// Column range of row i inside the band.
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        i.saturating_sub(self.kl)..(i + self.ku + 1).min(self.n)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row_range(i).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }

    /// Solves A x = rhs by Gaussian elimination without pivoting.
    ///
    /// Stable for diagonally dominant M-matrices; a zero pivot is reported as
    /// [`Error::Singular`].
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        assert_eq!(rhs.len(), self.n);
        let mut a = self.clone();
        let mut b = rhs.to_vec();
        let n = self.n;
        for k in 0..n {
            let piv = a.get(k, k);
            if piv == 0.0 || !piv.is_finite() {
                return Err(Error::Singular { row: k });
            }
            let last_row = (k + self.kl).min(n - 1);
            let last_col = (k + self.ku).min(n - 1);
            for i in k + 1..=last_row {
                let f = a.get(i, k) / piv;
                if f == 0.0 {
                    continue;
                }
                a.set(i, k, 0.0);
                for j in k + 1..=last_col {
                    let akj = a.get(k, j);
                    if akj != 0.0 {
                        a.add(i, j, -f * akj);
                    }
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for k in (0..n).rev() {
            let last_col = (k + self.ku).min(n - 1);
            let s: f64 = (k + 1..=last_col).map(|j| a.get(k, j) * x[j]).sum();
            x[k] = (b[k] - s) / a.get(k, k);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_mul(a: &Banded, x: &[f64]) -> Vec<f64> {
        (0..a.n())
            .map(|i| (0..a.n()).map(|j| a.get(i, j) * x[j]).sum())
            .collect()
    }

    #[test]
    fn zero_pivot_is_singular() {
        let mut a = Banded::zeros(3, 1, 1);
        a.set(0, 0, 1.0);
        a.set(1, 0, 1.0);
        a.set(1, 1, 1.0);
        a.set(2, 2, 1.0);
        a.set(0, 1, 1.0);
        assert!(matches!(
            a.solve(&[1.0, 1.0, 1.0]),
            Err(Error::Singular { row: 1 })
        ));
    }

    proptest! {
        #[test]
        fn solves_dominant_systems(
            n in 1usize..40,
            kl in 0usize..4,
            ku in 0usize..4,
            seed in proptest::collection::vec(0.0f64..1.0, 40 * 9),
            rhs in proptest::collection::vec(-10.0f64..10.0, 40),
        ) {
            let mut a = Banded::zeros(n, kl, ku);
            let mut t = seed.iter();
            for i in 0..n {
                let mut off = 0.0;
                for j in a.row_range(i) {
                    if j != i {
                        let v = -t.next().unwrap();
                        a.set(i, j, v);
                        off -= v;
                    }
                }
                a.set(i, i, off + 0.5);
            }
            let x = a.solve(&rhs[..n]).unwrap();
            let back = dense_mul(&a, &x);
            for i in 0..n {
                prop_assert!((back[i] - rhs[i]).abs() < 1e-9 * (1.0 + rhs[i].abs()));
            }
            let again = a.mul_vec(&x);
            prop_assert_eq!(back.len(), again.len());
        }
    }
}
