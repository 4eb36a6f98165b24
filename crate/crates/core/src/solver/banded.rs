//! Direct LU factorization of banded matrices with partial pivoting.
//!
//! The step Jacobians of the implicit scheme are block-tridiagonal with
//! `(n+1) × (n+1)` blocks, i.e. banded with `kl = ku = 2n + 1` in the
//! cell-major unknown ordering. A dense solve would waste `O(N³)` work on a
//! few-hundred-unknown system solved thousands of times, and no general
//! sparse machinery is needed for a fixed band, so this module implements the
//! classic band storage factorization: `kl` extra rows absorb the fill-in
//! produced by row interchanges, multipliers are kept in place, and solves
//! walk the band in `O(N·(kl + ku)²)`.
//!
//! Both `A x = b` and `Aᵀ x = b` solves are provided; the transposed solve is
//! what the adjoint sweep of the optimizer runs against the stored forward
//! factorizations.

use thiserror::Error;

/// The matrix is exactly singular: elimination found no usable pivot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("matrix is singular at elimination column {column}")]
pub struct Singular {
    pub column: usize,
}

/// Banded `n × n` matrix with `kl` sub- and `ku` super-diagonals.
///
/// Storage is column-major with `2kl + ku + 1` rows per column: entry
/// `(i, j)` lives at storage row `kl + ku + i - j`, and the top `kl` rows of
/// each column are workspace for pivoting fill-in.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            ldab,
            data: vec![0.0; ldab * n],
        }
    }

    pub fn order(&self) -> usize {
        self.n
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(i + self.ku >= j && j + self.kl >= i, "({i},{j}) outside band");
        j * self.ldab + (self.kl + self.ku + i - j)
    }

    /// Whether `(i, j)` lies inside the declared band.
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && i + self.ku >= j && j + self.kl >= i
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.slot(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let s = self.slot(i, j);
        self.data[s] = value;
    }

    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let s = self.slot(i, j);
        self.data[s] += value;
    }

    /// Factors the matrix in place into `P·L·U` with partial pivoting.
    pub fn factor(mut self) -> Result<BandLu, Singular> {
        let (n, kl, ku, ldab) = (self.n, self.kl, self.ku, self.ldab);
        // After interchanges the upper bandwidth grows to at most kl + ku.
        let kuf = kl + ku;
        let mut ipiv = vec![0usize; n];
        for j in 0..n {
            // Pivot search over the subdiagonal entries of column j.
            let km = kl.min(n - 1 - j);
            let mut piv = j;
            let mut piv_abs = self.data[j * ldab + kl + ku].abs();
            for i in (j + 1)..=(j + km) {
                let a = self.data[j * ldab + (kl + ku + i - j)].abs();
                if a > piv_abs {
                    piv_abs = a;
                    piv = i;
                }
            }
            if piv_abs == 0.0 {
                return Err(Singular { column: j });
            }
            ipiv[j] = piv;
            let ju = (j + kuf).min(n - 1);
            if piv != j {
                // Swap matrix rows j and piv across columns j..=ju.
                for c in j..=ju {
                    let a = c * ldab + (kl + ku + j - c);
                    let b = c * ldab + (kl + ku + piv - c);
                    self.data.swap(a, b);
                }
            }
            // Multipliers, stored in place of the eliminated entries.
            let diag = self.data[j * ldab + kl + ku];
            for i in (j + 1)..=(j + km) {
                self.data[j * ldab + (kl + ku + i - j)] /= diag;
            }
            // Rank-1 update of the trailing band.
            for c in (j + 1)..=ju {
                let pivot_row_val = self.data[c * ldab + (kl + ku + j - c)];
                if pivot_row_val == 0.0 {
                    continue;
                }
                for i in (j + 1)..=(j + km) {
                    let l = self.data[j * ldab + (kl + ku + i - j)];
                    self.data[c * ldab + (kl + ku + i - c)] -= l * pivot_row_val;
                }
            }
        }
        Ok(BandLu {
            n,
            kl,
            ku,
            ldab,
            data: self.data,
            ipiv,
        })
    }
}

/// Factored form of a [`BandMatrix`]; multipliers and `U` share the storage.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    data: Vec<f64>,
    ipiv: Vec<usize>,
}

impl BandLu {
    pub fn order(&self) -> usize {
        self.n
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.ldab + (self.kl + self.ku + i - j)]
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let kuf = kl + ku;
        // L: apply interchanges and forward-eliminate.
        for j in 0..n.saturating_sub(1) {
            let p = self.ipiv[j];
            if p != j {
                b.swap(p, j);
            }
            let km = kl.min(n - 1 - j);
            for i in (j + 1)..=(j + km) {
                b[i] -= self.at(i, j) * b[j];
            }
        }
        // U: back-substitution over the widened band.
        for j in (0..n).rev() {
            b[j] /= self.at(j, j);
            let lo = j.saturating_sub(kuf);
            for i in lo..j {
                b[i] -= self.at(i, j) * b[j];
            }
        }
    }

    /// Solves `Aᵀ x = b` in place.
    pub fn solve_transposed(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let kuf = kl + ku;
        // Uᵀ: forward substitution.
        for j in 0..n {
            let lo = j.saturating_sub(kuf);
            let mut acc = b[j];
            for i in lo..j {
                acc -= self.at(i, j) * b[i];
            }
            b[j] = acc / self.at(j, j);
        }
        // Lᵀ: backward, undoing interchanges as we go.
        for j in (0..n.saturating_sub(1)).rev() {
            let km = kl.min(n - 1 - j);
            let mut acc = b[j];
            for i in (j + 1)..=(j + km) {
                acc -= self.at(i, j) * b[i];
            }
            b[j] = acc;
            let p = self.ipiv[j];
            if p != j {
                b.swap(p, j);
            }
        }
    }
}
