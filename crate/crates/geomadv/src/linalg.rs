//! Dense LU decomposition with partial pivoting for small systems.
//!
//! The spline fits solve (k+3)x(k+3) systems with k <= 68, so a plain O(n^3)
//! factorization is more than fast enough. The factorization is retained so
//! the adjoint solves in the warp gradient reuse it.

use crate::error::{Error, Result};

/// Pivot magnitudes below this are treated as singular.
pub const PIVOT_EPS: f64 = 1e-12;

/// An LU factorization of a square matrix, P*A = L*U.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

/// Factors a row-major n x n matrix. Fails with a degenerate-configuration
/// error when a pivot magnitude falls below [`PIVOT_EPS`].
pub fn lu_factor(a: &[f64], n: usize) -> Result<LuFactors> {
    assert_eq!(a.len(), n * n, "matrix buffer does not match dimension");
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();

    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = lu[col * n + col].abs();
        for row in col + 1..n {
            let v = lu[row * n + col].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val < PIVOT_EPS {
            return Err(Error::Degenerate(format!(
                "singular system: pivot {pivot_val:.3e} below {PIVOT_EPS:.0e} at column {col}"
            )));
        }
        if pivot_row != col {
            for j in 0..n {
                lu.swap(col * n + j, pivot_row * n + j);
            }
            perm.swap(col, pivot_row);
        }
        let diag = lu[col * n + col];
        for row in col + 1..n {
            let factor = lu[row * n + col] / diag;
            lu[row * n + col] = factor;
            for j in col + 1..n {
                lu[row * n + j] -= factor * lu[col * n + j];
            }
        }
    }
    Ok(LuFactors { n, lu, perm })
}

impl LuFactors {
    /// Solves A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "rhs length does not match system");
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        // Forward substitution with unit-diagonal L.
        for i in 1..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc;
        }
        // Back substitution with U.
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc / self.lu[i * n + i];
        }
        x
    }
}
