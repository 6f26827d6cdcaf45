//! Dense linear-algebra helpers shared by the model, the bound and the gradients.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`. The reverse-mode rules for
//! the Cholesky factorization and triangular solves live here too, so the
//! backward pass in [`crate::grad`] only composes them.

use nalgebra::{DMatrix, DVector};

use crate::error::{GplvmError, Result};

/// Jitter values tried in order when factorizing a nearly singular matrix.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

/// Lower Cholesky factor of `A + jitter * I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `(A + jitter I) X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.solve_lower(b);
        self.solve_upper(&y)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a nonzero diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a nonzero diagonal")
    }

    /// `L^{-1} B`
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a nonzero diagonal")
    }

    /// `L^{-T} B`
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .tr_solve_lower_triangular(b)
            .expect("Cholesky factor has a nonzero diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.solve(&DMatrix::identity(n, n))
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// Cholesky factorization with the jitter ladder `{0, 1e-8, 1e-6, 1e-4}`.
///
/// `name` is used in the error when even the largest jitter fails.
pub fn jittered_cholesky(a: &DMatrix<f64>, name: &str) -> Result<CholFactor> {
    if a.nrows() != a.ncols() {
        return Err(GplvmError::dims(
            format!("{name} (square)"),
            a.nrows(),
            a.ncols(),
        ));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(GplvmError::NonFinite(name.to_string()));
    }
    for &jitter in JITTER_LADDER.iter() {
        let mut aj = a.clone();
        for i in 0..aj.nrows() {
            aj[(i, i)] += jitter;
        }
        if let Some(l) = cholesky_lower(&aj) {
            if jitter > 0.0 {
                log::debug!("{name}: Cholesky needed jitter {jitter:e}");
            }
            return Ok(CholFactor { l, jitter });
        }
    }
    Err(GplvmError::IllConditioned {
        matrix: name.to_string(),
        jitter: *JITTER_LADDER.last().unwrap(),
    })
}

/// Plain Cholesky of the lower triangle; `None` if a pivot is not strictly positive.
fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Keeps the lower triangle (including the diagonal) and zeroes the rest.
pub fn tril(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        for i in 0..j.min(out.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Reverse-mode rule for `L = chol(A)`.
///
/// Given the adjoint `l_bar` of the lower factor (upper triangle ignored),
/// returns the symmetric adjoint of `A`:
/// `sym(L^{-T} Φ(L^T L̄) L^{-1})`, where Φ keeps the lower triangle and halves the diagonal.
pub fn cholesky_adjoint(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut p = l.transpose() * tril(l_bar);
    for j in 0..n {
        for i in 0..j {
            p[(i, j)] = 0.0;
        }
        p[(j, j)] *= 0.5;
    }
    // L^{-T} P
    let x = l
        .tr_solve_lower_triangular(&p)
        .expect("Cholesky factor has a nonzero diagonal");
    // (L^{-T} P) L^{-1} = (L^{-T} (L^{-T} P)^T)^T
    let g = l
        .tr_solve_lower_triangular(&x.transpose())
        .expect("Cholesky factor has a nonzero diagonal")
        .transpose();
    symmetrize(&g)
}

/// Adjoints for `X = L^{-1} B`: returns `(B̄, L̄)` given `X̄`.
pub fn solve_lower_adjoint(
    l: &DMatrix<f64>,
    x: &DMatrix<f64>,
    x_bar: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let b_bar = l
        .tr_solve_lower_triangular(x_bar)
        .expect("Cholesky factor has a nonzero diagonal");
    let l_bar = -tril(&(&b_bar * x.transpose()));
    (b_bar, l_bar)
}

/// Adjoints for `X = L^{-T} B`: returns `(B̄, L̄)` given `X̄`.
pub fn solve_upper_adjoint(
    l: &DMatrix<f64>,
    x: &DMatrix<f64>,
    x_bar: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let b_bar = l
        .solve_lower_triangular(x_bar)
        .expect("Cholesky factor has a nonzero diagonal");
    let l_bar = -tril(&(x * b_bar.transpose()));
    (b_bar, l_bar)
}

/// Pairwise (cascade) summation; the result depends only on the slice order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Copies selected rows of `m` into a new matrix, in the given order.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}
