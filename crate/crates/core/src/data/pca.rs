//! Principal components of a column-centered matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GplvmError, Result};

/// Above this many rows the randomized solver is used.
pub const EXACT_PCA_MAX_ROWS: usize = 20_000;

const OVERSAMPLE: usize = 10;
const POWER_ITERATIONS: usize = 4;

#[derive(Debug, Clone)]
pub struct Pca {
    /// N×k projections of the centered rows.
    pub scores: DMatrix<f64>,
    /// D×k orthonormal directions.
    pub loadings: DMatrix<f64>,
    /// Squared singular values, descending.
    pub eigenvalues: Vec<f64>,
}

fn centered(y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = y.clone();
    let n = y.nrows() as f64;
    for mut col in c.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    c
}

/// Top `k` components: exact symmetric eigendecomposition of the smaller Gram
/// matrix up to [`EXACT_PCA_MAX_ROWS`] rows, randomized range finding above.
/// Each direction is signed so that its largest-magnitude loading is positive.
pub fn principal_components(y: &DMatrix<f64>, k: usize, seed: u64) -> Result<Pca> {
    let (n, d) = y.shape();
    if k > n.min(d) {
        return Err(GplvmError::InvalidArgument(format!(
            "cannot take {k} principal components of a {n}×{d} matrix"
        )));
    }
    let yc = centered(y);
    let mut pca = if n <= EXACT_PCA_MAX_ROWS {
        exact(&yc, k)
    } else {
        randomized(&yc, k, seed)
    };
    for j in 0..k {
        let col = pca.loadings.column(j);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            pca.loadings.column_mut(j).neg_mut();
            pca.scores.column_mut(j).neg_mut();
        }
    }
    Ok(pca)
}

fn top_eigen(g: DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let vals = order[..k]
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0))
        .collect();
    let mut vecs = DMatrix::zeros(eig.eigenvectors.nrows(), k);
    for (j, &i) in order[..k].iter().enumerate() {
        vecs.set_column(j, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

fn exact(yc: &DMatrix<f64>, k: usize) -> Pca {
    let (n, d) = yc.shape();
    if d <= n {
        let (eigenvalues, loadings) = top_eigen(yc.transpose() * yc, k);
        Pca {
            scores: yc * &loadings,
            loadings,
            eigenvalues,
        }
    } else {
        let (eigenvalues, u) = top_eigen(yc * yc.transpose(), k);
        let mut loadings = yc.transpose() * &u;
        let mut scores = u;
        for j in 0..k {
            let s = eigenvalues[j].sqrt();
            if s > 0.0 {
                loadings.column_mut(j).unscale_mut(s);
                scores.column_mut(j).scale_mut(s);
            }
        }
        Pca {
            scores,
            loadings,
            eigenvalues,
        }
    }
}

fn randomized(yc: &DMatrix<f64>, k: usize, seed: u64) -> Pca {
    let (n, d) = yc.shape();
    let width = (k + OVERSAMPLE).min(n.min(d));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(d, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = (yc * omega).qr().q();
    for _ in 0..POWER_ITERATIONS {
        let z = (yc.transpose() * &q).qr().q();
        q = (yc * z).qr().q();
    }
    let b = q.transpose() * yc;
    let svd = b.svd(true, true);
    let u_small = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let u = q * u_small;
    let mut scores = DMatrix::zeros(n, k);
    let mut loadings = DMatrix::zeros(d, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (j, &i) in order[..k].iter().enumerate() {
        let s = svd.singular_values[i];
        scores.set_column(j, &(u.column(i) * s));
        loadings.set_column(j, &v_t.row(i).transpose());
        eigenvalues.push(s * s);
    }
    Pca {
        scores,
        loadings,
        eigenvalues,
    }
}
