//! Library-size normalization, log1p and highly-variable-gene selection.

use std::cmp::Ordering;

use nalgebra::DMatrix;

use super::io::ExpressionMatrix;
use crate::error::{GplvmError, Result};
use crate::linalg::{pairwise_sum, select_rows};

/// Every cell is rescaled to this many counts before log1p.
pub const TARGET_SUM: f64 = 10_000.0;

/// Number of equal-width mean-expression bins used to normalize dispersions.
pub const HVG_BINS: usize = 20;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessReport {
    /// Cells removed because every count was zero.
    pub dropped_cells: Vec<String>,
    /// Indices (into the input gene list) of the genes kept.
    pub kept_genes: Vec<usize>,
}

/// Scales each row to [`TARGET_SUM`]; all-zero rows are returned separately.
pub fn normalize_total(values: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if let Some(v) = values.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(GplvmError::InvalidArgument(format!(
            "raw counts must be finite and nonnegative, found {v}"
        )));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for i in 0..values.nrows() {
        let row: Vec<f64> = values.row(i).iter().copied().collect();
        if pairwise_sum(&row) > 0.0 {
            kept.push(i);
        } else {
            dropped.push(i);
        }
    }
    let mut out = select_rows(values, &kept);
    for mut row in out.row_iter_mut() {
        let total = pairwise_sum(&row.iter().copied().collect::<Vec<_>>());
        row *= TARGET_SUM / total;
    }
    Ok((out, dropped))
}

/// Normalized dispersion of each gene: variance over mean of the (already
/// log-transformed) values, z-scored within equal-width mean bins.
pub fn normalized_dispersion(values: &DMatrix<f64>, gene_ids: &[String]) -> Vec<f64> {
    let n = values.nrows() as f64;
    let d = values.ncols();
    let mut means = vec![0.0; d];
    let mut disp = vec![0.0; d];
    for g in 0..d {
        let col: Vec<f64> = values.column(g).iter().copied().collect();
        let mean = pairwise_sum(&col) / n;
        let sq: Vec<f64> = col.iter().map(|v| (v - mean).powi(2)).collect();
        let var = if n > 1.0 {
            pairwise_sum(&sq) / (n - 1.0)
        } else {
            0.0
        };
        means[g] = mean;
        disp[g] = if mean > 0.0 { var / mean } else { 0.0 };
    }
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / HVG_BINS as f64;
    let bin_of = |m: f64| -> usize {
        if width > 0.0 {
            (((m - lo) / width) as usize).min(HVG_BINS - 1)
        } else {
            0
        }
    };
    // statistics per bin, summed in gene-id order so the result does not
    // depend on the column order
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| gene_ids[a].cmp(&gene_ids[b]));
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); HVG_BINS];
    for &g in &order {
        members[bin_of(means[g])].push(disp[g]);
    }
    let stats: Vec<(f64, f64, usize)> = members
        .iter()
        .map(|m| {
            let k = m.len();
            if k == 0 {
                return (0.0, 0.0, 0);
            }
            let mean = pairwise_sum(m) / k as f64;
            let sd = if k > 1 {
                let sq: Vec<f64> = m.iter().map(|v| (v - mean).powi(2)).collect();
                (pairwise_sum(&sq) / (k - 1) as f64).sqrt()
            } else {
                0.0
            };
            (mean, sd, k)
        })
        .collect();
    (0..d)
        .map(|g| {
            let (mean, sd, k) = stats[bin_of(means[g])];
            if k == 1 {
                // a gene alone in its bin counts as one standard deviation above
                1.0
            } else if sd > 0.0 {
                (disp[g] - mean) / sd
            } else {
                0.0
            }
        })
        .collect()
}

/// Indices of the `n_hvg` most dispersed genes, returned in original order.
/// Ties are broken by gene id.
pub fn select_hvg(values: &DMatrix<f64>, gene_ids: &[String], n_hvg: usize) -> Result<Vec<usize>> {
    if n_hvg == 0 {
        return Err(GplvmError::InvalidArgument(
            "number of highly variable genes must be positive".into(),
        ));
    }
    let d = values.ncols();
    if n_hvg >= d {
        return Ok((0..d).collect());
    }
    let z = normalized_dispersion(values, gene_ids);
    let key = |g: usize| {
        if z[g].is_finite() {
            z[g]
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut ranked: Vec<usize> = (0..d).collect();
    ranked.sort_by(|&a, &b| {
        key(b)
            .partial_cmp(&key(a))
            .unwrap_or(Ordering::Equal)
            .then_with(|| gene_ids[a].cmp(&gene_ids[b]))
    });
    let mut keep = ranked[..n_hvg].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Normalize to [`TARGET_SUM`], apply log1p and keep `n_hvg` genes.
pub fn preprocess(
    m: &ExpressionMatrix,
    n_hvg: usize,
) -> Result<(ExpressionMatrix, PreprocessReport)> {
    if n_hvg == 0 {
        return Err(GplvmError::InvalidArgument(
            "number of highly variable genes must be positive".into(),
        ));
    }
    if m.processed {
        return Err(GplvmError::InvalidArgument(
            "matrix is already processed".into(),
        ));
    }
    let (scaled, dropped) = normalize_total(&m.values)?;
    for &i in &dropped {
        log::warn!("cell '{}' has no counts and was dropped", m.cell_ids[i]);
    }
    let logged = scaled.map(f64::ln_1p);
    let kept_genes = select_hvg(&logged, &m.gene_ids, n_hvg)?;
    let mut values = DMatrix::zeros(logged.nrows(), kept_genes.len());
    for (j, &g) in kept_genes.iter().enumerate() {
        values.set_column(j, &logged.column(g));
    }
    let cell_ids = (0..m.n_cells())
        .filter(|i| !dropped.contains(i))
        .map(|i| m.cell_ids[i].clone())
        .collect();
    let gene_ids = kept_genes.iter().map(|&g| m.gene_ids[g].clone()).collect();
    let mut out = ExpressionMatrix::new(values, cell_ids, gene_ids)?;
    out.processed = true;
    let report = PreprocessReport {
        dropped_cells: dropped.iter().map(|&i| m.cell_ids[i].clone()).collect(),
        kept_genes,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(prefix: &str, k: usize) -> Vec<String> {
        (0..k).map(|i| format!("{prefix}{i:03}")).collect()
    }

    #[test]
    fn row_is_scaled_then_logged() {
        let m = ExpressionMatrix::new(
            DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 2.0]),
            labels("c", 1),
            labels("g", 3),
        )
        .unwrap();
        let (p, _) = preprocess(&m, 5000).unwrap();
        let expected = [2500f64.ln_1p(), 2500f64.ln_1p(), 5000f64.ln_1p()];
        for (a, b) in p.values.iter().zip(expected) {
            assert_eq!(*a, b);
        }
        assert_eq!(p.gene_ids, m.gene_ids);
        assert!(p.processed);
    }

    #[test]
    fn zero_rows_are_dropped() {
        let m = ExpressionMatrix::new(
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 2.0, 2.0]),
            labels("c", 3),
            labels("g", 2),
        )
        .unwrap();
        let (p, report) = preprocess(&m, 10).unwrap();
        assert_eq!(p.n_cells(), 2);
        assert_eq!(report.dropped_cells, vec!["c001"]);
    }

    #[test]
    fn zero_hvg_is_rejected() {
        let m = ExpressionMatrix::new(
            DMatrix::from_element(1, 1, 1.0),
            labels("c", 1),
            labels("g", 1),
        )
        .unwrap();
        assert!(preprocess(&m, 0).is_err());
    }

    fn planted(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, Vec<usize>) {
        // two groups of genes with mean about 1 or 2, five bimodal genes in each
        let planted: Vec<usize> = (0..10).map(|k| 10 * k + 3).collect();
        let m = DMatrix::from_fn(300, 100, |i, g| {
            let base = if (g / 10) % 2 == 0 { 1.0 } else { 2.0 };
            if planted.contains(&g) {
                if i % 2 == 0 {
                    base * 0.2
                } else {
                    base * 1.8
                }
            } else {
                base * rng.random_range(0.9..1.1)
            }
        });
        (m, planted)
    }

    #[test]
    fn planted_dispersed_genes_are_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, planted) = planted(&mut rng);
        let keep = select_hvg(&m, &labels("g", 100), 10).unwrap();
        assert_eq!(keep, planted);
    }

    #[test]
    fn selection_follows_gene_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, _) = planted(&mut rng);
        let ids = labels("g", 100);
        let perm: Vec<usize> = (0..100).rev().collect();
        let mut pm = DMatrix::zeros(300, 100);
        for (j, &g) in perm.iter().enumerate() {
            pm.set_column(j, &m.column(g));
        }
        let pids: Vec<String> = perm.iter().map(|&g| ids[g].clone()).collect();
        let a: Vec<String> = select_hvg(&m, &ids, 17)
            .unwrap()
            .iter()
            .map(|&g| ids[g].clone())
            .collect();
        let mut b: Vec<String> = select_hvg(&pm, &pids, 17)
            .unwrap()
            .iter()
            .map(|&g| pids[g].clone())
            .collect();
        b.sort();
        let mut a_sorted = a.clone();
        a_sorted.sort();
        assert_eq!(a_sorted, b);
    }
}
