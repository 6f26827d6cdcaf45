//! Post-training analysis of a fitted model.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::ExpressionMatrix;
use crate::error::{GplvmError, Result};
use crate::kernel::KernelSpec;
use crate::linalg::pairwise_sum;
use crate::model::{predict_all_genes, ModelState, PredictOptions};

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_SIGNATURE_BINS: usize = 25;
pub const DEFAULT_BACKGROUND: usize = 50;
pub const DEFAULT_TOP_K: usize = 20;

/// For every cell, the fraction of its `k` nearest neighbours (Euclidean,
/// self excluded) that carry the same label. Ties at equal distance go to
/// the lower cell index.
pub fn knn_purity<L: PartialEq + Sync>(
    latents: &DMatrix<f64>,
    labels: &[L],
    k: usize,
) -> Result<Vec<f64>> {
    let n = latents.nrows();
    if labels.len() != n {
        return Err(GplvmError::dims("label count", n, labels.len()));
    }
    if k == 0 || k >= n {
        return Err(GplvmError::InvalidArgument(format!(
            "k must satisfy 0 < k < N (k = {k}, N = {n})"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| latents.row(i).iter().copied().collect())
        .collect();
    let purity = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut dist: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d2: f64 = rows[i]
                        .iter()
                        .zip(&rows[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d2, j)
                })
                .collect();
            dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let same = dist[..k]
                .iter()
                .filter(|(_, j)| labels[*j] == labels[i])
                .count();
            same as f64 / k as f64
        })
        .collect();
    Ok(purity)
}

/// Per-cell score of a gene set relative to a background of genes with
/// similar mean expression.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureScore {
    pub values: Vec<f64>,
    pub genes: Vec<String>,
    pub background: Vec<String>,
}

fn gene_indices(m: &ExpressionMatrix, genes: &[String]) -> Result<Vec<usize>> {
    let mut missing = Vec::new();
    let idx: Vec<usize> = genes
        .iter()
        .filter_map(|g| {
            let i = m.gene_index(g);
            if i.is_none() {
                missing.push(g.clone());
            }
            i
        })
        .collect();
    if !missing.is_empty() {
        return Err(GplvmError::MissingGenes(missing));
    }
    if idx.is_empty() {
        return Err(GplvmError::InvalidArgument("gene set is empty".into()));
    }
    Ok(idx)
}

fn column_mean(m: &DMatrix<f64>, g: usize) -> f64 {
    pairwise_sum(&m.column(g).iter().copied().collect::<Vec<_>>()) / m.nrows() as f64
}

/// Mean of the signature genes minus mean of the given background genes, per cell.
pub fn signature_score_with_background(
    m: &ExpressionMatrix,
    genes: &[String],
    background: &[String],
) -> Result<SignatureScore> {
    let sig = gene_indices(m, genes)?;
    let bg = gene_indices(m, background)?;
    let row_mean = |i: usize, set: &[usize]| {
        let v: Vec<f64> = set.iter().map(|&g| m.values[(i, g)]).collect();
        pairwise_sum(&v) / set.len() as f64
    };
    let values = (0..m.n_cells())
        .map(|i| row_mean(i, &sig) - row_mean(i, &bg))
        .collect();
    Ok(SignatureScore {
        values,
        genes: sig.iter().map(|&g| m.gene_ids[g].clone()).collect(),
        background: bg.iter().map(|&g| m.gene_ids[g].clone()).collect(),
    })
}

/// Genes are split into `n_bins` bins of (nearly) equal size by mean
/// expression; for each signature gene up to `n_background` non-signature
/// genes are drawn from its bin (or the nearest non-empty neighbouring bins).
/// The union of the draws is the background.
pub fn signature_score(
    m: &ExpressionMatrix,
    genes: &[String],
    n_bins: usize,
    n_background: usize,
    seed: u64,
) -> Result<SignatureScore> {
    if n_bins == 0 || n_background == 0 {
        return Err(GplvmError::InvalidArgument(
            "bin and background counts must be positive".into(),
        ));
    }
    let sig = gene_indices(m, genes)?;
    let d = m.n_genes();
    let means: Vec<f64> = (0..d).map(|g| column_mean(&m.values, g)).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        means[a]
            .total_cmp(&means[b])
            .then_with(|| m.gene_ids[a].cmp(&m.gene_ids[b]))
    });
    let mut bin = vec![0usize; d];
    for (rank, &g) in order.iter().enumerate() {
        bin[g] = rank * n_bins / d;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; d];
    for &g in &sig {
        // small gene sets can leave a bin without candidates; widen to neighbours
        let mut pool = Vec::new();
        for radius in 0..n_bins {
            pool = order
                .iter()
                .copied()
                .filter(|&h| bin[h].abs_diff(bin[g]) <= radius && !sig.contains(&h))
                .collect();
            if !pool.is_empty() {
                break;
            }
        }
        pool.shuffle(&mut rng);
        for &h in pool.iter().take(n_background) {
            chosen[h] = true;
        }
    }
    let background: Vec<String> = (0..d)
        .filter(|&h| chosen[h])
        .map(|h| m.gene_ids[h].clone())
        .collect();
    if background.is_empty() {
        return Err(GplvmError::InvalidArgument(
            "no background genes available outside the signature".into(),
        ));
    }
    signature_score_with_background(m, genes, &background)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    /// Set when either side had zero variance over the selected cells; `r` is then 0.
    pub zero_variance: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Correlation {
    let n = a.len() as f64;
    let ma = pairwise_sum(a) / n;
    let mb = pairwise_sum(b) / n;
    let cross: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    let sa: Vec<f64> = a.iter().map(|x| (x - ma).powi(2)).collect();
    let sb: Vec<f64> = b.iter().map(|y| (y - mb).powi(2)).collect();
    let (sxy, sxx, syy) = (pairwise_sum(&cross), pairwise_sum(&sa), pairwise_sum(&sb));
    if sxx == 0.0 || syy == 0.0 {
        return Correlation {
            r: 0.0,
            zero_variance: true,
        };
    }
    Correlation {
        r: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        zero_variance: false,
    }
}

/// Pearson correlation of each latent dimension with a score over the masked
/// cells (all cells when no mask is given).
pub fn lv_signature_correlation(
    latents: &DMatrix<f64>,
    score: &[f64],
    mask: Option<&[bool]>,
) -> Result<Vec<Correlation>> {
    let n = latents.nrows();
    if score.len() != n {
        return Err(GplvmError::dims("score length", n, score.len()));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(GplvmError::dims("mask length", n, m.len()));
        }
    }
    let cells: Vec<usize> = (0..n).filter(|&i| mask.is_none_or(|m| m[i])).collect();
    if cells.len() < 3 {
        return Err(GplvmError::InvalidArgument(format!(
            "correlation needs at least 3 cells, mask selects {}",
            cells.len()
        )));
    }
    let s: Vec<f64> = cells.iter().map(|&i| score[i]).collect();
    Ok((0..latents.ncols())
        .map(|q| {
            let x: Vec<f64> = cells.iter().map(|&i| latents[(i, q)]).collect();
            pearson(&x, &s)
        })
        .collect())
}

/// Indices of the SE-ARD dimensions ordered by inverse lengthscale,
/// largest first; equal lengthscales keep index order.
pub fn rank_dimensions(spec: &KernelSpec) -> Vec<usize> {
    let start = usize::from(spec.periodic);
    let mut dims: Vec<usize> = (start..spec.lengthscales.len()).collect();
    dims.sort_by(|&a, &b| (1.0 / spec.lengthscales[b]).total_cmp(&(1.0 / spec.lengthscales[a])));
    dims
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGene {
    pub gene: usize,
    /// Max minus min of the predicted mean over the grid.
    pub range: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub sweep_dim: usize,
    pub grid: Vec<f64>,
    pub baseline_x: Vec<f64>,
    pub baseline_phi: Vec<f64>,
    pub genes: Vec<SweepGene>,
}

/// Per-dimension median of the latents.
pub fn median_latents(latents: &DMatrix<f64>) -> Vec<f64> {
    (0..latents.ncols())
        .map(|q| {
            let mut col: Vec<f64> = latents.column(q).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            let k = col.len();
            if k == 0 {
                0.0
            } else if k % 2 == 1 {
                col[k / 2]
            } else {
                0.5 * (col[k / 2 - 1] + col[k / 2])
            }
        })
        .collect()
}

/// The most frequent row of a design matrix; the earliest row wins a tie.
pub fn modal_row(phi: &DMatrix<f64>) -> Vec<f64> {
    if phi.nrows() == 0 {
        return vec![0.0; phi.ncols()];
    }
    let rows: Vec<Vec<u64>> = (0..phi.nrows())
        .map(|i| phi.row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    let mut counts: HashMap<&[u64], (usize, usize)> = HashMap::new();
    for (i, r) in rows.iter().enumerate() {
        counts.entry(r.as_slice()).or_insert((0, i)).0 += 1;
    }
    let mut best = (0usize, 0usize);
    for &(count, first) in counts.values() {
        if count > best.0 || (count == best.0 && first < best.1) {
            best = (count, first);
        }
    }
    phi.row(best.1).iter().copied().collect()
}

/// Median latents and modal design row of the training data.
pub fn default_baseline(state: &ModelState, phi: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if phi.nrows() != state.n() {
        return Err(GplvmError::dims("design rows", state.n(), phi.nrows()));
    }
    Ok((median_latents(&state.latents), modal_row(phi)))
}

/// Varies one latent dimension over `grid` with every other input held at
/// the baseline and ranks genes by the range of their predicted mean.
pub fn severity_sweep(
    state: &ModelState,
    sweep_dim: usize,
    grid: &[f64],
    baseline_x: &[f64],
    baseline_phi: &[f64],
    top_k: usize,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(GplvmError::InvalidArgument("sweep grid is empty".into()));
    }
    if sweep_dim >= state.q() {
        return Err(GplvmError::InvalidArgument(format!(
            "sweep dimension {sweep_dim} out of range (model has {} latent dimensions)",
            state.q()
        )));
    }
    if baseline_x.len() != state.q() {
        return Err(GplvmError::dims(
            "baseline latent length",
            state.q(),
            baseline_x.len(),
        ));
    }
    if baseline_phi.len() != state.p() {
        return Err(GplvmError::dims(
            "baseline covariate length",
            state.p(),
            baseline_phi.len(),
        ));
    }
    let g = grid.len();
    let x = DMatrix::from_fn(g, state.q(), |i, q| {
        if q == sweep_dim {
            grid[i]
        } else {
            baseline_x[q]
        }
    });
    let phi = DMatrix::from_fn(g, state.p(), |_, p| baseline_phi[p]);
    let preds = predict_all_genes(&x, &phi, state, PredictOptions::default())?;
    let mut genes: Vec<SweepGene> = preds
        .into_iter()
        .enumerate()
        .map(|(d, p)| SweepGene {
            gene: d,
            range: p.mean.max() - p.mean.min(),
            mean: p.mean.iter().copied().collect(),
            variance: p.variance.iter().copied().collect(),
        })
        .collect();
    genes.sort_by(|a, b| {
        b.range
            .partial_cmp(&a.range)
            .unwrap_or(Ordering::Equal)
            .then(a.gene.cmp(&b.gene))
    });
    genes.truncate(top_k);
    Ok(SweepResult {
        sweep_dim,
        grid: grid.to_vec(),
        baseline_x: baseline_x.to_vec(),
        baseline_phi: baseline_phi.to_vec(),
        genes,
    })
}

/// Evenly spaced grid over `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

fn create(path: &Path, checkpoint_hash: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| GplvmError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "# checkpoint_sha256: {checkpoint_hash}").map_err(|e| GplvmError::io(path, e))?;
    Ok(w)
}

/// Two-column table `cell,<value_name>`.
pub fn write_cell_csv(
    path: &Path,
    checkpoint_hash: &str,
    value_name: &str,
    cell_ids: &[String],
    values: &[f64],
) -> Result<()> {
    let mut w = create(path, checkpoint_hash)?;
    let mut body = format!("cell,{value_name}\n");
    for (c, v) in cell_ids.iter().zip(values) {
        body.push_str(&format!("{c},{v}\n"));
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| GplvmError::io(path, e))
}

pub fn write_correlation_csv(
    path: &Path,
    checkpoint_hash: &str,
    dim_names: &[String],
    corr: &[Correlation],
) -> Result<()> {
    let mut w = create(path, checkpoint_hash)?;
    let mut body = String::from("dimension,pearson_r,zero_variance\n");
    for (name, c) in dim_names.iter().zip(corr) {
        body.push_str(&format!("{name},{},{}\n", c.r, c.zero_variance));
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| GplvmError::io(path, e))
}

/// Long format: one row per (gene, grid point).
pub fn write_sweep_csv(
    path: &Path,
    checkpoint_hash: &str,
    gene_ids: &[String],
    sweep: &SweepResult,
) -> Result<()> {
    let mut w = create(path, checkpoint_hash)?;
    let mut body = String::from("rank,gene,range,grid_value,mean,variance\n");
    for (rank, g) in sweep.genes.iter().enumerate() {
        let name = gene_ids
            .get(g.gene)
            .cloned()
            .unwrap_or_else(|| g.gene.to_string());
        for (i, v) in sweep.grid.iter().enumerate() {
            body.push_str(&format!(
                "{},{name},{},{v},{},{}\n",
                rank + 1,
                g.range,
                g.mean[i],
                g.variance[i]
            ));
        }
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| GplvmError::io(path, e))
}

/// Squared Euclidean distance matrix, used by tests and the brute-force check.
pub fn pairwise_sq_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(n, n, |i, j| (x.row(i) - x.row(j)).norm_squared())
}

/// Orthogonal Procrustes fit of `b` onto `a` after centering both and scaling
/// to unit Frobenius norm; returns the correlation (sum of singular values of
/// `aᵀb`), which is 1 for a perfect rotated/reflected match.
pub fn procrustes_correlation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(GplvmError::dims("Procrustes rows", a.nrows(), b.nrows()));
    }
    let norm = |m: &DMatrix<f64>| {
        let mut c = m.clone();
        for mut col in c.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        let f = c.norm();
        if f > 0.0 {
            c /= f;
        }
        c
    };
    let (a, b) = (norm(a), norm(b));
    Ok((a.transpose() * b).singular_values().sum())
}
