//! Initial model state from data: cell-cycle score, principal components and
//! an optional extra covariate dimension for the latents; perturbed data rows
//! for the inducing inputs; moment-matched kernel and noise scales.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::io::ExpressionMatrix;
use super::pca::principal_components;
use crate::error::{GplvmError, Result};
use crate::kernel::{self, InducingInputs, KernelSpec};
use crate::linalg::{jittered_cholesky, pairwise_sum};
use crate::model::{ModelState, ZetaMode};

/// Standard deviation of the noise added to the sampled inducing rows
/// (variance 0.01).
pub const INDUCING_JITTER_SD: f64 = 0.1;
pub const INITIAL_LINEAR_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct InitOptions {
    /// Total latent dimensions, including the cell-cycle and extra dimensions.
    pub q: usize,
    /// Number of inducing points.
    pub m: usize,
    /// Genes averaged into the first (periodic) latent dimension. Without
    /// markers the first dimension is a principal component like the rest.
    pub cc_markers: Option<Vec<String>>,
    /// Per-cell values for the last latent dimension (e.g. encoded severity).
    pub extra: Option<Vec<f64>>,
    pub seed: u64,
    /// Remove the least-squares fit on the design before computing components.
    pub regress_design: bool,
    pub zeta_mode: ZetaMode,
}

impl InitOptions {
    pub fn new(q: usize, m: usize) -> Self {
        InitOptions {
            q,
            m,
            cc_markers: None,
            extra: None,
            seed: 0,
            regress_design: false,
            zeta_mode: ZetaMode::PerGene,
        }
    }
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    let sq: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    let sd = (pairwise_sum(&sq) / n).sqrt();
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

/// Mean of the z-scored marker columns, standardized.
pub fn cell_cycle_score(m: &ExpressionMatrix, markers: &[String]) -> Result<Vec<f64>> {
    let missing: Vec<String> = markers
        .iter()
        .filter(|g| m.gene_index(g).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(GplvmError::MissingGenes(missing));
    }
    if markers.is_empty() {
        return Err(GplvmError::InvalidArgument("empty marker list".into()));
    }
    let n = m.n_cells();
    let mut score = vec![0.0; n];
    for g in markers {
        let mut col: Vec<f64> = m
            .values
            .column(m.gene_index(g).expect("checked"))
            .iter()
            .copied()
            .collect();
        standardize(&mut col);
        for (s, v) in score.iter_mut().zip(&col) {
            *s += v / markers.len() as f64;
        }
    }
    standardize(&mut score);
    Ok(score)
}

/// Ordered categories mapped to `0..k` and standardized. Without an explicit
/// order, levels sort numerically when they all parse as numbers and
/// lexicographically otherwise.
pub fn encode_ordinal(values: &[String], order: Option<&[String]>) -> Result<Vec<f64>> {
    let levels: Vec<String> = match order {
        Some(o) => o.to_vec(),
        None => {
            let mut l: Vec<String> = values.to_vec();
            l.sort();
            l.dedup();
            if l.iter().all(|s| s.parse::<f64>().is_ok()) {
                l.sort_by(|a, b| {
                    a.parse::<f64>()
                        .unwrap()
                        .total_cmp(&b.parse::<f64>().unwrap())
                });
            }
            l
        }
    };
    let mut out = values
        .iter()
        .map(|v| {
            levels
                .iter()
                .position(|l| l == v)
                .map(|i| i as f64)
                .ok_or_else(|| {
                    GplvmError::InvalidArgument(format!("level '{v}' is not in the given order"))
                })
        })
        .collect::<Result<Vec<f64>>>()?;
    let first = out.first().copied();
    if out.iter().all(|v| Some(*v) == first) {
        return Err(GplvmError::ZeroVariance("ordinal covariate".into()));
    }
    standardize(&mut out);
    Ok(out)
}

fn residualize(y: &DMatrix<f64>, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if phi.ncols() == 0 {
        return Ok(y.clone());
    }
    let gram = phi.transpose() * phi;
    let chol = jittered_cholesky(&gram, "ΦᵀΦ")?;
    let coef = chol.solve(&(phi.transpose() * y));
    Ok(y - phi * coef)
}

pub fn initialize(
    m: &ExpressionMatrix,
    phi: &DMatrix<f64>,
    opts: &InitOptions,
) -> Result<ModelState> {
    let (n, d) = m.values.shape();
    let p = phi.ncols();
    if phi.nrows() != n {
        return Err(GplvmError::dims("design rows", n, phi.nrows()));
    }
    if opts.m <= p {
        return Err(GplvmError::Config(format!(
            "the number of inducing points ({}) must be strictly greater than the number of covariates ({p}): \
             at least P+1 points are needed to pin down a hyperplane in P dimensions",
            opts.m
        )));
    }
    let n_cc = usize::from(opts.cc_markers.is_some());
    let n_extra = usize::from(opts.extra.is_some());
    if opts.q < 1 || opts.q < n_cc + n_extra {
        return Err(GplvmError::Config(format!(
            "{} latent dimensions cannot hold {} cell-cycle and {} extra dimension(s)",
            opts.q, n_cc, n_extra
        )));
    }
    let n_pc = opts.q - n_cc - n_extra;

    let mut x = DMatrix::zeros(n, opts.q);
    if let Some(markers) = &opts.cc_markers {
        let score = cell_cycle_score(m, markers)?;
        x.set_column(0, &nalgebra::DVector::from_vec(score));
    }
    if n_pc > 0 {
        let source = if opts.regress_design {
            residualize(&m.values, phi)?
        } else {
            m.values.clone()
        };
        let pca = principal_components(&source, n_pc, opts.seed)?;
        for j in 0..n_pc {
            let mut col: Vec<f64> = pca.scores.column(j).iter().copied().collect();
            standardize(&mut col);
            x.set_column(n_cc + j, &nalgebra::DVector::from_vec(col));
        }
    }
    if let Some(extra) = &opts.extra {
        if extra.len() != n {
            return Err(GplvmError::dims(
                "extra initialization values",
                n,
                extra.len(),
            ));
        }
        let mut col = extra.clone();
        standardize(&mut col);
        x.set_column(opts.q - 1, &nalgebra::DVector::from_vec(col));
    }

    // inducing inputs: perturbed copies of randomly chosen (x_n, φ_n) rows
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let noise = Normal::new(0.0, INDUCING_JITTER_SD).expect("positive standard deviation");
    let z = DMatrix::from_fn(opts.m, opts.q + p, |i, c| {
        let row = perm[i % n];
        let base = if c < opts.q {
            x[(row, c)]
        } else {
            phi[(row, c - opts.q)]
        };
        base + noise.sample(&mut rng)
    });

    let all: Vec<f64> = m.values.iter().copied().collect();
    let mean = pairwise_sum(&all) / all.len() as f64;
    let sq: Vec<f64> = all.iter().map(|v| (v - mean).powi(2)).collect();
    let var = pairwise_sum(&sq) / all.len() as f64;
    if !(var > 0.0) {
        return Err(GplvmError::ZeroVariance("expression matrix".into()));
    }
    let kernel = KernelSpec::new(var / 2.0, vec![1.0; opts.q], INITIAL_LINEAR_SCALE, p)?;
    let inducing = InducingInputs::new(z, opts.q)?;
    let kmm = kernel::inducing_covariance(&kernel, &inducing);
    let c = jittered_cholesky(&kmm, "K̃_mm")?.l;
    let state = ModelState {
        latents: x,
        inducing,
        var_means: DMatrix::zeros(opts.m, d),
        var_chol: vec![c; d],
        kernel,
        mean_const: mean,
        zeta: DMatrix::zeros(p, d),
        noise_variance: 0.5 * var,
        zeta_mode: opts.zeta_mode,
    };
    state.validate()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::normal_matrix;

    fn matrix(n: usize, d: usize, seed: u64) -> ExpressionMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ExpressionMatrix::new(
            normal_matrix(&mut rng, n, d),
            (0..n).map(|i| format!("c{i}")).collect(),
            (0..d).map(|i| format!("g{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn too_few_inducing_points_is_a_config_error() {
        let m = matrix(10, 4, 1);
        let phi = DMatrix::from_element(10, 3, 1.0);
        let err = initialize(&m, &phi, &InitOptions::new(2, 3)).unwrap_err();
        assert!(matches!(err, GplvmError::Config(ref s) if s.contains("strictly greater")));
    }

    #[test]
    fn missing_markers_are_named() {
        let m = matrix(10, 4, 2);
        let mut opts = InitOptions::new(2, 4);
        opts.cc_markers = Some(vec!["g1".into(), "MKI67".into(), "TOP2A".into()]);
        match initialize(&m, &DMatrix::zeros(10, 0), &opts) {
            Err(GplvmError::MissingGenes(g)) => assert_eq!(g, vec!["MKI67", "TOP2A"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layout_and_moments() {
        let m = matrix(30, 6, 3);
        let phi = DMatrix::from_fn(30, 2, |i, c| if i % 2 == c { 1.0 } else { 0.0 });
        let mut opts = InitOptions::new(4, 8);
        opts.cc_markers = Some(vec!["g0".into(), "g3".into()]);
        opts.extra = Some((0..30).map(|i| (i % 3) as f64).collect());
        let st = initialize(&m, &phi, &opts).unwrap();
        assert_eq!(st.latents.shape(), (30, 4));
        assert_eq!(st.inducing.values.shape(), (8, 6));
        for c in 0..4 {
            let col = st.latents.column(c);
            assert!(col.mean().abs() < 1e-12);
            assert!((col.variance() - 1.0).abs() < 1e-9);
        }
        let expected_cc = cell_cycle_score(&m, &["g0".into(), "g3".into()]).unwrap();
        assert_eq!(
            st.latents.column(0).iter().copied().collect::<Vec<_>>(),
            expected_cc
        );
        assert_eq!(st.kernel.linear_scale, 0.1);
        assert!((st.noise_variance - st.kernel.signal_variance).abs() < 1e-15);
        assert!(st.var_means.iter().all(|v| *v == 0.0));
        // C_d is the Cholesky factor of K̃_mm
        let kmm = kernel::inducing_covariance(&st.kernel, &st.inducing);
        assert!((&st.var_chol[0] * st.var_chol[0].transpose() - kmm).amax() < 1e-10);
    }

    #[test]
    fn initialization_is_seeded() {
        let m = matrix(20, 5, 4);
        let phi = DMatrix::zeros(20, 0);
        let a = initialize(&m, &phi, &InitOptions::new(3, 6)).unwrap();
        let b = initialize(&m, &phi, &InitOptions::new(3, 6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ordinal_encoding() {
        let v: Vec<String> = ["mild", "severe", "mild", "moderate"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let order: Vec<String> = ["mild", "moderate", "severe"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let e = encode_ordinal(&v, Some(&order)).unwrap();
        assert!(e[0] < e[3] && e[3] < e[1]);
        let numeric: Vec<String> = ["10", "9", "2"].iter().map(|s| s.to_string()).collect();
        let e = encode_ordinal(&numeric, None).unwrap();
        assert!(e[2] < e[1] && e[1] < e[0]);
        assert!(encode_ordinal(&["a".to_string(), "a".to_string()], None).is_err());
    }
}
