//! Model state and the sparse-GP conditionals used for prediction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GplvmError, Result};
use crate::kernel::{self, GramBundle, InducingInputs, KernelSpec};
use crate::linalg::{jittered_cholesky, select_rows};

/// How the fixed-effect means `ζ` are shared across genes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ZetaMode {
    /// One ζ vector per gene.
    #[default]
    PerGene,
    /// A single ζ vector broadcast to every gene.
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// N×Q point estimates of the latents.
    pub latents: DMatrix<f64>,
    pub inducing: InducingInputs,
    /// M×D, column `d` is `m_d`.
    pub var_means: DMatrix<f64>,
    /// Lower-triangular `C_d` with `S_d = C_d C_dᵀ`.
    pub var_chol: Vec<DMatrix<f64>>,
    pub kernel: KernelSpec,
    /// μ_f
    pub mean_const: f64,
    /// P×D fixed-effect means.
    pub zeta: DMatrix<f64>,
    /// σ_y²
    pub noise_variance: f64,
    pub zeta_mode: ZetaMode,
}

impl ModelState {
    pub fn n(&self) -> usize {
        self.latents.nrows()
    }
    pub fn q(&self) -> usize {
        self.kernel.q_total()
    }
    pub fn m(&self) -> usize {
        self.inducing.m()
    }
    pub fn d(&self) -> usize {
        self.var_means.ncols()
    }
    pub fn p(&self) -> usize {
        self.kernel.p_linear
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        let (q, p, m, d) = (self.q(), self.p(), self.m(), self.d());
        if self.latents.ncols() != q {
            return Err(GplvmError::dims("latent columns", q, self.latents.ncols()));
        }
        if self.inducing.q != q {
            return Err(GplvmError::dims(
                "inducing latent columns",
                q,
                self.inducing.q,
            ));
        }
        if self.inducing.p() != p {
            return Err(GplvmError::dims(
                "inducing linear columns",
                p,
                self.inducing.p(),
            ));
        }
        if self.var_means.nrows() != m {
            return Err(GplvmError::dims(
                "variational mean length",
                m,
                self.var_means.nrows(),
            ));
        }
        if self.var_chol.len() != d {
            return Err(GplvmError::dims(
                "variational factors",
                d,
                self.var_chol.len(),
            ));
        }
        for c in &self.var_chol {
            if c.shape() != (m, m) {
                return Err(GplvmError::dims("variational factor size", m, c.nrows()));
            }
        }
        if self.zeta.shape() != (p, d) {
            return Err(GplvmError::dims("zeta rows", p, self.zeta.nrows()));
        }
        if !(self.noise_variance > 0.0) || !self.noise_variance.is_finite() {
            return Err(GplvmError::Config("noise variance must be positive".into()));
        }
        Ok(())
    }

    /// `S_d = C_d C_dᵀ`
    pub fn var_cov(&self, d: usize) -> DMatrix<f64> {
        let c = &self.var_chol[d];
        c * c.transpose()
    }

    pub fn var_mean(&self, d: usize) -> DVector<f64> {
        self.var_means.column(d).into_owned()
    }
}

/// Marginal Gaussian predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveGaussian {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    /// Largest amount by which a negative variance was raised to zero.
    pub max_floor: f64,
}

/// Sparse conditional `q(f) = ∫ p(f|u) q(u) du` with `q(u) = N(m, S)`.
pub fn sparse_conditional(
    knn_diag: &DVector<f64>,
    knm: &DMatrix<f64>,
    kmm: &DMatrix<f64>,
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    name: &str,
) -> Result<PredictiveGaussian> {
    let mm = kmm.nrows();
    if m.len() != mm || s.shape() != (mm, mm) || knm.ncols() != mm {
        return Err(GplvmError::dims("variational parameter size", mm, m.len()));
    }
    let chol = jittered_cholesky(kmm, name)?;
    // columns of `a` are λ_n = K̃_mm⁻¹ k̃_n
    let a = chol.solve(&knm.transpose());
    let mean = a.transpose() * m;
    let sa = s * &a;
    let mut max_floor: f64 = 0.0;
    let variance = DVector::from_fn(knm.nrows(), |n, _| {
        let nys = knn_diag[n] - knm.row(n).transpose().dot(&a.column(n));
        let v = nys + a.column(n).dot(&sa.column(n));
        if v < 0.0 {
            max_floor = max_floor.max(-v);
            0.0
        } else {
            v
        }
    });
    Ok(PredictiveGaussian {
        mean,
        variance,
        max_floor,
    })
}

/// Mean `K̃_nm K̃_mm⁻¹ m_d`, marginal variance `q_nn + λ_nᵀ S_d λ_n`.
pub fn conditional_f_given_u(
    bundle: &GramBundle,
    m: &DVector<f64>,
    s: &DMatrix<f64>,
) -> Result<PredictiveGaussian> {
    sparse_conditional(&bundle.knn_diag, &bundle.knm, &bundle.kmm, m, s, "K̃_mm")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PredictOptions {
    /// Add σ_y² to the variance (prediction of observed expression rather than of f).
    pub observation: bool,
}

/// Predicted expression of gene `d` at new latent/covariate inputs.
pub fn predict_expression(
    x: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    state: &ModelState,
    d: usize,
    opts: PredictOptions,
) -> Result<PredictiveGaussian> {
    if d >= state.d() {
        return Err(GplvmError::InvalidArgument(format!(
            "gene index {d} out of range (model has {} genes)",
            state.d()
        )));
    }
    let bundle = kernel::gram_bundle(x, phi, &state.inducing, &state.kernel)?;
    let mut pred = conditional_f_given_u(&bundle, &state.var_mean(d), &state.var_cov(d))?;
    let shift = phi * state.zeta.column(d);
    for n in 0..pred.mean.len() {
        pred.mean[n] += state.mean_const + shift[n];
        if opts.observation {
            pred.variance[n] += state.noise_variance;
        }
    }
    Ok(pred)
}

/// Predicts every gene at once; the Cholesky of `K̃_mm` is shared.
pub fn predict_all_genes(
    x: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    state: &ModelState,
    opts: PredictOptions,
) -> Result<Vec<PredictiveGaussian>> {
    let bundle = kernel::gram_bundle(x, phi, &state.inducing, &state.kernel)?;
    let chol = jittered_cholesky(&bundle.kmm, "K̃_mm")?;
    let a = chol.solve(&bundle.knm.transpose());
    let means = a.transpose() * &state.var_means + phi * &state.zeta;
    let nys: Vec<f64> = (0..x.nrows())
        .map(|n| bundle.knn_diag[n] - bundle.knm.row(n).transpose().dot(&a.column(n)))
        .collect();
    let mut out = Vec::with_capacity(state.d());
    for d in 0..state.d() {
        let ca = state.var_chol[d].transpose() * &a;
        let mut max_floor: f64 = 0.0;
        let variance = DVector::from_fn(x.nrows(), |n, _| {
            let mut v = nys[n] + ca.column(n).norm_squared();
            if v < 0.0 {
                max_floor = max_floor.max(-v);
                v = 0.0;
            }
            if opts.observation {
                v += state.noise_variance;
            }
            v
        });
        let mean = DVector::from_fn(x.nrows(), |n, _| means[(n, d)] + state.mean_const);
        out.push(PredictiveGaussian {
            mean,
            variance,
            max_floor,
        });
    }
    Ok(out)
}

/// Row indices of the non-linear and the linear-only inducing points, after
/// checking that the inducing inputs have the block layout
/// `[[Z1, 0], [sentinel, Z2]]`.
pub fn block_layout(z: &InducingInputs) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut nonlin = Vec::new();
    let mut lin = Vec::new();
    for i in 0..z.m() {
        if z.linear_only[i] {
            lin.push(i);
        } else {
            if z.linear_row(i).iter().any(|v| *v != 0.0) {
                return Err(GplvmError::NotBlockForm(format!(
                    "inducing row {i} mixes latent and linear inputs"
                )));
            }
            nonlin.push(i);
        }
    }
    if lin.is_empty() {
        return Err(GplvmError::NotBlockForm(
            "no linear-only inducing rows".into(),
        ));
    }
    Ok((nonlin, lin))
}

fn sub_matrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Posterior of the linear (random-effects) part of gene `d`:
/// `N(Φ A m_lin, Φ(νI + A(S_lin − ν Z_lin Z_linᵀ)Aᵀ)Φᵀ)` with
/// `A = Z_linᵀ (Z_lin Z_linᵀ)⁻¹`; jitter is applied to `Z_lin Z_linᵀ`.
pub fn decompose_linear_nonlinear(
    state: &ModelState,
    phi: &DMatrix<f64>,
    d: usize,
) -> Result<PredictiveGaussian> {
    if d >= state.d() {
        return Err(GplvmError::InvalidArgument(format!(
            "gene index {d} out of range"
        )));
    }
    if phi.ncols() != state.p() {
        return Err(GplvmError::dims("design columns", state.p(), phi.ncols()));
    }
    let (_, lin) = block_layout(&state.inducing)?;
    let z_lin = select_rows(&state.inducing.z_lin(), &lin);
    let gram = &z_lin * z_lin.transpose();
    let chol = jittered_cholesky(&gram, "Z_lin Z_linᵀ")?;
    // Aᵀ = (Z Zᵀ)⁻¹ Z, M2×P
    let a_t = chol.solve(&z_lin);
    let m_lin = DVector::from_fn(lin.len(), |i, _| state.var_means[(lin[i], d)]);
    let s_lin = sub_matrix(&state.var_cov(d), &lin, &lin);
    let nu = state.kernel.linear_scale;
    let inner = &s_lin - &gram * nu;
    // rows of Φ Aᵀᵀ = (Aᵀ Φᵀ)ᵀ
    let proj = &a_t * phi.transpose();
    let mean = proj.transpose() * &m_lin;
    let inner_proj = &inner * &proj;
    let mut max_floor: f64 = 0.0;
    let variance = DVector::from_fn(phi.nrows(), |n, _| {
        let v = nu * phi.row(n).norm_squared() + proj.column(n).dot(&inner_proj.column(n));
        if v < 0.0 {
            max_floor = max_floor.max(-v);
            0.0
        } else {
            v
        }
    });
    Ok(PredictiveGaussian {
        mean,
        variance,
        max_floor,
    })
}

/// Posterior of the periodic×SE-ARD part of gene `d` at latent inputs `x`,
/// using only the non-linear inducing rows of a block-form model.
pub fn nonlinear_part(
    state: &ModelState,
    x: &DMatrix<f64>,
    d: usize,
) -> Result<PredictiveGaussian> {
    if d >= state.d() {
        return Err(GplvmError::InvalidArgument(format!(
            "gene index {d} out of range"
        )));
    }
    let (nonlin, _) = block_layout(&state.inducing)?;
    let mut spec = state.kernel.clone();
    spec.linear_scale = 0.0;
    let z = &state.inducing;
    let rows: Vec<Vec<f64>> = nonlin.iter().map(|&i| z.latent_row(i)).collect();
    let kmm = DMatrix::from_fn(rows.len(), rows.len(), |i, j| {
        spec.nonlinear(&rows[i], &rows[j])
    });
    let knm = DMatrix::from_fn(x.nrows(), rows.len(), |n, j| {
        let xn: Vec<f64> = x.row(n).iter().copied().collect();
        spec.nonlinear(&xn, &rows[j])
    });
    let knn = DVector::from_element(x.nrows(), spec.signal_variance);
    let m = DVector::from_fn(nonlin.len(), |i, _| state.var_means[(nonlin[i], d)]);
    let s = sub_matrix(&state.var_cov(d), &nonlin, &nonlin);
    sparse_conditional(&knn, &knm, &kmm, &m, &s, "K_mm (non-linear block)")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.5..1.5))
    }

    fn lower(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                rng.random_range(0.3..1.0)
            } else if i > j {
                rng.random_range(-0.3..0.3)
            } else {
                0.0
            }
        })
    }

    fn state(n: usize, m: usize, q: usize, p: usize, d: usize, rng: &mut ChaCha8Rng) -> ModelState {
        let kernel = KernelSpec::new(
            1.2,
            (0..q).map(|_| rng.random_range(0.6..1.4)).collect(),
            0.4,
            p,
        )
        .unwrap();
        ModelState {
            latents: rand_mat(n, q, rng),
            inducing: InducingInputs::new(rand_mat(m, q + p, rng), q).unwrap(),
            var_means: rand_mat(m, d, rng),
            var_chol: (0..d).map(|_| lower(m, rng)).collect(),
            kernel,
            mean_const: 0.3,
            zeta: rand_mat(p, d, rng),
            noise_variance: 0.2,
            zeta_mode: ZetaMode::PerGene,
        }
    }

    #[test]
    fn prior_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = state(6, 4, 2, 2, 1, &mut rng);
        let phi = rand_mat(6, 2, &mut rng);
        let b = kernel::gram_bundle(&st.latents, &phi, &st.inducing, &st.kernel).unwrap();
        let pred = conditional_f_given_u(&b, &DVector::zeros(4), &b.kmm).unwrap();
        assert!(pred.mean.amax() < 1e-14);
        assert!((pred.variance - &b.knn_diag).amax() < 1e-10);
    }

    #[test]
    fn interpolating_inducing_points_close_the_nystrom_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, q, p) = (5, 2, 1);
        let x = rand_mat(n, q, &mut rng) * 2.0;
        let phi = rand_mat(n, p, &mut rng);
        let mut zv = DMatrix::zeros(n, q + p);
        zv.columns_mut(0, q).copy_from(&x);
        zv.columns_mut(q, p).copy_from(&phi);
        let z = InducingInputs::new(zv, q).unwrap();
        let spec = KernelSpec::new(1.0, vec![1.0, 0.8], 0.3, p).unwrap();
        let b = kernel::gram_bundle(&x, &phi, &z, &spec).unwrap();
        let pred = conditional_f_given_u(&b, &DVector::zeros(n), &DMatrix::zeros(n, n)).unwrap();
        assert!(pred.variance.amax() < 1e-6, "{}", pred.variance);
    }

    #[test]
    fn conditional_matches_dense_gaussian_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = state(4, 2, 2, 1, 1, &mut rng);
        let phi = rand_mat(4, 1, &mut rng);
        let b = kernel::gram_bundle(&st.latents, &phi, &st.inducing, &st.kernel).unwrap();
        let (m, s) = (st.var_mean(0), st.var_cov(0));
        let pred = conditional_f_given_u(&b, &m, &s).unwrap();
        let inst = oracle::DenseInputs::from_state(&st, &phi);
        let (om, ov) = oracle::dense_predict(&inst, &inst.x, &inst.phi, 0);
        for n in 0..4 {
            let shift = st.mean_const + (phi.row(n) * st.zeta.column(0))[0];
            assert!((pred.mean[n] + shift - om[n]).abs() < 1e-10);
            assert!((pred.variance[n] - ov[n]).abs() < 1e-10);
        }
    }

    #[test]
    fn predict_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let st = state(5, 3, 3, 2, 3, &mut rng);
        let xs = rand_mat(4, 3, &mut rng);
        let ps = rand_mat(4, 2, &mut rng);
        let inst = oracle::DenseInputs::from_state(&st, &DMatrix::zeros(5, 2));
        for d in 0..3 {
            let pred = predict_expression(&xs, &ps, &st, d, PredictOptions::default()).unwrap();
            let (om, ov) =
                oracle::dense_predict(&inst, &oracle::to_rows(&xs), &oracle::to_rows(&ps), d);
            for n in 0..4 {
                assert!((pred.mean[n] - om[n]).abs() < 1e-8);
                assert!((pred.variance[n] - ov[n]).abs() < 1e-8);
            }
            let obs =
                predict_expression(&xs, &ps, &st, d, PredictOptions { observation: true }).unwrap();
            assert!(
                (obs.variance - &pred.variance)
                    .add_scalar(-st.noise_variance)
                    .amax()
                    < 1e-14
            );
        }
        let all = predict_all_genes(&xs, &ps, &st, PredictOptions::default()).unwrap();
        for d in 0..3 {
            let one = predict_expression(&xs, &ps, &st, d, PredictOptions::default()).unwrap();
            assert!((&all[d].mean - &one.mean).amax() < 1e-10);
            assert!((&all[d].variance - &one.variance).amax() < 1e-10);
        }
    }

    #[test]
    fn zero_design_shifts_mean_by_constant_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut st = state(5, 3, 2, 2, 1, &mut rng);
        st.var_means.fill(0.0);
        let xs = rand_mat(3, 2, &mut rng);
        let pred = predict_expression(
            &xs,
            &DMatrix::zeros(3, 2),
            &st,
            0,
            PredictOptions::default(),
        )
        .unwrap();
        for v in pred.mean.iter() {
            assert_eq!(*v, st.mean_const);
        }
    }

    #[test]
    fn gene_index_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let st = state(3, 2, 2, 1, 2, &mut rng);
        let err = predict_expression(
            &st.latents,
            &DMatrix::zeros(3, 1),
            &st,
            2,
            PredictOptions::default(),
        );
        assert!(matches!(err, Err(GplvmError::InvalidArgument(_))));
    }

    fn block_state(rng: &mut ChaCha8Rng, m1: usize, m2: usize, p: usize) -> ModelState {
        let q = 2;
        let mut st = state(1, m1 + m2, q, p, 1, rng);
        st.inducing = InducingInputs::block_form(&rand_mat(m1, q, rng), &rand_mat(m2, p, rng));
        // block-diagonal S: u_lin independent of u_nonlin
        let mut c = DMatrix::zeros(m1 + m2, m1 + m2);
        c.view_mut((0, 0), (m1, m1)).copy_from(&lower(m1, rng));
        c.view_mut((m1, m1), (m2, m2)).copy_from(&lower(m2, rng));
        st.var_chol = vec![c];
        st
    }

    #[test]
    fn linear_part_prior_recovery_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut st = block_state(&mut rng, 3, 2, 3);
        st.kernel.linear_scale = 1.0;
        let (_, lin) = block_layout(&st.inducing).unwrap();
        let zl = select_rows(&st.inducing.z_lin(), &lin);
        let gram = &zl * zl.transpose();
        let mut c = DMatrix::zeros(5, 5);
        c.view_mut((3, 3), (2, 2))
            .copy_from(&jittered_cholesky(&gram, "g").unwrap().l);
        st.var_chol = vec![c];
        st.var_means.fill(0.0);
        let phi = rand_mat(4, 3, &mut rng);
        let lp = decompose_linear_nonlinear(&st, &phi, 0).unwrap();
        assert!(lp.mean.amax() < 1e-14);
        for n in 0..4 {
            assert!((lp.variance[n] - phi.row(n).norm_squared()).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_design_row_has_zero_linear_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let st = block_state(&mut rng, 2, 2, 2);
        let mut phi = rand_mat(3, 2, &mut rng);
        phi.row_mut(1).fill(0.0);
        let lp = decompose_linear_nonlinear(&st, &phi, 0).unwrap();
        assert_eq!(lp.mean[1], 0.0);
        assert_eq!(lp.variance[1], 0.0);
    }

    #[test]
    fn linear_and_nonlinear_parts_sum_to_full_conditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let st = block_state(&mut rng, 4, 2, 3);
        let x = rand_mat(6, 2, &mut rng);
        let phi = rand_mat(6, 3, &mut rng);
        let b = kernel::gram_bundle(&x, &phi, &st.inducing, &st.kernel).unwrap();
        let full = conditional_f_given_u(&b, &st.var_mean(0), &st.var_cov(0)).unwrap();
        let lin = decompose_linear_nonlinear(&st, &phi, 0).unwrap();
        let nl = nonlinear_part(&st, &x, 0).unwrap();
        assert!((&lin.mean + &nl.mean - &full.mean).amax() < 1e-8);
        assert!((&lin.variance + &nl.variance - &full.variance).amax() < 1e-8);
    }

    #[test]
    fn non_block_state_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let st = state(2, 3, 2, 2, 1, &mut rng);
        assert!(matches!(
            decompose_linear_nonlinear(&st, &DMatrix::zeros(1, 2), 0),
            Err(GplvmError::NotBlockForm(_))
        ));
    }
}
