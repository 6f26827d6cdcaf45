//! Dense reference computations for verification.
//!
//! Nothing in here reuses the kernel or linear-algebra code of the main path:
//! matrices are plain row-major `Vec<Vec<f64>>`, the kernel is re-derived from
//! its closed form and the factorizations are written out again. Sizes are
//! capped at [`MAX_DENSE_N`] points.

use nalgebra::{DMatrix, DVector};

use crate::error::{GplvmError, Result};
use crate::model::ModelState;

pub const MAX_DENSE_N: usize = 200;

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn zeros(r: usize, c: usize) -> Rows {
    vec![vec![0.0; c]; r]
}

fn matmul(a: &Rows, b: &Rows) -> Rows {
    let (n, k) = (a.len(), b.len());
    let m = if k == 0 { 0 } else { b[0].len() };
    let mut out = zeros(n, m);
    for i in 0..n {
        for t in 0..k {
            let av = a[i][t];
            for j in 0..m {
                out[i][j] += av * b[t][j];
            }
        }
    }
    out
}

fn transpose(a: &Rows) -> Rows {
    if a.is_empty() {
        return Vec::new();
    }
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

/// Lower Cholesky factor, trying `0, 1e-10, 1e-8` jitter.
fn cholesky(a: &Rows) -> Option<Rows> {
    for jitter in [0.0, 1e-10, 1e-8] {
        let n = a.len();
        let mut l = zeros(n, n);
        let mut ok = true;
        'outer: for i in 0..n {
            for j in 0..=i {
                let mut s = a[i][j] + if i == j { jitter } else { 0.0 };
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        ok = false;
                        break 'outer;
                    }
                    l[i][i] = s.sqrt();
                } else {
                    l[i][j] = s / l[j][j];
                }
            }
        }
        if ok {
            return Some(l);
        }
    }
    None
}

/// Solves `L Lᵀ x = b` for one right-hand side.
fn chol_solve(l: &Rows, b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

fn chol_solve_mat(l: &Rows, b: &Rows) -> Rows {
    let cols: Vec<Vec<f64>> = transpose(b).iter().map(|c| chol_solve(l, c)).collect();
    transpose(&cols)
}

fn log_det_chol(l: &Rows) -> f64 {
    (0..l.len()).map(|i| 2.0 * l[i][i].ln()).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Multivariate normal log-density via a dense Cholesky.
fn mvn_log_density(y: &[f64], mean: &[f64], cov: &Rows) -> Result<f64> {
    let l = cholesky(cov).ok_or_else(|| GplvmError::IllConditioned {
        matrix: "dense marginal covariance".into(),
        jitter: 1e-8,
    })?;
    let r: Vec<f64> = y.iter().zip(mean).map(|(a, b)| a - b).collect();
    let alpha = chol_solve(&l, &r);
    let n = y.len() as f64;
    Ok(-0.5 * dot(&r, &alpha)
        - 0.5 * log_det_chol(&l)
        - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Hyperparameters copied out of a [`ModelState`].
#[derive(Debug, Clone)]
pub struct DenseHyper {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub periodic: bool,
    pub linear_scale: f64,
    pub noise_variance: f64,
    pub mean_const: f64,
    /// P×D
    pub zeta: Rows,
}

impl DenseHyper {
    pub fn from_state(state: &ModelState) -> Self {
        DenseHyper {
            signal_variance: state.kernel.signal_variance,
            lengthscales: state.kernel.lengthscales.clone(),
            periodic: state.kernel.periodic,
            linear_scale: state.kernel.linear_scale,
            noise_variance: state.noise_variance,
            mean_const: state.mean_const,
            zeta: to_rows(&state.zeta),
        }
    }

    /// Product of per-dimension factors: periodic on dim 0, squared exponential elsewhere.
    fn latent_kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut k = self.signal_variance;
        for q in 0..a.len() {
            let l = self.lengthscales[q];
            let factor = if q == 0 && self.periodic {
                let s = ((a[0] - b[0]).abs() * 0.5).sin();
                (-2.0 * s.powi(2) / l.powi(2)).exp()
            } else {
                (-(a[q] - b[q]).powi(2) / (2.0 * l.powi(2))).exp()
            };
            k *= factor;
        }
        k
    }

    fn prior_mean(&self, phi: &[f64], d: usize) -> f64 {
        self.mean_const
            + (0..phi.len())
                .map(|c| phi[c] * self.zeta[c][d])
                .sum::<f64>()
    }
}

/// Latents, design rows, inducing rows and variational parameters of a model.
#[derive(Debug, Clone)]
pub struct DenseInputs {
    pub hyper: DenseHyper,
    pub x: Rows,
    pub phi: Rows,
    pub z_latent: Rows,
    pub z_linear: Rows,
    pub linear_only: Vec<bool>,
    /// D vectors of length M
    pub var_means: Rows,
    /// D matrices M×M
    pub var_covs: Vec<Rows>,
}

impl DenseInputs {
    pub fn from_state(state: &ModelState, phi: &DMatrix<f64>) -> Self {
        let q = state.q();
        let z = &state.inducing.values;
        let z_latent = to_rows(&z.columns(0, q).into_owned());
        let z_linear = to_rows(&z.columns(q, z.ncols() - q).into_owned());
        let var_covs = state
            .var_chol
            .iter()
            .map(|c| {
                let c = to_rows(c);
                matmul(&c, &transpose(&c))
            })
            .collect();
        DenseInputs {
            hyper: DenseHyper::from_state(state),
            x: to_rows(&state.latents),
            phi: to_rows(phi),
            z_latent,
            z_linear,
            linear_only: state.inducing.linear_only.clone(),
            var_means: transpose(&to_rows(&state.var_means)),
            var_covs,
        }
    }
}

/// Predictive mean and marginal variance of gene `d` at test rows, obtained
/// by assembling the joint covariance of `(f*, u)` and applying the Gaussian
/// conditioning formula, then integrating `u` against `N(m_d, S_d)`.
pub fn dense_predict(inst: &DenseInputs, xs: &Rows, ps: &Rows, d: usize) -> (Vec<f64>, Vec<f64>) {
    let h = &inst.hyper;
    let n = xs.len();
    let m = inst.z_latent.len();
    // joint covariance, test points first
    let mut joint = zeros(n + m, n + m);
    let point = |i: usize| -> (Vec<f64>, Vec<f64>, bool) {
        if i < n {
            (xs[i].clone(), ps[i].clone(), false)
        } else {
            let j = i - n;
            (
                inst.z_latent[j].clone(),
                inst.z_linear[j].clone(),
                inst.linear_only[j],
            )
        }
    };
    for i in 0..n + m {
        let (xi, pi, si) = point(i);
        for j in 0..n + m {
            let (xj, pj, sj) = point(j);
            let nl = if si || sj {
                0.0
            } else {
                h.latent_kernel(&xi, &xj)
            };
            joint[i][j] = nl + h.linear_scale * dot(&pi, &pj);
        }
    }
    let kuu: Rows = (n..n + m).map(|i| joint[i][n..].to_vec()).collect();
    let kfu: Rows = (0..n).map(|i| joint[i][n..].to_vec()).collect();
    let l = cholesky(&kuu).expect("inducing covariance is positive definite");
    // W = K_uu⁻¹ K_uf  (M×N)
    let w = chol_solve_mat(&l, &transpose(&kfu));
    let s = &inst.var_covs[d];
    let sw = matmul(s, &w);
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    for i in 0..n {
        let wi: Vec<f64> = (0..m).map(|k| w[k][i]).collect();
        mean[i] = dot(&wi, &inst.var_means[d]) + h.prior_mean(&ps[i], d);
        let swi: Vec<f64> = (0..m).map(|k| sw[k][i]).collect();
        var[i] = joint[i][i] - dot(&kfu[i], &wi) + dot(&wi, &swi);
    }
    (mean, var)
}

/// Σ_d log N(y_d | μ_f + Φζ_d, K_nn + ΦΔΦᵀ + σ_y² I) with a shared Δ = νI: the
/// likelihood of the additive model after integrating out the random effects.
pub fn exact_log_marginal(y: &Rows, x: &Rows, phi: &Rows, hyper: &DenseHyper) -> Result<f64> {
    let n = x.len();
    let p = phi.first().map_or(0, |r| r.len());
    let mut delta = zeros(p, p);
    for (i, row) in delta.iter_mut().enumerate() {
        row[i] = hyper.linear_scale;
    }
    random_effects_log_marginal(y, x, phi, hyper, &delta, n)
}

fn random_effects_log_marginal(
    y: &Rows,
    x: &Rows,
    phi: &Rows,
    hyper: &DenseHyper,
    delta: &Rows,
    n: usize,
) -> Result<f64> {
    if n > MAX_DENSE_N {
        return Err(GplvmError::InvalidArgument(format!(
            "dense oracle limited to {MAX_DENSE_N} points, got {n}"
        )));
    }
    let d_count = y.first().map_or(0, |r| r.len());
    let phi_delta_phi = if delta.is_empty() {
        zeros(n, n)
    } else {
        matmul(&matmul(phi, delta), &transpose(phi))
    };
    let mut cov = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            cov[i][j] = hyper.latent_kernel(&x[i], &x[j]) + phi_delta_phi[i][j];
        }
        cov[i][i] += hyper.noise_variance;
    }
    let mut total = 0.0;
    for d in 0..d_count {
        let yd: Vec<f64> = y.iter().map(|r| r[d]).collect();
        let mean: Vec<f64> = phi.iter().map(|r| hyper.prior_mean(r, d)).collect();
        total += mvn_log_density(&yd, &mean, &cov)?;
    }
    Ok(total)
}

/// The same marginal likelihood evaluated by integrating the P-dimensional
/// random effects `B_d ~ N(ζ_d, Δ)` in closed form (Woodbury identity and the
/// matrix determinant lemma). Requires Δ = νI with ν > 0.
pub fn woodbury_log_marginal(y: &Rows, x: &Rows, phi: &Rows, hyper: &DenseHyper) -> Result<f64> {
    let n = x.len();
    let p = phi.first().map_or(0, |r| r.len());
    let nu = hyper.linear_scale;
    if p == 0 || nu <= 0.0 {
        return exact_log_marginal(y, x, phi, hyper);
    }
    let mut base = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            base[i][j] = hyper.latent_kernel(&x[i], &x[j]);
        }
        base[i][i] += hyper.noise_variance;
    }
    let lb = cholesky(&base).ok_or_else(|| GplvmError::IllConditioned {
        matrix: "K_nn + σ²I".into(),
        jitter: 1e-8,
    })?;
    // inner = Δ⁻¹ + Φᵀ Σ₀⁻¹ Φ
    let s0_phi = chol_solve_mat(&lb, phi);
    let mut inner = matmul(&transpose(phi), &s0_phi);
    for (i, row) in inner.iter_mut().enumerate() {
        row[i] += 1.0 / nu;
    }
    let li = cholesky(&inner).ok_or_else(|| GplvmError::IllConditioned {
        matrix: "Δ⁻¹ + ΦᵀΣ₀⁻¹Φ".into(),
        jitter: 1e-8,
    })?;
    let log_det = log_det_chol(&lb) + p as f64 * nu.ln() + log_det_chol(&li);
    let d_count = y.first().map_or(0, |r| r.len());
    let mut total = 0.0;
    for d in 0..d_count {
        let r: Vec<f64> = (0..n)
            .map(|i| y[i][d] - hyper.prior_mean(&phi[i], d))
            .collect();
        let s0r = chol_solve(&lb, &r);
        let phit_s0r: Vec<f64> = (0..p)
            .map(|c| (0..n).map(|i| phi[i][c] * s0r[i]).sum())
            .collect();
        let corr = chol_solve(&li, &phit_s0r);
        let quad = dot(&r, &s0r) - dot(&phit_s0r, &corr);
        total += -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    }
    Ok(total)
}

/// Log marginal of a single gene with one design column, integrating the scalar
/// random effect `b ~ N(ζ, ν)` numerically with composite Simpson rules at two
/// resolutions. Returns `(coarse, fine)`.
pub fn quadrature_log_marginal_rank1(
    y: &[f64],
    x: &Rows,
    phi: &[f64],
    hyper: &DenseHyper,
    intervals: usize,
) -> Result<(f64, f64)> {
    let n = x.len();
    let nu = hyper.linear_scale;
    let zeta = hyper.zeta[0][0];
    let mut base = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            base[i][j] = hyper.latent_kernel(&x[i], &x[j]);
        }
        base[i][i] += hyper.noise_variance;
    }
    let sd = nu.sqrt();
    let (lo, hi) = (zeta - 14.0 * sd, zeta + 14.0 * sd);
    let log_integrand = |b: f64| -> Result<f64> {
        let mean: Vec<f64> = phi.iter().map(|f| hyper.mean_const + f * b).collect();
        let prior = -0.5 * (b - zeta).powi(2) / nu - 0.5 * (2.0 * std::f64::consts::PI * nu).ln();
        Ok(mvn_log_density(y, &mean, &base)? + prior)
    };
    let simpson = |k: usize| -> Result<f64> {
        let k = k + k % 2;
        let h = (hi - lo) / k as f64;
        let mut terms = Vec::with_capacity(k + 1);
        for i in 0..=k {
            let w = if i == 0 || i == k {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            terms.push(log_integrand(lo + i as f64 * h)? + (w * h / 3.0f64).ln());
        }
        Ok(crate::linalg::log_sum_exp(&terms))
    };
    Ok((simpson(intervals)?, simpson(2 * intervals)?))
}

/// Largest allowed disagreement between the likelihood computed from the
/// augmented kernel and the integrated random-effects form.
pub const EQUIVALENCE_TOL: f64 = 1e-8;

/// Log marginal likelihood computed the way the model sees it: the augmented
/// Gram matrix from the kernel module plus σ_y² I, factorized by nalgebra.
pub fn augmented_log_marginal(
    y: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    state: &ModelState,
) -> Result<f64> {
    let n = state.n();
    if n > MAX_DENSE_N {
        return Err(GplvmError::InvalidArgument(format!(
            "dense oracle limited to {MAX_DENSE_N} points, got {n}"
        )));
    }
    let mut cov = crate::kernel::full_gram(&state.kernel, &state.latents, phi);
    for i in 0..n {
        cov[(i, i)] += state.noise_variance;
    }
    let chol = cov.cholesky().ok_or_else(|| GplvmError::IllConditioned {
        matrix: "K̃_nn + σ²I".into(),
        jitter: 0.0,
    })?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mean = phi * &state.zeta;
    let mut total = 0.0;
    for d in 0..y.ncols() {
        let r = DVector::from_fn(n, |i, _| y[(i, d)] - state.mean_const - mean[(i, d)]);
        let alpha = chol.solve(&r);
        total += -0.5 * r.dot(&alpha)
            - 0.5 * log_det
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// Integrated random-effects likelihood (dense ΦΔΦᵀ form).
    pub exact: f64,
    /// Same quantity from the closed-form integral over the random effects.
    pub woodbury: f64,
    /// Augmented-kernel likelihood.
    pub augmented: f64,
    /// Largest pairwise difference between the three.
    pub difference: f64,
    pub elbo: Option<f64>,
    pub equivalent: bool,
    /// `None` when no ELBO was supplied.
    pub bound_holds: Option<bool>,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.equivalent && self.bound_holds.unwrap_or(true)
    }
}

/// Compares the augmented-kernel likelihood with the random-effects forms and,
/// when given, checks that `elbo` does not exceed them. A bound violation of
/// a few ulps of the likelihood is tolerated as rounding.
pub fn equivalence_check(
    y: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    state: &ModelState,
    elbo: Option<f64>,
) -> Result<EquivalenceReport> {
    let hyper = DenseHyper::from_state(state);
    let (yr, xr, pr) = (to_rows(y), to_rows(&state.latents), to_rows(phi));
    let exact = exact_log_marginal(&yr, &xr, &pr, &hyper)?;
    let woodbury = woodbury_log_marginal(&yr, &xr, &pr, &hyper)?;
    let augmented = augmented_log_marginal(y, phi, state)?;
    let difference = (exact - augmented)
        .abs()
        .max((woodbury - augmented).abs())
        .max((exact - woodbury).abs());
    let slack = 64.0 * f64::EPSILON * exact.abs().max(1.0);
    Ok(EquivalenceReport {
        exact,
        woodbury,
        augmented,
        difference,
        elbo,
        equivalent: difference < EQUIVALENCE_TOL,
        bound_holds: elbo.map(|e| e <= exact + slack),
    })
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + h;
            let fp = f(&buf);
            buf[i] = x[i] - h;
            let fm = f(&buf);
            buf[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Relative/absolute tolerance rule used for gradient checks.
pub fn gradients_agree(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < 1e-3 {
        diff < abs
    } else {
        diff <= rel * scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(nu: f64, p: usize) -> DenseHyper {
        DenseHyper {
            signal_variance: 1.1,
            lengthscales: vec![0.9, 1.3],
            periodic: true,
            linear_scale: nu,
            noise_variance: 0.3,
            mean_const: 0.2,
            zeta: vec![vec![0.4]; p],
        }
    }

    #[test]
    fn single_point_single_gene_is_scalar_gaussian() {
        let h = hyper(0.5, 1);
        let v = exact_log_marginal(
            &vec![vec![1.5]],
            &vec![vec![0.1, 0.2]],
            &vec![vec![2.0]],
            &h,
        )
        .unwrap();
        let mean = 0.2 + 2.0 * 0.4;
        let var = 1.1 + 0.5 * 4.0 + 0.3;
        let expected =
            -0.5 * (1.5f64 - mean).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        assert!((v - expected).abs() < 1e-13);
    }

    #[test]
    fn woodbury_agrees_with_dense_form() {
        let h = hyper(0.7, 2);
        let x = vec![
            vec![0.0, 0.3],
            vec![1.0, -0.4],
            vec![2.5, 0.9],
            vec![-1.0, 0.0],
        ];
        let phi = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.5, 0.5],
        ];
        let mut h2 = h.clone();
        h2.zeta = vec![vec![0.4, -0.1], vec![0.2, 0.3]];
        let y = vec![
            vec![0.1, 1.0],
            vec![-0.3, 0.5],
            vec![0.8, 0.0],
            vec![0.2, -0.7],
        ];
        let a = exact_log_marginal(&y, &x, &phi, &h2).unwrap();
        let b = woodbury_log_marginal(&y, &x, &phi, &h2).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn quadrature_converges_to_closed_form() {
        let h = hyper(0.6, 1);
        let x = vec![vec![0.0, 0.3], vec![1.0, -0.4], vec![2.5, 0.9]];
        let phi = vec![1.0, 0.5, -1.0];
        let y = vec![0.4, -0.2, 1.1];
        let (coarse, fine) = quadrature_log_marginal_rank1(&y, &x, &phi, &h, 400).unwrap();
        let rows: Rows = y.iter().map(|v| vec![*v]).collect();
        let prow: Rows = phi.iter().map(|v| vec![*v]).collect();
        let exact = exact_log_marginal(&rows, &x, &prow, &h).unwrap();
        assert!((fine - exact).abs() < 1e-6, "{fine} vs {exact}");
        assert!((coarse - fine).abs() < 1e-6);
    }

    #[test]
    fn too_many_points_is_rejected() {
        let h = hyper(0.0, 0);
        let x = vec![vec![0.0, 0.0]; MAX_DENSE_N + 1];
        let y = vec![vec![0.0]; MAX_DENSE_N + 1];
        let phi = vec![vec![]; MAX_DENSE_N + 1];
        assert!(exact_log_marginal(&y, &x, &phi, &h).is_err());
    }

    #[test]
    fn gradient_rule() {
        assert!(gradients_agree(1.0, 1.00005, 1e-4, 1e-6));
        assert!(!gradients_agree(1.0, 1.001, 1e-4, 1e-6));
        assert!(gradients_agree(1e-5, 1.05e-5, 1e-4, 1e-6));
        assert!(!gradients_agree(1e-4, 1e-4 + 2e-6, 1e-4, 1e-6));
    }

    #[test]
    fn augmented_path_matches_random_effects() {
        use crate::synthetic::{random_instance, InstanceDims};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for p in [0, 1, 3] {
            let inst = random_instance(
                &mut rng,
                InstanceDims {
                    n: 12,
                    d: 2,
                    m: 4,
                    q: 2,
                    p,
                },
            );
            let elbo = crate::elbo::elbo_full(&inst.y, &inst.phi, &inst.state)
                .unwrap()
                .total;
            let rep = equivalence_check(&inst.y, &inst.phi, &inst.state, Some(elbo)).unwrap();
            assert!(rep.passed(), "{rep:?}");
            assert!(rep.difference < 1e-9);
        }
    }

    #[test]
    fn no_covariate_effect_reduces_to_plain_gp() {
        use crate::synthetic::{random_instance, InstanceDims};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let mut inst = random_instance(
            &mut rng,
            InstanceDims {
                n: 8,
                d: 1,
                m: 3,
                q: 2,
                p: 2,
            },
        );
        inst.state.kernel.linear_scale = 0.0;
        inst.phi.fill(0.0);
        let rep = equivalence_check(&inst.y, &inst.phi, &inst.state, None).unwrap();
        let plain = augmented_log_marginal(&inst.y, &DMatrix::zeros(8, 0), &{
            let mut s = inst.state.clone();
            s.zeta = DMatrix::zeros(0, 1);
            s.kernel.p_linear = 0;
            s.inducing.values = s.inducing.values.columns(0, 2).into_owned();
            s
        })
        .unwrap();
        assert!(rep.passed() && rep.bound_holds.is_none());
        assert!((rep.exact - plain).abs() < 1e-12);
    }
}
