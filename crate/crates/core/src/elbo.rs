//! The factorized evidence lower bound and its minibatch estimator.
//!
//! For every cell `n` and gene `d` the bound contributes
//! `log N(y_nd | μ_f + φ_nᵀζ_d + k̃_nᵀK̃_mm⁻¹m_d, σ_y²) − q_nn/(2σ_y²) − λ_nᵀS_dλ_n/(2σ_y²)`,
//! and the KL divergence of each `q(ũ_d)` from its prior is subtracted once.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GplvmError, Result};
use crate::kernel;
use crate::linalg::{jittered_cholesky, pairwise_sum, select_rows, CholFactor};
use crate::model::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub expected_loglik: f64,
    /// Σ Tr(S_d Λ_n) / (2σ_y²)
    pub trace_penalty: f64,
    /// Σ q_nn / (2σ_y²)
    pub nystrom_penalty: f64,
    /// Σ_d KL(q(ũ_d) || p(ũ_d))
    pub kl: f64,
    /// KL of the amortized q(X) from N(0, I); zero for point-estimate latents.
    pub kl_latent: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub(crate) fn assemble(
        expected_loglik: f64,
        trace_penalty: f64,
        nystrom_penalty: f64,
        kl: f64,
        kl_latent: f64,
    ) -> Result<Self> {
        let named = [
            ("expected log-likelihood", expected_loglik),
            ("trace penalty", trace_penalty),
            ("Nystrom penalty", nystrom_penalty),
            ("KL divergence", kl),
            ("latent KL divergence", kl_latent),
        ];
        for (name, v) in named {
            if !v.is_finite() {
                return Err(GplvmError::NonFinite(format!("ELBO term '{name}'")));
            }
        }
        Ok(ElboBreakdown {
            expected_loglik,
            trace_penalty,
            nystrom_penalty,
            kl,
            kl_latent,
            total: expected_loglik - trace_penalty - nystrom_penalty - kl - kl_latent,
        })
    }
}

/// KL(N(m, S) || N(0, K)) together with the jitter that had to be added to `S`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlValue {
    pub value: f64,
    pub s_jitter: f64,
}

/// `½[Tr(K⁻¹S) + mᵀK⁻¹m − M + log det K − log det S]`.
pub fn kl_gaussians(m: &DVector<f64>, s: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<KlValue> {
    let dim = m.len();
    if s.shape() != (dim, dim) || k.shape() != (dim, dim) {
        return Err(GplvmError::dims(
            "KL operand size",
            dim,
            s.nrows().max(k.nrows()),
        ));
    }
    let kc = jittered_cholesky(k, "prior covariance K")?;
    let sc = jittered_cholesky(s, "variational covariance S")?;
    if sc.jitter > 0.0 {
        log::warn!(
            "variational covariance is singular; log det uses jitter {:e}",
            sc.jitter
        );
    }
    let tr = kc.solve_lower(&sc.l).norm_squared();
    let maha = kc
        .solve_lower(&DMatrix::from_column_slice(dim, 1, m.as_slice()))
        .norm_squared();
    let value = 0.5 * (tr + maha - dim as f64 + kc.log_det() - sc.log_det());
    Ok(KlValue {
        value,
        s_jitter: sc.jitter,
    })
}

/// Σ_d KL using the triangular factors `C_d` directly.
pub(crate) fn kl_sum(state: &ModelState, kchol: &CholFactor) -> f64 {
    let m = state.m();
    let log_det_k = kchol.log_det();
    let per_gene: Vec<f64> = (0..state.d())
        .map(|d| {
            let c = &state.var_chol[d];
            let tr = kchol.solve_lower(c).norm_squared();
            let md = state.var_means.column(d).into_owned();
            let maha = kchol
                .solve_lower(&DMatrix::from_column_slice(m, 1, md.as_slice()))
                .norm_squared();
            let log_det_s: f64 = (0..m).map(|i| 2.0 * c[(i, i)].abs().ln()).sum();
            0.5 * (tr + maha - m as f64 + log_det_k - log_det_s)
        })
        .collect();
    pairwise_sum(&per_gene)
}

/// Likelihood-side terms for the rows in `x_b`/`phi_b`/`y_b`, each multiplied by `scale`.
fn likelihood_terms(
    y_b: &DMatrix<f64>,
    phi_b: &DMatrix<f64>,
    x_b: &DMatrix<f64>,
    state: &ModelState,
    kchol: &CholFactor,
    scale: f64,
) -> Result<(f64, f64, f64)> {
    let bundle = kernel::gram_bundle(x_b, phi_b, &state.inducing, &state.kernel)?;
    let s2 = state.noise_variance;
    let a = kchol.solve(&bundle.knm.transpose());
    let means = a.transpose() * &state.var_means + phi_b * &state.zeta;
    let d_count = state.d();
    let covs: Vec<DMatrix<f64>> = (0..d_count).map(|d| state.var_cov(d)).collect();
    let mut ll = Vec::with_capacity(x_b.nrows());
    let mut tr = Vec::with_capacity(x_b.nrows());
    let mut nys = Vec::with_capacity(x_b.nrows());
    let log_norm = -0.5 * (2.0 * PI * s2).ln();
    for n in 0..x_b.nrows() {
        let lambda = a.column(n);
        let q_nn = bundle.knn_diag[n] - bundle.knm.row(n).transpose().dot(&lambda);
        let mut row_ll = 0.0;
        let mut row_tr = 0.0;
        for d in 0..d_count {
            let r = y_b[(n, d)] - state.mean_const - means[(n, d)];
            row_ll += log_norm - r * r / (2.0 * s2);
            row_tr += lambda.dot(&(&covs[d] * lambda)) / (2.0 * s2);
        }
        ll.push(row_ll);
        tr.push(row_tr);
        nys.push(d_count as f64 * q_nn / (2.0 * s2));
    }
    Ok((
        scale * pairwise_sum(&ll),
        scale * pairwise_sum(&tr),
        scale * pairwise_sum(&nys),
    ))
}

fn check_data(y: &DMatrix<f64>, phi: &DMatrix<f64>, state: &ModelState) -> Result<()> {
    state.validate()?;
    if y.nrows() != state.n() {
        return Err(GplvmError::dims("expression rows", state.n(), y.nrows()));
    }
    if y.ncols() != state.d() {
        return Err(GplvmError::dims("expression columns", state.d(), y.ncols()));
    }
    if phi.nrows() != state.n() {
        return Err(GplvmError::dims("design rows", state.n(), phi.nrows()));
    }
    Ok(())
}

pub fn elbo_full(
    y: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    state: &ModelState,
) -> Result<ElboBreakdown> {
    check_data(y, phi, state)?;
    let kmm = kernel::inducing_covariance(&state.kernel, &state.inducing);
    let kchol = jittered_cholesky(&kmm, "K̃_mm")?;
    let (ll, tr, nys) = likelihood_terms(y, phi, &state.latents, state, &kchol, 1.0)?;
    ElboBreakdown::assemble(ll, tr, nys, kl_sum(state, &kchol), 0.0)
}

/// Minibatch estimate: likelihood-side terms scaled by `N/B` with `B = indices.len()`,
/// KL unscaled.
pub fn elbo_minibatch(
    y: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    indices: &[usize],
    state: &ModelState,
) -> Result<ElboBreakdown> {
    check_data(y, phi, state)?;
    if indices.is_empty() {
        return Err(GplvmError::InvalidArgument("empty minibatch".into()));
    }
    if let Some(bad) = indices.iter().find(|&&i| i >= state.n()) {
        return Err(GplvmError::InvalidArgument(format!(
            "minibatch index {bad} out of range"
        )));
    }
    let kmm = kernel::inducing_covariance(&state.kernel, &state.inducing);
    let kchol = jittered_cholesky(&kmm, "K̃_mm")?;
    let scale = state.n() as f64 / indices.len() as f64;
    let (ll, tr, nys) = likelihood_terms(
        &select_rows(y, indices),
        &select_rows(phi, indices),
        &select_rows(&state.latents, indices),
        state,
        &kchol,
        scale,
    )?;
    ElboBreakdown::assemble(ll, tr, nys, kl_sum(state, &kchol), 0.0)
}

/// Replaces every `(m_d, S_d)` with the maximizer of the bound for the
/// current kernel, inducing inputs, latents and noise:
/// `S = K̃_mm Σ⁻¹ K̃_mm`, `m_d = K̃_mm Σ⁻¹ K̃_mn (y_d − μ_f − Φζ_d)/σ_y²`,
/// `Σ = K̃_mm + K̃_mn K̃_nm / σ_y²`.
pub fn optimal_variational(
    y: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    state: &ModelState,
) -> Result<ModelState> {
    check_data(y, phi, state)?;
    let bundle = kernel::gram_bundle(&state.latents, phi, &state.inducing, &state.kernel)?;
    let s2 = state.noise_variance;
    let kchol = jittered_cholesky(&bundle.kmm, "K̃_mm")?;
    let kmm = &bundle.kmm + DMatrix::identity(state.m(), state.m()) * kchol.jitter;
    let sigma = &kmm + bundle.knm.transpose() * &bundle.knm / s2;
    let schol = jittered_cholesky(&sigma, "K̃_mm + K̃_mn K̃_nm / σ²")?;
    let s = &kmm * schol.solve(&kmm);
    let s = (&s + s.transpose()) * 0.5;
    let c = jittered_cholesky(&s, "optimal S")?.l;
    let resid =
        y - phi * &state.zeta - DMatrix::from_element(y.nrows(), y.ncols(), state.mean_const);
    let means = &kmm * schol.solve(&(bundle.knm.transpose() * resid)) / s2;
    let mut out = state.clone();
    out.var_means = means;
    out.var_chol = vec![c; state.d()];
    Ok(out)
}
