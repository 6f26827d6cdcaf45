//! Exact gradients of the minibatch ELBO by hand-written reverse-mode
//! accumulation through the kernel, the Cholesky factor of `K̃_mm` and the
//! triangular solves against it.
//!
//! Kernel hyperparameters and the noise variance are differentiated in log
//! space. The variational parameters can be read either directly
//! (`m_d`, `C_d`) or in whitened form, where the stored values are
//! `m̃_d = L⁻¹m_d` and `C̃_d = L⁻¹C_d` with `K̃_mm = LLᵀ`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elbo::ElboBreakdown;
use crate::error::{GplvmError, Result};
use crate::kernel;
use crate::linalg::{
    cholesky_adjoint, jittered_cholesky, pairwise_sum, select_rows, solve_lower_adjoint,
    solve_upper_adjoint, tril,
};
use crate::model::{ModelState, ZetaMode};

/// How `var_means`/`var_chol` of a state are to be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariationalForm {
    Direct,
    #[default]
    Whitened,
}

/// Gradient of the objective, one field per free parameter block.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Dataset row of each entry in `latents`.
    pub latent_rows: Vec<usize>,
    /// B×Q; gradients for the minibatch rows only.
    pub latents: DMatrix<f64>,
    pub inducing: DMatrix<f64>,
    pub var_means: DMatrix<f64>,
    /// Lower-triangular, same layout as `var_chol`.
    pub var_chol: Vec<DMatrix<f64>>,
    pub log_signal_variance: f64,
    pub log_lengthscales: Vec<f64>,
    pub log_linear_scale: f64,
    pub mean_const: f64,
    pub zeta: DMatrix<f64>,
    pub log_noise_variance: f64,
}

impl Gradients {
    /// Names the first block holding a non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        let all = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        let blocks: [(&str, bool); 10] = [
            ("latents", all(&self.latents)),
            ("inducing inputs", all(&self.inducing)),
            ("variational means", all(&self.var_means)),
            ("variational factors", self.var_chol.iter().all(all)),
            ("signal variance", self.log_signal_variance.is_finite()),
            (
                "lengthscales",
                self.log_lengthscales.iter().all(|v| v.is_finite()),
            ),
            ("linear scale", self.log_linear_scale.is_finite()),
            ("mean constant", self.mean_const.is_finite()),
            ("fixed effects", all(&self.zeta)),
            ("noise variance", self.log_noise_variance.is_finite()),
        ];
        match blocks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(GplvmError::NonFiniteGradient(name.to_string())),
            None => Ok(()),
        }
    }

    /// Sum of squares over every block.
    pub fn norm_squared(&self) -> f64 {
        self.latents.norm_squared()
            + self.inducing.norm_squared()
            + self.var_means.norm_squared()
            + self.var_chol.iter().map(|c| c.norm_squared()).sum::<f64>()
            + self.log_signal_variance.powi(2)
            + self.log_lengthscales.iter().map(|v| v * v).sum::<f64>()
            + self.log_linear_scale.powi(2)
            + self.mean_const.powi(2)
            + self.zeta.norm_squared()
            + self.log_noise_variance.powi(2)
    }

    pub fn scale(&mut self, factor: f64) {
        self.latents *= factor;
        self.inducing *= factor;
        self.var_means *= factor;
        for c in &mut self.var_chol {
            *c *= factor;
        }
        self.log_signal_variance *= factor;
        for v in &mut self.log_lengthscales {
            *v *= factor;
        }
        self.log_linear_scale *= factor;
        self.mean_const *= factor;
        self.zeta *= factor;
        self.log_noise_variance *= factor;
    }
}

/// Converts direct variational parameters to whitened ones.
pub fn to_whitened(state: &ModelState) -> Result<ModelState> {
    let kmm = kernel::inducing_covariance(&state.kernel, &state.inducing);
    let chol = jittered_cholesky(&kmm, "K̃_mm")?;
    let mut out = state.clone();
    out.var_means = chol.solve_lower(&state.var_means);
    out.var_chol = state
        .var_chol
        .iter()
        .map(|c| tril(&chol.solve_lower(c)))
        .collect();
    Ok(out)
}

/// Converts whitened variational parameters back to `m_d`, `C_d`.
pub fn from_whitened(state: &ModelState) -> Result<ModelState> {
    let kmm = kernel::inducing_covariance(&state.kernel, &state.inducing);
    let chol = jittered_cholesky(&kmm, "K̃_mm")?;
    let mut out = state.clone();
    out.var_means = &chol.l * &state.var_means;
    out.var_chol = state.var_chol.iter().map(|c| &chol.l * c).collect();
    Ok(out)
}

/// A minibatch with its latent inputs given explicitly (point estimates or
/// encoder samples).
pub struct BatchInputs<'a> {
    pub y: &'a DMatrix<f64>,
    pub phi: &'a DMatrix<f64>,
    pub x: &'a DMatrix<f64>,
    /// Multiplier on the likelihood-side terms, `N/B`.
    pub scale: f64,
}

/// Objective value and gradient for one batch. `grads.latent_rows` is left empty.
pub fn batch_value_and_grad(
    batch: &BatchInputs<'_>,
    state: &ModelState,
    form: VariationalForm,
) -> Result<(ElboBreakdown, Gradients)> {
    let b = batch.x.nrows();
    let d_count = state.d();
    let m = state.m();
    let p = state.p();
    let s = state.noise_variance;
    let scale = batch.scale;
    if batch.y.shape() != (b, d_count) {
        return Err(GplvmError::dims(
            "batch expression shape",
            d_count,
            batch.y.ncols(),
        ));
    }
    if batch.phi.nrows() != b {
        return Err(GplvmError::dims("batch design rows", b, batch.phi.nrows()));
    }

    // forward
    let bundle = kernel::gram_bundle(batch.x, batch.phi, &state.inducing, &state.kernel)?;
    let chol = jittered_cholesky(&bundle.kmm, "K̃_mm")?;
    let l = &chol.l;
    let kmn = bundle.knm.transpose();
    let v = chol.solve_lower(&kmn);
    let a = chol.solve_upper(&v);

    let (means, chols): (DMatrix<f64>, Vec<DMatrix<f64>>) = match form {
        VariationalForm::Direct => (state.var_means.clone(), state.var_chol.clone()),
        VariationalForm::Whitened => (
            l * &state.var_means,
            state.var_chol.par_iter().map(|c| l * c).collect(),
        ),
    };
    let covs: Vec<DMatrix<f64>> = chols.par_iter().map(|c| c * c.transpose()).collect();
    let mut s_sum = DMatrix::zeros(m, m);
    for c in &covs {
        s_sum += c;
    }

    let fitted = a.transpose() * &means + batch.phi * &state.zeta;
    let mut resid = batch.y - fitted;
    resid.add_scalar_mut(-state.mean_const);

    let log_norm = -0.5 * (2.0 * PI * s).ln();
    let row_ll: Vec<f64> = (0..b)
        .map(|n| {
            let r = resid.row(n);
            d_count as f64 * log_norm - r.norm_squared() / (2.0 * s)
        })
        .collect();
    let s_a = &s_sum * &a;
    let row_tr: Vec<f64> = (0..b)
        .map(|n| a.column(n).dot(&s_a.column(n)) / (2.0 * s))
        .collect();
    let q_nn: Vec<f64> = (0..b)
        .map(|n| bundle.knn_diag[n] - v.column(n).norm_squared())
        .collect();
    let expected_loglik = scale * pairwise_sum(&row_ll);
    let trace_penalty = scale * pairwise_sum(&row_tr);
    let nystrom_penalty = scale * d_count as f64 * pairwise_sum(&q_nn) / (2.0 * s);

    let kl_terms: Vec<f64> = match form {
        VariationalForm::Direct => (0..d_count)
            .into_par_iter()
            .map(|d| {
                let c = &chols[d];
                let tr = chol.solve_lower(c).norm_squared();
                let md = DMatrix::from_column_slice(m, 1, means.column(d).as_slice());
                let maha = chol.solve_lower(&md).norm_squared();
                let log_det_s: f64 = (0..m).map(|i| 2.0 * c[(i, i)].abs().ln()).sum();
                0.5 * (tr + maha - m as f64 + chol.log_det() - log_det_s)
            })
            .collect(),
        VariationalForm::Whitened => (0..d_count)
            .into_par_iter()
            .map(|d| {
                let c = &state.var_chol[d];
                let log_det: f64 = (0..m).map(|i| 2.0 * c[(i, i)].abs().ln()).sum();
                0.5 * (c.norm_squared() + state.var_means.column(d).norm_squared()
                    - m as f64
                    - log_det)
            })
            .collect(),
    };
    let kl = pairwise_sum(&kl_terms);
    let value = ElboBreakdown::assemble(expected_loglik, trace_penalty, nystrom_penalty, kl, 0.0)?;

    // backward: likelihood side
    let mu_bar = &resid * (scale / s);
    let mean_const_bar = pairwise_sum(mu_bar.as_slice());
    let zeta_bar = batch.phi.transpose() * &mu_bar;
    let mut m_bar = &a * &mu_bar;
    let a_bar = &means * mu_bar.transpose() - &s_a * (scale / s);
    let aat = &a * a.transpose();
    let mut c_bar: Vec<DMatrix<f64>> = chols
        .par_iter()
        .map(|c| tril(&(&aat * c)) * (-scale / s))
        .collect();
    let knn_bar = DVector::from_element(b, -scale * d_count as f64 / (2.0 * s));
    let mut v_bar = &v * (scale * d_count as f64 / s);

    let sq_resid = pairwise_sum(&resid.iter().map(|r| r * r).collect::<Vec<_>>());
    let s_bar = scale * (-((b * d_count) as f64) / (2.0 * s) + sq_resid / (2.0 * s * s))
        + (trace_penalty + nystrom_penalty) / s;

    let (v_from_a, mut l_bar) = solve_upper_adjoint(l, &a, &a_bar);
    v_bar += v_from_a;
    let (kmn_bar, l_from_v) = solve_lower_adjoint(l, &v, &v_bar);
    l_bar += l_from_v;
    let mut kmm_bar = DMatrix::zeros(m, m);

    // KL and the map from stored to direct variational parameters
    let (var_means_bar, var_chol_bar) = match form {
        VariationalForm::Direct => {
            let kinv = chol.inverse();
            m_bar -= &kinv * &means;
            c_bar
                .par_iter_mut()
                .zip(chols.par_iter())
                .for_each(|(cb, c)| {
                    *cb -= tril(&(&kinv * c));
                    for i in 0..m {
                        cb[(i, i)] += 1.0 / c[(i, i)];
                    }
                });
            let w = s_sum.clone() + &means * means.transpose();
            kmm_bar += (&kinv * w * &kinv) * 0.5 - &kinv * (0.5 * d_count as f64);
            (m_bar, c_bar)
        }
        VariationalForm::Whitened => {
            l_bar += tril(&(&m_bar * state.var_means.transpose()));
            let mut wm_bar = l.transpose() * &m_bar;
            wm_bar -= &state.var_means;
            let pieces: Vec<(DMatrix<f64>, DMatrix<f64>)> = c_bar
                .par_iter()
                .zip(state.var_chol.par_iter())
                .map(|(cb, ct)| {
                    let to_l = tril(&(cb * ct.transpose()));
                    let mut g = tril(&(l.transpose() * cb)) - tril(ct);
                    for i in 0..m {
                        g[(i, i)] += 1.0 / ct[(i, i)];
                    }
                    (g, to_l)
                })
                .collect();
            let mut wc_bar = Vec::with_capacity(d_count);
            for (g, to_l) in pieces {
                l_bar += to_l;
                wc_bar.push(g);
            }
            (wm_bar, wc_bar)
        }
    };
    kmm_bar += cholesky_adjoint(l, &l_bar);

    let kg = kernel::kernel_backward(
        &state.kernel,
        batch.x,
        batch.phi,
        &state.inducing,
        &kmn_bar.transpose(),
        &kmm_bar,
        &knn_bar,
    );

    let mut zeta = if p > 0 {
        zeta_bar
    } else {
        DMatrix::zeros(0, d_count)
    };
    if state.zeta_mode == ZetaMode::Shared && p > 0 {
        let total = zeta.column_sum();
        for d in 0..d_count {
            zeta.set_column(d, &total);
        }
    }
    let grads = Gradients {
        latent_rows: Vec::new(),
        latents: kg.x,
        inducing: kg.z,
        var_means: var_means_bar,
        var_chol: var_chol_bar,
        log_signal_variance: kg.log_signal_variance,
        log_lengthscales: kg.log_lengthscales,
        log_linear_scale: kg.log_linear_scale,
        mean_const: mean_const_bar,
        zeta,
        log_noise_variance: s * s_bar,
    };
    Ok((value, grads))
}

/// Value and exact gradient of the minibatch ELBO at the rows `indices`,
/// using the state's own latents.
pub fn gradients(
    y: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    indices: &[usize],
    state: &ModelState,
    form: VariationalForm,
) -> Result<(ElboBreakdown, Gradients)> {
    if indices.is_empty() {
        return Err(GplvmError::InvalidArgument("empty minibatch".into()));
    }
    if let Some(bad) = indices.iter().find(|&&i| i >= state.n()) {
        return Err(GplvmError::InvalidArgument(format!(
            "minibatch index {bad} out of range"
        )));
    }
    if y.nrows() != state.n() || phi.nrows() != state.n() {
        return Err(GplvmError::dims(
            "data rows",
            state.n(),
            y.nrows().min(phi.nrows()),
        ));
    }
    let y_b = select_rows(y, indices);
    let phi_b = select_rows(phi, indices);
    let x_b = select_rows(&state.latents, indices);
    let batch = BatchInputs {
        y: &y_b,
        phi: &phi_b,
        x: &x_b,
        scale: state.n() as f64 / indices.len() as f64,
    };
    let (value, mut g) = batch_value_and_grad(&batch, state, form)?;
    g.latent_rows = indices.to_vec();
    Ok((value, g))
}

/// Flat view of every free scalar, in the unconstrained coordinates the
/// gradients refer to. Used for finite-difference checks.
pub fn flatten_params(state: &ModelState) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend(state.latents.iter());
    out.extend(state.inducing.values.iter());
    out.extend(state.var_means.iter());
    for c in &state.var_chol {
        push_lower(&mut out, c);
    }
    out.push(state.kernel.signal_variance.ln());
    out.extend(state.kernel.lengthscales.iter().map(|l| l.ln()));
    out.push(state.kernel.linear_scale.ln());
    out.push(state.mean_const);
    out.extend(state.zeta.iter());
    out.push(state.noise_variance.ln());
    out
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(template: &ModelState, flat: &[f64]) -> ModelState {
    let mut st = template.clone();
    let mut it = flat.iter().copied();
    let mut next = || it.next().expect("flat parameter vector too short");
    for v in st.latents.iter_mut() {
        *v = next();
    }
    for v in st.inducing.values.iter_mut() {
        *v = next();
    }
    for v in st.var_means.iter_mut() {
        *v = next();
    }
    for c in &mut st.var_chol {
        let m = c.nrows();
        for j in 0..m {
            for i in j..m {
                c[(i, j)] = next();
            }
        }
    }
    st.kernel.signal_variance = next().exp();
    for l in &mut st.kernel.lengthscales {
        *l = next().exp();
    }
    st.kernel.linear_scale = next().exp();
    st.mean_const = next();
    for v in st.zeta.iter_mut() {
        *v = next();
    }
    st.noise_variance = next().exp();
    st
}

/// Gradient laid out like [`flatten_params`]; latent rows outside the batch are zero.
pub fn flatten_grads(g: &Gradients, n: usize) -> Vec<f64> {
    let q = g.latents.ncols();
    let mut lat = DMatrix::zeros(n, q);
    for (k, &row) in g.latent_rows.iter().enumerate() {
        for c in 0..q {
            lat[(row, c)] += g.latents[(k, c)];
        }
    }
    let mut out = Vec::new();
    out.extend(lat.iter());
    out.extend(g.inducing.iter());
    out.extend(g.var_means.iter());
    for c in &g.var_chol {
        push_lower(&mut out, c);
    }
    out.push(g.log_signal_variance);
    out.extend(g.log_lengthscales.iter());
    out.push(g.log_linear_scale);
    out.push(g.mean_const);
    out.extend(g.zeta.iter());
    out.push(g.log_noise_variance);
    out
}

fn push_lower(out: &mut Vec<f64>, c: &DMatrix<f64>) {
    let m = c.nrows();
    for j in 0..m {
        for i in j..m {
            out.push(c[(i, j)]);
        }
    }
}
