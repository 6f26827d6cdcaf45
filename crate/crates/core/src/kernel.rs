//! The augmented covariance function `k_per × k_rbf + k_lin`.
//!
//! Latent inputs are `Q`-vectors; the linear (random-effects) part acts on the
//! `P` design-matrix columns. Inducing inputs carry both blocks side by side,
//! `Z = [Z_per | Z_rbf | Z_lin]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GplvmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    /// σ_f²
    pub signal_variance: f64,
    /// One lengthscale per latent dimension. With `periodic` set, entry 0 belongs
    /// to the periodic factor and the rest to the SE-ARD factor.
    pub lengthscales: Vec<f64>,
    /// ν, the scale of the linear kernel on the design matrix.
    pub linear_scale: f64,
    /// Column dimension of the design matrix.
    pub p_linear: usize,
    pub periodic: bool,
}

impl KernelSpec {
    pub fn new(
        signal_variance: f64,
        lengthscales: Vec<f64>,
        linear_scale: f64,
        p_linear: usize,
    ) -> Result<Self> {
        let spec = KernelSpec {
            signal_variance,
            lengthscales,
            linear_scale,
            p_linear,
            periodic: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn q_total(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(GplvmError::Config(
                "kernel needs at least one latent dimension".into(),
            ));
        }
        if self
            .lengthscales
            .iter()
            .any(|l| !(*l > 0.0) || !l.is_finite())
        {
            return Err(GplvmError::Config("lengthscales must be positive".into()));
        }
        if !(self.signal_variance > 0.0) || !self.signal_variance.is_finite() {
            return Err(GplvmError::Config(
                "signal variance must be positive".into(),
            ));
        }
        if !(self.linear_scale >= 0.0) || !self.linear_scale.is_finite() {
            return Err(GplvmError::Config(
                "linear scale must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Periodic × SE-ARD part for two latent points.
    pub fn nonlinear(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut expo = 0.0;
        for (q, l) in self.lengthscales.iter().enumerate() {
            let d = a[q] - b[q];
            if q == 0 && self.periodic {
                let s = (d.abs() / 2.0).sin();
                expo -= 2.0 * s * s / (l * l);
            } else {
                expo -= d * d / (2.0 * l * l);
            }
        }
        self.signal_variance * expo.exp()
    }

    pub fn linear(&self, a: &[f64], b: &[f64]) -> f64 {
        self.linear_scale * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }
}

/// M×(Q+P) inducing inputs.
///
/// Rows flagged in `linear_only` stand for inducing points placed at infinity in
/// the latent coordinates: their periodic×SE-ARD covariance with anything is
/// exactly zero, so only their `Z_lin` block matters.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingInputs {
    pub values: DMatrix<f64>,
    pub q: usize,
    pub linear_only: Vec<bool>,
}

impl InducingInputs {
    pub fn new(values: DMatrix<f64>, q: usize) -> Result<Self> {
        if values.ncols() < q {
            return Err(GplvmError::dims(
                "inducing input columns",
                q,
                values.ncols(),
            ));
        }
        let m = values.nrows();
        Ok(InducingInputs {
            values,
            q,
            linear_only: vec![false; m],
        })
    }

    /// Builds the block layout `[[Z1, 0], [sentinel, Z2]]`: `z_nonlin` (M1×Q) rows
    /// first with zero linear inputs, then `z_lin` (M2×P) rows that only feed the
    /// linear kernel.
    pub fn block_form(z_nonlin: &DMatrix<f64>, z_lin: &DMatrix<f64>) -> Self {
        let (m1, q) = z_nonlin.shape();
        let (m2, p) = z_lin.shape();
        let mut values = DMatrix::zeros(m1 + m2, q + p);
        values.view_mut((0, 0), (m1, q)).copy_from(z_nonlin);
        values.view_mut((m1, q), (m2, p)).copy_from(z_lin);
        let mut linear_only = vec![false; m1];
        linear_only.extend(std::iter::repeat_n(true, m2));
        InducingInputs {
            values,
            q,
            linear_only,
        }
    }

    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols() - self.q
    }

    pub fn latent_row(&self, i: usize) -> Vec<f64> {
        (0..self.q).map(|j| self.values[(i, j)]).collect()
    }

    pub fn linear_row(&self, i: usize) -> Vec<f64> {
        (self.q..self.values.ncols())
            .map(|j| self.values[(i, j)])
            .collect()
    }

    pub fn z_lin(&self) -> DMatrix<f64> {
        self.values.columns(self.q, self.p()).into_owned()
    }
}

/// Covariances needed by the sparse bound. Only the diagonal of `K̃_nn` is kept.
#[derive(Debug, Clone)]
pub struct GramBundle {
    pub knn_diag: DVector<f64>,
    pub knm: DMatrix<f64>,
    pub kmm: DMatrix<f64>,
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Evaluates `σ_f² exp(-2 sin²(|x₁-x₁'|/2)/l₁²) exp(-Σ_q (x_q-x_q')²/(2l_q²)) + ν⟨φ, φ'⟩`.
pub fn kernel_eval(
    x: &[f64],
    x2: &[f64],
    phi: &[f64],
    phi2: &[f64],
    spec: &KernelSpec,
) -> Result<f64> {
    let q = spec.q_total();
    if x.len() != q || x2.len() != q {
        return Err(GplvmError::dims("latent input", q, x.len().max(x2.len())));
    }
    let p = spec.p_linear;
    if phi.len() != p || phi2.len() != p {
        return Err(GplvmError::dims(
            "covariate input",
            p,
            phi.len().max(phi2.len()),
        ));
    }
    Ok(spec.nonlinear(x, x2) + spec.linear(phi, phi2))
}

fn check_inputs(x: &DMatrix<f64>, phi: &DMatrix<f64>, spec: &KernelSpec) -> Result<()> {
    if x.ncols() != spec.q_total() {
        return Err(GplvmError::dims(
            "latent columns",
            spec.q_total(),
            x.ncols(),
        ));
    }
    if phi.ncols() != spec.p_linear {
        return Err(GplvmError::dims(
            "design columns",
            spec.p_linear,
            phi.ncols(),
        ));
    }
    if phi.nrows() != x.nrows() {
        return Err(GplvmError::dims("design rows", x.nrows(), phi.nrows()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GplvmError::NonFinite("latent inputs".into()));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(GplvmError::NonFinite("design matrix".into()));
    }
    Ok(())
}

fn check_inducing(z: &InducingInputs, spec: &KernelSpec) -> Result<()> {
    if z.q != spec.q_total() {
        return Err(GplvmError::dims(
            "inducing latent columns",
            spec.q_total(),
            z.q,
        ));
    }
    if z.p() != spec.p_linear {
        return Err(GplvmError::dims(
            "inducing linear columns",
            spec.p_linear,
            z.p(),
        ));
    }
    if z.linear_only.len() != z.m() {
        return Err(GplvmError::dims(
            "inducing sentinel mask",
            z.m(),
            z.linear_only.len(),
        ));
    }
    if z.values.iter().any(|v| !v.is_finite()) {
        return Err(GplvmError::NonFinite("inducing inputs".into()));
    }
    Ok(())
}

/// `K̃_nm = K_nm + ν Φ Z_linᵀ` (N×M).
pub fn cross_covariance(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    z: &InducingInputs,
) -> DMatrix<f64> {
    let n = x.nrows();
    let m = z.m();
    let zl: Vec<Vec<f64>> = (0..m).map(|j| z.latent_row(j)).collect();
    let zp: Vec<Vec<f64>> = (0..m).map(|j| z.linear_row(j)).collect();
    let mut out = DMatrix::zeros(n, m);
    for i in 0..n {
        let xi = row(x, i);
        let pi = row(phi, i);
        for j in 0..m {
            let nl = if z.linear_only[j] {
                0.0
            } else {
                spec.nonlinear(&xi, &zl[j])
            };
            out[(i, j)] = nl + spec.linear(&pi, &zp[j]);
        }
    }
    out
}

/// `K̃_mm = K_mm + ν Z_lin Z_linᵀ` (M×M).
pub fn inducing_covariance(spec: &KernelSpec, z: &InducingInputs) -> DMatrix<f64> {
    let m = z.m();
    let zl: Vec<Vec<f64>> = (0..m).map(|j| z.latent_row(j)).collect();
    let zp: Vec<Vec<f64>> = (0..m).map(|j| z.linear_row(j)).collect();
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let nl = if z.linear_only[i] || z.linear_only[j] {
                0.0
            } else {
                spec.nonlinear(&zl[i], &zl[j])
            };
            let v = nl + spec.linear(&zp[i], &zp[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// `K̃_nn[n,n] = σ_f² + ν‖φ_n‖²`.
pub fn diag_covariance(spec: &KernelSpec, phi: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(phi.nrows(), |i, _| {
        spec.signal_variance + spec.linear_scale * phi.row(i).norm_squared()
    })
}

/// Full N×N augmented Gram matrix. Test-scale only.
pub fn full_gram(spec: &KernelSpec, x: &DMatrix<f64>, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let (xi, pi) = (row(x, i), row(phi, i));
        for j in 0..=i {
            let v = spec.nonlinear(&xi, &row(x, j)) + spec.linear(&pi, &row(phi, j));
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

pub fn gram_bundle(
    x: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    z: &InducingInputs,
    spec: &KernelSpec,
) -> Result<GramBundle> {
    spec.validate()?;
    check_inputs(x, phi, spec)?;
    check_inducing(z, spec)?;
    Ok(GramBundle {
        knn_diag: diag_covariance(spec, phi),
        knm: cross_covariance(spec, x, phi, z),
        kmm: inducing_covariance(spec, z),
    })
}

/// Gradients of a scalar objective with respect to kernel inputs and
/// log-hyperparameters.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub log_signal_variance: f64,
    pub log_lengthscales: Vec<f64>,
    pub log_linear_scale: f64,
}

/// Accumulates `∂/∂(nonlinear kernel)` for one pair into latent-input and
/// lengthscale gradients. Returns the kernel value.
fn nonlinear_backward(
    spec: &KernelSpec,
    a: &[f64],
    b: &[f64],
    weight: f64,
    grad_a: &mut [f64],
    grad_b: &mut [f64],
    grad_log_l: &mut [f64],
) -> f64 {
    let e = spec.nonlinear(a, b);
    let we = weight * e;
    if we == 0.0 {
        return e;
    }
    for (q, l) in spec.lengthscales.iter().enumerate() {
        let d = a[q] - b[q];
        let l2 = l * l;
        let (dd, dl) = if q == 0 && spec.periodic {
            let s = (d / 2.0).sin();
            (-d.sin() / l2, 4.0 * s * s / l2)
        } else {
            (-d / l2, d * d / l2)
        };
        grad_a[q] += we * dd;
        grad_b[q] -= we * dd;
        grad_log_l[q] += we * dl;
    }
    e
}

/// Backpropagates adjoints of `K̃_nm` (N×M), `K̃_mm` (M×M, entrywise) and
/// `diag K̃_nn` (N) to the inputs and the log-hyperparameters.
pub fn kernel_backward(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    z: &InducingInputs,
    knm_bar: &DMatrix<f64>,
    kmm_bar: &DMatrix<f64>,
    knn_bar: &DVector<f64>,
) -> KernelGrads {
    let (n, q) = x.shape();
    let m = z.m();
    let p = spec.p_linear;
    let mut gx = DMatrix::zeros(n, q);
    let mut gz = DMatrix::zeros(m, q + p);
    let mut g_sig = 0.0;
    let mut g_l = vec![0.0; q];
    let mut g_nu = 0.0;

    let zl: Vec<Vec<f64>> = (0..m).map(|j| z.latent_row(j)).collect();
    let zp: Vec<Vec<f64>> = (0..m).map(|j| z.linear_row(j)).collect();
    let mut gzl = vec![vec![0.0; q]; m];

    for i in 0..n {
        let xi = row(x, i);
        let pi = row(phi, i);
        let mut gxi = vec![0.0; q];
        for j in 0..m {
            let w = knm_bar[(i, j)];
            if w == 0.0 {
                continue;
            }
            if !z.linear_only[j] {
                let e = nonlinear_backward(spec, &xi, &zl[j], w, &mut gxi, &mut gzl[j], &mut g_l);
                g_sig += w * e;
            }
            if p > 0 {
                let lin = spec.linear(&pi, &zp[j]);
                g_nu += w * lin;
                for c in 0..p {
                    gz[(j, q + c)] += w * spec.linear_scale * pi[c];
                }
            }
        }
        for c in 0..q {
            gx[(i, c)] = gxi[c];
        }
        let w = knn_bar[i];
        g_sig += w * spec.signal_variance;
        g_nu += w * spec.linear_scale * pi.iter().map(|v| v * v).sum::<f64>();
    }

    for i in 0..m {
        for j in 0..m {
            let w = kmm_bar[(i, j)];
            if w == 0.0 {
                continue;
            }
            if !(z.linear_only[i] || z.linear_only[j]) {
                if i == j {
                    g_sig += w * spec.signal_variance;
                } else {
                    let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                    let (left, right) = gzl.split_at_mut(hi);
                    let (ga, gb) = if i < j {
                        (&mut left[lo], &mut right[0])
                    } else {
                        (&mut right[0], &mut left[lo])
                    };
                    let e = nonlinear_backward(spec, &zl[i], &zl[j], w, ga, gb, &mut g_l);
                    g_sig += w * e;
                }
            }
            if p > 0 {
                g_nu += w * spec.linear(&zp[i], &zp[j]);
                for c in 0..p {
                    gz[(i, q + c)] += w * spec.linear_scale * zp[j][c];
                    gz[(j, q + c)] += w * spec.linear_scale * zp[i][c];
                }
            }
        }
    }
    for j in 0..m {
        for c in 0..q {
            gz[(j, c)] = gzl[j][c];
        }
    }
    KernelGrads {
        x: gx,
        z: gz,
        log_signal_variance: g_sig,
        log_lengthscales: g_l,
        log_linear_scale: g_nu,
    }
}
