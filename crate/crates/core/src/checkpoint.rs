//! Versioned JSON model files.
//!
//! Matrices are stored as row-major nested arrays. Floats are written in
//! shortest round-trip form, so save → load reproduces every value exactly
//! and two saves of the same model are byte-identical.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::DesignEncoding;
use crate::encoder::EncoderParams;
use crate::error::{GplvmError, Result};
use crate::kernel::{InducingInputs, KernelSpec};
use crate::model::{ModelState, ZetaMode};

pub const FORMAT_TAG: &str = "gplvm-v1";

/// What a latent dimension was initialized from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimRole {
    Periodic,
    Rbf,
    Severity,
}

impl DimRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DimRole::Periodic => "periodic",
            DimRole::Rbf => "rbf",
            DimRole::Severity => "severity",
        }
    }

    /// Roles for `q` dimensions: dimension 0 periodic when the kernel is,
    /// the last one severity when an extra covariate was supplied.
    pub fn layout(q: usize, periodic: bool, severity: bool) -> Vec<DimRole> {
        (0..q)
            .map(|i| {
                if i == 0 && periodic {
                    DimRole::Periodic
                } else if severity && i + 1 == q {
                    DimRole::Severity
                } else {
                    DimRole::Rbf
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub encoder: Option<EncoderParams>,
    pub design: DesignEncoding,
    pub cell_ids: Vec<String>,
    pub gene_ids: Vec<String>,
    pub dim_roles: Vec<DimRole>,
    /// Most frequent training design row; the default baseline of a sweep.
    pub modal_design_row: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Dims {
    n: usize,
    q: usize,
    m: usize,
    d: usize,
    p: usize,
}

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    input_dim: usize,
    hidden: Vec<usize>,
    q: usize,
    with_covariates: bool,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    dims: Dims,
    dim_roles: Vec<DimRole>,
    kernel: KernelSpec,
    mean_const: f64,
    noise_variance: f64,
    zeta_mode: ZetaMode,
    zeta: Vec<Vec<f64>>,
    latents: Vec<Vec<f64>>,
    inducing: Vec<Vec<f64>>,
    linear_only: Vec<bool>,
    var_means: Vec<Vec<f64>>,
    var_chol: Vec<Vec<Vec<f64>>>,
    encoder: Option<EncoderFile>,
    design: DesignEncoding,
    modal_design_row: Vec<f64>,
    cell_ids: Vec<String>,
    gene_ids: Vec<String>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn matrix(name: &str, r: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if r.len() != nrows || r.iter().any(|row| row.len() != ncols) {
        return Err(GplvmError::Checkpoint(format!(
            "'{name}' is not {nrows}×{ncols}"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| r[i][j]))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.state.validate()?;
        let s = &self.state;
        if self.dim_roles.len() != s.q() {
            return Err(GplvmError::dims(
                "dimension roles",
                s.q(),
                self.dim_roles.len(),
            ));
        }
        if self.modal_design_row.len() != s.p() {
            return Err(GplvmError::dims(
                "modal design row",
                s.p(),
                self.modal_design_row.len(),
            ));
        }
        let file = CheckpointFile {
            format: FORMAT_TAG.to_string(),
            dims: Dims {
                n: s.n(),
                q: s.q(),
                m: s.m(),
                d: s.d(),
                p: s.p(),
            },
            dim_roles: self.dim_roles.clone(),
            kernel: s.kernel.clone(),
            mean_const: s.mean_const,
            noise_variance: s.noise_variance,
            zeta_mode: s.zeta_mode,
            zeta: rows(&s.zeta),
            latents: rows(&s.latents),
            inducing: rows(&s.inducing.values),
            linear_only: s.inducing.linear_only.clone(),
            var_means: rows(&s.var_means),
            var_chol: s.var_chol.iter().map(rows).collect(),
            encoder: self.encoder.as_ref().map(|e| EncoderFile {
                input_dim: e.input_dim(),
                hidden: e.hidden_widths(),
                q: e.q(),
                with_covariates: e.with_covariates,
                params: e.to_flat(),
            }),
            design: self.design.clone(),
            modal_design_row: self.modal_design_row.clone(),
            cell_ids: self.cell_ids.clone(),
            gene_ids: self.gene_ids.clone(),
        };
        let mut bytes =
            serde_json::to_vec(&file).map_err(|e| GplvmError::Checkpoint(e.to_string()))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes)
            .map_err(|e| GplvmError::Checkpoint(format!("not valid JSON: {e}")))?;
        match value.get("format").and_then(|v| v.as_str()) {
            Some(FORMAT_TAG) => {}
            Some(other) => {
                return Err(GplvmError::Checkpoint(format!(
                    "unsupported format '{other}' (expected '{FORMAT_TAG}')"
                )))
            }
            None => return Err(GplvmError::Checkpoint("missing format tag".into())),
        }
        let f: CheckpointFile =
            serde_json::from_value(value).map_err(|e| GplvmError::Checkpoint(e.to_string()))?;
        let Dims { n, q, m, d, p } = f.dims;
        if f.var_chol.len() != d {
            return Err(GplvmError::Checkpoint(format!(
                "expected {d} variational factors, found {}",
                f.var_chol.len()
            )));
        }
        if f.linear_only.len() != m {
            return Err(GplvmError::Checkpoint(
                "inducing mask length does not match M".into(),
            ));
        }
        let var_chol = f
            .var_chol
            .iter()
            .enumerate()
            .map(|(k, c)| matrix(&format!("var_chol[{k}]"), c, m, m))
            .collect::<Result<Vec<_>>>()?;
        let state = ModelState {
            latents: matrix("latents", &f.latents, n, q)?,
            inducing: InducingInputs {
                values: matrix("inducing", &f.inducing, m, q + p)?,
                q,
                linear_only: f.linear_only,
            },
            var_means: matrix("var_means", &f.var_means, m, d)?,
            var_chol,
            kernel: f.kernel,
            mean_const: f.mean_const,
            zeta: matrix("zeta", &f.zeta, p, d)?,
            noise_variance: f.noise_variance,
            zeta_mode: f.zeta_mode,
        };
        state
            .validate()
            .map_err(|e| GplvmError::Checkpoint(e.to_string()))?;
        let encoder = match f.encoder {
            None => None,
            Some(e) => {
                let mut params =
                    EncoderParams::zeros(e.input_dim, &e.hidden, e.q, e.with_covariates);
                params
                    .set_flat(&e.params)
                    .map_err(|err| GplvmError::Checkpoint(err.to_string()))?;
                Some(params)
            }
        };
        if f.dim_roles.len() != q
            || f.cell_ids.len() != n
            || f.gene_ids.len() != d
            || f.design.width() != p
            || f.modal_design_row.len() != p
        {
            return Err(GplvmError::Checkpoint(
                "labels do not match the stored dimensions".into(),
            ));
        }
        Ok(Checkpoint {
            state,
            encoder,
            design: f.design,
            cell_ids: f.cell_ids,
            gene_ids: f.gene_ids,
            dim_roles: f.dim_roles,
            modal_design_row: f.modal_design_row,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| GplvmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GplvmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
