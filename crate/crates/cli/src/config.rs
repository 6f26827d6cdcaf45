//! Fit settings: command-line flags override the TOML file, which overrides
//! the defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::args::FitArgs;
use crate::error::{user, CliResult};

pub const DEFAULT_Q: usize = 11;
pub const DEFAULT_BATCH: usize = 200;
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_PHASE1_EPOCHS: usize = 3;
/// Lower bound on the default inducing-point count when there are few covariates.
pub const MIN_DEFAULT_M: usize = 32;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub covariates: Option<PathBuf>,
    pub design: Option<Vec<String>>,
    pub q: Option<usize>,
    pub m: Option<usize>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub lr1: Option<f64>,
    pub lr2: Option<f64>,
    pub phase1_epochs: Option<usize>,
    pub encoder: Option<bool>,
    pub encoder_hidden: Option<Vec<usize>>,
    pub encoder_covariates: Option<bool>,
    pub severity_col: Option<String>,
    pub severity_order: Option<Vec<String>>,
    pub cc_markers: Option<Vec<String>>,
    pub regress_design: Option<bool>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<usize>,
    pub grad_clip: Option<f64>,
    pub shared_zeta: Option<bool>,
}

impl FitFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::manifest::io_err(path, e))?;
        toml::from_str(&text).map_err(|e| user(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub covariates: Option<PathBuf>,
    pub design: Vec<String>,
    pub q: usize,
    /// `None` means derived from the design width.
    pub m: Option<usize>,
    pub batch: usize,
    pub epochs: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub phase1_epochs: usize,
    pub encoder: bool,
    pub encoder_hidden: Vec<usize>,
    pub encoder_covariates: bool,
    pub severity_col: Option<String>,
    pub severity_order: Option<Vec<String>>,
    pub cc_markers: Option<Vec<String>>,
    pub regress_design: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
    pub shared_zeta: bool,
}

impl FitSettings {
    pub fn resolve(args: &FitArgs, file: FitFile) -> Self {
        let epochs = args.epochs.or(file.epochs).unwrap_or(DEFAULT_EPOCHS);
        let lr1 = args.lr1.or(file.lr1).unwrap_or(DEFAULT_LR);
        FitSettings {
            covariates: args.covariates.clone().or(file.covariates),
            design: args.design.clone().or(file.design).unwrap_or_default(),
            q: args.q.or(file.q).unwrap_or(DEFAULT_Q),
            m: args.m.or(file.m),
            batch: args.batch.or(file.batch).unwrap_or(DEFAULT_BATCH),
            epochs,
            lr1,
            lr2: args.lr2.or(file.lr2).unwrap_or(lr1),
            phase1_epochs: args
                .phase1_epochs
                .or(file.phase1_epochs)
                .unwrap_or(DEFAULT_PHASE1_EPOCHS.min(epochs)),
            encoder: args.encoder || file.encoder.unwrap_or(false),
            encoder_hidden: args
                .encoder_hidden
                .clone()
                .or(file.encoder_hidden)
                .unwrap_or_else(|| gplvm::trainer::EncoderConfig::default().hidden),
            encoder_covariates: args.encoder_covariates || file.encoder_covariates.unwrap_or(false),
            severity_col: args.severity_col.clone().or(file.severity_col),
            severity_order: args.severity_order.clone().or(file.severity_order),
            cc_markers: args.cc_markers.clone().or(file.cc_markers),
            regress_design: args.regress_design || file.regress_design.unwrap_or(false),
            seed: args.seed.or(file.seed).unwrap_or(0),
            checkpoint_every: args.checkpoint_every.or(file.checkpoint_every).unwrap_or(0),
            grad_clip: args.grad_clip.or(file.grad_clip),
            shared_zeta: args.shared_zeta || file.shared_zeta.unwrap_or(false),
        }
    }

    /// Inducing points: the explicit value, else one more than the design
    /// width but at least [`MIN_DEFAULT_M`].
    pub fn inducing_points(&self, p: usize) -> usize {
        self.m.unwrap_or((p + 1).max(MIN_DEFAULT_M))
    }

    /// `key: value` pairs for the run manifest.
    pub fn manifest_entries(&self) -> Vec<(String, String)> {
        let list = |v: &[String]| v.join(",");
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        vec![
            (
                "covariates",
                opt(self.covariates.as_ref().map(|p| p.display().to_string())),
            ),
            ("design", list(&self.design)),
            ("q", self.q.to_string()),
            ("m", opt(self.m.map(|m| m.to_string()))),
            ("batch", self.batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr1", self.lr1.to_string()),
            ("lr2", self.lr2.to_string()),
            ("phase1_epochs", self.phase1_epochs.to_string()),
            ("encoder", self.encoder.to_string()),
            (
                "encoder_hidden",
                self.encoder_hidden
                    .iter()
                    .map(|h| h.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("encoder_covariates", self.encoder_covariates.to_string()),
            ("severity_col", opt(self.severity_col.clone())),
            (
                "severity_order",
                opt(self.severity_order.as_deref().map(list)),
            ),
            ("cc_markers", opt(self.cc_markers.as_deref().map(list))),
            ("regress_design", self.regress_design.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("grad_clip", opt(self.grad_clip.map(|g| g.to_string()))),
            ("shared_zeta", self.shared_zeta.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("config.{k}"), v))
        .collect()
    }
}
