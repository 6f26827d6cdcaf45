use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "gplvm",
    version,
    about = "Scalable GPLVM for single-cell expression with covariate correction"
)]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize raw counts, apply log1p and keep highly variable genes.
    Preprocess(PreprocessArgs),
    /// Fit a model to a processed expression matrix.
    Fit(Box<FitArgs>),
    /// Write the latent coordinates of a fitted model.
    Transform(TransformArgs),
    /// Vary one latent dimension and rank genes by their response.
    Sweep(SweepArgs),
    /// Post-training analyses.
    Eval(EvalArgs),
    /// Run the built-in numerical self-checks.
    Check(CheckArgs),
}

/// An expression matrix on disk: dense CSV, or MatrixMarket (`.mtx`) with
/// cell and gene label files.
#[derive(Debug, Args, Clone)]
pub struct MatrixInput {
    /// Expression matrix, cells × genes.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,

    /// Cell and gene label files for a MatrixMarket input, comma separated.
    #[arg(long, value_name = "CELLS,GENES")]
    pub labels: Option<String>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub matrix: MatrixInput,

    /// Number of highly variable genes to keep.
    #[arg(long, default_value_t = 5000)]
    pub hvg: usize,

    /// Write the result as MatrixMarket instead of dense CSV.
    #[arg(long)]
    pub mtx: bool,

    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub matrix: MatrixInput,

    /// Per-cell covariate table (CSV, first column cell ids).
    #[arg(long, value_name = "CSV")]
    pub covariates: Option<PathBuf>,

    /// Covariate columns for the linear kernel, comma separated;
    /// append `:continuous` for numeric columns.
    #[arg(long, value_delimiter = ',')]
    pub design: Option<Vec<String>>,

    /// TOML file with any of the settings below; flags take precedence.
    #[arg(long, value_name = "TOML")]
    pub config: Option<PathBuf>,

    /// Total latent dimensions (periodic, principal-component and severity dims).
    #[arg(long)]
    pub q: Option<usize>,
    /// Number of inducing points; must exceed the number of design columns.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate during the first phase.
    #[arg(long)]
    pub lr1: Option<f64>,
    /// Learning rate afterwards (default: same as --lr1).
    #[arg(long)]
    pub lr2: Option<f64>,
    /// Epochs with the latents frozen (default: min(3, epochs)).
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    /// Amortize the latents with an encoder network.
    #[arg(long)]
    pub encoder: bool,
    /// Hidden layer widths of the encoder, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub encoder_hidden: Option<Vec<usize>>,
    /// Feed the design row to the encoder as well.
    #[arg(long)]
    pub encoder_covariates: bool,
    /// Ordered covariate used to initialize the last latent dimension.
    #[arg(long)]
    pub severity_col: Option<String>,
    /// Level order for the severity column, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub severity_order: Option<Vec<String>>,
    /// Cell-cycle marker genes for the periodic dimension, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub cc_markers: Option<Vec<String>>,
    /// Initialize from principal components of the design-adjusted matrix.
    #[arg(long)]
    pub regress_design: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write an intermediate checkpoint every this many epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Clip gradients to this global norm.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Use one covariate effect for all genes instead of one per gene.
    #[arg(long)]
    pub shared_zeta: bool,

    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long, value_name = "JSON")]
    pub model: PathBuf,

    /// New cells to embed (encoder models only).
    #[arg(long = "in", value_name = "PATH")]
    pub input: Option<PathBuf>,

    #[arg(long, value_name = "CELLS,GENES")]
    pub labels: Option<String>,

    /// Covariates of the new cells, needed when the encoder reads the design.
    #[arg(long, value_name = "CSV")]
    pub covariates: Option<PathBuf>,

    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "JSON")]
    pub model: PathBuf,

    /// Latent dimension to vary (0-based).
    #[arg(long)]
    pub dim: usize,

    /// Grid start (default: smallest fitted value of the dimension).
    #[arg(long, allow_hyphen_values = true)]
    pub from: Option<f64>,
    /// Grid end (default: largest fitted value).
    #[arg(long, allow_hyphen_values = true)]
    pub to: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub points: usize,

    #[arg(long, default_value_t = gplvm::eval::DEFAULT_TOP_K)]
    pub top_k: usize,

    /// Latent baseline, comma separated (default: per-dimension median).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub baseline_x: Option<Vec<f64>>,
    /// Design baseline, comma separated (default: most frequent training row).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub baseline_phi: Option<Vec<f64>>,

    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub analysis: Analysis,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Fraction of each cell's nearest latent neighbours sharing its label.
    Purity(PurityArgs),
    /// Correlate latent dimensions with a gene-signature score.
    Signature(SignatureArgs),
}

#[derive(Debug, Args)]
pub struct PurityArgs {
    #[arg(long, value_name = "JSON")]
    pub model: PathBuf,
    /// Table holding the labels (CSV, first column cell ids).
    #[arg(long, value_name = "CSV")]
    pub covariates: PathBuf,
    #[arg(long)]
    pub label_col: String,
    #[arg(long, default_value_t = gplvm::eval::DEFAULT_K)]
    pub k: usize,
    /// Latent dimensions to use, comma separated (default: all).
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SignatureArgs {
    #[arg(long, value_name = "JSON")]
    pub model: PathBuf,
    #[command(flatten)]
    pub matrix: MatrixInput,
    /// Signature genes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub genes: Vec<String>,
    /// Explicit background genes instead of expression-matched sampling.
    #[arg(long, value_delimiter = ',')]
    pub background: Option<Vec<String>>,
    #[arg(long, default_value_t = gplvm::eval::DEFAULT_SIGNATURE_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = gplvm::eval::DEFAULT_BACKGROUND)]
    pub n_background: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict the correlation to cells whose COLUMN equals VALUE.
    #[arg(long, value_name = "CSV")]
    pub covariates: Option<PathBuf>,
    #[arg(long, value_name = "COLUMN=VALUE")]
    pub mask: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per check.
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}
