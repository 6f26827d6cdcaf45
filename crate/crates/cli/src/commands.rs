use std::fs;
use std::path::{Path, PathBuf};

use gplvm::checkpoint::{Checkpoint, DimRole};
use gplvm::data::{
    build_design, encode_ordinal, initialize, load_expression, preprocess, write_expression,
    ColumnSpec, CovariateTable, DesignMatrix, ExpressionMatrix, InitOptions, MatrixFormat,
};
use gplvm::encoder::EncoderParams;
use gplvm::eval;
use gplvm::model::{ModelState, ZetaMode};
use gplvm::selfcheck::{run_suite, SuiteOptions};
use gplvm::trainer::{encoder_input, fit_with_hook, EncoderConfig, TrainConfig};
use gplvm::GplvmError;
use nalgebra::DMatrix;

use crate::args::{
    Analysis, CheckArgs, FitArgs, MatrixInput, PreprocessArgs, PurityArgs, SignatureArgs,
    SweepArgs, TransformArgs,
};
use crate::config::{FitFile, FitSettings};
use crate::error::{user, CliError, CliResult};
use crate::manifest::{io_err, sha256_bytes, with_manifest, Manifest};

pub const MODEL_FILE: &str = "model.json";
pub const TRACE_FILE: &str = "trace.ndjson";

fn matrix_format(input: &MatrixInput) -> CliResult<MatrixFormat> {
    let is_mtx = input
        .input
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("mtx"));
    match (is_mtx, &input.labels) {
        (false, None) => Ok(MatrixFormat::DenseCsv),
        (false, Some(_)) => Err(user("--labels only applies to MatrixMarket (.mtx) input")),
        (true, None) => Err(user("a MatrixMarket input needs --labels CELLS,GENES")),
        (true, Some(l)) => {
            let (cells, genes) = l
                .split_once(',')
                .ok_or_else(|| user(format!("--labels expects CELLS,GENES, got '{l}'")))?;
            Ok(MatrixFormat::MatrixMarket {
                cells: PathBuf::from(cells),
                genes: PathBuf::from(genes),
            })
        }
    }
}

fn load_matrix(input: &MatrixInput, manifest: &mut Manifest) -> CliResult<ExpressionMatrix> {
    let format = matrix_format(input)?;
    let m = load_expression(&input.input, &format)?;
    manifest.add_input("matrix", &input.input)?;
    if let MatrixFormat::MatrixMarket { cells, genes } = &format {
        manifest.add_input("cell_labels", cells)?;
        manifest.add_input("gene_labels", genes)?;
    }
    Ok(m)
}

fn load_checkpoint(path: &Path, manifest: &mut Manifest) -> CliResult<(Checkpoint, String)> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let hash = sha256_bytes(&bytes);
    manifest.set("input.model", format!("{} sha256:{hash}", path.display()));
    Ok((Checkpoint::from_bytes(&bytes)?, hash))
}

fn load_covariates(
    path: &Path,
    cells: &[String],
    manifest: &mut Manifest,
) -> CliResult<CovariateTable> {
    manifest.add_input("covariates", path)?;
    Ok(CovariateTable::load(path)?.align(cells)?)
}

/// Columns of `m` rearranged into `genes` order.
fn reorder_genes(m: &ExpressionMatrix, genes: &[String]) -> CliResult<DMatrix<f64>> {
    let idx: Vec<Option<usize>> = genes.iter().map(|g| m.gene_index(g)).collect();
    let missing: Vec<String> = genes
        .iter()
        .zip(&idx)
        .filter(|(_, i)| i.is_none())
        .map(|(g, _)| g.clone())
        .collect();
    if !missing.is_empty() {
        return Err(GplvmError::MissingGenes(missing).into());
    }
    Ok(DMatrix::from_fn(m.n_cells(), genes.len(), |i, j| {
        m.values[(i, idx[j].expect("checked"))]
    }))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn preprocess_cmd(args: &PreprocessArgs) -> CliResult<()> {
    with_manifest(&args.out, "preprocess", |man| {
        man.set("config.hvg", args.hvg);
        let raw = load_matrix(&args.matrix, man)?;
        let (processed, report) = preprocess(&raw, args.hvg)?;
        let (path, format) = if args.mtx {
            let format = MatrixFormat::MatrixMarket {
                cells: args.out.join("cells.txt"),
                genes: args.out.join("genes.txt"),
            };
            (args.out.join("expression.mtx"), format)
        } else {
            (args.out.join("expression.csv"), MatrixFormat::DenseCsv)
        };
        write_expression(&processed, &path, &format)?;
        if !report.dropped_cells.is_empty() {
            write_text(
                &args.out.join("dropped_cells.txt"),
                &(report.dropped_cells.join("\n") + "\n"),
            )?;
        }
        man.set("cells_in", raw.n_cells());
        man.set("genes_in", raw.n_genes());
        man.set("cells_dropped", report.dropped_cells.len());
        man.set("genes_kept", processed.n_genes());
        man.set("output.matrix", path.display());
        println!(
            "{} cells × {} genes written to {}",
            processed.n_cells(),
            processed.n_genes(),
            path.display()
        );
        Ok(())
    })
}

fn checkpoint_of(
    state: ModelState,
    encoder: Option<EncoderParams>,
    m: &ExpressionMatrix,
    design: &DesignMatrix,
    roles: &[DimRole],
) -> Checkpoint {
    Checkpoint {
        state,
        encoder,
        design: design.encoding.clone(),
        cell_ids: m.cell_ids.clone(),
        gene_ids: m.gene_ids.clone(),
        dim_roles: roles.to_vec(),
        modal_design_row: eval::modal_row(&design.values),
    }
}

pub fn fit_cmd(args: &FitArgs) -> CliResult<()> {
    with_manifest(&args.out, "fit", |man| {
        let file = match &args.config {
            Some(path) => {
                man.add_input("config", path)?;
                FitFile::load(path)?
            }
            None => FitFile::default(),
        };
        let settings = FitSettings::resolve(args, file);
        for (k, v) in settings.manifest_entries() {
            man.set(&k, v);
        }
        man.write()?;

        let m = load_matrix(&args.matrix, man)?;
        let n = m.n_cells();
        let cov = match &settings.covariates {
            Some(path) => Some(load_covariates(path, &m.cell_ids, man)?),
            None => None,
        };
        let needs_cov = !settings.design.is_empty() || settings.severity_col.is_some();
        let cov_ref = match (&cov, needs_cov) {
            (Some(c), _) => Some(c),
            (None, true) => return Err(user("--design and --severity-col need --covariates")),
            (None, false) => None,
        };
        let design = match cov_ref {
            Some(c) if !settings.design.is_empty() => {
                let specs = settings
                    .design
                    .iter()
                    .map(|s| ColumnSpec::parse(s))
                    .collect::<gplvm::Result<Vec<_>>>()?;
                build_design(c, &specs)?
            }
            _ => DesignMatrix::empty(n),
        };
        let extra = match (&settings.severity_col, cov_ref) {
            (Some(col), Some(c)) => Some(encode_ordinal(
                c.column(col)?,
                settings.severity_order.as_deref(),
            )?),
            _ => None,
        };
        let p = design.values.ncols();
        let mut opts = InitOptions::new(settings.q, settings.inducing_points(p));
        opts.cc_markers = settings.cc_markers.clone();
        opts.extra = extra;
        opts.seed = settings.seed;
        opts.regress_design = settings.regress_design;
        opts.zeta_mode = if settings.shared_zeta {
            ZetaMode::Shared
        } else {
            ZetaMode::PerGene
        };
        man.set("resolved.m", opts.m);
        man.set("resolved.design_columns", design.labels.join(","));
        let roles = DimRole::layout(settings.q, true, opts.extra.is_some());
        let init = initialize(&m, &design.values, &opts)?;

        let cfg = TrainConfig {
            label: "fit".into(),
            lr_phase1: settings.lr1,
            lr_phase2: settings.lr2,
            phase1_epochs: settings.phase1_epochs,
            total_epochs: settings.epochs,
            batch_size: settings.batch.min(n),
            seed: settings.seed,
            grad_clip: settings.grad_clip,
            checkpoint_every: settings.checkpoint_every,
            encoder: settings.encoder.then(|| EncoderConfig {
                hidden: settings.encoder_hidden.clone(),
                with_covariates: settings.encoder_covariates,
            }),
            ..TrainConfig::default()
        };
        if settings.batch > n {
            log::warn!(
                "batch size {} exceeds the {n} cells; using {n}",
                settings.batch
            );
        }
        let snapshot_dir = args.out.join("checkpoints");
        let mut hook =
            |epoch: usize, state: &ModelState, enc: Option<&EncoderParams>| -> gplvm::Result<()> {
                std::fs::create_dir_all(&snapshot_dir).map_err(|e| GplvmError::Io {
                    path: snapshot_dir.clone(),
                    source: e,
                })?;
                checkpoint_of(state.clone(), enc.cloned(), &m, &design, &roles)
                    .save(&snapshot_dir.join(format!("epoch-{epoch:04}.json")))
            };
        let out = fit_with_hook(&m.values, &design.values, &init, None, &cfg, &mut hook)?;

        let ck = checkpoint_of(out.state, out.encoder, &m, &design, &roles);
        let bytes = ck.to_bytes()?;
        let model_path = args.out.join(MODEL_FILE);
        fs::write(&model_path, &bytes).map_err(|e| io_err(&model_path, e))?;
        write_text(&args.out.join(TRACE_FILE), &out.trace.to_ndjson())?;
        let hash = sha256_bytes(&bytes);
        man.set(
            "output.model",
            format!("{} sha256:{hash}", model_path.display()),
        );
        man.set("steps", out.trace.steps.len());
        if let Some(last) = out.trace.steps.last() {
            man.set("final_minibatch_elbo", last.minibatch_elbo);
        }
        man.set("train_secs", format!("{:.3}", out.trace.wall_time_secs));
        println!("model written to {} (sha256 {hash})", model_path.display());
        Ok(())
    })
}

fn role_header(ck: &Checkpoint) -> Vec<String> {
    ck.dim_roles
        .iter()
        .enumerate()
        .map(|(i, r)| format!("x{i}:{}", r.as_str()))
        .collect()
}

pub fn transform_cmd(args: &TransformArgs) -> CliResult<()> {
    with_manifest(&args.out, "transform", |man| {
        let (ck, hash) = load_checkpoint(&args.model, man)?;
        let (cells, latents) = match (&args.input, &ck.encoder) {
            (None, _) => (ck.cell_ids.clone(), ck.state.latents.clone()),
            (Some(_), None) => {
                return Err(GplvmError::Unsupported(
                    "this model stores point estimates only; new cells can be embedded only by a model fitted with --encoder"
                        .into(),
                )
                .into())
            }
            (Some(path), Some(enc)) => {
                let input = MatrixInput {
                    input: path.clone(),
                    labels: args.labels.clone(),
                };
                let m = load_matrix(&input, man)?;
                let y = reorder_genes(&m, &ck.gene_ids)?;
                let phi = if enc.with_covariates {
                    let path = args
                        .covariates
                        .as_ref()
                        .ok_or_else(|| user("this encoder reads covariates; pass --covariates"))?;
                    ck.design.apply(&load_covariates(path, &m.cell_ids, man)?)?
                } else {
                    DMatrix::zeros(m.n_cells(), 0)
                };
                let (mean, _, _) = enc.forward(&encoder_input(&y, &phi, enc.with_covariates))?;
                (m.cell_ids.clone(), mean)
            }
        };

        let mut text = format!(
            "# checkpoint_sha256: {hash}\ncell,{}\n",
            role_header(&ck).join(",")
        );
        for (i, c) in cells.iter().enumerate() {
            let row: Vec<String> = latents.row(i).iter().map(|v| v.to_string()).collect();
            text.push_str(&format!("{c},{}\n", row.join(",")));
        }
        let latents_path = args.out.join("latents.csv");
        write_text(&latents_path, &text)?;

        let spec = &ck.state.kernel;
        let mut rank = format!(
            "# checkpoint_sha256: {hash}\nrank,dimension,role,lengthscale,inverse_lengthscale\n"
        );
        for (r, &q) in eval::rank_dimensions(spec).iter().enumerate() {
            let l = spec.lengthscales[q];
            rank.push_str(&format!(
                "{},x{q},{},{l},{}\n",
                r + 1,
                ck.dim_roles[q].as_str(),
                1.0 / l
            ));
        }
        write_text(&args.out.join("dimension_ranking.csv"), &rank)?;
        man.set("output.latents", latents_path.display());
        println!(
            "{} cells written to {}",
            cells.len(),
            latents_path.display()
        );
        Ok(())
    })
}

pub fn sweep_cmd(args: &SweepArgs) -> CliResult<()> {
    with_manifest(&args.out, "sweep", |man| {
        let (ck, hash) = load_checkpoint(&args.model, man)?;
        let st = &ck.state;
        if args.dim >= st.q() {
            return Err(user(format!(
                "--dim {} out of range (model has {} latent dimensions)",
                args.dim,
                st.q()
            )));
        }
        let col = st.latents.column(args.dim);
        let lo = args.from.unwrap_or_else(|| col.min());
        let hi = args.to.unwrap_or_else(|| col.max());
        let grid = eval::linear_grid(lo, hi, args.points);
        let bx = args
            .baseline_x
            .clone()
            .unwrap_or_else(|| eval::median_latents(&st.latents));
        let bp = args
            .baseline_phi
            .clone()
            .unwrap_or_else(|| ck.modal_design_row.clone());
        man.set("config.dim", args.dim);
        man.set(
            "config.grid",
            format!("{lo}..{hi} ({} points)", args.points),
        );
        man.set("config.top_k", args.top_k);
        let result = eval::severity_sweep(st, args.dim, &grid, &bx, &bp, args.top_k)?;
        let path = args.out.join("sweep.csv");
        eval::write_sweep_csv(&path, &hash, &ck.gene_ids, &result)?;
        man.set("output.sweep", path.display());
        for (rank, g) in result.genes.iter().enumerate().take(5) {
            println!(
                "{:>3}  {:<20} range {:.4}",
                rank + 1,
                ck.gene_ids[g.gene],
                g.range
            );
        }
        Ok(())
    })
}

fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> CliResult<DMatrix<f64>> {
    if let Some(&bad) = cols.iter().find(|&&c| c >= m.ncols()) {
        return Err(user(format!(
            "dimension {bad} out of range (model has {} dimensions)",
            m.ncols()
        )));
    }
    Ok(DMatrix::from_fn(m.nrows(), cols.len(), |i, j| {
        m[(i, cols[j])]
    }))
}

fn purity_cmd(args: &PurityArgs) -> CliResult<()> {
    with_manifest(&args.out, "eval purity", |man| {
        let (ck, hash) = load_checkpoint(&args.model, man)?;
        let cov = load_covariates(&args.covariates, &ck.cell_ids, man)?;
        let labels = cov.column(&args.label_col)?;
        let dims: Vec<usize> = args
            .dims
            .clone()
            .unwrap_or_else(|| (0..ck.state.q()).collect());
        let x = select_columns(&ck.state.latents, &dims)?;
        man.set("config.label_col", &args.label_col);
        man.set("config.k", args.k);
        man.set(
            "config.dims",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        let purity = eval::knn_purity(&x, labels, args.k)?;
        let path = args.out.join("purity.csv");
        eval::write_cell_csv(&path, &hash, "purity", &ck.cell_ids, &purity)?;
        let mean = purity.iter().sum::<f64>() / purity.len() as f64;
        man.set("mean_purity", mean);
        println!("mean purity {mean:.4} (k = {})", args.k);
        Ok(())
    })
}

fn signature_cmd(args: &SignatureArgs) -> CliResult<()> {
    with_manifest(&args.out, "eval signature", |man| {
        let (ck, hash) = load_checkpoint(&args.model, man)?;
        let m = load_matrix(&args.matrix, man)?;
        // score the cells in model order
        let pos: std::collections::HashMap<&str, usize> = m
            .cell_ids
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let rows = ck
            .cell_ids
            .iter()
            .map(|c| {
                pos.get(c.as_str())
                    .copied()
                    .ok_or_else(|| user(format!("cell '{c}' missing from --in")))
            })
            .collect::<CliResult<Vec<_>>>()?;
        let values = DMatrix::from_fn(rows.len(), m.n_genes(), |i, j| m.values[(rows[i], j)]);
        let aligned = ExpressionMatrix::new(values, ck.cell_ids.clone(), m.gene_ids.clone())?;
        let score = match &args.background {
            Some(bg) => eval::signature_score_with_background(&aligned, &args.genes, bg)?,
            None => eval::signature_score(
                &aligned,
                &args.genes,
                args.bins,
                args.n_background,
                args.seed,
            )?,
        };
        let mask = match &args.mask {
            None => None,
            Some(spec) => {
                let (col, val) = spec
                    .split_once('=')
                    .ok_or_else(|| user(format!("--mask expects COLUMN=VALUE, got '{spec}'")))?;
                let path = args
                    .covariates
                    .as_ref()
                    .ok_or_else(|| user("--mask needs --covariates"))?;
                let cov = load_covariates(path, &ck.cell_ids, man)?;
                Some(
                    cov.column(col)?
                        .iter()
                        .map(|v| v == val)
                        .collect::<Vec<bool>>(),
                )
            }
        };
        let corr =
            eval::lv_signature_correlation(&ck.state.latents, &score.values, mask.as_deref())?;
        man.set("config.genes", args.genes.join(","));
        man.set("background_genes", score.background.join(","));
        eval::write_cell_csv(
            &args.out.join("signature_score.csv"),
            &hash,
            "score",
            &ck.cell_ids,
            &score.values,
        )?;
        eval::write_correlation_csv(
            &args.out.join("correlation.csv"),
            &hash,
            &role_header(&ck),
            &corr,
        )?;
        for (name, c) in role_header(&ck).iter().zip(&corr) {
            println!(
                "{name:<14} r = {:+.4}{}",
                c.r,
                if c.zero_variance {
                    " (zero variance)"
                } else {
                    ""
                }
            );
        }
        Ok(())
    })
}

pub fn eval_cmd(analysis: &Analysis) -> CliResult<()> {
    match analysis {
        Analysis::Purity(a) => purity_cmd(a),
        Analysis::Signature(a) => signature_cmd(a),
    }
}

pub fn check_cmd(args: &CheckArgs) -> CliResult<()> {
    if args.instances == 0 {
        return Err(user("--instances must be positive"));
    }
    let report = run_suite(&SuiteOptions {
        seed: args.seed,
        instances: args.instances,
        inject_fault: args.inject_fault,
    });
    let failed = report.iter().filter(|r| !r.passed).count();
    for r in &report {
        println!(
            "{} {:<14} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    if failed > 0 {
        return Err(CliError::Internal(format!(
            "{failed} of {} checks failed",
            report.len()
        )));
    }
    Ok(())
}
