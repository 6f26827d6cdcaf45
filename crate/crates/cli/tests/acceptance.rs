//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gplvm::data::preprocess::normalize_total;
use gplvm::data::{initialize, preprocess, ExpressionMatrix, InitOptions};
use gplvm::elbo::{elbo_full, elbo_minibatch, optimal_variational};
use gplvm::encoder::{amortized_elbo_terms, latent_kl, output_adjoints, EncoderParams};
use gplvm::eval::{knn_purity, linear_grid, pearson, procrustes_correlation, severity_sweep};
use gplvm::grad::{
    batch_value_and_grad, flatten_grads, flatten_params, gradients, to_whitened, unflatten_params,
    BatchInputs, VariationalForm,
};
use gplvm::kernel::{gram_bundle, inducing_covariance, InducingInputs};
use gplvm::model::{conditional_f_given_u, decompose_linear_nonlinear, nonlinear_part};
use gplvm::oracle::{
    augmented_log_marginal, central_difference, exact_log_marginal, gradients_agree, to_rows,
    woodbury_log_marginal, DenseHyper,
};
use gplvm::synthetic::{
    normal_matrix, random_block_instance, random_instance, sample_generative, GenerativeConfig,
    Instance, InstanceDims,
};
use gplvm::trainer::{fit, minibatch_sampler, LrMultipliers, TrainConfig};
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<(bool, String), String>;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn ids(prefix: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}{i}")).collect()
}

/// The 50 small instances shared by the identity and bound criteria.
fn small_instances() -> Vec<Instance> {
    let mut r = rng(2024, 1);
    (0..50)
        .map(|_| {
            let dims = InstanceDims {
                n: r.random_range(2..=30),
                d: r.random_range(1..=3),
                m: r.random_range(2..=8),
                q: r.random_range(1..=3),
                p: r.random_range(1..=4),
            };
            random_instance(&mut r, dims)
        })
        .collect()
}

fn identity() -> Verdict {
    let mut worst: f64 = 0.0;
    for inst in small_instances() {
        let hyper = DenseHyper::from_state(&inst.state);
        let (y, x, phi) = (
            to_rows(&inst.y),
            to_rows(&inst.state.latents),
            to_rows(&inst.phi),
        );
        let augmented = augmented_log_marginal(&inst.y, &inst.phi, &inst.state).map_err(err)?;
        let integrated = woodbury_log_marginal(&y, &x, &phi, &hyper).map_err(err)?;
        let dense = exact_log_marginal(&y, &x, &phi, &hyper).map_err(err)?;
        worst = worst
            .max((augmented - integrated).abs())
            .max((augmented - dense).abs());
    }
    Ok((
        worst < 1e-8,
        format!("max |diff| = {worst:.2e} over 50 instances"),
    ))
}

fn bound() -> Verdict {
    // optimal q(u) on the shared instances
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    for inst in small_instances() {
        let opt = optimal_variational(&inst.y, &inst.phi, &inst.state).map_err(err)?;
        let elbo = elbo_full(&inst.y, &inst.phi, &opt).map_err(err)?.total;
        let exact = augmented_log_marginal(&inst.y, &inst.phi, &inst.state).map_err(err)?;
        let slack = 64.0 * f64::EPSILON * exact.abs().max(1.0);
        if elbo > exact + slack {
            violations += 1;
        }
        min_gap = min_gap.min(exact - elbo);
    }

    // M = N with Z on the data: 500 full-batch steps on q(u) alone close the gap
    let mut r = rng(2024, 2);
    let mut worst_gap: f64 = 0.0;
    for _ in 0..5 {
        let dims = InstanceDims {
            n: r.random_range(8..=16),
            d: r.random_range(1..=3),
            m: 0,
            q: r.random_range(1..=2),
            p: r.random_range(1..=3),
        };
        let dims = InstanceDims { m: dims.n, ..dims };
        let mut inst = random_instance(&mut r, dims);
        let mut z = DMatrix::zeros(dims.n, dims.q + dims.p);
        z.columns_mut(0, dims.q).copy_from(&inst.state.latents);
        z.columns_mut(dims.q, dims.p).copy_from(&inst.phi);
        inst.state.inducing = InducingInputs::new(z, dims.q).map_err(err)?;
        let kmm = inducing_covariance(&inst.state.kernel, &inst.state.inducing);
        let c = kmm.cholesky().ok_or("K_mm not positive definite")?.l();
        inst.state.var_means.fill(0.0);
        inst.state.var_chol = vec![c; dims.d];
        let cfg = TrainConfig {
            lr_phase1: 0.02,
            lr_phase2: 0.02,
            phase1_epochs: 0,
            total_epochs: 500,
            batch_size: dims.n,
            multipliers: LrMultipliers {
                latents: 0.0,
                inducing: 0.0,
                hyper: 0.0,
                variational: 1.0,
            },
            form: VariationalForm::Whitened,
            ..Default::default()
        };
        let out = fit(&inst.y, &inst.phi, &inst.state, &cfg).map_err(err)?;
        let elbo = elbo_full(&inst.y, &inst.phi, &out.state)
            .map_err(err)?
            .total;
        let exact = augmented_log_marginal(&inst.y, &inst.phi, &out.state).map_err(err)?;
        let gap = exact - elbo;
        if gap < -64.0 * f64::EPSILON * exact.abs() {
            violations += 1;
        }
        worst_gap = worst_gap.max(gap);
    }
    Ok((
        violations == 0 && worst_gap < 1e-3,
        format!(
            "{violations} violations, smallest optimal gap {min_gap:.2e}, \
             largest gap after 500 steps with M = N {worst_gap:.2e}"
        ),
    ))
}

fn count_disagreements(analytic: &[f64], numeric: &[f64]) -> usize {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| !gradients_agree(**a, **n, 1e-4, 1e-6))
        .count()
}

fn gradient_check() -> Verdict {
    let mut r = rng(2024, 3);
    let (mut failures, mut total) = (0usize, 0usize);
    for _ in 0..10 {
        let dims = InstanceDims {
            n: r.random_range(3..=6),
            d: r.random_range(1..=2),
            m: r.random_range(2..=4),
            q: r.random_range(1..=3),
            p: r.random_range(1..=2),
        };
        let inst = random_instance(&mut r, dims);
        let b = r.random_range(1..=dims.n);
        let idx = sample(&mut r, dims.n, b).into_vec();

        for form in [VariationalForm::Direct, VariationalForm::Whitened] {
            let st = match form {
                VariationalForm::Direct => inst.state.clone(),
                VariationalForm::Whitened => to_whitened(&inst.state).map_err(err)?,
            };
            let (_, g) = gradients(&inst.y, &inst.phi, &idx, &st, form).map_err(err)?;
            let analytic = flatten_grads(&g, st.n());
            let numeric = central_difference(
                |p| {
                    let s = unflatten_params(&st, p);
                    gradients(&inst.y, &inst.phi, &idx, &s, form).map_or(f64::NAN, |v| v.0.total)
                },
                &flatten_params(&st),
                1e-5,
            );
            failures += count_disagreements(&analytic, &numeric);
            total += analytic.len();
        }

        // encoder weights, through a fixed reparameterization draw
        let with_cov = r.random_bool(0.5);
        let input = gplvm::trainer::encoder_input(&inst.y, &inst.phi, with_cov);
        let input_b = gplvm::linalg::select_rows(&input, &idx);
        let (y_b, phi_b) = (
            gplvm::linalg::select_rows(&inst.y, &idx),
            gplvm::linalg::select_rows(&inst.phi, &idx),
        );
        let enc = EncoderParams::random(&mut r, input.ncols(), &[3, 2], dims.q, with_cov);
        let draw = amortized_elbo_terms(&input_b, &enc, &mut r).map_err(err)?;
        let scale = dims.n as f64 / b as f64;
        let form = VariationalForm::Whitened;
        let st = to_whitened(&inst.state).map_err(err)?;
        let objective = |params: &EncoderParams| -> f64 {
            let Ok((mean, var, _)) = params.forward(&input_b) else {
                return f64::NAN;
            };
            let x = &mean + var.map(f64::sqrt).component_mul(&draw.eps);
            let batch = BatchInputs {
                y: &y_b,
                phi: &phi_b,
                x: &x,
                scale,
            };
            batch_value_and_grad(&batch, &st, form).map_or(f64::NAN, |v| v.0.total)
                - scale * latent_kl(&mean, &var)
        };
        let batch = BatchInputs {
            y: &y_b,
            phi: &phi_b,
            x: &draw.x,
            scale,
        };
        let (_, g) = batch_value_and_grad(&batch, &st, form).map_err(err)?;
        let (mean_bar, var_bar) = output_adjoints(&draw, &g.latents, scale);
        let analytic = enc.backward(&draw.cache, &mean_bar, &var_bar);
        let numeric = central_difference(
            |flat| {
                let mut e = enc.clone();
                e.set_flat(flat).map_or(f64::NAN, |_| objective(&e))
            },
            &enc.to_flat(),
            1e-5,
        );
        failures += count_disagreements(&analytic, &numeric);
        total += analytic.len();
    }
    Ok((
        failures == 0,
        format!("{failures} of {total} partial derivatives disagree (10 instances, both forms, encoder)"),
    ))
}

fn unbiasedness() -> Verdict {
    let mut r = rng(2024, 4);
    let mut worst: f64 = 0.0;
    for k in 0..10u64 {
        let n = r.random_range(5..=9);
        let sizes: Vec<usize> = (2..n).filter(|b| n % b != 0).collect();
        let batch = sizes[r.random_range(0..sizes.len())];
        let dims = InstanceDims {
            n,
            d: r.random_range(1..=3),
            m: r.random_range(2..=5),
            q: r.random_range(1..=3),
            p: r.random_range(0..=3),
        };
        let inst = random_instance(&mut r, dims);
        let full = elbo_full(&inst.y, &inst.phi, &inst.state).map_err(err)?;
        let kl = full.kl;

        // the trainer's epoch partition, last batch short, weighted by size
        let parts = minibatch_sampler(n, batch, k, 0);
        assert!(parts.last().map_or(0, Vec::len) < batch);
        let mut lik = 0.0;
        for b in &parts {
            let e = elbo_minibatch(&inst.y, &inst.phi, b, &inst.state).map_err(err)?;
            lik += (e.total + e.kl) * b.len() as f64 / n as f64;
        }
        worst = worst.max((lik - kl - full.total).abs());

        // every subset of size `batch`, uniformly
        let subsets = combinations(n, batch);
        let mut lik = 0.0;
        for b in &subsets {
            let e = elbo_minibatch(&inst.y, &inst.phi, b, &inst.state).map_err(err)?;
            lik += e.total + e.kl;
        }
        lik /= subsets.len() as f64;
        worst = worst.max((lik - kl - full.total).abs());
    }
    Ok((
        worst < 1e-10,
        format!("max |average − full| = {worst:.2e} over 10 instances"),
    ))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

fn decomposition() -> Verdict {
    let mut r = rng(2024, 5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = r.random_range(1..=4);
        let m_nonlinear = r.random_range(1..=8);
        let m_linear = r.random_range(1..=p);
        let dims = InstanceDims {
            n: r.random_range(1..=25),
            d: r.random_range(1..=3),
            m: m_nonlinear + m_linear,
            q: r.random_range(1..=3),
            p,
        };
        let inst = random_block_instance(&mut r, dims, m_nonlinear, m_linear);
        let st = &inst.state;
        let bundle = gram_bundle(&st.latents, &inst.phi, &st.inducing, &st.kernel).map_err(err)?;
        for d in 0..dims.d {
            let joint =
                conditional_f_given_u(&bundle, &st.var_mean(d), &st.var_cov(d)).map_err(err)?;
            let lin = decompose_linear_nonlinear(st, &inst.phi, d).map_err(err)?;
            let nl = nonlinear_part(st, &st.latents, d).map_err(err)?;
            worst = worst
                .max((&lin.mean + &nl.mean - &joint.mean).amax())
                .max((&lin.variance + &nl.variance - &joint.variance).amax());
        }
    }
    Ok((
        worst < 1e-8,
        format!("max |sum − joint| = {worst:.2e} over 20 instances"),
    ))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn recovery() -> Verdict {
    let (n, d) = (2000, 50);
    let truth = GenerativeConfig {
        n,
        d,
        q: 3,
        levels: 4,
        signal_variance: 1.0,
        lengthscales: vec![3.0, 2.0, 2.0],
        linear_scale: 0.5,
        noise_variance: 0.1,
        mean_const: 0.0,
    };
    let data = sample_generative(&mut rng(2024, 6), &truth).map_err(err)?;
    let m = ExpressionMatrix::new(data.y.clone(), ids("c", n), ids("g", d)).map_err(err)?;

    // Stand-in for known cell-cycle markers: the five genes whose noiseless
    // signal follows cos of the true phase most closely.
    let phase: Vec<f64> = data.latents.column(0).iter().map(|t| t.cos()).collect();
    let mut by_corr: Vec<(f64, usize)> = (0..d)
        .map(|g| {
            let col: Vec<f64> = data.latent_signal.column(g).iter().copied().collect();
            (pearson(&col, &phase).r, g)
        })
        .collect();
    by_corr.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut opts = InitOptions::new(3, 32);
    opts.regress_design = true;
    opts.cc_markers = Some(by_corr[..5].iter().map(|(_, g)| format!("g{g}")).collect());
    let init = initialize(&m, &data.phi, &opts).map_err(err)?;
    let cfg = TrainConfig {
        total_epochs: 200,
        batch_size: 256,
        ..Default::default()
    };
    let out = fit(&data.y, &data.phi, &init, &cfg).map_err(err)?;
    let x = &out.state.latents;

    let procrustes = procrustes_correlation(
        &data.latents.columns(1, 2).into_owned(),
        &x.columns(1, 2).into_owned(),
    )
    .map_err(err)?;
    let purity_latent = mean(&knn_purity(x, &data.labels, 100).map_err(err)?);
    let purity_raw = mean(&knn_purity(&data.y, &data.labels, 100).map_err(err)?);
    Ok((
        procrustes >= 0.8 && purity_latent <= purity_raw,
        format!(
            "Procrustes correlation {procrustes:.3}; batch purity latents {purity_latent:.3} vs raw {purity_raw:.3}"
        ),
    ))
}

fn sweep() -> Verdict {
    let (n, d, planted) = (300, 12, 7);
    let mut r = rng(2024, 7);
    let severity: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    let other = normal_matrix(&mut r, n, 1);
    let freq: Vec<f64> = (0..d).map(|_| r.random_range(0.5..1.5)).collect();
    let shift: Vec<f64> = (0..d).map(|_| r.random_range(0.0..6.0)).collect();
    let noise = normal_matrix(&mut r, n, d) * 0.1;
    let y = DMatrix::from_fn(n, d, |i, g| {
        let signal = if g == planted {
            1.5 * severity[i].tanh()
        } else {
            (freq[g] * other[(i, 0)] + shift[g]).sin()
        };
        signal + noise[(i, g)]
    });
    let m = ExpressionMatrix::new(y.clone(), ids("c", n), ids("g", d)).map_err(err)?;
    let phi = DMatrix::zeros(n, 0);
    let mut opts = InitOptions::new(3, 16);
    // observed severity is a coarse ordinal version of the truth
    opts.extra = Some(severity.iter().map(|s| (s + 2.0).floor()).collect());
    let init = initialize(&m, &phi, &opts).map_err(err)?;
    let cfg = TrainConfig {
        total_epochs: 60,
        batch_size: 100,
        lr_phase1: 0.03,
        lr_phase2: 0.03,
        ..Default::default()
    };
    let out = fit(&y, &phi, &init, &cfg).map_err(err)?;
    let st = &out.state;
    let col = st.latents.column(2);
    let grid = linear_grid(col.min(), col.max(), 50);
    let (base_x, base_phi) = gplvm::eval::default_baseline(st, &phi).map_err(err)?;
    let res = severity_sweep(st, 2, &grid, &base_x, &base_phi, 3).map_err(err)?;
    let top = &res.genes[0];
    Ok((
        top.gene == planted,
        format!(
            "top gene g{} (range {:.3}), runner-up g{} (range {:.3})",
            top.gene, top.range, res.genes[1].gene, res.genes[1].range
        ),
    ))
}

fn preprocessing() -> Verdict {
    let (n, d) = (100, 50);
    let mut r = rng(2024, 8);
    let counts = DMatrix::from_fn(n, d, |_, _| f64::from(r.random_range(0u32..40)));
    let (normalized, dropped) = normalize_total(&counts).map_err(err)?;
    if !dropped.is_empty() {
        return Err("unexpected empty cell".into());
    }
    let mut worst_sum: f64 = 0.0;
    for row in normalized.row_iter() {
        worst_sum = worst_sum.max((row.sum() - 10_000.0).abs());
    }
    let raw = ExpressionMatrix::new(counts.clone(), ids("c", n), ids("g", d)).map_err(err)?;
    let (processed, _) = preprocess(&raw, d).map_err(err)?;
    let mut worst_log: f64 = 0.0;
    for i in 0..n {
        let total: f64 = (0..d).map(|g| counts[(i, g)]).sum();
        for (j, gene) in processed.gene_ids.iter().enumerate() {
            let g = raw.gene_index(gene).ok_or("gene lost")?;
            let direct = (counts[(i, g)] * 10_000.0 / total + 1.0).ln();
            worst_log = worst_log.max((processed.values[(i, j)] - direct).abs());
        }
    }
    Ok((
        worst_sum <= 1e-6 && worst_log <= 1e-12 && processed.gene_ids.len() == d,
        format!("max |row sum − 10000| = {worst_sum:.2e}, max |log1p diff| = {worst_log:.2e}"),
    ))
}

fn write_inputs(dir: &Path) -> std::io::Result<()> {
    let (n, d) = (60, 8);
    let mut r = rng(2024, 9);
    let y = normal_matrix(&mut r, n, d);
    let mut expr = String::from("cell");
    for g in 0..d {
        expr.push_str(&format!(",g{g}"));
    }
    expr.push('\n');
    let mut cov = String::from("cell,batch\n");
    for i in 0..n {
        expr.push_str(&format!("c{i}"));
        for g in 0..d {
            expr.push_str(&format!(",{}", y[(i, g)]));
        }
        expr.push('\n');
        cov.push_str(&format!("c{i},b{}\n", i % 3));
    }
    std::fs::write(dir.join("expr.csv"), expr)?;
    std::fs::write(dir.join("cov.csv"), cov)
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().map_err(err)?;
    write_inputs(tmp.path()).map_err(err)?;
    let mut notes = Vec::new();
    let mut same = true;
    for (label, extra) in [
        ("point", &[][..]),
        ("encoder", &["--encoder", "--encoder-hidden", "6,4"][..]),
    ] {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = tmp.path().join(format!("{label}{run}"));
            let status = Command::new(env!("CARGO_BIN_EXE_gplvm"))
                .current_dir(tmp.path())
                .args([
                    "fit",
                    "--in",
                    "expr.csv",
                    "--covariates",
                    "cov.csv",
                    "--design",
                    "batch",
                ])
                .args([
                    "--q", "3", "--m", "10", "--batch", "16", "--epochs", "6", "--seed", "11",
                ])
                .args(extra)
                .arg("--out")
                .arg(&out)
                .output()
                .map_err(err)?;
            if !status.status.success() {
                return Err(format!(
                    "fit failed: {}",
                    String::from_utf8_lossy(&status.stderr)
                ));
            }
            outputs.push(std::fs::read(out.join("model.json")).map_err(err)?);
        }
        let identical = outputs[0] == outputs[1];
        same &= identical;
        notes.push(format!(
            "{label}: {} ({} bytes)",
            if identical { "identical" } else { "differ" },
            outputs[0].len()
        ));
    }
    Ok((same, notes.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("augmented-kernel identity", identity),
        ("variational bound", bound),
        ("gradient correctness", gradient_check),
        ("minibatch unbiasedness", unbiasedness),
        ("linear/non-linear decomposition", decomposition),
        ("synthetic latent recovery", recovery),
        ("sweep ranks the planted gene first", sweep),
        ("preprocessing arithmetic", preprocessing),
        ("checkpoint determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict =
            catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        let (passed, detail) = match verdict {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        println!(
            "{} criterion {}: {name}: {detail} [{secs:.1}s]",
            if passed { "PASS" } else { "FAIL" },
            i + 1
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
