//! Minibatch stochastic variational inference with Adam.
//!
//! Training runs in two phases. During the first `phase1_epochs` the latents
//! (and the encoder, if any) stay fixed while inducing inputs, kernel
//! hyperparameters, noise, fixed effects and variational parameters move; the
//! second phase also updates the latents of each minibatch.

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elbo::{elbo_full, ElboBreakdown};
use crate::encoder::{amortized_elbo_terms, output_adjoints, EncoderParams};
use crate::error::{GplvmError, Result};
use crate::grad::{
    batch_value_and_grad, from_whitened, to_whitened, BatchInputs, Gradients, VariationalForm,
};
use crate::linalg::select_rows;
use crate::model::ModelState;

/// Per-block learning-rate multipliers. A zero multiplier freezes the block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrMultipliers {
    pub latents: f64,
    pub inducing: f64,
    pub hyper: f64,
    pub variational: f64,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        LrMultipliers {
            latents: 1.0,
            inducing: 1.0,
            hyper: 1.0,
            variational: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    /// Append the design row to the encoder input.
    pub with_covariates: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: vec![128, 32],
            with_covariates: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Free-form name echoed in the trace header.
    pub label: String,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub phase1_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub grad_clip: Option<f64>,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub multipliers: LrMultipliers,
    pub form: VariationalForm,
    /// Evaluate the full-data ELBO after every epoch.
    pub record_full_elbo: bool,
    pub encoder: Option<EncoderConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            label: String::new(),
            lr_phase1: 0.01,
            lr_phase2: 0.01,
            phase1_epochs: 3,
            total_epochs: 100,
            batch_size: 200,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            grad_clip: None,
            checkpoint_every: 0,
            multipliers: LrMultipliers::default(),
            form: VariationalForm::default(),
            record_full_elbo: false,
            encoder: None,
        }
    }
}

/// Global-norm threshold used when clipping is switched on without a value.
pub const DEFAULT_GRAD_CLIP: f64 = 10.0;

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(GplvmError::Config(format!(
                "batch size must be in 1..={n}, got {}",
                self.batch_size
            )));
        }
        if self.phase1_epochs > self.total_epochs {
            return Err(GplvmError::Config(format!(
                "phase-one epochs ({}) exceed total epochs ({})",
                self.phase1_epochs, self.total_epochs
            )));
        }
        for (name, v) in [
            ("phase-one learning rate", self.lr_phase1),
            ("phase-two learning rate", self.lr_phase2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GplvmError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps_adam <= 0.0
        {
            return Err(GplvmError::Config("invalid Adam moment settings".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(GplvmError::Config("gradient clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.phase1_epochs {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }
}

/// One optimizer step as written to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub minibatch_elbo: f64,
    pub lr: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub config: Option<TrainConfig>,
    pub steps: Vec<StepRecord>,
    /// Full-data ELBO after each epoch, when requested.
    pub epoch_elbo: Vec<f64>,
    /// Euclidean norm of all parameters after each epoch.
    pub param_norms: Vec<f64>,
    pub wall_time_secs: f64,
}

impl TrainTrace {
    /// Header line with the configuration, then one line per step.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        if let Some(cfg) = &self.config {
            let header = serde_json::json!({ "header": cfg });
            out.push_str(&header.to_string());
            out.push('\n');
        }
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("plain record serializes"));
            out.push('\n');
        }
        out
    }
}

/// A seeded permutation of `0..n` for the given epoch, chunked into batches;
/// the last batch may be short.
pub fn minibatch_sampler(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Adam moments for a dense block.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Ascent step: returns the increments to add to the parameters.
    fn step(&mut self, g: &[f64], lr: f64, cfg: &TrainConfig) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * gi;
                self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * gi * gi;
                lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps_adam)
            })
            .collect()
    }
}

/// Adam for the latent matrix where only minibatch rows receive updates; each
/// row keeps its own step count for bias correction.
#[derive(Debug, Clone)]
struct RowAdam {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
    t: Vec<i32>,
}

impl RowAdam {
    fn new(n: usize, q: usize) -> Self {
        RowAdam {
            m: DMatrix::zeros(n, q),
            v: DMatrix::zeros(n, q),
            t: vec![0; n],
        }
    }

    fn step(
        &mut self,
        x: &mut DMatrix<f64>,
        rows: &[usize],
        g: &DMatrix<f64>,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        for (k, &r) in rows.iter().enumerate() {
            self.t[r] += 1;
            let c1 = 1.0 - cfg.beta1.powi(self.t[r]);
            let c2 = 1.0 - cfg.beta2.powi(self.t[r]);
            for c in 0..x.ncols() {
                let gi = g[(k, c)];
                let m = cfg.beta1 * self.m[(r, c)] + (1.0 - cfg.beta1) * gi;
                let v = cfg.beta2 * self.v[(r, c)] + (1.0 - cfg.beta2) * gi * gi;
                self.m[(r, c)] = m;
                self.v[(r, c)] = v;
                x[(r, c)] += lr * (m / c1) / ((v / c2).sqrt() + cfg.eps_adam);
            }
        }
    }
}

/// Unconstrained hyperparameter vector: log σ_f², log l, [log ν], μ_f, ζ, log σ_y².
/// `ν = 0` is treated as switched off and left out.
fn hyper_flat(state: &ModelState) -> Vec<f64> {
    let mut out = vec![state.kernel.signal_variance.ln()];
    out.extend(state.kernel.lengthscales.iter().map(|l| l.ln()));
    if state.kernel.linear_scale > 0.0 {
        out.push(state.kernel.linear_scale.ln());
    }
    out.push(state.mean_const);
    out.extend(state.zeta.iter());
    out.push(state.noise_variance.ln());
    out
}

fn hyper_grad_flat(state: &ModelState, g: &Gradients) -> Vec<f64> {
    let mut out = vec![g.log_signal_variance];
    out.extend(g.log_lengthscales.iter());
    if state.kernel.linear_scale > 0.0 {
        out.push(g.log_linear_scale);
    }
    out.push(g.mean_const);
    out.extend(g.zeta.iter());
    out.push(g.log_noise_variance);
    out
}

fn set_hyper(state: &mut ModelState, flat: &[f64]) {
    let mut it = flat.iter().copied();
    let mut next = || it.next().expect("hyperparameter vector length");
    state.kernel.signal_variance = next().exp();
    for l in &mut state.kernel.lengthscales {
        *l = next().exp();
    }
    if state.kernel.linear_scale > 0.0 {
        state.kernel.linear_scale = next().exp();
    }
    state.mean_const = next();
    for z in state.zeta.iter_mut() {
        *z = next();
    }
    state.noise_variance = next().exp();
}

fn variational_flat(means: &DMatrix<f64>, chols: &[DMatrix<f64>]) -> Vec<f64> {
    let mut out: Vec<f64> = means.iter().copied().collect();
    for c in chols {
        let m = c.nrows();
        for j in 0..m {
            for i in j..m {
                out.push(c[(i, j)]);
            }
        }
    }
    out
}

fn add_variational(state: &mut ModelState, delta: &[f64]) {
    let mut it = delta.iter().copied();
    for v in state.var_means.iter_mut() {
        *v += it.next().expect("variational delta length");
    }
    for c in &mut state.var_chol {
        let m = c.nrows();
        for j in 0..m {
            for i in j..m {
                c[(i, j)] += it.next().expect("variational delta length");
            }
        }
    }
}

/// Result of a training run. `state` holds direct (unwhitened) variational
/// parameters; in encoder mode its latents are the encoder means.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: ModelState,
    pub trace: TrainTrace,
    pub encoder: Option<EncoderParams>,
}

/// Callback invoked every `checkpoint_every` epochs with the epoch number
/// (1-based) and a direct-form snapshot.
pub type CheckpointHook<'a> =
    dyn FnMut(usize, &ModelState, Option<&EncoderParams>) -> Result<()> + 'a;

pub fn fit(
    y: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    init: &ModelState,
    cfg: &TrainConfig,
) -> Result<FitOutput> {
    fit_with_hook(y, phi, init, None, cfg, &mut |_, _, _| Ok(()))
}

/// Encoder input rows: expression, optionally followed by the design row.
pub fn encoder_input(y: &DMatrix<f64>, phi: &DMatrix<f64>, with_covariates: bool) -> DMatrix<f64> {
    if !with_covariates || phi.ncols() == 0 {
        return y.clone();
    }
    let mut out = DMatrix::zeros(y.nrows(), y.ncols() + phi.ncols());
    out.columns_mut(0, y.ncols()).copy_from(y);
    out.columns_mut(y.ncols(), phi.ncols()).copy_from(phi);
    out
}

/// Full training loop. `encoder_init` overrides the seeded random encoder
/// initialization in encoder mode.
pub fn fit_with_hook(
    y: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    init: &ModelState,
    encoder_init: Option<EncoderParams>,
    cfg: &TrainConfig,
    hook: &mut CheckpointHook<'_>,
) -> Result<FitOutput> {
    init.validate()?;
    let n = init.n();
    if y.shape() != (n, init.d()) {
        return Err(GplvmError::dims("expression shape", n, y.nrows()));
    }
    if phi.shape() != (n, init.p()) {
        return Err(GplvmError::dims("design shape", n, phi.nrows()));
    }
    cfg.validate(n)?;
    let started = Instant::now();
    let mut trace = TrainTrace {
        config: Some(cfg.clone()),
        ..Default::default()
    };

    let mut encoder = match (&cfg.encoder, encoder_init) {
        (Some(_), Some(e)) => Some(e),
        (Some(ec), None) => {
            let width = y.ncols() + if ec.with_covariates { phi.ncols() } else { 0 };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(u64::MAX);
            Some(EncoderParams::random(
                &mut rng,
                width,
                &ec.hidden,
                init.q(),
                ec.with_covariates,
            ))
        }
        (None, _) => None,
    };
    if cfg.total_epochs == 0 {
        trace.wall_time_secs = started.elapsed().as_secs_f64();
        return Ok(FitOutput {
            state: init.clone(),
            trace,
            encoder,
        });
    }
    let enc_input = encoder
        .as_ref()
        .map(|e| encoder_input(y, phi, e.with_covariates));

    let mut state = match cfg.form {
        VariationalForm::Direct => init.clone(),
        VariationalForm::Whitened => to_whitened(init)?,
    };
    let mut latent_opt = RowAdam::new(n, init.q());
    let mut inducing_opt = Adam::new(state.inducing.values.len());
    let mut hyper_opt = Adam::new(hyper_flat(&state).len());
    let mut var_opt = Adam::new(variational_flat(&state.var_means, &state.var_chol).len());
    let mut enc_opt = encoder.as_ref().map(|e| Adam::new(e.num_params()));
    let mut eps_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eps_rng.set_stream(u64::MAX - 1);

    let mut step = 0usize;
    for epoch in 0..cfg.total_epochs {
        let lr = cfg.lr_for_epoch(epoch);
        let phase_two = epoch >= cfg.phase1_epochs;
        for batch in minibatch_sampler(n, cfg.batch_size, cfg.seed, epoch) {
            let y_b = select_rows(y, &batch);
            let phi_b = select_rows(phi, &batch);
            let scale = n as f64 / batch.len() as f64;

            // latents: point estimates, or encoder samples once phase two starts
            let sample = match (&encoder, phase_two) {
                (Some(e), true) => {
                    let input = select_rows(enc_input.as_ref().expect("encoder input"), &batch);
                    Some(amortized_elbo_terms(&input, e, &mut eps_rng)?)
                }
                _ => None,
            };
            let x_b = match &sample {
                Some(s) => s.x.clone(),
                None => select_rows(&state.latents, &batch),
            };
            let inputs = BatchInputs {
                y: &y_b,
                phi: &phi_b,
                x: &x_b,
                scale,
            };
            let (value, mut g) = batch_value_and_grad(&inputs, &state, cfg.form)?;
            g.latent_rows = batch.clone();
            let mut total = value.total;
            let mut enc_grad = None;
            if let (Some(s), Some(e)) = (&sample, &encoder) {
                let with_kl = ElboBreakdown::assemble(
                    value.expected_loglik,
                    value.trace_penalty,
                    value.nystrom_penalty,
                    value.kl,
                    scale * s.kl_x,
                )?;
                total = with_kl.total;
                let (mb, vb) = output_adjoints(s, &g.latents, scale);
                enc_grad = Some(e.backward(&s.cache, &mb, &vb));
            }
            g.check_finite()?;
            if let Some(eg) = &enc_grad {
                if eg.iter().any(|v| !v.is_finite()) {
                    return Err(GplvmError::NonFiniteGradient("encoder".into()));
                }
            }
            if !phase_two || encoder.is_some() {
                g.latents.fill(0.0);
            }

            if let Some(limit) = cfg.grad_clip {
                let mut sq = g.norm_squared();
                if let Some(eg) = &enc_grad {
                    sq += eg.iter().map(|v| v * v).sum::<f64>();
                }
                let norm = sq.sqrt();
                if norm > limit {
                    let f = limit / norm;
                    g.scale(f);
                    if let Some(eg) = &mut enc_grad {
                        eg.iter_mut().for_each(|v| *v *= f);
                    }
                }
            }

            let mul = cfg.multipliers;
            if phase_two && encoder.is_none() && mul.latents > 0.0 {
                latent_opt.step(
                    &mut state.latents,
                    &batch,
                    &g.latents,
                    lr * mul.latents,
                    cfg,
                );
            }
            if let (Some(e), Some(eg), Some(opt)) = (&mut encoder, &enc_grad, &mut enc_opt) {
                if mul.latents > 0.0 {
                    let delta = opt.step(eg, lr * mul.latents, cfg);
                    let mut flat = e.to_flat();
                    flat.iter_mut().zip(&delta).for_each(|(p, d)| *p += d);
                    e.set_flat(&flat)?;
                }
            }
            if mul.inducing > 0.0 {
                let delta = inducing_opt.step(g.inducing.as_slice(), lr * mul.inducing, cfg);
                state
                    .inducing
                    .values
                    .iter_mut()
                    .zip(&delta)
                    .for_each(|(p, d)| *p += d);
            }
            if mul.hyper > 0.0 {
                let delta = hyper_opt.step(&hyper_grad_flat(&state, &g), lr * mul.hyper, cfg);
                let mut h = hyper_flat(&state);
                h.iter_mut().zip(&delta).for_each(|(p, d)| *p += d);
                set_hyper(&mut state, &h);
            }
            if mul.variational > 0.0 {
                let gv = variational_flat(&g.var_means, &g.var_chol);
                let delta = var_opt.step(&gv, lr * mul.variational, cfg);
                add_variational(&mut state, &delta);
            }

            trace.steps.push(StepRecord {
                step,
                epoch,
                minibatch_elbo: total,
                lr,
                timestamp: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs_f64())
                    .unwrap_or(0.0),
            });
            step += 1;
        }

        let needs_snapshot = cfg.record_full_elbo
            || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0);
        trace.param_norms.push(param_norm(&state, encoder.as_ref()));
        if needs_snapshot {
            let snapshot = finalize(&state, cfg.form, encoder.as_ref(), enc_input.as_ref())?;
            if cfg.record_full_elbo {
                trace.epoch_elbo.push(elbo_full(y, phi, &snapshot)?.total);
            }
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                hook(epoch + 1, &snapshot, encoder.as_ref())?;
            }
        }
        log::debug!(
            "epoch {} done, last minibatch ELBO {:?}",
            epoch + 1,
            trace.steps.last().map(|s| s.minibatch_elbo)
        );
    }

    let state = finalize(&state, cfg.form, encoder.as_ref(), enc_input.as_ref())?;
    trace.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(FitOutput {
        state,
        trace,
        encoder,
    })
}

fn param_norm(state: &ModelState, encoder: Option<&EncoderParams>) -> f64 {
    let mut sq = state.latents.norm_squared()
        + state.inducing.values.norm_squared()
        + variational_flat(&state.var_means, &state.var_chol)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
        + hyper_flat(state).iter().map(|v| v * v).sum::<f64>();
    if let Some(e) = encoder {
        sq += e.to_flat().iter().map(|v| v * v).sum::<f64>();
    }
    sq.sqrt()
}

/// Direct-form copy of the working state; encoder means replace the latents.
fn finalize(
    state: &ModelState,
    form: VariationalForm,
    encoder: Option<&EncoderParams>,
    enc_input: Option<&DMatrix<f64>>,
) -> Result<ModelState> {
    let mut out = match form {
        VariationalForm::Direct => state.clone(),
        VariationalForm::Whitened => from_whitened(state)?,
    };
    if let (Some(e), Some(input)) = (encoder, enc_input) {
        out.latents = e.forward(input)?.0;
    }
    Ok(out)
}
