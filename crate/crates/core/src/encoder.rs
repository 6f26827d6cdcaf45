//! Amortized Gaussian posterior over the latents: a feed-forward network maps
//! each expression row to the mean and diagonal variance of `q(x_n)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GplvmError, Result};

/// Added to the softplus output so variances stay strictly positive.
pub const VARIANCE_FLOOR: f64 = 1e-6;

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out×in
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    fn zeros(input: usize, output: usize) -> Self {
        Layer {
            w: DMatrix::zeros(output, input),
            b: DVector::zeros(output),
        }
    }

    /// Rows of `x` are inputs; returns `x Wᵀ + 1bᵀ`.
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * self.w.transpose();
        for mut row in out.row_iter_mut() {
            row += self.b.transpose();
        }
        out
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Shared tanh trunk followed by a linear mean head and a softplus variance head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub trunk: Vec<Layer>,
    pub mean_head: Layer,
    pub var_head: Layer,
    /// Whether design rows are appended to the expression input.
    pub with_covariates: bool,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    input: DMatrix<f64>,
    hidden: Vec<DMatrix<f64>>,
    var_pre: DMatrix<f64>,
}

impl EncoderParams {
    pub fn zeros(input_dim: usize, hidden: &[usize], q: usize, with_covariates: bool) -> Self {
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &h in hidden {
            trunk.push(Layer::zeros(prev, h));
            prev = h;
        }
        EncoderParams {
            trunk,
            mean_head: Layer::zeros(prev, q),
            var_head: Layer::zeros(prev, q),
            with_covariates,
        }
    }

    /// Glorot-scaled normal weights, zero biases.
    pub fn random<R: Rng>(
        rng: &mut R,
        input_dim: usize,
        hidden: &[usize],
        q: usize,
        with_covariates: bool,
    ) -> Self {
        let mut p = Self::zeros(input_dim, hidden, q, with_covariates);
        let mut init = |layer: &mut Layer| {
            let (out, inp) = layer.w.shape();
            let sd = (2.0 / (out + inp) as f64).sqrt();
            for w in layer.w.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *w = sd * z;
            }
        };
        for layer in &mut p.trunk {
            init(layer);
        }
        init(&mut p.mean_head);
        init(&mut p.var_head);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.first().unwrap_or(&self.mean_head).w.ncols()
    }

    pub fn q(&self) -> usize {
        self.mean_head.w.nrows()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.trunk.iter().map(|l| l.w.nrows()).collect()
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk.iter().chain([&self.mean_head, &self.var_head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.trunk
            .iter_mut()
            .chain([&mut self.mean_head, &mut self.var_head])
    }

    /// Number of scalar parameters; depends only on the architecture.
    pub fn num_params(&self) -> usize {
        self.layers().map(Layer::len).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(GplvmError::dims(
                "encoder parameter count",
                self.num_params(),
                flat.len(),
            ));
        }
        let mut it = flat.iter().copied();
        for l in self.layers_mut() {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Forward pass over the rows of `input`; returns `(means, variances)` as B×Q.
    pub fn forward(
        &self,
        input: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, ForwardCache)> {
        if input.ncols() != self.input_dim() {
            return Err(GplvmError::dims(
                "encoder input width",
                self.input_dim(),
                input.ncols(),
            ));
        }
        let mut hidden = Vec::with_capacity(self.trunk.len());
        let mut h = input.clone();
        for layer in &self.trunk {
            h = layer.forward(&h).map(f64::tanh);
            hidden.push(h.clone());
        }
        let mean = self.mean_head.forward(&h);
        let var_pre = self.var_head.forward(&h);
        let var = var_pre.map(|v| softplus(v) + VARIANCE_FLOOR);
        Ok((
            mean,
            var,
            ForwardCache {
                input: input.clone(),
                hidden,
                var_pre,
            },
        ))
    }

    /// Mean and variance for one input row.
    pub fn encode(&self, row: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let input = DMatrix::from_row_slice(1, row.len(), row);
        let (m, v, _) = self.forward(&input)?;
        Ok((m.iter().copied().collect(), v.iter().copied().collect()))
    }

    /// Backpropagates adjoints of the means and variances to a flat gradient
    /// laid out like [`EncoderParams::to_flat`].
    pub fn backward(
        &self,
        cache: &ForwardCache,
        mean_bar: &DMatrix<f64>,
        var_bar: &DMatrix<f64>,
    ) -> Vec<f64> {
        let pre_bar = var_bar.zip_map(&cache.var_pre, |g, v| g * sigmoid(v));
        let top = cache.hidden.last().unwrap_or(&cache.input);
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
        let head_grad = |g: &DMatrix<f64>| (g.transpose() * top, g.row_sum().transpose());
        let mean_g = head_grad(mean_bar);
        let var_g = head_grad(&pre_bar);
        let mut h_bar = mean_bar * &self.mean_head.w + &pre_bar * &self.var_head.w;
        for k in (0..self.trunk.len()).rev() {
            let out = &cache.hidden[k];
            let z_bar = h_bar.zip_map(out, |g, t| g * (1.0 - t * t));
            let below = if k == 0 {
                &cache.input
            } else {
                &cache.hidden[k - 1]
            };
            grads.push((z_bar.transpose() * below, z_bar.row_sum().transpose()));
            h_bar = &z_bar * &self.trunk[k].w;
        }
        grads.reverse();
        grads.push(mean_g);
        grads.push(var_g);
        let mut flat = Vec::with_capacity(self.num_params());
        for (w, b) in grads {
            flat.extend(w.iter());
            flat.extend(b.iter());
        }
        flat
    }
}

/// Σ_n KL(N(mean_n, diag var_n) || N(0, I)).
pub fn latent_kl(mean: &DMatrix<f64>, var: &DMatrix<f64>) -> f64 {
    mean.iter()
        .zip(var.iter())
        .map(|(m, v)| 0.5 * (v + m * m - 1.0 - v.ln()))
        .sum()
}

/// One reparameterized draw of the latents for a batch.
pub struct AmortizedSample {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
    pub eps: DMatrix<f64>,
    /// `mean + sqrt(var) ⊙ eps`
    pub x: DMatrix<f64>,
    /// Unscaled KL of the batch rows from the standard normal prior.
    pub kl_x: f64,
    pub cache: ForwardCache,
}

pub fn amortized_elbo_terms<R: Rng>(
    input: &DMatrix<f64>,
    params: &EncoderParams,
    rng: &mut R,
) -> Result<AmortizedSample> {
    let (mean, var, cache) = params.forward(input)?;
    let eps = DMatrix::from_fn(mean.nrows(), mean.ncols(), |_, _| {
        StandardNormal.sample(rng)
    });
    let x = &mean + var.map(f64::sqrt).component_mul(&eps);
    let kl_x = latent_kl(&mean, &var);
    Ok(AmortizedSample {
        mean,
        var,
        eps,
        x,
        kl_x,
        cache,
    })
}

/// Chain rule from `x̄` (adjoint of the sampled latents) and the scaled KL
/// penalty `scale · kl_x` to adjoints of the encoder outputs.
pub fn output_adjoints(
    sample: &AmortizedSample,
    x_bar: &DMatrix<f64>,
    scale: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mean_bar = x_bar - &sample.mean * scale;
    let var_bar = DMatrix::from_fn(x_bar.nrows(), x_bar.ncols(), |i, j| {
        let v = sample.var[(i, j)];
        x_bar[(i, j)] * sample.eps[(i, j)] / (2.0 * v.sqrt()) - scale * 0.5 * (1.0 - 1.0 / v)
    });
    (mean_bar, var_bar)
}
