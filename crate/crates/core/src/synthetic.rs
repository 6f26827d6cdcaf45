//! Seeded random model instances and data drawn from the generative model.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::kernel::{self, InducingInputs, KernelSpec};
use crate::linalg::jittered_cholesky;
use crate::model::{ModelState, ZetaMode};

#[derive(Debug, Clone, Copy)]
pub struct InstanceDims {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub q: usize,
    pub p: usize,
}

/// A state together with data it can be evaluated on.
#[derive(Debug, Clone)]
pub struct Instance {
    pub y: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub state: ModelState,
}

pub fn uniform_matrix<R: Rng>(rng: &mut R, r: usize, c: usize, half_width: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-half_width..half_width))
}

pub fn normal_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// Lower-triangular factor with diagonal in [0.3, 1) and small off-diagonal entries.
pub fn random_lower<R: Rng>(rng: &mut R, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            rng.random_range(0.3..1.0)
        } else if i > j {
            rng.random_range(-0.3..0.3)
        } else {
            0.0
        }
    })
}

/// Random kernel with moderate hyperparameters and the periodic first dimension.
pub fn random_kernel<R: Rng>(rng: &mut R, q: usize, p: usize) -> KernelSpec {
    let lengthscales = (0..q).map(|_| rng.random_range(0.6..1.6)).collect();
    KernelSpec::new(
        rng.random_range(0.6..1.6),
        lengthscales,
        rng.random_range(0.2..0.9),
        p,
    )
    .expect("generated hyperparameters are valid")
}

/// Random well-conditioned state plus random data, all entries O(1).
pub fn random_instance<R: Rng>(rng: &mut R, dims: InstanceDims) -> Instance {
    let InstanceDims { n, d, m, q, p } = dims;
    let kernel = random_kernel(rng, q, p);
    let state = ModelState {
        latents: uniform_matrix(rng, n, q, 1.5),
        inducing: InducingInputs::new(uniform_matrix(rng, m, q + p, 1.5), q).expect("valid widths"),
        var_means: uniform_matrix(rng, m, d, 1.0),
        var_chol: (0..d).map(|_| random_lower(rng, m)).collect(),
        kernel,
        mean_const: rng.random_range(-0.5..0.5),
        zeta: uniform_matrix(rng, p, d, 0.5),
        noise_variance: rng.random_range(0.2..0.6),
        zeta_mode: ZetaMode::PerGene,
    };
    Instance {
        y: uniform_matrix(rng, n, d, 1.5),
        phi: uniform_matrix(rng, n, p, 1.0),
        state,
    }
}

/// Random state whose inducing inputs have the block form
/// `[[Z₁, 0], [sentinel, Z₂]]` with `m1` latent and `m2` linear rows. The
/// variational factors are block diagonal, so the two groups of inducing
/// outputs are independent under `q(u)`.
pub fn random_block_instance<R: Rng>(
    rng: &mut R,
    dims: InstanceDims,
    m1: usize,
    m2: usize,
) -> Instance {
    let mut inst = random_instance(rng, InstanceDims { m: m1 + m2, ..dims });
    let z1 = uniform_matrix(rng, m1, dims.q, 1.5);
    let z2 = uniform_matrix(rng, m2, dims.p, 1.0) + DMatrix::identity(m2, dims.p);
    inst.state.inducing = InducingInputs::block_form(&z1, &z2);
    for c in inst.state.var_chol.iter_mut() {
        let mut b = DMatrix::zeros(m1 + m2, m1 + m2);
        b.view_mut((0, 0), (m1, m1))
            .copy_from(&random_lower(rng, m1));
        b.view_mut((m1, m1), (m2, m2))
            .copy_from(&random_lower(rng, m2));
        *c = b;
    }
    inst
}

/// Settings for drawing a dataset from the generative model
/// `y_nd = μ_f + f_d(x_n) + φ_nᵀ b_d + ε`, with `b_d ~ N(0, νI)`.
#[derive(Debug, Clone)]
pub struct GenerativeConfig {
    pub n: usize,
    pub d: usize,
    /// Latent dimensions, the first periodic.
    pub q: usize,
    /// Number of levels of the one-hot batch covariate.
    pub levels: usize,
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub linear_scale: f64,
    pub noise_variance: f64,
    pub mean_const: f64,
}

#[derive(Debug, Clone)]
pub struct GenerativeSample {
    pub y: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub latents: DMatrix<f64>,
    /// `f_d(x_n)` without offset, random effects or noise.
    pub latent_signal: DMatrix<f64>,
}

/// Draws latents (`x_1 ~ U[0, 2π)`, the rest standard normal), uniform batch
/// labels, exact GP functions through a dense Cholesky, random effects and noise.
pub fn sample_generative<R: Rng>(rng: &mut R, cfg: &GenerativeConfig) -> Result<GenerativeSample> {
    let (n, d, q) = (cfg.n, cfg.d, cfg.q);
    let latents = DMatrix::from_fn(n, q, |_, c| {
        if c == 0 {
            rng.random_range(0.0..std::f64::consts::TAU)
        } else {
            StandardNormal.sample(rng)
        }
    });
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.levels)).collect();
    let phi = DMatrix::from_fn(n, cfg.levels, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
    let spec = KernelSpec::new(cfg.signal_variance, cfg.lengthscales.clone(), 0.0, 0)?;
    let gram = kernel::full_gram(&spec, &latents, &DMatrix::zeros(n, 0));
    let chol = jittered_cholesky(&gram, "generative Gram")?;
    let latent_signal = &chol.l * normal_matrix(rng, n, d);
    let effects = normal_matrix(rng, cfg.levels, d) * cfg.linear_scale.sqrt();
    let noise = normal_matrix(rng, n, d) * cfg.noise_variance.sqrt();
    let mut y = &latent_signal + &phi * effects + noise;
    y.add_scalar_mut(cfg.mean_const);
    Ok(GenerativeSample {
        y,
        phi,
        labels,
        latents,
        latent_signal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn instances_are_valid_and_seeded() {
        let dims = InstanceDims {
            n: 5,
            d: 2,
            m: 3,
            q: 2,
            p: 1,
        };
        let a = random_instance(&mut ChaCha8Rng::seed_from_u64(9), dims);
        let b = random_instance(&mut ChaCha8Rng::seed_from_u64(9), dims);
        a.state.validate().unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn generative_sample_shapes() {
        let cfg = GenerativeConfig {
            n: 40,
            d: 3,
            q: 2,
            levels: 3,
            signal_variance: 1.0,
            lengthscales: vec![1.0, 1.0],
            linear_scale: 0.5,
            noise_variance: 0.1,
            mean_const: 0.0,
        };
        let s = sample_generative(&mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
        assert_eq!(s.y.shape(), (40, 3));
        for i in 0..40 {
            assert_eq!(s.phi.row(i).sum(), 1.0);
            assert_eq!(s.phi[(i, s.labels[i])], 1.0);
        }
    }
}
