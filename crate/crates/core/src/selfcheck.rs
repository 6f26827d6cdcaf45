//! Self-contained verification suite run by `gplvm check`.
//!
//! Every check draws its own seeded instances, so a report is fully
//! determined by the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::elbo::{elbo_full, optimal_variational};
use crate::error::Result;
use crate::grad::{
    flatten_grads, flatten_params, gradients, to_whitened, unflatten_params, VariationalForm,
};
use crate::kernel::gram_bundle;
use crate::model::{conditional_f_given_u, decompose_linear_nonlinear, nonlinear_part};
use crate::oracle::{
    augmented_log_marginal, central_difference, equivalence_check, gradients_agree, EQUIVALENCE_TOL,
};
use crate::synthetic::{random_block_instance, random_instance, InstanceDims};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Instances drawn per check.
    pub instances: usize,
    /// Perturb one computation so the equivalence check must fail.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            instances: 10,
            inject_fault: false,
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn small_dims<R: Rng>(rng: &mut R) -> InstanceDims {
    InstanceDims {
        n: rng.random_range(2..=30),
        d: rng.random_range(1..=3),
        m: rng.random_range(2..=6),
        q: rng.random_range(1..=3),
        p: rng.random_range(0..=4),
    }
}

fn outcome(name: &'static str, res: Result<(bool, String)>) -> CheckOutcome {
    match res {
        Ok((passed, detail)) => CheckOutcome {
            name,
            passed,
            detail,
        },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Augmented-kernel likelihood against the integrated random-effects forms.
pub fn check_equivalence(opts: &SuiteOptions) -> CheckOutcome {
    outcome(
        "equivalence",
        (|| {
            let mut rng = rng_for(opts.seed, 1);
            let mut worst: f64 = 0.0;
            for _ in 0..opts.instances {
                let dims = small_dims(&mut rng);
                let inst = random_instance(&mut rng, dims);
                let rep = equivalence_check(&inst.y, &inst.phi, &inst.state, None)?;
                worst = worst.max(rep.difference);
                if opts.inject_fault {
                    // the augmented path sees a slightly different noise level
                    let mut faulty = inst.state.clone();
                    faulty.noise_variance *= 1.0 + 1e-3;
                    let aug = augmented_log_marginal(&inst.y, &inst.phi, &faulty)?;
                    worst = worst.max((aug - rep.exact).abs());
                }
            }
            Ok((
                worst < EQUIVALENCE_TOL,
                format!(
                    "max |difference| = {worst:.3e} over {} instances",
                    opts.instances
                ),
            ))
        })(),
    )
}

/// The ELBO at the optimal Gaussian `q(u)` never exceeds the exact marginal.
pub fn check_bound(opts: &SuiteOptions) -> CheckOutcome {
    outcome(
        "bound",
        (|| {
            let mut rng = rng_for(opts.seed, 2);
            let mut min_gap = f64::INFINITY;
            let mut ok = true;
            for _ in 0..opts.instances {
                let dims = small_dims(&mut rng);
                let inst = random_instance(&mut rng, dims);
                let opt = optimal_variational(&inst.y, &inst.phi, &inst.state)?;
                let elbo = elbo_full(&inst.y, &inst.phi, &opt)?.total;
                let rep = equivalence_check(&inst.y, &inst.phi, &opt, Some(elbo))?;
                ok &= rep.passed();
                min_gap = min_gap.min(rep.exact - elbo);
            }
            Ok((ok, format!("smallest gap exact − ELBO = {min_gap:.3e}")))
        })(),
    )
}

/// Linear and non-linear posteriors of a block-form model add up to the full one.
pub fn check_decomposition(opts: &SuiteOptions) -> CheckOutcome {
    outcome(
        "decomposition",
        (|| {
            let mut rng = rng_for(opts.seed, 3);
            let mut worst: f64 = 0.0;
            for _ in 0..opts.instances {
                let p = rng.random_range(1..=4);
                let m1 = rng.random_range(1..=8);
                let m2 = rng.random_range(1..=p);
                let dims = InstanceDims {
                    n: rng.random_range(1..=20),
                    d: 1,
                    m: m1 + m2,
                    q: rng.random_range(1..=3),
                    p,
                };
                let inst = random_block_instance(&mut rng, dims, m1, m2);
                let st = &inst.state;
                let b = gram_bundle(&st.latents, &inst.phi, &st.inducing, &st.kernel)?;
                let full = conditional_f_given_u(&b, &st.var_mean(0), &st.var_cov(0))?;
                let lin = decompose_linear_nonlinear(st, &inst.phi, 0)?;
                let nl = nonlinear_part(st, &st.latents, 0)?;
                worst = worst
                    .max((&lin.mean + &nl.mean - &full.mean).amax())
                    .max((&lin.variance + &nl.variance - &full.variance).amax());
            }
            Ok((worst < 1e-8, format!("max |sum − full| = {worst:.3e}")))
        })(),
    )
}

/// Analytic gradients of the minibatch ELBO against central differences,
/// in both variational parameterizations.
pub fn check_gradients(opts: &SuiteOptions) -> CheckOutcome {
    outcome(
        "gradients",
        (|| {
            let mut rng = rng_for(opts.seed, 4);
            let mut failures = 0usize;
            let mut total = 0usize;
            for k in 0..opts.instances {
                let dims = InstanceDims {
                    n: rng.random_range(3..=6),
                    d: rng.random_range(1..=2),
                    m: rng.random_range(2..=4),
                    q: rng.random_range(1..=2),
                    p: rng.random_range(0..=2),
                };
                let inst = random_instance(&mut rng, dims);
                let b = rng.random_range(1..=dims.n);
                let idx: Vec<usize> = rand::seq::index::sample(&mut rng, dims.n, b).into_vec();
                let form = if k % 2 == 0 {
                    VariationalForm::Direct
                } else {
                    VariationalForm::Whitened
                };
                let st = match form {
                    VariationalForm::Direct => inst.state.clone(),
                    VariationalForm::Whitened => to_whitened(&inst.state)?,
                };
                let (_, g) = gradients(&inst.y, &inst.phi, &idx, &st, form)?;
                let analytic = flatten_grads(&g, st.n());
                let numeric = central_difference(
                    |p| {
                        let s = unflatten_params(&st, p);
                        gradients(&inst.y, &inst.phi, &idx, &s, form)
                            .map_or(f64::NAN, |r| r.0.total)
                    },
                    &flatten_params(&st),
                    1e-5,
                );
                total += analytic.len();
                failures += analytic
                    .iter()
                    .zip(&numeric)
                    .filter(|(a, n)| !gradients_agree(**a, **n, 1e-4, 1e-6))
                    .count();
            }
            Ok((
                failures == 0,
                format!("{failures} of {total} partial derivatives disagree"),
            ))
        })(),
    )
}

pub fn run_suite(opts: &SuiteOptions) -> Vec<CheckOutcome> {
    vec![
        check_equivalence(opts),
        check_bound(opts),
        check_decomposition(opts),
        check_gradients(opts),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run_suite(&SuiteOptions {
            instances: 4,
            ..Default::default()
        });
        for r in &report {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn injected_fault_is_reported() {
        let r = check_equivalence(&SuiteOptions {
            instances: 2,
            inject_fault: true,
            ..Default::default()
        });
        assert!(!r.passed);
    }

    #[test]
    fn report_is_reproducible() {
        let opts = SuiteOptions {
            seed: 7,
            instances: 2,
            inject_fault: false,
        };
        assert_eq!(run_suite(&opts), run_suite(&opts));
    }
}
