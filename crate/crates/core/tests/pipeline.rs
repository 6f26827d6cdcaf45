//! End-to-end use of the library: data in, model trained, saved, reloaded
//! and queried.

use gplvm::checkpoint::{Checkpoint, DimRole};
use gplvm::data::{
    initialize, load_expression, preprocess, write_expression, DesignEncoding, ExpressionMatrix,
    InitOptions, MatrixFormat,
};
use gplvm::elbo::elbo_full;
use gplvm::grad::{from_whitened, to_whitened, VariationalForm};
use gplvm::model::{predict_all_genes, PredictOptions};
use gplvm::synthetic::{sample_generative, GenerativeConfig};
use gplvm::trainer::{fit, TrainConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ids(prefix: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}{i}")).collect()
}

fn small_problem(seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let cfg = GenerativeConfig {
        n: 120,
        d: 6,
        q: 2,
        levels: 3,
        signal_variance: 1.0,
        lengthscales: vec![2.0, 1.5],
        linear_scale: 0.5,
        noise_variance: 0.05,
        mean_const: 1.0,
    };
    let s = sample_generative(&mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
    (s.y, s.phi)
}

fn init_state(y: &DMatrix<f64>, phi: &DMatrix<f64>) -> gplvm::model::ModelState {
    let m = ExpressionMatrix::new(y.clone(), ids("c", y.nrows()), ids("g", y.ncols())).unwrap();
    initialize(&m, phi, &InitOptions::new(2, 12)).unwrap()
}

fn short_training() -> TrainConfig {
    TrainConfig {
        total_epochs: 40,
        batch_size: 40,
        phase1_epochs: 5,
        lr_phase1: 0.05,
        lr_phase2: 0.02,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn training_improves_the_bound_and_is_seeded() {
    let (y, phi) = small_problem(1);
    let init = init_state(&y, &phi);
    let before = elbo_full(&y, &phi, &init).unwrap().total;
    let a = fit(&y, &phi, &init, &short_training()).unwrap();
    let b = fit(&y, &phi, &init, &short_training()).unwrap();
    let after = elbo_full(&y, &phi, &a.state).unwrap().total;
    assert!(after > before + 10.0, "{before} -> {after}");
    assert_eq!(a.state, b.state);
    assert_eq!(a.trace.steps.len(), 40 * 3);
}

#[test]
fn both_variational_forms_train_to_similar_bounds() {
    let (y, phi) = small_problem(2);
    let init = init_state(&y, &phi);
    let mut results = Vec::new();
    for form in [VariationalForm::Direct, VariationalForm::Whitened] {
        let cfg = TrainConfig {
            form,
            ..short_training()
        };
        let out = fit(&y, &phi, &init, &cfg).unwrap();
        results.push(elbo_full(&y, &phi, &out.state).unwrap().total);
    }
    let init_elbo = elbo_full(&y, &phi, &init).unwrap().total;
    for r in &results {
        assert!(*r > init_elbo);
    }
    // same objective, different coordinates: both should get most of the way
    let spread = (results[0] - results[1]).abs();
    assert!(
        spread < 0.25 * (results[0] - init_elbo).abs(),
        "{results:?}"
    );
}

#[test]
fn whitening_is_invertible_and_preserves_the_bound() {
    let (y, phi) = small_problem(3);
    let init = init_state(&y, &phi);
    let trained = fit(&y, &phi, &init, &short_training()).unwrap().state;
    let back = from_whitened(&to_whitened(&trained).unwrap()).unwrap();
    assert!((&back.var_means - &trained.var_means).amax() < 1e-8);
    for (a, b) in back.var_chol.iter().zip(&trained.var_chol) {
        assert!((a - b).amax() < 1e-8);
    }
    let e1 = elbo_full(&y, &phi, &trained).unwrap().total;
    let e2 = elbo_full(&y, &phi, &back).unwrap().total;
    assert!((e1 - e2).abs() < 1e-6 * e1.abs());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (y, phi) = small_problem(4);
    let init = init_state(&y, &phi);
    let state = fit(&y, &phi, &init, &short_training()).unwrap().state;
    let ck = Checkpoint {
        state,
        encoder: None,
        design: DesignEncoding {
            categorical: vec![("batch".into(), ids("b", 3))],
            continuous: vec![],
        },
        cell_ids: ids("c", 120),
        gene_ids: ids("g", 6),
        dim_roles: DimRole::layout(2, true, false),
        modal_design_row: vec![1.0, 0.0, 0.0],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);

    let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, -0.5, 3.0, 2.0]);
    let p = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let a = predict_all_genes(&x, &p, &ck.state, PredictOptions::default()).unwrap();
    let b = predict_all_genes(&x, &p, &back.state, PredictOptions::default()).unwrap();
    for (ga, gb) in a.iter().zip(&b) {
        assert_eq!(ga.mean, gb.mean);
        assert_eq!(ga.variance, gb.variance);
        assert!(ga.variance.iter().all(|v| *v > 0.0));
    }
}

#[test]
fn sparse_and_dense_files_load_to_the_same_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d) = (30, 12);
    let counts = DMatrix::from_fn(n, d, |_, _| {
        if rng.random_bool(0.6) {
            0.0
        } else {
            f64::from(rng.random_range(1u32..50))
        }
    });
    let m = ExpressionMatrix::new(counts, ids("cell", n), ids("gene", d)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mtx = MatrixFormat::MatrixMarket {
        cells: dir.path().join("cells.txt"),
        genes: dir.path().join("genes.txt"),
    };
    write_expression(&m, &dir.path().join("x.mtx"), &mtx).unwrap();
    write_expression(&m, &dir.path().join("x.csv"), &MatrixFormat::DenseCsv).unwrap();
    let sparse = load_expression(&dir.path().join("x.mtx"), &mtx).unwrap();
    let dense = load_expression(&dir.path().join("x.csv"), &MatrixFormat::DenseCsv).unwrap();
    assert_eq!(sparse.values, m.values);
    assert_eq!(dense.values, m.values);
    assert_eq!(sparse.gene_ids, dense.gene_ids);

    let (a, _) = preprocess(&sparse, 5).unwrap();
    let (b, _) = preprocess(&dense, 5).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(a.gene_ids, b.gene_ids);
}
