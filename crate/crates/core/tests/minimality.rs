mod common;

use palora::importance::svd_importance;
use palora::linalg::{choose_rank_k, svd, DEFAULT_ENERGY};
use palora::model::{Activation, Architecture, BaseModel, TaskKind, TaskSpec};
use palora::sparsity::{derive_layer_sparsity, Step, DEFAULT_TAU};
use proptest::prelude::*;

fn svd_scores(model: &BaseModel, layer: usize) -> (Vec<f64>, Vec<f64>) {
    let w = &model.layers()[layer].weight;
    let k = choose_rank_k(&svd(w).unwrap().singular_values, DEFAULT_ENERGY).unwrap();
    svd_importance(w, k).unwrap()
}

#[test]
fn constructed_model_keeps_exactly_the_rank_one_support() {
    let (model, data) = common::constructed_two_layer();
    let (rows, cols) = svd_scores(&model, 0);
    let d = derive_layer_sparsity(&model, 0, &data, &rows, &cols, DEFAULT_TAU, Step::Fixed(1)).unwrap();
    assert_eq!((d.retained_rows, d.retained_cols), (2, 2));
    assert!(!d.warning);
    // The next drop in order is row 1; it must break the guard.
    let order = common::oracle_drop_order(&rows);
    let col_order = common::oracle_drop_order(&cols);
    let next = common::oracle_masked_accuracy(&model, 0, &data, &order[..3], &col_order[..2]);
    assert!(next < DEFAULT_TAU * d.baseline, "next drop still passes: {next}");
}

#[test]
fn constructed_model_matches_exhaustive_sweep_on_every_layer() {
    let (model, data) = common::constructed_two_layer();
    for layer in 0..model.depth() {
        let (rows, cols) = svd_scores(&model, layer);
        let d = derive_layer_sparsity(&model, layer, &data, &rows, &cols, DEFAULT_TAU, Step::Fixed(1)).unwrap();
        let (r, c, _) = common::oracle_derivation(&model, layer, &data, &rows, &cols, DEFAULT_TAU);
        assert_eq!((d.retained_rows, d.retained_cols), (r, c), "layer {layer}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_models_match_exhaustive_sweep(seed in 0u64..10_000, tau in 0.3f64..0.97) {
        let task = TaskSpec { kind: TaskKind::GaussianMixture, classes: 3, input_dim: 5, noise: 0.6, seed };
        let arch = Architecture { hidden: vec![6], activation: Activation::Relu };
        let model = BaseModel::init(&task, &arch, seed ^ 1).unwrap();
        let data = task.sample(6, seed ^ 2).unwrap();
        for layer in 0..model.depth() {
            let (rows, cols) = svd_scores(&model, layer);
            let d = derive_layer_sparsity(&model, layer, &data, &rows, &cols, tau, Step::Fixed(1)).unwrap();
            let (r, c, grid) = common::oracle_derivation(&model, layer, &data, &rows, &cols, tau);
            prop_assert_eq!((d.retained_rows, d.retained_cols), (r, c));
            prop_assert!(d.warning == (grid[0][0] < tau * d.baseline));
        }
    }
}
