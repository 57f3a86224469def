use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use stackfold_core::explain::{integrated_gradients, occlusion, saliency, single_feature_windows};
use stackfold_core::features::FeatureMatrix;
use stackfold_core::manifest::BinaryLabelMatrix;
use stackfold_core::stratify::SplitView;
use stackfold_core::trainer::{train_fold, BaseLearnerModel, BaseLearnerSpec, TrainOptions};

const D: usize = 8;
const INFORMATIVE: usize = 3;

/// Label `a` fires on `x3 > 0.5`; every other column is noise.
fn data(n: usize, seed: u64) -> (FeatureMatrix, BinaryLabelMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((n, D), || StandardNormal.sample(&mut rng));
    let y = Array2::from_shape_fn((n, 1), |(i, _)| u8::from(x[[i, INFORMATIVE]] > 0.5));
    let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let names = (0..D).map(|j| format!("f{j}")).collect();
    (
        FeatureMatrix::new(ids.clone(), names, x).unwrap(),
        BinaryLabelMatrix::new(ids, vec!["a".into()], y).unwrap(),
    )
}

fn trained_mlp() -> (BaseLearnerModel, FeatureMatrix) {
    let (features, truth) = data(800, 1);
    let spec = BaseLearnerSpec {
        model_id: "mlp".into(),
        hidden_units: 16,
        dropout_rate: 0.0,
        learning_rate: 3e-3,
        weight_decay: 1e-4,
        feature_subset_seed: 0,
        feature_fraction: 1.0,
    };
    let view = SplitView { train: (0..600).collect(), valid: (600..800).collect() };
    let model = train_fold(&spec, &features, &truth, &view, &TrainOptions { epochs: 40, batch_size: 32, seed: 2 }).unwrap();
    assert!(model.best_macro_auc > 0.95, "{}", model.best_macro_auc);
    (model, features)
}

fn argmax_abs(scores: &[f64]) -> usize {
    (0..scores.len()).max_by(|&a, &b| scores[a].abs().total_cmp(&scores[b].abs())).unwrap()
}

#[test]
fn every_method_ranks_the_informative_feature_first() {
    let (model, features) = trained_mlp();
    let means = features.column_means().to_vec();
    let windows = single_feature_windows(D);
    let mut checked = 0;
    for (i, row) in features.values.outer_iter().enumerate().take(200) {
        // Samples near a decision boundary carry little signal for any method.
        if (row[INFORMATIVE] - 0.5).abs() < 1.0 {
            continue;
        }
        let x = row.to_vec();
        let id = &features.sample_ids[i];
        let occ = occlusion(&model, id, &x, "a", &windows, &means).unwrap();
        assert_eq!(argmax_abs(&occ.scores), INFORMATIVE, "occlusion {id}: {:?}", occ.scores);
        let ig = integrated_gradients(&model, id, &x, &means, 64, "a").unwrap();
        assert_eq!(argmax_abs(&ig.scores), INFORMATIVE, "ig {id}: {:?}", ig.scores);
        let sal = saliency(&model, id, &x, "a").unwrap();
        assert!(sal.scores.iter().all(|s| *s >= 0.0));
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} samples checked");
}

#[test]
fn model_round_trip_keeps_attributions() {
    let (model, features) = trained_mlp();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    let loaded = BaseLearnerModel::load(&path).unwrap();
    let x = features.values.row(0).to_vec();
    let baseline = vec![0.0; D];
    let a = integrated_gradients(&model, "s0", &x, &baseline, 32, "a").unwrap();
    let b = integrated_gradients(&loaded, "s0", &x, &baseline, 32, "a").unwrap();
    assert_eq!(a, b);
}
