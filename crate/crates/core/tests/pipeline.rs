//! Cross-module properties of the public API: pruning traces, batching,
//! cost accounting and checkpoints.

use asvit_core::data::Dataset;
use asvit_core::flops::FlopsModel;
use asvit_core::sparsity::{PruneConfig, PrunePolicy};
use asvit_core::vit::{forward, forward_batch, load_checkpoint, save_checkpoint, BatchRule, Checkpoint, ModelConfig, Realization, ViTWeights};
use proptest::prelude::*;

fn small() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        embed_dim: 16,
        num_heads: 2,
        num_layers: 4,
        ..ModelConfig::tiny_as()
    }
}

fn policy(thresholds: [f64; 3]) -> PrunePolicy {
    PrunePolicy::from_config(&PruneConfig {
        locations: vec![1, 2, 3],
        thresholds: thresholds.to_vec(),
        ..PruneConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kept_sets_are_nested_and_never_empty(seed in 0u64..1000, t in prop::array::uniform3(0.0f64..0.15)) {
        let w = ViTWeights::<f32>::init(&small(), seed).unwrap();
        let img = &Dataset::synthetic(1, 16, seed).unwrap().images[0];
        let (_, trace) = forward(img, &w, Some(&policy(t))).unwrap();
        let mut alive: Vec<usize> = (0..16).collect();
        for st in &trace.stages {
            prop_assert_eq!(&st.candidates, &alive);
            prop_assert!(!st.kept.is_empty());
            prop_assert!(st.kept.iter().all(|k| alive.contains(k)));
            alive = st.kept.clone();
        }
    }

    #[test]
    fn raising_a_threshold_never_keeps_more(seed in 0u64..1000, t in 0.0f64..0.1, dt in 0.0f64..0.1) {
        let w = ViTWeights::<f32>::init(&small(), seed).unwrap();
        let img = &Dataset::synthetic(1, 16, seed + 1).unwrap().images[0];
        let (_, lo) = forward(img, &w, Some(&policy([t, -1.0, -1.0]))).unwrap();
        let (_, hi) = forward(img, &w, Some(&policy([t + dt, -1.0, -1.0]))).unwrap();
        prop_assert!(hi.kept_counts()[0] <= lo.kept_counts()[0]);
    }

    #[test]
    fn cost_fraction_is_monotone_and_bounded(a in 1usize..=64, b in 1usize..=64, c in 1usize..=64) {
        let flops = FlopsModel::new(&ModelConfig::tiny_as(), &[4, 7, 10]).unwrap();
        let mut counts = [a, b, c];
        counts.sort_unstable_by(|x, y| y.cmp(x));
        let tokens: Vec<f64> = counts.iter().map(|&k| k as f64 + 1.0).collect();
        let f = flops.fraction_for_counts(&tokens).unwrap();
        prop_assert!(f > 0.0 && f <= 1.0);
        let mut more = tokens.clone();
        more[2] += 1.0;
        prop_assert!(flops.fraction_for_counts(&more).unwrap() > f);
    }
}

#[test]
fn per_image_batches_match_single_images() {
    let w = ViTWeights::<f32>::init(&small(), 3).unwrap();
    let data = Dataset::synthetic(5, 16, 3).unwrap();
    let p = policy([0.05, 0.06, 0.07]);
    let batch = forward_batch(&data.images, &w, Some(&p), Realization::Gather, BatchRule::PerImage).unwrap();
    for (i, img) in data.images.iter().enumerate() {
        let (logits, trace) = forward(img, &w, Some(&p)).unwrap();
        assert_eq!(logits.data(), batch.logits.row(i));
        assert_eq!(trace, batch.traces[i]);
    }
}

#[test]
fn batch_rule_keeps_equal_counts_across_images() {
    let w = ViTWeights::<f32>::init(&small(), 4).unwrap();
    let data = Dataset::synthetic(6, 16, 4).unwrap();
    let inf = forward_batch(&data.images, &w, Some(&policy([0.06, 0.06, 0.06])), Realization::Gather, BatchRule::BatchK).unwrap();
    let first = inf.traces[0].kept_counts();
    assert!(inf.traces.iter().all(|t| t.kept_counts() == first));
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let w = ViTWeights::<f32>::init(&small(), 5).unwrap();
    let p = PruneConfig {
        locations: vec![1, 2, 3],
        thresholds: vec![0.05, 0.06, 0.07],
        ..PruneConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.asvt");
    save_checkpoint(&path, &Checkpoint { weights: w.clone(), prune: Some(p.clone()) }).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.prune.as_ref(), Some(&p));
    let img = &Dataset::synthetic(1, 16, 5).unwrap().images[0];
    let pol = PrunePolicy::from_config(&p);
    assert_eq!(forward(img, &w, Some(&pol)).unwrap(), forward(img, &back.weights, Some(&pol)).unwrap());
}
