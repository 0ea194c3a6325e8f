mod common;

use proptest::prelude::*;
use rand::Rng;

use common::*;
use uniadet::io::manifest::{load_manifest, DatasetManifest, ManifestOptions, Split};
use uniadet::io::provider::{FeatureProvider, ProviderKind, ProviderSpec};
use uniadet::synth::{write_corpus, SynthConfig};
use uniadet::training::{grid_crop, grid_mosaic, train, Ablation, Optimizer, TrainConfig, TrainSample};
use uniadet::Error;

fn small_corpus(dir: &std::path::Path, classes: usize) -> DatasetManifest {
    write_corpus(
        dir,
        &SynthConfig {
            classes,
            images_per_class: 12,
            height: 32,
            width: 32,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    load_manifest(&dir.join("manifest.json"), ManifestOptions::default()).unwrap()
}

fn provider() -> Box<dyn FeatureProvider> {
    ProviderSpec {
        kind: ProviderKind::Synthetic,
        blocks: None,
        features_dir: None,
        geometry_seed: 0,
    }
    .build()
    .unwrap()
}

fn quick(seed: u64, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        seed,
        ablation,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_weights() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 1);
    let p = provider();
    let a = train(&m, p.as_ref(), &quick(3, Ablation::default())).unwrap();
    let b = train(&m, p.as_ref(), &quick(3, Ablation::default())).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.log, b.log);
    let c = train(&m, p.as_ref(), &quick(4, Ablation::default())).unwrap();
    assert_ne!(a.weights, c.weights);
}

#[test]
fn thread_count_does_not_change_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 1);
    let p = provider();
    let run = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| {
                train(&m, p.as_ref(), &quick(1, Ablation::default()))
                    .unwrap()
                    .weights
            })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn ablation_flags_tie_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 1);
    let p = provider();
    let shared = train(
        &m,
        p.as_ref(),
        &quick(
            0,
            Ablation {
                decouple_cls_seg: false,
                decouple_layers: true,
                use_caa: true,
            },
        ),
    )
    .unwrap()
    .weights;
    assert!(shared.layers.iter().all(|l| l.cls == l.seg));
    assert!(!shared.metadata.decouple_cls_seg);

    let one_pair = train(
        &m,
        p.as_ref(),
        &quick(
            0,
            Ablation {
                decouple_cls_seg: true,
                decouple_layers: false,
                use_caa: false,
            },
        ),
    )
    .unwrap()
    .weights;
    let first = &one_pair.layers[0];
    assert!(one_pair
        .layers
        .iter()
        .all(|l| l.cls == first.cls && l.seg == first.seg));
    assert_ne!(first.cls, first.seg);

    let full = train(&m, p.as_ref(), &quick(0, Ablation::default()))
        .unwrap()
        .weights;
    assert_ne!(full.layers[0].cls, full.layers[1].cls);
}

#[test]
fn loss_decreases_on_clean_data() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 1);
    let cfg = TrainConfig {
        epochs: 6,
        ablation: Ablation {
            use_caa: false,
            ..Ablation::default()
        },
        ..TrainConfig::default()
    };
    let out = train(&m, provider().as_ref(), &cfg).unwrap();
    assert_eq!(out.log.len(), 6);
    assert!(out.log.last().unwrap().loss.total < out.log[0].loss.total);
    assert_eq!(out.weights.metadata.epochs, 6);
}

#[test]
fn sgd_is_available() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 1);
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        learning_rate: 0.1,
        ..quick(0, Ablation::default())
    };
    let w = train(&m, provider().as_ref(), &cfg).unwrap().weights;
    assert_eq!(w.metadata.optimizer, "sgd");
}

#[test]
fn single_label_training_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = small_corpus(dir.path(), 1);
    m.entries.retain(|e| e.split == Split::Test || !e.is_anomaly());
    for e in &mut m.entries {
        if e.split == Split::Train {
            e.label = 0;
        }
    }
    let err = train(&m, provider().as_ref(), &quick(0, Ablation::default())).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn provider_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 1);
    let p = provider();
    for e in m.entries.iter().take(4) {
        assert_eq!(p.features_for(e).unwrap(), p.features_for(e).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn augmentation_conserves_labels(seed in any::<u64>(), n in 2usize..=4) {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(n..24), r.gen_range(n..24));
        let samples: Vec<TrainSample> = (0..6)
            .map(|i| {
                let label = i % 2 == 1;
                let mut mask = random_mask(&mut r, h, w, 0.1);
                if label {
                    mask.set(r.gen_range(0..h), r.gen_range(0..w), true);
                } else {
                    mask = uniadet::raster::Mask::empty(h, w);
                }
                let image = uniadet::raster::Raster::new(h, w, 1, (0..h * w).map(|_| r.gen()).collect()).unwrap();
                TrainSample::new(format!("s{i}"), image, mask, label, "c").unwrap()
            })
            .collect();
        let pool: Vec<&TrainSample> = samples.iter().collect();
        for s in &samples {
            let m = grid_mosaic(s, &pool, n, &mut r).unwrap();
            prop_assert_eq!(m.label, s.label);
            prop_assert_eq!(m.mask.any(), s.label);
            let c = grid_crop(s, n, &mut r).unwrap();
            prop_assert_eq!(c.label, s.label);
            prop_assert_eq!(c.mask.any(), s.label);
        }
    }
}
