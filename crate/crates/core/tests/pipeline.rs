//! Library round trips: synthetic data, training, checkpoints, prediction,
//! shorelines.

use islandseg::nn::{Module, Precision};
use islandseg::scene_io::{compute_normalization, load_manifest, load_split, Split};
use islandseg::shoreline::{extract_shorelines, ShorelineSet};
use islandseg::synthgen::generate_dataset;
use islandseg::trainer::{
    evaluate, fit, load_model, prepare_samples, read_epoch_log, save_model, FitData, SegModel, TrainConfig,
};
use islandseg::unet::DecoderConfig;
use islandseg::vit::{EncoderConfig, VitEncoder};

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 32,
        embed_dim: 32,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 2,
        tap_layers: [1, 1, 2, 2],
        ..EncoderConfig::default()
    }
}

fn small_decoder() -> DecoderConfig {
    DecoderConfig {
        channel_widths: [16, 16, 8, 8],
        ..DecoderConfig::default()
    }
}

#[test]
fn manifest_written_by_generator_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let written = generate_dataset(20, 32, 1, dir.path()).unwrap();
    let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(written, loaded);
    let c = loaded.split_counts();
    assert_eq!((c[&Split::Train], c[&Split::Val], c[&Split::Test]), (16, 2, 2));
}

#[test]
fn train_checkpoint_predict_and_extract() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(20, 32, 2, &dir.path().join("data")).unwrap();
    let train = load_split(&manifest, Split::Train).unwrap();
    let stats = compute_normalization(train.iter().map(|s| &s.scene)).unwrap();
    let train = prepare_samples(&train, &stats, 32).unwrap();
    let val = prepare_samples(&load_split(&manifest, Split::Val).unwrap(), &stats, 32).unwrap();
    let test_raw = load_split(&manifest, Split::Test).unwrap();
    let test = prepare_samples(&test_raw, &stats, 32).unwrap();

    let encoder = VitEncoder::<f32>::new(small_encoder(), 3).unwrap();
    let mut model = SegModel::new(encoder, small_decoder(), stats, true, 4).unwrap();
    let cfg = TrainConfig {
        max_epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    };
    let run_dir = dir.path().join("run");
    let result = fit(
        &mut model,
        FitData {
            train: &train,
            val: &val,
            test: Some(&test),
            checkpoint_dir: None,
        },
        &cfg,
        &run_dir,
    )
    .unwrap();

    let log = read_epoch_log(&run_dir.join("epochs.jsonl")).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().zip(&result.epochs).all(|(a, b)| a.same_outcome(b)));
    assert!(result.test.is_some() && result.final_test.is_some());
    assert_eq!(result.encoder_checksum_before, result.encoder_checksum_after);

    // fit leaves the best model loaded; its checkpoint matches it.
    let best: SegModel<f32> = load_model(&result.best_checkpoint_path).unwrap();
    assert_eq!(best.checksum(), model.checksum());
    let rescored = evaluate(&best, &test, Precision::Float32).unwrap();
    assert_eq!(Some(rescored.iou), result.test.as_ref().map(|t| t.iou));

    let path = dir.path().join("copy.safetensors");
    save_model(&path, &model, &[]).unwrap();
    let copy: SegModel<f32> = load_model(&path).unwrap();
    assert_eq!(copy.checksum(), model.checksum());
    assert_eq!(copy.normalization, model.normalization);

    let raw = &test_raw[0];
    let pred = copy.predict(&raw.scene, Precision::Float32).unwrap();
    assert_eq!(pred, model.predict(&raw.scene, Precision::Float32).unwrap());
    let lines = extract_shorelines(&pred);
    let set = ShorelineSet::new(raw.id(), &lines, 30.0, None);
    let out = dir.path().join("shore.json");
    set.write(&out).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(json["polylines"].as_array().unwrap().len(), lines.len());
}

#[test]
fn unfrozen_training_moves_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(10, 32, 6, &dir.path().join("data")).unwrap();
    let train = load_split(&manifest, Split::Train).unwrap();
    let stats = compute_normalization(train.iter().map(|s| &s.scene)).unwrap();
    let train = prepare_samples(&train, &stats, 32).unwrap();
    let val = prepare_samples(&load_split(&manifest, Split::Val).unwrap(), &stats, 32).unwrap();
    let encoder = VitEncoder::<f32>::new(small_encoder(), 7).unwrap();
    let mut model = SegModel::new(encoder, small_decoder(), stats, false, 8).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        freeze_encoder: false,
        ..TrainConfig::default()
    };
    let result = fit(
        &mut model,
        FitData {
            train: &train,
            val: &val,
            test: None,
            checkpoint_dir: None,
        },
        &cfg,
        &dir.path().join("run"),
    )
    .unwrap();
    assert_ne!(result.encoder_checksum_before, result.encoder_checksum_after);
}

#[test]
fn sparse_sweep_plan_fills_defaults() {
    let plan: islandseg::sweep::SweepPlan = serde_json::from_str(
        r#"{
            "sizes": [5, 10, "full"],
            "manifest": "data/manifest.json",
            "train": { "max_epochs": 3 },
            "variants": [{ "name": "base", "encoder": { "image_size": 64 }, "decoder": {} }]
        }"#,
    )
    .unwrap();
    assert_eq!(plan.train.max_epochs, 3);
    assert_eq!(plan.train.batch_size, TrainConfig::default().batch_size);
    let v = &plan.variants[0];
    assert_eq!(v.encoder.image_size, 64);
    assert_eq!(v.encoder.depth, EncoderConfig::default().depth);
    assert_eq!(v.decoder, DecoderConfig::default());
    assert_eq!(plan.resolved_sizes(20).unwrap(), vec![5, 10, 20]);
}
