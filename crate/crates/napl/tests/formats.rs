mod common {
    pub mod formats;
}

use std::fs;
use std::path::Path;

use common::formats::{fixture_root, format_checks, low_half_oracle};
use napl::checkpoint::{self, decode, encode, ModelKind, Sidecar};
use napl::kitti::{encode_labels, parse_labels, parse_scan, semantic_id, LabelRemap};
use napl::{Dataset, DatasetKind, NaplError, RunConfig, Split};
use napl_core::{PwcModel, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn kitti_fixtures_round_trip_byte_exactly() {
    let r = format_checks();
    assert_eq!(r.failure, None);
    assert_eq!((r.scans, r.labels, r.points), (3, 2, 161));
}

#[test]
fn kitti_dataset_lists_the_validation_sequence() {
    let mut cfg = RunConfig::kitti();
    cfg.data_root = Some(fixture_root());
    let val = Dataset::open(&cfg, Split::Val).unwrap();
    assert_eq!(val.len(), 2);
    assert_eq!(val.num_classes(), 19);
    let cloud = val.load(1).unwrap();
    assert_eq!(cloud.len(), 64);
    assert!(cloud.labels().unwrap().iter().all(|&l| l <= 19));
}

#[test]
fn truncated_scans_report_the_offset() {
    let bytes = vec![0u8; 16 * 3 + 5];
    match parse_scan(&bytes, Path::new("x.bin")) {
        Err(NaplError::Parse { offset, .. }) => assert_eq!(offset, 48),
        other => panic!("{other:?}"),
    }
    assert!(parse_scan(&[], Path::new("x.bin")).is_err());
    assert!(parse_labels(&[1, 2, 3], Path::new("x.label")).is_err());
}

#[test]
fn unknown_semantic_ids_are_ignored() {
    let remap = LabelRemap::semantic_kitti();
    assert_eq!(remap.map(10), 1);
    assert_eq!(remap.map(65535), remap.ignore);
    assert_eq!(remap.map(semantic_id(0xBEEF_000A)), 1);
}

proptest! {
    #[test]
    fn upper_sixteen_bits_never_reach_the_semantic_id(words in proptest::collection::vec(any::<u32>(), 1..50)) {
        let bytes = encode_labels(&words);
        let ids: Vec<u16> = parse_labels(&bytes, Path::new("p.label")).unwrap().into_iter().map(semantic_id).collect();
        prop_assert_eq!(ids, low_half_oracle(&bytes));
    }

    #[test]
    fn checkpoint_bytes_round_trip(shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 0..3), 0..5)) {
        let tensors: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                (format!("t{i}"), Tensor::new(s, (0..n).map(|v| v as f32 * 0.5 - 1.0).collect()).unwrap())
            })
            .collect();
        let bytes = encode(&tensors);
        prop_assert_eq!(decode(&bytes, Path::new("c")).unwrap(), tensors.clone());
        prop_assert_eq!(encode(&decode(&bytes, Path::new("c")).unwrap()), bytes);
    }
}

fn pwc(cfg: &RunConfig, seed: u64) -> PwcModel {
    PwcModel::new(&cfg.encoder(), 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn sidecar(cfg: &RunConfig) -> Sidecar {
    Sidecar { kind: ModelKind::Pwc, step: 7, epoch: 1, val_miou: Some(0.5), config: cfg.clone() }
}

#[test]
fn reloaded_checkpoints_predict_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::synthetic();
    let model = pwc(&cfg, 1);
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, model.store(), &sidecar(&cfg)).unwrap();

    let (tensors, side) = checkpoint::load(&path).unwrap();
    assert_eq!(side, sidecar(&cfg));
    let mut other = pwc(&cfg, 2);
    checkpoint::apply(other.store_mut(), &tensors).unwrap();

    let data = Dataset::open(&cfg, Split::Val).unwrap();
    let scene = napl_core::PreparedScene::new(&data.load(0).unwrap(), &cfg.encoder()).unwrap();
    assert_eq!(model.predict(&scene).unwrap(), other.predict(&scene).unwrap());
    assert_eq!(model.features(&scene).unwrap(), other.features(&scene).unwrap());
}

fn apply_error(tensors: &[(String, Tensor)]) -> String {
    let mut model = pwc(&RunConfig::synthetic(), 0);
    match checkpoint::apply(model.store_mut(), tensors) {
        Err(e) => e.to_string(),
        Ok(()) => panic!("apply accepted a mismatched checkpoint"),
    }
}

#[test]
fn mismatched_checkpoints_name_the_tensor() {
    let model = pwc(&RunConfig::synthetic(), 0);
    let full = checkpoint::store_tensors(model.store());
    let (name, _) = full[0].clone();

    let missing: Vec<_> = full[1..].to_vec();
    assert!(apply_error(&missing).contains(&name));

    let mut extra = full.clone();
    extra.push(("decoder.ghost".into(), Tensor::vector(vec![1.0])));
    assert!(apply_error(&extra).contains("decoder.ghost"));

    let mut reshaped = full.clone();
    reshaped[0].1 = Tensor::vector(vec![0.0; reshaped[0].1.len() + 1]);
    assert!(apply_error(&reshaped).contains(&name));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = encode(&[("w".into(), Tensor::vector(vec![1.0, 2.0]))]);
    assert!(decode(b"XXXX", Path::new("c")).is_err());
    assert!(decode(&bytes[..bytes.len() - 1], Path::new("c")).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode(&long, Path::new("c")).is_err());
    let mut version = bytes;
    version[4] = 9;
    assert!(decode(&version, Path::new("c")).is_err());
}

fn parse(json: &str) -> napl::Result<RunConfig> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, json).unwrap();
    RunConfig::from_file(&path)
}

#[test]
fn config_rejects_unknown_keys_at_every_level() {
    assert!(parse(r#"{"sed": 1}"#).is_err());
    assert!(parse(r#"{"model": {"width": [8]}}"#).is_err());
    assert!(parse(r#"{"train": {"augment": {"yaw": true}}}"#).is_err());
    assert!(parse(r#"{"ablation": {"use_transformer": true, "use_pretrained_backbone": true, "use_prototype_dropout": true, "x": 1}}"#).is_err());
}

#[test]
fn config_fills_missing_keys_from_the_synthetic_profile() {
    let cfg = parse(r#"{"seed": 5, "train": {"epochs": 3}}"#).unwrap();
    let mut want = RunConfig::synthetic();
    want.seed = 5;
    want.train.epochs = 3;
    assert_eq!(cfg, want);
    assert_eq!(parse(&RunConfig::kitti().to_json()).unwrap(), RunConfig::kitti());
}

#[test]
fn config_validation_catches_inconsistent_values() {
    assert!(parse(r#"{"train": {"dropout_count": 50}}"#).is_err());
    assert!(parse(r#"{"train": {"head_lr": 0.0}}"#).is_err());
    assert!(parse(r#"{"ablation": {"use_transformer": false, "use_pretrained_backbone": true, "use_prototype_dropout": false}}"#).is_err());
    assert!(parse(r#"{"model": {"voxel_size": -1.0}}"#).is_err());
}

#[test]
fn kitti_profile_uses_the_reference_scale() {
    let k = RunConfig::kitti();
    assert_eq!(k.dataset, DatasetKind::Kitti);
    assert_eq!((k.model.num_queries, k.train.dropout_count), (50, 10));
    assert_eq!((k.train.batch_size, k.train.epochs), (16, 20));
    assert_eq!((k.train.head_lr, k.train.backbone_lr), (1e-3, 1e-4));
    assert_eq!(k.model.voxel_size, 0.05);
}
