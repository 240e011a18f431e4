mod common;

use omae::features::{read_features, read_manifest, write_features, write_manifest, MAGIC};
use omae::network::{load_checkpoint, save_checkpoint, ModelParams, NetworkSpec};
use proptest::prelude::*;
use std::path::PathBuf;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn write_then_read_is_identity(seed in any::<u64>(), d_app in 1usize..12, d_mo in 1usize..6) {
        let mut rng = common::rng(seed);
        let set = common::random_set(&mut rng, "clip", d_app, d_mo);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.omf");
        write_features(&set, &path).unwrap();
        prop_assert_eq!(read_features(&path).unwrap(), set);
    }

    #[test]
    fn any_truncation_is_rejected(seed in any::<u64>(), cut in 1usize..200) {
        let mut rng = common::rng(seed);
        let mut set = common::random_set(&mut rng, "clip", 5, 3);
        if set.records.is_empty() {
            set = common::random_set(&mut common::rng(1), "clip", 5, 3);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.omf");
        write_features(&set, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        std::fs::write(&path, &bytes[..keep]).unwrap();
        prop_assert!(read_features(&path).is_err());
    }
}

#[test]
fn bad_magic_and_trailing_bytes() {
    let mut rng = common::rng(4);
    let set = common::random_set(&mut rng, "clip", 4, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.omf");
    write_features(&set, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(read_features(&path).unwrap_err().class(), "corruption");
    bytes.pop();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(read_features(&path).unwrap_err().class(), "format");
}

#[test]
fn manifest_paths_are_relative_to_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("list.manifest");
    write_manifest(&manifest, &[PathBuf::from("a/x.omf"), PathBuf::from("y.omf")]).unwrap();
    let back = read_manifest(&manifest).unwrap();
    assert_eq!(back, vec![dir.path().join("a/x.omf"), dir.path().join("y.omf")]);
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let spec = NetworkSpec::uniform(6, 4, 5, 3, 7);
    let params = ModelParams::init(&spec, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&params, 1.25, &path).unwrap();
    let (back, loss) = load_checkpoint(&path).unwrap();
    assert_eq!(loss, 1.25);
    assert_eq!(back.tensors(), params.tensors());
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().class(), "corruption");
}
