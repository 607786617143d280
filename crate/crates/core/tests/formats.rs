use std::path::PathBuf;

use distinct3d::encoder::EncoderConfig;
use distinct3d::geometry::ShapeId;
use distinct3d::io::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use distinct3d::pipeline::{Checkpoint, TrainConfig};

/// FNV-1a of the committed golden checkpoint.
const GOLDEN_DIGEST: u64 = 0xb4b45b15b58e6982;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden.ckpt")
}

fn golden_source() -> Checkpoint {
    let cfg = TrainConfig {
        n_points: 32,
        encoder: EncoderConfig::micro(8),
        seed: 2024,
        ..TrainConfig::default()
    };
    Checkpoint::untrained(&cfg, (0..6).map(|i| ShapeId(format!("golden-{i}"))).collect()).unwrap()
}

/// 64-bit FNV-1a.
fn digest(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Rewrites the golden file: `GOLDEN_WRITE=1 cargo test --test formats`.
#[test]
fn golden_checkpoint_loads_with_the_recorded_digest() {
    if std::env::var_os("GOLDEN_WRITE").is_some() {
        save_checkpoint(&golden_path(), &golden_source()).unwrap();
        eprintln!("digest {:#x}", digest(&std::fs::read(golden_path()).unwrap()));
        return;
    }
    let bytes = std::fs::read(golden_path()).unwrap();
    assert_eq!(digest(&bytes), GOLDEN_DIGEST);
    let ckpt = load_checkpoint(&golden_path()).unwrap();
    assert_eq!(encode_checkpoint(&ckpt).unwrap(), bytes);
    assert_eq!(ckpt.bank.shape_ids.len(), 6);
    assert!(ckpt.params.contains("up.norm.mean"));
    // the generator is deterministic, so a fresh build reproduces the file
    assert_eq!(ckpt, golden_source());
}

#[test]
fn every_header_byte_is_checked() {
    let bytes = encode_checkpoint(&golden_source()).unwrap();
    for i in 0..16 {
        let mut bad = bytes.clone();
        bad[i] = bad[i].wrapping_add(1);
        let e = decode_checkpoint(&bad, "golden").unwrap_err().to_string();
        assert!(e.contains("byte offset"), "byte {i}: {e}");
    }
}
