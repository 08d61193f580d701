use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nnrw::{LayerSpec, ModelContainer, WeightTensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use tempfile::TempDir;

fn nnrw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnrw"))
        .args(args)
        .env("NNRW_THREADS", "1")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn tensor(rng: &mut StdRng, name: &str, shape: [usize; 4]) -> WeightTensor {
    let normal = Normal::new(0.0f32, 0.05).unwrap();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| format!("{:.2e}", normal.sample(rng)).parse().unwrap())
        .collect();
    WeightTensor::new(name, shape.to_vec(), data).unwrap()
}

/// Two conv layers, weights rounded to three significant digits.
fn write_model(dir: &Path) -> PathBuf {
    let mut rng = StdRng::seed_from_u64(7);
    let tensors = vec![
        tensor(&mut rng, "conv1.weight", [8, 3, 3, 3]),
        tensor(&mut rng, "conv2.weight", [32, 16, 3, 3]),
    ];
    let manifest = (0..2)
        .map(|i| LayerSpec {
            weight_tensor: i,
            stride: 1,
            padding: 1,
        })
        .collect();
    let path = dir.join("m.nnrw");
    std::fs::write(&path, ModelContainer::new(tensors, manifest).unwrap().to_bytes().unwrap()).unwrap();
    path
}

fn write_calib(dir: &Path) -> PathBuf {
    let mut rng = StdRng::seed_from_u64(9);
    let tensors = (0..12)
        .map(|g| {
            let data = (0..16 * 6 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
            WeightTensor::new(format!("input_{g:04}"), vec![16, 6, 6], data).unwrap()
        })
        .collect();
    let path = dir.join("calib.nnrw");
    std::fs::write(&path, ModelContainer::new(tensors, vec![]).unwrap().to_bytes().unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn seal_then_verify_is_intact() {
    let dir = TempDir::new().unwrap();
    let m = write_model(dir.path());
    let sealed = dir.path().join("sealed.nnrw");
    let o = nnrw(&["seal", "-i", s(&m), "-o", s(&sealed), "--layer", "-1", "--channels", "32"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = nnrw(&["verify", "-i", s(&sealed)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("verdict=INTACT "));
    assert!(String::from_utf8_lossy(&o.stderr).contains("INTACT"));
}

#[test]
fn flipped_byte_is_tampered() {
    let dir = TempDir::new().unwrap();
    let m = write_model(dir.path());
    let sealed = dir.path().join("sealed.nnrw");
    assert_eq!(code(&nnrw(&["seal", "-i", s(&m), "-o", s(&sealed), "--channels", "32"])), 0);
    let mut bytes = std::fs::read(&sealed).unwrap();
    let at = bytes.len() - 1000;
    bytes[at] ^= 0x10;
    std::fs::write(&sealed, bytes).unwrap();
    let o = nnrw(&["verify", "-i", s(&sealed)]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).starts_with("verdict=TAMPERED"));
}

#[test]
fn unsealed_model_exits_one() {
    let dir = TempDir::new().unwrap();
    let m = write_model(dir.path());
    let o = nnrw(&["verify", "-i", s(&m)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).starts_with("verdict=NOT_SEALED"));
}

#[test]
fn embed_extract_restores_the_file() {
    let dir = TempDir::new().unwrap();
    let m = write_model(dir.path());
    let marked = dir.path().join("marked.nnrw");
    let restored = dir.path().join("restored.nnrw");
    let o = nnrw(&[
        "embed", "-i", s(&m), "-o", s(&marked), "--layer", "1", "--channels", "32", "--message", "c0ffee",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_ne!(std::fs::read(&marked).unwrap(), std::fs::read(&m).unwrap());
    let o = nnrw(&["extract", "-i", s(&marked), "-o", s(&restored)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "c0ffee\n");
    assert_eq!(std::fs::read(&restored).unwrap(), std::fs::read(&m).unwrap());
}

#[test]
fn message_from_file() {
    let dir = TempDir::new().unwrap();
    let m = write_model(dir.path());
    let msg = dir.path().join("msg.bin");
    std::fs::write(&msg, b"hi").unwrap();
    let marked = dir.path().join("marked.nnrw");
    let arg = format!("@{}", s(&msg));
    let o = nnrw(&["embed", "-i", s(&m), "-o", s(&marked), "--channels", "32", "--message", &arg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&nnrw(&["extract", "-i", s(&marked)])), "6869\n");
}

#[test]
fn plan_lists_every_position_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let m = write_model(dir.path());
    let calib = write_calib(dir.path());
    let args = ["plan", "-i", s(&m), "--layer", "-1", "--calib", s(&calib)];
    let first = nnrw(&args);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let csv = stdout(&first);
    let rows: Vec<&str> = csv.lines().collect();
    assert!(rows[0].starts_with("layer,c,entropy_bits"));
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[1..].iter().filter(|r| r.ends_with(",1")).count(), 1);
    assert_eq!(stdout(&nnrw(&args)), csv);
}

#[test]
fn score_reports_each_channel() {
    let dir = TempDir::new().unwrap();
    let m = write_model(dir.path());
    let calib = write_calib(dir.path());
    let report = dir.path().join("score.csv");
    let o = nnrw(&["score", "-i", s(&m), "--calib", s(&calib), "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 33);
    let mut ranks: Vec<usize> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    ranks.sort_unstable();
    assert_eq!(ranks, (0..32).collect::<Vec<_>>());
}

#[test]
fn inspect_lists_layers_and_marks() {
    let dir = TempDir::new().unwrap();
    let m = write_model(dir.path());
    let out = stdout(&nnrw(&["inspect", "-i", s(&m)]));
    assert!(out.contains("layer 1 conv2.weight stride=1 padding=1"));
    assert!(out.ends_with("marked -\n"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&nnrw(&["frobnicate"])), 1);
    assert_eq!(code(&nnrw(&["verify"])), 1);
    let dir = TempDir::new().unwrap();
    let m = write_model(dir.path());
    let out = dir.path().join("x.nnrw");
    assert_eq!(
        code(&nnrw(&["embed", "-i", s(&m), "-o", s(&out), "--message", "zz"])),
        1
    );
    assert_eq!(code(&nnrw(&["seal", "-i", s(&m), "-o", s(&out), "--layer", "5"])), 1);
    assert_eq!(code(&nnrw(&["seal", "-i", s(&m), "-o", s(&out), "--digit-pos", "7"])), 1);
    assert_eq!(code(&nnrw(&["--help"])), 0);
}
