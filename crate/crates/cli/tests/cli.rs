use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hpdc::depth_io::{load_depth, save_depth, DepthFormat, DepthMap};
use hpdc::trainer::synthetic_dataset;

fn hpdc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hpdc"))
}

fn run(args: &[&str]) -> Output {
    hpdc().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    ck: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("init.ck");
        let o = run(&[
            "train",
            "-c",
            s(&ck),
            "--epochs",
            "0",
            "--channels-lossy",
            "4",
            "--channels-lossless",
            "4",
            "--d",
            "256",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Fixture { dir, ck }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write_map(&self, name: &str, map: &DepthMap) -> PathBuf {
        let p = self.path(name);
        let format = if name.ends_with(".pgm") { DepthFormat::Pgm16 } else { DepthFormat::Raw16 };
        save_depth(map, &p, format).unwrap();
        p
    }
}

#[test]
fn compress_decompress_round_trip() {
    let f = Fixture::new();
    let map = synthetic_dataset(1, 90, 70, 16, 1).remove(0);
    let input = f.write_map("in.hpdm", &map);
    let a = f.path("a.hpdc");
    let b = f.path("b.hpdc");
    for out in [&a, &b] {
        let o = run(&["compress", s(&input), "-c", s(&f.ck), "-o", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("R_lossless") && text.contains("bpp"), "{text}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let back = f.path("back.hpdm");
    let o = run(&["decompress", s(&a), "-c", s(&f.ck), "-o", s(&back)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(load_depth(&back, DepthFormat::Raw16).unwrap(), map);
}

#[test]
fn divisor_comes_from_the_header() {
    let f = Fixture::new();
    let map = synthetic_dataset(1, 64, 64, 12, 2).remove(0);
    let input = f.write_map("in.pgm", &map);
    let stream = f.path("in.hpdc");
    let o = run(&["compress", s(&input), "-c", s(&f.ck), "--d", "8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = f.path("out.pgm");
    let o = run(&["decompress", s(&stream), "-c", s(&f.ck), "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(load_depth(&out, DepthFormat::Pgm16).unwrap().data(), map.data());
}

#[test]
fn constant_zero_map_is_small() {
    let f = Fixture::new();
    let map = DepthMap::new(64, 64, 16, 1000, vec![0; 64 * 64]).unwrap();
    let input = f.write_map("zero.hpdm", &map);
    let out = f.path("zero.hpdc");
    let o = run(&["compress", s(&input), "-c", s(&f.ck), "-o", s(&out)]);
    assert_eq!(code(&o), 0);
    let len = std::fs::metadata(&out).unwrap().len();
    assert!(len < 200, "{len} bytes");
}

#[test]
fn damaged_streams_are_rejected() {
    let f = Fixture::new();
    let map = synthetic_dataset(1, 64, 64, 16, 3).remove(0);
    let input = f.write_map("in.hpdm", &map);
    let stream = f.path("in.hpdc");
    assert_eq!(code(&run(&["compress", s(&input), "-c", s(&f.ck)])), 0);
    let bytes = std::fs::read(&stream).unwrap();

    let bad = f.path("bad.hpdc");
    let out = f.path("bad.hpdm");
    for pos in [0, 20, bytes.len() / 2, bytes.len() - 1] {
        let mut b = bytes.clone();
        b[pos] ^= 0x5a;
        std::fs::write(&bad, &b).unwrap();
        let _ = std::fs::remove_file(&out);
        let o = run(&["decompress", s(&bad), "-c", s(&f.ck), "-o", s(&out)]);
        match code(&o) {
            0 => assert_eq!(load_depth(&out, DepthFormat::Raw16).unwrap(), map, "byte {pos}"),
            c => assert!(c == 2 || c == 3, "byte {pos}: exit {c}"),
        }
    }
    std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(code(&run(&["decompress", s(&bad), "-c", s(&f.ck), "-o", s(&out)])), 2);
}

#[test]
fn foreign_checkpoint_is_a_verification_failure() {
    let f = Fixture::new();
    let other = f.path("other.ck");
    let o = run(&["train", "-c", s(&other), "--epochs", "0", "--channels-lossy", "4", "--seed", "9"]);
    assert_eq!(code(&o), 0);
    let map = synthetic_dataset(1, 64, 64, 16, 4).remove(0);
    let input = f.write_map("in.hpdm", &map);
    assert_eq!(code(&run(&["compress", s(&input), "-c", s(&f.ck)])), 0);
    let o = run(&["decompress", s(&f.path("in.hpdc")), "-c", s(&other)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash"));
}

#[test]
fn usage_and_data_errors() {
    let f = Fixture::new();
    assert_eq!(code(&run(&["compress"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["train", "-c", s(&f.path("x.ck")), "--epochs", "1"])), 1);

    let missing = f.path("missing.hpdm");
    let o = run(&["compress", s(&missing), "-c", s(&f.ck)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.hpdm"));

    let garbage = f.path("garbage.hpdm");
    std::fs::write(&garbage, b"not a depth map").unwrap();
    assert_eq!(code(&run(&["compress", s(&garbage), "-c", s(&f.ck)])), 2);

    let o = hpdc().env("HPDC_THREADS", "zero").arg("selftest").output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn train_resume_and_metrics() {
    let f = Fixture::new();
    let ck = f.path("t.ck");
    let csv = f.path("m.csv");
    let common = ["--synthetic", "2", "--channels-lossy", "4", "--channels-lossless", "4", "--d", "256"];
    let mut args = vec!["train", "-c", s(&ck), "--epochs", "1", "--metrics", s(&csv)];
    args.extend(common);
    assert_eq!(code(&run(&args)), 0);
    let mut args = vec!["train", "-c", s(&ck), "--resume", s(&ck), "--epochs", "2", "--metrics", s(&csv)];
    args.extend(common);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("epoch 2"));

    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,lr,R_y,R_z,R_res,D_x,D_r,L");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));
}

#[test]
fn eval_reports_table_columns() {
    let f = Fixture::new();
    let map = synthetic_dataset(1, 64, 64, 16, 5).remove(0);
    let input = f.write_map("e.hpdm", &map);
    let o = hpdc()
        .env("HPDC_THREADS", "1")
        .args(["eval", s(&input), "-c", s(&f.ck), "--synthetic", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    for col in ["R_y", "R_z", "R_lossless", "overall", "mean", "e.hpdm"] {
        assert!(text.contains(col), "{text}");
    }
}

#[test]
fn selftest_passes_and_detects_cdf_fault() {
    let o = run(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    for suite in ["gradients", "split-merge", "coder", "pmf"] {
        assert!(text.contains(suite), "{text}");
    }

    let o = run(&["selftest", "--inject-cdf-fault"]);
    assert_ne!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("FAIL") && l.contains("coder")), "{text}");
}
