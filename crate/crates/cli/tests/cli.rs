use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rsbp::eval::{mean_std, parse_per_image_csv, parse_summary_csv};
use rsbp::geometry::{Unit, ViewGeometry};
use rsbp::io::{load_checkpoint, sinogram_container};
use rsbp::nn::{is_running_stat, model::init_params, ModelParams};
use rsbp::phantom::disk;
use rsbp::physics::{simulate_sinogram, NoiseSpec, PhysicsConstants};

const SMALL: &str = r#"{
  "geometry": {"n_pixels": 24, "n_views": 4},
  "phantom": {"count": 4, "split_ratio": 0.5, "seed": 3},
  "model": {"depth": 1, "hidden": 2, "base_width": 2},
  "train": {"patch_in": 12, "patch_out": 8, "batch_size": 2, "max_steps": 3},
  "eval": {"methods": ["FBP"], "iterative": {"iterations": 3, "reg_weight": 50}}
}"#;

fn rsbp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsbp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn gen(dir: &Path, cfg: &Path, out: &str) -> PathBuf {
    let data = dir.join(out);
    let o = rsbp(&["gen", "--config", s(cfg), "--out", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    data
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_byte_reproducible_and_counts_match() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "c.json", SMALL);
    let a = gen(t.path(), &cfg, "a");
    let b = gen(t.path(), &cfg, "b");
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    // 4 phantoms x 4 files + manifest
    assert_eq!(fa.len(), 17);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["train"].as_array().unwrap().len(), 2);
    assert_eq!(m["test"].as_array().unwrap().len(), 2);
}

#[test]
fn seed_flag_overrides_config() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "c.json", SMALL);
    let a = gen(t.path(), &cfg, "a");
    let b = t.path().join("b");
    assert!(rsbp(&["gen", "--config", s(&cfg), "--seed", "99", "--out", s(&b)]).status.success());
    assert_ne!(
        fs::read(a.join("train/0000_phantom.rsbp")).unwrap(),
        fs::read(b.join("train/0000_phantom.rsbp")).unwrap()
    );
}

#[test]
fn malformed_config_exits_2_without_output() {
    let t = tempfile::tempdir().unwrap();
    for (i, text) in [r#"{"geometry": {"pixels": 3}}"#, "{", r#"{"physics": {"lambda0": 0}}"#]
        .iter()
        .enumerate()
    {
        let cfg = write_config(t.path(), &format!("bad{i}.json"), text);
        let out = t.path().join(format!("out{i}"));
        let o = rsbp(&["gen", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "{text}");
        assert!(!out.exists());
    }
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "c.json", SMALL);
    let data = gen(t.path(), &cfg, "data");
    let text = SMALL.replace(r#""max_steps": 3"#, r#""max_steps": 3, "learning_rate": 0"#);
    let cfg0 = write_config(t.path(), "lr0.json", &text);
    let out = t.path().join("ck");
    let o = rsbp(&[
        "train", "--config", s(&cfg0), "--data", s(&data), "--out", s(&out), "--variant", "SBP_CNN",
        "--verify",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (mc, trained) = load_checkpoint::<f64>(out.join("SBP_CNN.rsbp")).unwrap();
    let init: ModelParams<f64> = init_params(&mc, 0).unwrap();
    for (name, t) in init.iter().filter(|(n, _)| !is_running_stat(n)) {
        assert_eq!(trained.get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn seeded_training_reruns_identically() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "c.json", SMALL);
    let data = gen(t.path(), &cfg, "data");
    let run = |out: &str| {
        let out = t.path().join(out);
        let o = rsbp(&[
            "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--seed", "7",
            "--verify",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files(&out)
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let csv = String::from_utf8(a.iter().find(|(p, _)| p.ends_with("RSBP_CNN_loss.csv")).unwrap().1.clone()).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn geometry_mismatch_names_both_shapes() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "c.json", SMALL);
    let data = gen(t.path(), &cfg, "data");
    let other = write_config(
        t.path(),
        "o.json",
        &SMALL.replace(r#""n_views": 4"#, r#""n_views": 8"#),
    );
    let o = rsbp(&["train", "--config", s(&other), "--data", s(&data), "--out", s(&t.path().join("x"))]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("4 views") && err.contains("8 views"), "{err}");
}

fn write_sinogram(dir: &Path, n: usize, m: usize, value_hu: f64) -> PathBuf {
    let geom = ViewGeometry::new(n, m).unwrap();
    let img = disk(n, n as f64 / 4.0, value_hu, Unit::Hu, 4);
    let sino = simulate_sinogram(&img, &geom, &PhysicsConstants::default(), NoiseSpec::off()).unwrap();
    let p = dir.join(format!("sino_{value_hu}.rsbp"));
    sinogram_container(&sino).write(&p).unwrap();
    p
}

fn pgm_pixels(path: &Path) -> (usize, Vec<u8>) {
    let b = fs::read(path).unwrap();
    let header = String::from_utf8_lossy(&b[..b.len().min(20)]).to_string();
    let side: usize = header.split_whitespace().nth(1).unwrap().parse().unwrap();
    (side, b[b.len() - side * side..].to_vec())
}

#[test]
fn dense_disk_exports_mid_gray_and_zero_exports_black() {
    let t = tempfile::tempdir().unwrap();
    let input = write_sinogram(t.path(), 32, 90, 1000.0);
    let out = t.path().join("r");
    let o = rsbp(&["reconstruct", "--method", "FBP", "--input", s(&input), "--out", s(&out), "--pgm"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (side, px) = pgm_pixels(&out.join("FBP.pgm"));
    assert_eq!(side, 32);
    let centre = px[16 * 32 + 16] as i32;
    assert!((centre - 128).abs() <= 6, "{centre}");
    assert!(px[0] < 10 && px[32 * 32 - 1] < 10);
    let first = fs::read(out.join("FBP.rsbp")).unwrap();
    assert!(rsbp(&["reconstruct", "--method", "FBP", "--input", s(&input), "--out", s(&out), "--pgm"]).status.success());
    assert_eq!(fs::read(out.join("FBP.rsbp")).unwrap(), first);

    let zero = write_sinogram(t.path(), 16, 4, 0.0);
    let out0 = t.path().join("z");
    assert!(rsbp(&["reconstruct", "--method", "FBP", "--input", s(&zero), "--out", s(&out0), "--pgm"]).status.success());
    assert!(pgm_pixels(&out0.join("FBP.pgm")).1.iter().all(|&v| v == 0));
}

#[test]
fn neural_reconstruction_without_params_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let input = write_sinogram(t.path(), 16, 4, 1000.0);
    let o = rsbp(&["reconstruct", "--method", "RSBP_CNN", "--input", s(&input), "--out", s(&t.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--params"));
}

#[test]
fn eval_tables_and_missing_checkpoints() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "c.json", SMALL);
    let data = gen(t.path(), &cfg, "data");
    let out = t.path().join("e1");
    let o = rsbp(&["eval", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = parse_summary_csv(&fs::read_to_string(out.join("summary.csv")).unwrap()).unwrap();
    assert_eq!(summary.len(), 1);

    let two = write_config(
        t.path(),
        "two.json",
        &SMALL.replace(r#"["FBP"]"#, r#"["FBP", "iterative-baseline", "SBP_CNN"]"#),
    );
    let out = t.path().join("e2");
    let o = rsbp(&["eval", "--config", s(&two), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("SBP_CNN"));
    let summary = parse_summary_csv(&fs::read_to_string(out.join("summary.csv")).unwrap()).unwrap();
    assert_eq!(summary.len(), 2);
    let rows = parse_per_image_csv(&fs::read_to_string(out.join("per_image.csv")).unwrap()).unwrap();
    for row in &summary {
        let vals: Vec<f64> = rows.iter().filter(|r| r.0 == row.method).map(|r| r.2).collect();
        let (mean, std) = mean_std(&vals);
        assert_eq!(vals.len(), row.n);
        assert!((mean - row.mean).abs() < 1e-12 && (std - row.std).abs() < 1e-12);
    }
}

#[test]
fn eval_with_trained_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let text = SMALL.replace(r#"["FBP"]"#, r#"["FBP", "FBP_CNN"]"#);
    let cfg = write_config(t.path(), "c.json", &text);
    let data = gen(t.path(), &cfg, "data");
    let ck = t.path().join("ck");
    let o = rsbp(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ck), "--variant", "FBP_CNN"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = t.path().join("e");
    let o = rsbp(&[
        "eval", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--checkpoint",
        s(&ck.join("FBP_CNN.rsbp")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FBP_CNN"));
}

#[test]
fn inspect_prints_headers() {
    let t = tempfile::tempdir().unwrap();
    let input = write_sinogram(t.path(), 16, 4, 1000.0);
    let o = rsbp(&["inspect", s(&input)]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("dims: [4, 16]") && text.contains("sinogram"), "{text}");
    let bogus = write_config(t.path(), "x.rsbp", "not a container");
    assert_eq!(rsbp(&["inspect", s(&bogus)]).status.code(), Some(3));
}
