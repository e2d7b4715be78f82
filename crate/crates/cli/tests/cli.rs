use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

fn ssdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssdc"))
        .args(args)
        .env_remove("SSDC_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ssdc(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Minimal binary PGM reader, independent of the library's.
fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let text_end = {
        let mut fields = 0;
        let mut i = 0;
        while fields < 4 {
            while bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            while !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            fields += 1;
        }
        i + 1
    };
    let header = String::from_utf8_lossy(&bytes[..text_end]).to_string();
    let f: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(f[0], "P5");
    let (w, h): (usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap());
    (h, w, bytes[text_end..].to_vec())
}

fn write_pgm(path: &Path, w: usize, h: usize, px: &[u8]) {
    let mut b = format!("P5\n{w} {h}\n255\n").into_bytes();
    b.extend_from_slice(px);
    fs::write(path, b).unwrap();
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn smoke_config(dir: &Path) -> PathBuf {
    let p = dir.join("smoke.json");
    fs::write(
        &p,
        r#"{
  "data": {"n_per_subdomain": 8, "n_target_unlabeled": 8, "n_target_eval": 8},
  "said": {"n_filters": 6},
  "model": {"d": 8},
  "train": {"burn_in_steps": 6, "mutual_steps": 6, "batch_size": 2, "ssm_step": 3}
}"#,
    )
    .unwrap();
    p
}

#[test]
fn constant_image_goes_entirely_to_ds() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("flat.pgm");
    write_pgm(&img, 16, 12, &[100; 16 * 12]);
    let out = dir.path().join("out");
    ok(&["decompose", img.to_str().unwrap(), "--mode", "hard", "--out", out.to_str().unwrap()]);
    let (_, _, di) = read_pgm(&out.join("di.pgm"));
    let (_, _, ds) = read_pgm(&out.join("ds.pgm"));
    let report = json(&out.join("decompose.json"));
    assert_eq!(report["di_offset"], 0);
    assert!(di.iter().all(|&v| v == 0), "di not zero");
    assert!(ds.iter().all(|&v| v == 100), "ds not the constant");
    for name in ["spectrum.raw", "spectrum.json", "said.raw", "said.json", "profiles.svg", "config.json"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let sidecar = json(&out.join("spectrum.json"));
    assert_eq!(sidecar["center"], "shifted");
    assert_eq!(sidecar["height"], 12);
}

#[test]
fn di_plus_ds_reconstructs_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (20, 18);
    let px: Vec<u8> = (0..w * h).map(|i| ((i * 7919 + i * i * 31) % 256) as u8).collect();
    let img = dir.path().join("noise.pgm");
    write_pgm(&img, w, h, &px);
    let out = dir.path().join("out");
    ok(&["decompose", img.to_str().unwrap(), "--mode", "hard", "--sigma-h", "0.15", "--out", out.to_str().unwrap()]);
    let report = json(&out.join("decompose.json"));
    let (di_off, ds_off) = (report["di_offset"].as_i64().unwrap(), report["ds_offset"].as_i64().unwrap());
    let (_, _, di) = read_pgm(&out.join("di.pgm"));
    let (_, _, ds) = read_pgm(&out.join("ds.pgm"));
    let worst = (0..w * h)
        .map(|i| (di[i] as i64 - di_off + ds[i] as i64 - ds_off - px[i] as i64).abs())
        .max()
        .unwrap();
    assert!(worst <= 2, "largest reconstruction error {worst} levels");
}

#[test]
fn colour_input_and_soft_mode() {
    let dir = tempfile::tempdir().unwrap();
    let side = 32;
    let mut b = format!("P6\n{side} {side}\n255\n").into_bytes();
    b.extend((0..side * side * 3).map(|i| (i * 13 % 256) as u8));
    let img = dir.path().join("rgb.ppm");
    fs::write(&img, b).unwrap();
    let out = dir.path().join("out");
    ok(&["decompose", img.to_str().unwrap(), "--mode", "soft", "--out", out.to_str().unwrap()]);
    assert_eq!(json(&out.join("decompose.json"))["mode"], "soft");

    // Soft mode needs the model's image size.
    let small = dir.path().join("small.pgm");
    write_pgm(&small, 8, 8, &[0; 64]);
    let r = ssdc(&["decompose", small.to_str().unwrap(), "--mode", "soft", "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = ssdc(&["decompose", "/nonexistent.pgm", "--out", out.to_str().unwrap()]);
    assert!(!missing.status.success());
    let img = dir.path().join("a.pgm");
    write_pgm(&img, 4, 4, &[1; 16]);
    let bad = ssdc(&["decompose", img.to_str().unwrap(), "--mode", "hard", "--sigma-h", "-1", "--out", out.to_str().unwrap()]);
    assert!(!bad.status.success());
    let mode = ssdc(&["decompose", img.to_str().unwrap(), "--mode", "medium"]);
    assert!(!mode.status.success());

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"lr": 0.1, "momentum": 0.9}}"#).unwrap();
    let r = ssdc(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.contains("train.momentum"), "{msg}");
}

#[test]
fn filterbank_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bank");
    ok(&["filterbank", "--n-filters", "4", "--size", "16", "--out", out.to_str().unwrap()]);
    let meta = json(&out.join("bank.json"));
    assert_eq!(meta["n_filters"], 4);
    let df = meta["delta_f"].as_f64().unwrap();
    assert!((df - 0.1).abs() < 1e-15);
    let sigmas = meta["sigma_list"].as_array().unwrap();
    assert_eq!(sigmas.len(), 4);
    assert!((sigmas[3][0].as_f64().unwrap() - 0.4).abs() < 1e-12);
    assert!((sigmas[3][1].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(meta["layout"], "g0,g1,g2,g3");
    assert_eq!(meta["height"], 16);
    assert_eq!(fs::metadata(out.join("bank.raw")).unwrap().len(), 4 * 4 * 16 * 16);
}

#[test]
fn train_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let run = |name: &str, extra: &[&str]| -> PathBuf {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--seed", "3", "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    for f in ["metrics.csv", "losses.svg", "student.bin", "teacher.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let (sa, sb) = (json(&a.join("summary.json")), json(&b.join("summary.json")));
    assert_eq!(sa, sb);
    assert_eq!(sa["seed"], 3);
    let resolved = json(&a.join("config.json"));
    assert_eq!(resolved["seed"], 3);
    assert_eq!(resolved["train"]["burn_in_steps"], 6);
    let manifest = json(&a.join("teacher.json"));
    let entries = manifest["params"].as_array().unwrap();
    assert_eq!(entries[0]["name"], "bb0.w");
    assert_eq!(entries[0]["offset"], 0);
    let last = entries.last().unwrap();
    let values: u64 = last["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product();
    let total = last["offset"].as_u64().unwrap() + values;
    assert_eq!(fs::metadata(a.join("teacher.bin")).unwrap().len(), 8 * total);
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "iteration,l_sup,l_dcp,l_mt,pseudo_count,eval_acc");
    assert_eq!(csv.lines().count(), 13);

    let ns = run("nosaid", &["--no-said", "--no-ssm"]);
    let s = json(&ns.join("summary.json"));
    assert_eq!(s["said"], false);
    assert_eq!(s["ssm"], false);
    assert_eq!(s["coupling"], true);
    let nc = run("nocoup", &["--no-coupling", "--mode", "free"]);
    let s = json(&nc.join("summary.json"));
    assert_eq!(s["coupling"], false);
    assert_eq!(s["mode"], "free");

    let r = ok(&["eval", "--config", cfg.to_str().unwrap(), "--seed", "3", "--checkpoint", a.join("teacher").to_str().unwrap()]);
    let printed: Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(printed, sa["final_eval"]);
}

#[test]
fn sweep_runs_each_value_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let out = dir.path().join("sweep");
    let empty = ssdc(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", "k", "--values", ""]);
    assert!(!empty.status.success());
    ok(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", "k", "--values", "3,1", "--out", out.to_str().unwrap()]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "axis,value,eval_acc,burn_in_acc,l_dcp_last10,idempotency_final");
    assert!(rows[1].starts_with("k,1,") && rows[2].starts_with("k,3,"), "{csv}");

    // A one-value sweep reproduces a plain training run.
    let single = dir.path().join("single");
    ok(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", "lambda_dcp", "--values", "10", "--out", single.to_str().unwrap()]);
    let cfg10 = dir.path().join("l10.json");
    let mut v = json(&cfg);
    v["said"]["lambda_dcp"] = 10.0.into();
    fs::write(&cfg10, v.to_string()).unwrap();
    let plain = dir.path().join("plain");
    ok(&["train", "--config", cfg10.to_str().unwrap(), "--out", plain.to_str().unwrap()]);
    assert_eq!(
        fs::read(single.join("lambda_dcp_10").join("metrics.csv")).unwrap(),
        fs::read(plain.join("metrics.csv")).unwrap()
    );
    assert_eq!(json(&single.join("lambda_dcp_10").join("summary.json")), json(&plain.join("summary.json")));
}

#[test]
fn smoke_run_of_200_steps_fits_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke200.json");
    fs::write(&cfg, r#"{"train": {"burn_in_steps": 100, "mutual_steps": 100, "checkpoint": false}}"#).unwrap();
    let start = Instant::now();
    ok(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("out").to_str().unwrap()]);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 300.0, "200-step smoke run took {secs:.0} s");
}
