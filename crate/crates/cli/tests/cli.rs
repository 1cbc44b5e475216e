use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nnid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnid"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn nnid")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nnid(dir, args);
    assert!(
        out.status.success(),
        "nnid {args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    nnid(dir, args).status.code().expect("exit code")
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn corpus(dir: &Path, count: &str, w: &str, h: &str) {
    ok(dir, &["synth", "--out", "mothers", "--count", count, "--width", w, "--height", h]);
}

#[test]
fn single_image_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d, "1", "96", "80");
    ok(d, &["costmap", "mothers/mother_00.pgm", "-o", "m.cost"]);
    let raw = fs::read(d.join("m.cost")).unwrap();
    assert_eq!(&raw[..8], b"NNIDCST1");
    assert_eq!(raw.len(), 16 + 4 * 96 * 80);

    ok(d, &["hist", "m.cost", "-o", "h.json", "--bins", "32", "--lo", "-1", "--hi", "4"]);
    let h = json(d.join("h.json"));
    let counts = h["counts"].as_array().unwrap();
    assert_eq!(counts.len(), 33);
    assert_eq!(counts.iter().map(|c| c.as_u64().unwrap()).sum::<u64>(), 96 * 80);
    assert_eq!(h["spec"]["bin_count"], 32);

    let stdout = ok(
        d,
        &[
            "crop", "m.cost", "--size", "32", "--stride", "2", "-o", "c.json", "--image", "mothers/mother_00.pgm",
            "--recompute-final", "--write-crop", "crop.png",
        ],
    );
    assert!(stdout.starts_with("x="));
    let c = json(d.join("c.json"));
    assert_eq!(c["size"], 32);
    assert_eq!(c["x"].as_u64().unwrap() % 2, 0);
    assert!(c["distance"].as_f64().unwrap() >= 0.0);
    assert!(c["recomputed_distance"].as_f64().is_some());
    assert!(d.join("crop.png").exists());

    let out = ok(d, &["embed", "mothers/mother_00.pgm", "m.cost", "--alpha", "0.4", "--seed", "5", "-o", "s.pgm"]);
    assert!(out.contains("realized_bits="));
    let a = fs::read(d.join("s.pgm")).unwrap();
    ok(d, &["--seed", "5", "embed", "mothers/mother_00.pgm", "m.cost", "--alpha", "0.4", "-o", "s2.pgm"]);
    assert_eq!(a, fs::read(d.join("s2.pgm")).unwrap());
    ok(d, &["embed", "mothers/mother_00.pgm", "m.cost", "--alpha", "0.4", "--seed", "6", "-o", "s3.pgm"]);
    assert_ne!(a, fs::read(d.join("s3.pgm")).unwrap());
}

fn raw_map(path: &Path, w: u32, h: u32, values: &[f32]) {
    let mut bytes = b"NNIDCST1".to_vec();
    bytes.extend_from_slice(&w.to_le_bytes());
    bytes.extend_from_slice(&h.to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).unwrap();
}

#[test]
fn dconv_places_taps_at_dilated_offsets() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut z = vec![0f32; 15 * 15];
    z[7 * 15 + 7] = 1.0;
    raw_map(&d.join("z.raw"), 15, 15, &z);
    let k: Vec<f32> = (1..=9).map(|v| v as f32).collect();
    raw_map(&d.join("k.raw"), 3, 3, &k);
    ok(d, &["dconv", "--input", "z.raw", "--kernel", "k.raw", "--dilation", "3", "-o", "y.raw"]);
    let y = fs::read(d.join("y.raw")).unwrap();
    let at = |r: usize, c: usize| {
        let o = 16 + 4 * (r * 15 + c);
        f32::from_le_bytes(y[o..o + 4].try_into().unwrap())
    };
    // out(x) = sum z(x - d i) k(i): the impulse at 7 lands at 7 + 3 i.
    assert_eq!(at(10, 10), 9.0);
    assert_eq!(at(4, 4), 1.0);
    assert_eq!(at(4, 10), 3.0);
    assert_eq!(at(7, 7), 5.0);
    assert_eq!(at(8, 7), 0.0);

    raw_map(&d.join("k2.raw"), 2, 2, &[1.0; 4]);
    assert_eq!(code(d, &["dconv", "--input", "z.raw", "--kernel", "k2.raw", "-o", "y.raw"]), 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // Missing input file: data error.
    assert_eq!(code(d, &["costmap", "nope.pgm", "-o", "x.cost"]), 3);
    // Unknown flag: usage error.
    assert_eq!(code(d, &["costmap", "--bogus"]), 2);
    // Image too small for the wavelet filters.
    corpus(d, "1", "8", "8");
    assert_eq!(code(d, &["costmap", "mothers/mother_00.pgm", "-o", "x.cost"]), 2);
    assert_eq!(code(d, &["--scale", "0", "synth", "--out", "m2", "--count", "1"]), 2);
    // Corrupt cost map.
    fs::write(d.join("bad.cost"), b"NOTACOST").unwrap();
    assert_eq!(code(d, &["crop", "bad.cost", "--size", "4", "-o", "c.json"]), 3);
}

fn write_script(path: &Path, body: &str) {
    fs::write(path, format!("#!/bin/sh\n{body}\n")).unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o755)).unwrap();
    }
}

#[test]
fn pipeline_and_calibration() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d, "4", "160", "128");
    let out = ok(d, &["--seed", "3", "--scale", "0.01", "build-nnid", "--mothers", "mothers", "--out", "data", "--sizes", "32,64", "--stride", "4", "--random-crops", "4"]);
    assert!(out.contains("UNI_32"));
    let m = json(d.join("data/UNI_32/manifest.json"));
    assert_eq!(m["entries"].as_array().unwrap().len(), 4);
    assert!(!m["notes"].as_array().unwrap().is_empty());
    let splits = &m["splits"];
    let total: usize = ["train", "val", "test"].iter().map(|k| splits[k].as_array().unwrap().len()).sum();
    assert_eq!(total, 4);

    assert_eq!(code(d, &["--scale", "0.01", "build-nnid", "--mothers", "mothers", "--out", "strict", "--sizes", "32", "--strict-splits"]), 3);

    ok(d, &["--seed", "3", "embed", "--manifest", "data/UNI_32/manifest.json", "--alpha-table", "32=0.4,64=0.3"]);
    ok(d, &["--seed", "3", "embed", "--manifest", "data/UNI_64/manifest.json", "--alpha-table", "32=0.4,64=0.3"]);
    let m = json(d.join("data/UNI_32/manifest.json"));
    for e in m["entries"].as_array().unwrap() {
        assert_eq!(e["alpha"], 0.4);
        assert!(d.join("data/UNI_32").join(e["stego_path"].as_str().unwrap()).exists());
    }

    let report = ok(d, &["report", "--manifest", "data/UNI_32/manifest.json", "--manifest", "data/UNI_64/manifest.json", "-o", "r.json"]);
    assert!(report.contains("UNI_32") && report.contains("UNI_64"));
    assert_eq!(json(d.join("r.json")).as_array().unwrap().len(), 2);

    ok(d, &["--seed", "3", "build-multi", "--uni", "data/UNI_32/manifest.json", "--uni", "data/UNI_64/manifest.json", "--out", "data/MULTI", "--pairs-per-dim", "2"]);
    let multi = json(d.join("data/MULTI/manifest.json"));
    let entries = multi["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 4);
    for e in entries {
        assert!(d.join("data/MULTI").join(e["cover_path"].as_str().unwrap()).exists());
    }
    assert_eq!(code(d, &["build-multi", "--uni", "data/UNI_32/manifest.json", "--out", "m3", "--pairs-per-dim", "50"]), 3);

    // Synthetic detector: acc = 0.5 + alpha, no images needed.
    ok(d, &["calibrate", "--manifest", "data/UNI_32/manifest.json", "--dim", "32", "--detector", "synthetic", "--tol", "0.002", "-o", "cal.json"]);
    let cal = json(d.join("cal.json"));
    assert!((cal["alpha"].as_f64().unwrap() - 0.26).abs() <= 0.002);
    assert_eq!(cal["converged"], true);

    // External stub: acc = 0.5 + alpha / 2, and it must see every stego.
    write_script(
        &d.join("det.sh"),
        "n=$(wc -l < \"$1\"); [ \"$n\" -eq 4 ] || exit 7\necho training\nawk -v a=\"$2\" 'BEGIN { printf \"accuracy=%.6f\\n\", 0.5 + a / 2 }'",
    );
    let template = format!("cmd:{}/det.sh {{stegos}} {{alpha}}", d.display());
    ok(d, &["calibrate", "--manifest", "data/UNI_32/manifest.json", "--dim", "32", "--detector", &template, "--tol", "0.002", "-o", "cal2.json"]);
    let cal = json(d.join("cal2.json"));
    assert!((cal["alpha"].as_f64().unwrap() - 0.52).abs() <= 0.004 + 1e-9);

    // Budget too small: convergence failure, result still written.
    assert_eq!(
        code(d, &["calibrate", "--manifest", "data/UNI_32/manifest.json", "--dim", "32", "--detector", "synthetic", "--tol", "0.0001", "--max-iter", "3", "-o", "cal3.json"]),
        4
    );
    assert_eq!(json(d.join("cal3.json"))["converged"], false);

    // Detector that fails, and one whose output is malformed.
    write_script(&d.join("fail.sh"), "echo boom; exit 5");
    let t = format!("cmd:{}/fail.sh", d.display());
    assert_eq!(code(d, &["calibrate", "--manifest", "data/UNI_32/manifest.json", "--dim", "32", "--detector", &t, "-o", "x.json"]), 3);
    write_script(&d.join("junk.sh"), "echo accuracy=high");
    let t = format!("cmd:{}/junk.sh", d.display());
    assert_eq!(code(d, &["calibrate", "--manifest", "data/UNI_32/manifest.json", "--dim", "32", "--detector", &t, "-o", "x.json"]), 3);
    assert_eq!(code(d, &["calibrate", "--manifest", "data/UNI_32/manifest.json", "--dim", "32", "--detector", "oracle", "-o", "x.json"]), 2);
}

#[test]
fn build_is_thread_count_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d, "3", "128", "96");
    for (threads, out) in [("1", "a"), ("4", "b")] {
        ok(d, &["--threads", threads, "--seed", "9", "build-nnid", "--mothers", "mothers", "--out", out, "--sizes", "32,48", "--stride", "3"]);
        ok(d, &["--threads", threads, "embed", "--manifest", &format!("{out}/UNI_32/manifest.json"), "--alpha-table", "32=0.4"]);
    }
    for rel in ["UNI_32/manifest.json", "UNI_48/manifest.json"] {
        assert_eq!(fs::read(d.join("a").join(rel)).unwrap(), fs::read(d.join("b").join(rel)).unwrap());
    }
    for i in 0..3 {
        let rel = format!("UNI_32/stegos/mother_{i:02}_32.pgm");
        assert_eq!(fs::read(d.join("a").join(&rel)).unwrap(), fs::read(d.join("b").join(&rel)).unwrap());
    }
}
