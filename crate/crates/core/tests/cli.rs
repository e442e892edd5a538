use std::path::Path;
use std::process::{Command, Output};

use lumen::dataset::{EnvmapManifest, Split};
use lumen::envmap::{solid_angle_weights, EnvMap};

fn lumen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lumen"))
        .current_dir(dir)
        .env_remove("LUMEN_THREADS")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = lumen(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Weighted mean absolute difference of `log(1 + x)` over all channels.
fn log_l1(a: &EnvMap, b: &EnvMap) -> f64 {
    let w = solid_angle_weights(a.height(), a.width()).unwrap().to_vec();
    let num: f64 = a
        .data()
        .chunks(3)
        .zip(b.data().chunks(3))
        .zip(&w)
        .map(|((p, q), w)| w * p.iter().zip(q).map(|(x, y)| (x.ln_1p() - y.ln_1p()).abs()).sum::<f64>())
        .sum();
    num / (3.0 * w.iter().sum::<f64>())
}

#[test]
fn selftest_lists_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["selftest"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 5, "{text}");
    assert!(text.lines().all(|l| l.starts_with("[pass]")), "{text}");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = lumen(dir.path(), &["gen-scenes", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(lumen(dir.path(), &["project-sh", "--envmap", "x.pfm", "--degree", "-3"]).status.code(), Some(2));
    assert_eq!(lumen(dir.path(), &["--threads", "0", "selftest"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = lumen(dir.path(), &["project-sh", "--envmap", "missing.pfm", "--degree", "2"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error:") && err.contains("missing.pfm"));
}

#[test]
fn encode_decode_round_trip_stays_within_the_training_loss() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--threads", "1", "gen-scenes", "--count", "6", "--seed", "2", "--height", "16", "--out", "scenes"]);
    ok(d, &["--threads", "1", "augment", "--scenes", "scenes", "--per-scene", "1", "--seed", "3", "--out", "env"]);
    ok(
        d,
        &[
            "--threads", "1", "train-ae", "--data", "env", "--latent", "16", "--epochs", "300", "--lr", "0.01",
            "--batch-size", "8", "--seed", "4", "--out", "ae",
        ],
    );
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("ae/run.json")).unwrap()).unwrap();
    let bound = run["results"]["best_train_loss"].as_f64().unwrap();
    assert_eq!(run["command"], "train-ae");
    let outputs = run["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|o| o["path"].as_str().unwrap().ends_with("ae.lpck") && o["sha256"].as_str().unwrap().len() == 64));

    let manifest = EnvmapManifest::load(&d.join("env")).unwrap();
    let (_, row) = manifest.rows_in(Split::Train).next().unwrap();
    ok(d, &["encode", "--ae", "ae/ae.lpck", "--envmap", &format!("env/{}", row.file), "--out", "z.json"]);
    let code: Vec<f32> = serde_json::from_slice(&std::fs::read(d.join("z.json")).unwrap()).unwrap();
    assert_eq!(code.len(), 16);
    ok(d, &["decode", "--ae", "ae/ae.lpck", "--code", "z.json", "--out", "back.pfm"]);

    let original = EnvMap::read_pfm(d.join("env").join(&row.file)).unwrap();
    let back = EnvMap::read_pfm(d.join("back.pfm")).unwrap();
    let loss = log_l1(&back, &original);
    assert!(loss <= 2.0 * bound, "round trip {loss} vs trained {bound}");
}
