use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use leocsi_cli::run::Manifest;

fn leocsi(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leocsi"))
        .args(["--preset", "desk", "--out"])
        .arg(out)
        .args([
            "--set",
            "data.train_count=48",
            "--set",
            "data.test_count=20",
            "--set",
            "train.max_steps=4",
            "--set",
            "train.batch_size=16",
            "--threads",
            "2",
        ])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> (String, PathBuf) {
    let o = leocsi(out, args);
    let stdout = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(
        o.status.success(),
        "{args:?} failed: {stdout}\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let run = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run: "))
        .map(PathBuf::from)
        .expect("run directory printed");
    (stdout, run)
}

fn manifest(run: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn prediction_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let (_, gen) = ok(out, &["generate"]);
    let (train, test) = (gen.join("train"), gen.join("test"));
    assert!(train.join("meta.json").exists() && test.join("data.bin").exists());

    let (_, pre) = ok(out, &["pretrain", "--data", s(&train)]);
    let (stdout, cp) = ok(
        out,
        &["train-cp", "--data", s(&train), "--pretrained", s(&pre.join("model"))],
    );
    assert!(stdout.contains("trained 4 steps"), "{stdout}");
    assert!(cp.join("checkpoint/model.json").exists());
    let csv = fs::read_to_string(cp.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,epoch,loss"));
    assert_eq!(csv.lines().count(), 5);

    let m = manifest(&cp);
    assert_eq!(m.status, "ok");
    assert_eq!(m.command, "train-cp");
    assert!(m.inputs.keys().any(|k| k.ends_with("data.bin")));
    assert!(m.outputs.contains_key("loss.csv"));
    assert!(m.outputs.values().all(|h| h.starts_with("sha256:") && h.len() == 7 + 64));

    let (stdout, ev) = ok(out, &["eval", "--data", s(&test), "--model", s(&cp.join("model"))]);
    assert!(stdout.starts_with("cpllm nmse_db "), "{stdout}");
    assert!(ev.join("eval.json").exists());
    let (stdout, _) = ok(out, &["eval", "--data", s(&test), "--baseline", "persistence"]);
    assert!(stdout.starts_with("persistence nmse_db "), "{stdout}");

    let (stdout, sw) = ok(
        out,
        &[
            "sweep",
            "--model",
            s(&cp.join("model")),
            "--set",
            "sweep.values=[10,60]",
            "--set",
            "sweep.count=6",
        ],
    );
    assert!(stdout.contains("velocity_kmh"));
    let rows = fs::read_to_string(sw.join("results.csv")).unwrap();
    assert_eq!(rows.lines().next(), Some("label,sweep_var,value,metric,seed"));
    // cpllm, persistence and ar at two points
    assert_eq!(rows.lines().count(), 1 + 6);
    assert!(sw.join("results.json").exists());
}

#[test]
fn beamforming_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let (_, gen) = ok(out, &["generate"]);
    let (_, bf) = ok(out, &["train-bf", "--data", s(&gen.join("train"))]);
    let test = gen.join("test");
    let (stdout, _) = ok(out, &["eval", "--data", s(&test), "--model", s(&bf.join("model"))]);
    assert!(stdout.starts_with("bfllm sum_rate "), "{stdout}");
    let (stdout, _) = ok(out, &["eval", "--data", s(&test), "--baseline", "mrt-outdated"]);
    assert!(stdout.starts_with("mrt_outdated sum_rate "), "{stdout}");
}

#[test]
fn reruns_from_a_manifest_reproduce_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let (_, a) = ok(out, &["generate", "--seed", "5"]);
    let (_, b) = ok(out, &["generate", "--seed", "5"]);
    assert_ne!(a, b);
    assert!(a.file_name().unwrap().to_str().unwrap().contains("-seed5-generate"));
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma.outputs, mb.outputs);

    let o = Command::new(env!("CARGO_BIN_EXE_leocsi"))
        .args(["--out", s(out), "--config", s(&a.join("manifest.json")), "generate"])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let c = String::from_utf8_lossy(&o.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("run: ").map(PathBuf::from))
        .unwrap();
    assert_eq!(manifest(&c).outputs, ma.outputs);
    assert_eq!(manifest(&c).config, ma.config);

    let (_, d) = ok(out, &["generate", "--seed", "6"]);
    assert_ne!(manifest(&d).outputs, ma.outputs);
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    assert_eq!(leocsi(out, &["generate", "--set", "scenario.bogus=1"]).status.code(), Some(2));
    assert_eq!(leocsi(out, &["generate", "--set", "train.lr=-1"]).status.code(), Some(2));
    let bad = out.join("bad.json");
    fs::write(&bad, "{\"scenario\": {\"carrier_hz\": \"fast\"}}").unwrap();
    assert_eq!(leocsi(out, &["--config", s(&bad), "generate"]).status.code(), Some(2));

    let missing = out.join("missing");
    let o = leocsi(out, &["eval", "--data", s(&missing), "--baseline", "ar"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(String::from_utf8_lossy(&o.stderr).trim().lines().count(), 1);

    let (_, gen) = ok(out, &["generate"]);
    let (_, cp) = ok(out, &["train-cp", "--data", s(&gen.join("train"))]);
    let (_, other) = ok(out, &["generate", "--set", "scenario.num_devices=4"]);
    let o = leocsi(
        out,
        &["eval", "--data", s(&other.join("test")), "--model", s(&cp.join("model"))],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let o = leocsi(
        out,
        &["train-cp", "--data", s(&gen.join("train")), "--set", "train.lr=1e300"],
    );
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let failed = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir() && p.join("manifest.json").exists())
        .map(|p| manifest(&p))
        .filter(|m| m.status.starts_with("failed"))
        .count();
    assert!(failed >= 2);
}

#[test]
fn grad_check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = leocsi(tmp.path(), &["grad-check"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    for line in stdout.lines().filter(|l| l.contains("max relative error")) {
        let e: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(e < 1e-4, "{line}");
    }
    assert_eq!(stdout.lines().filter(|l| l.contains("max relative error")).count(), 2);
}
