use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.toml")
}

fn bsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsr"))
        .arg("--config")
        .arg(config())
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bsr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    bsr(args).status.code().expect("exit code")
}

fn blobs_of(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn stagewise_run_matches_one_shot() {
    let tmp = tempfile::tempdir().unwrap();
    let one = tmp.path().join("one");
    let staged = tmp.path().join("staged");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    ok(&["--out", &s(&one), "bsr"]);

    let o = s(&staged);
    ok(&["--out", &o, "train"]);
    ok(&["--out", &o, "select-rank", "--ckpt", &s(&staged.join("trained"))]);
    ok(&["--out", &o, "regularize", "--ckpt", &s(&staged.join("rank_selected"))]);
    ok(&["--out", &o, "compress", "--ckpt", &s(&staged.join("regularized"))]);
    ok(&["--out", &o, "finetune", "--ckpt", &s(&staged.join("factorized"))]);
    let q = ok(&["--out", &o, "quantize", "--ckpt", &s(&staged.join("finetuned"))]);
    assert!(q.starts_with("setting,acc32,mem32,acc16,mem16,acc8,mem8,acc4,mem4"), "{q}");

    for stage in ["trained", "rank_selected", "regularized", "factorized", "finetuned", "quantized-8bit"] {
        assert_eq!(blobs_of(&one.join(stage)), blobs_of(&staged.join(stage)), "{stage}");
    }
}

#[test]
fn reports_embed_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&["--out", out, "--seed", "3", "--lambda0", "0.25", "train"]);
    ok(&["--out", out, "--seed", "3", "--lambda0", "0.25", "--cd", "0.45", "select-rank", "--ckpt", &format!("{out}/trained"), "--baseline", "energy"]);
    let text = std::fs::read_to_string(tmp.path().join("search.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["config"]["seed"], 3);
    assert_eq!(v["config"]["schedule"]["lambda0"], 0.25);
    assert_eq!(v["config"]["search"]["c_d"], 0.45);
    let c = v["result"]["best"]["c"].as_f64().unwrap();
    assert!((0.45 - 0.1..=0.45).contains(&c), "{c}");
    let baseline = std::fs::read_to_string(tmp.path().join("baseline.csv")).unwrap();
    assert_eq!(baseline.lines().count(), 3, "{baseline}");
    assert!(baseline.contains("\nenergy,"));
}

#[test]
fn ranks_file_overrides_checkpoint_ranks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&["--out", out, "train"]);
    let ranks = tmp.path().join("r.json");
    std::fs::write(&ranks, "[3, 2, 1]").unwrap();
    let report = ok(&["--out", out, "compress", "--ckpt", &format!("{out}/trained"), "--ranks", ranks.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["ranks"], serde_json::json!([3, 2, 1]));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    // Missing dataset and missing checkpoint are usage errors.
    assert_eq!(code(&["--out", out, "--mnist", "/nonexistent/mnist", "train"]), 2);
    assert_eq!(code(&["--out", out, "evaluate", "--ckpt", "/nonexistent/ckpt"]), 2);
    // Invalid configuration values and malformed command lines.
    assert_eq!(code(&["--out", out, "--cd", "1.5", "train"]), 2);
    assert_eq!(code(&["--out", out, "--cd", "0.3,0.5", "train"]), 2);
    assert_eq!(code(&["--out", out, "frobnicate"]), 2);
    assert_eq!(code(&["--out", out, "compress"]), 2);

    ok(&["--out", out, "train"]);
    // The band is narrower than the ratio grid spacing.
    let ckpt = format!("{out}/trained");
    assert_eq!(
        code(&["--out", out, "--tau", "0.0001", "--cd", "0.5", "--step", "1", "--beam", "1", "select-rank", "--ckpt", &ckpt]),
        3
    );
    // A trained checkpoint carries no ranks.
    assert_eq!(code(&["--out", out, "compress", "--ckpt", &ckpt]), 2);
}

#[test]
fn sweep_writes_one_curve_row_per_target() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let stdout = ok(&["--out", out, "--cd", "0.3,0.5", "bsr"]);
    let curve = std::fs::read_to_string(tmp.path().join("curve.csv")).unwrap();
    assert_eq!(curve, stdout);
    let rows: Vec<&str> = curve.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0.3,") && rows[1].starts_with("0.5,"));
    assert!(tmp.path().join("cd-0.3/finetuned/manifest.json").exists());
    assert!(tmp.path().join("cd-0.5/finetuned/manifest.json").exists());
}
