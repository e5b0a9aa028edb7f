use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.ini")
}

fn veil(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_veil")).args(args).env("VEIL_OUTPUT_ROOT", root).output().unwrap()
}

fn train(root: &Path, loss: &str, out: &Path, force: bool) -> Output {
    let cfg = fixture();
    let mut args = vec!["train-encoder", "--config", cfg.to_str().unwrap(), "--privacy-loss", loss];
    args.extend(["--out", out.to_str().unwrap()]);
    if force {
        args.push("--force");
    }
    veil(&args, root)
}

fn log_rows(dir: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(dir.join("train_log.csv")).unwrap();
    text.lines().skip(2).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn existing_run_is_refused_without_force() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("run");
    assert!(train(root.path(), "flip", &out, false).status.success());
    let again = train(root.path(), "flip", &out, false);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert!(train(root.path(), "flip", &out, true).status.success());
}

#[test]
fn training_is_deterministic_and_gan_differs_only_after_warm_up() {
    let root = tempfile::tempdir().unwrap();
    let (a, b, g) = (root.path().join("a"), root.path().join("b"), root.path().join("g"));
    for (loss, dir) in [("flip", &a), ("flip", &b), ("gan", &g)] {
        let o = train(root.path(), loss, dir, false);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(a.join("encoder.bin")).unwrap(), fs::read(b.join("encoder.bin")).unwrap());
    assert_eq!(fs::read(a.join("train_log.csv")).unwrap(), fs::read(b.join("train_log.csv")).unwrap());

    let (fl, gl) = (log_rows(&a), log_rows(&g));
    assert_eq!(fl.len(), gl.len());
    let mut adversarial = 0;
    for (f, g) in fl.iter().zip(&gl) {
        if f[1] == "warmup" {
            assert_eq!(f, g);
        } else {
            adversarial += 1;
            assert_ne!(f[5], g[5], "privacy loss should differ at iteration {}", f[0]);
        }
    }
    assert!(adversarial > 0);
}

#[test]
fn verify_and_report_write_a_table() {
    let root = tempfile::tempdir().unwrap();
    let run = root.path().join("run");
    assert!(train(root.path(), "flip", &run, false).status.success());
    let o = veil(&["verify", "--run", run.to_str().unwrap(), "--baselines"], root.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(run.join("verify/table.txt")).unwrap();
    for label in ["run", "identity", "constant"] {
        assert!(table.contains(label), "{table}");
    }
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("verify/run.json")).unwrap()).unwrap();
    assert_eq!(record["command"], "verify");
    assert!(veil(&["report", run.join("verify").to_str().unwrap()], root.path()).status.success());
}

#[test]
fn mi_check_passes_and_bad_config_is_a_validation_error() {
    let root = tempfile::tempdir().unwrap();
    let o = veil(&["mi-check", "--trials", "200", "--balanced-binary"], root.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max jsd residual"));

    let bad = root.path().join("bad.ini");
    fs::write(&bad, "[training]\nbatch = 0\nbogus = 1\n").unwrap();
    let o = veil(&["train-encoder", "--config", bad.to_str().unwrap()], root.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = veil_cli::read_config(&path).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        cfg.validate().unwrap();
        n += 1;
    }
    assert!(n >= 3);
}
