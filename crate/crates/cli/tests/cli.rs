use std::path::Path;
use std::process::{Command, Output};

fn ruo(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ruo"))
        .args(args)
        .env("RUO_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn files_with(dir: &Path, prefix: &str) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    v.sort();
    v
}

#[test]
fn lists_presets() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stdout(&ruo(&["presets"], tmp.path()));
    for name in ["merton-1d", "AS+AD", "realistic", "student-t-3.5"] {
        assert!(out.lines().any(|l| l == name), "{name}");
    }
}

#[test]
fn config_file_round_trips_through_show_config() {
    let tmp = tempfile::tempdir().unwrap();
    let shown = stdout(&ruo(&["show-config", "--preset", "PAS", "--set", "train.epochs=7"], tmp.path()));
    let file = tmp.path().join("pas.toml");
    std::fs::write(&file, &shown).unwrap();
    let again = stdout(&ruo(&["show-config", "--config", file.to_str().unwrap()], tmp.path()));
    assert_eq!(shown, again);
    assert!(shown.contains("epochs = 7"));
}

#[test]
fn solve_explicit_prints_certified_solution() {
    let tmp = tempfile::tempdir().unwrap();
    let json = stdout(&ruo(&["solve-explicit", "--preset", "AS+AD", "--format", "json"], tmp.path()));
    let sol: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(sol["residual"].as_f64().unwrap() < 1e-10);
    assert_eq!(sol["weights"].as_array().unwrap().len(), 2);
    let csv = stdout(&ruo(&["solve-explicit", "--preset", "merton-1d"], tmp.path()));
    let weight: f64 = csv.lines().find(|l| l.starts_with("weight,0,")).unwrap()[9..].parse().unwrap();
    assert!((weight - 0.3168).abs() < 1e-4, "{weight}");
}

#[test]
fn train_is_reproducible_and_evaluate_reads_its_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["train", "--preset", "realistic", "--smoke"];
    stdout(&ruo(&args, tmp.path()));
    let run = std::fs::read_dir(tmp.path()).unwrap().next().unwrap().unwrap().path();
    let first = std::fs::read(&files_with(&run, "eval-")[0]).unwrap();
    let history = std::fs::read(&files_with(&run, "history-")[0]).unwrap();

    let other = tempfile::tempdir().unwrap();
    stdout(&ruo(&args, other.path()));
    let run2 = std::fs::read_dir(other.path()).unwrap().next().unwrap().unwrap().path();
    assert_eq!(run.file_name(), run2.file_name());
    assert_eq!(first, std::fs::read(&files_with(&run2, "eval-")[0]).unwrap());
    assert_eq!(history, std::fs::read(&files_with(&run2, "history-")[0]).unwrap());
    assert!(!files_with(&run, "config-").is_empty());

    let eval = stdout(&ruo(&["evaluate", "--preset", "realistic", "--smoke"], tmp.path()));
    assert!(eval.lines().nth(1).unwrap().starts_with("gan,"), "{eval}");
}

#[test]
fn gen_data_writes_three_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    stdout(&ruo(&["gen-data", "--preset", "S", "--smoke", "--out", out.to_str().unwrap()], tmp.path()));
    for part in ["train-", "val-", "test-"] {
        assert_eq!(files_with(&out, part).len(), 1, "{part}");
    }
}

#[test]
fn compare_ref_reports_cash_anchor() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stdout(&ruo(&["compare-ref", "--preset", "small-cost-5.5", "--smoke"], tmp.path()));
    let cash = out.lines().find(|l| l.starts_with("cash,")).unwrap();
    let e: f64 = cash.split(',').nth(1).unwrap().parse().unwrap();
    // five steps instead of 65 on the smoke grid
    assert!((e - 2.0 * (1.0f64 + 0.015 / 5.0).powi(5).sqrt()).abs() < 1e-12, "{e}");
}

#[test]
fn grid_search_reports_every_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stdout(&ruo(
        &["grid-search", "--preset", "AS+AD", "--smoke", "--vol-scales", "0.5,1", "--drift-scales", "1"],
        tmp.path(),
    ));
    assert_eq!(out.lines().filter(|l| l.starts_with("0.5,1,") || l.starts_with("1,1,")).count(), 2, "{out}");
    assert!(out.contains("best:"));
}

#[test]
fn bad_input_fails_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ruo(&["train", "--preset", "nope"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
    let out = ruo(&["show-config", "--preset", "S", "--set", "train.no_such_field=1"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
    let out = ruo(&["show-config"], tmp.path());
    assert!(!out.status.success());
}
