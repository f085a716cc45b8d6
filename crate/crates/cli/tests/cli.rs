//! End-to-end tests of the `promptune` binary: exit codes, file layouts,
//! output schemas, determinism, and the no-input-mutation rule.
//!
//! Two shared fixtures keep the suite fast: a cycle10 world (generated by
//! the CLI itself) and a hand-built 3-class "alternator" corpus whose next
//! unit is a deterministic function of the current one, so a tuned run
//! memorizes the training split.

use promptune::dataset::{Dataset, Split, UnitSequence};
use promptune::lm::{build_lm, load_lm, save_lm_with, unit_perplexity, LMConfig, Variant};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn promptune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()))
}

struct World {
    #[allow(dead_code)]
    root: tempfile::TempDir,
    cycle_data: PathBuf,
    cycle_backbone: PathBuf,
    cycle_runs: PathBuf,
    mini_data: PathBuf,
    mini_backbone: PathBuf,
    mini_run: PathBuf,
    mini_mapped_run: PathBuf,
}

/// Alternator corpus: class c strictly alternates unit 7+c with unit c, so
/// every bigram determines its successor and the readout after the last
/// unit concentrates on the class's pair.
fn alternator_dataset() -> Dataset {
    let mut examples = Vec::new();
    for class in 0..3usize {
        for i in 0..12usize {
            let len = 6 + (i % 5);
            let units: Vec<usize> = (0..len).map(|t| if t % 2 == 0 { 7 + class } else { class }).collect();
            let split = match i {
                0..=7 => Split::Train,
                8..=9 => Split::Valid,
                _ => Split::Test,
            };
            examples.push(UnitSequence {
                durations: vec![1; units.len()],
                pitch: vec![0; units.len()],
                units,
                label: class,
                split,
            });
        }
    }
    Dataset::new(examples)
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let root = tempfile::tempdir().expect("tempdir");
        let dir = root.path();

        let cycle_data = dir.join("cycle");
        assert_ok(
            &promptune(&["gen-data", "--task", "cycle10", "--seed", "7", "--n-per-class", "20", "--out", &s(&cycle_data)]),
            "gen-data cycle10",
        );
        let cycle_backbone = dir.join("cycle-backbone.json");
        assert_ok(
            &promptune(&["pretrain", "--data", &s(&cycle_data.join("dataset.ndjson")), "--out", &s(&cycle_backbone), "--epochs", "30", "--lr", "3e-3"]),
            "pretrain cycle10",
        );
        let cycle_runs = dir.join("cycle-runs");
        assert_ok(
            &promptune(&["tune", "--backbone", &s(&cycle_backbone), "--data", &s(&cycle_data.join("dataset.ndjson")), "--task", "cycle10", "--seed", "3", "--out", &s(&cycle_runs)]),
            "tune cycle10 seed 3",
        );

        let mini_data = dir.join("mini.ndjson");
        alternator_dataset().write_ndjson(&mini_data).expect("write mini corpus");
        let mini_backbone = dir.join("mini-backbone.json");
        assert_ok(
            &promptune(&["pretrain", "--data", &s(&mini_data), "--out", &s(&mini_backbone), "--epochs", "10", "--lr", "3e-3"]),
            "pretrain mini",
        );
        let mini_runs = dir.join("mini-runs");
        assert_ok(
            &promptune(&["tune", "--backbone", &s(&mini_backbone), "--data", &s(&mini_data), "--task", "alternator3", "--seed", "5", "--out", &s(&mini_runs)]),
            "tune mini",
        );
        let mini_mapped_runs = dir.join("mini-mapped-runs");
        assert_ok(
            &promptune(&["tune", "--backbone", &s(&mini_backbone), "--data", &s(&mini_data), "--task", "alternator3", "--seed", "5", "--verbalizer", "random", "--epochs", "2", "--out", &s(&mini_mapped_runs)]),
            "tune mini mapped",
        );

        World {
            root,
            cycle_data,
            cycle_backbone,
            cycle_runs,
            mini_data,
            mini_backbone,
            mini_run: mini_runs.join("seed-5"),
            mini_mapped_run: mini_mapped_runs.join("seed-5"),
        }
    })
}

// ---------------------------------------------------------------------------
// gen-data

#[test]
fn gen_data_emits_expected_files_and_counts() {
    let w = world();
    let dataset = Dataset::read_ndjson(&w.cycle_data.join("dataset.ndjson")).unwrap();
    assert_eq!(dataset.examples.len(), 2 * 20, "C x n-per-class examples");
    assert!(w.cycle_data.join("codebook.json").exists());
    let manifest = read_json(&w.cycle_data.join("manifest.json"));
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn gen_data_is_byte_deterministic_across_reruns() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again");
    assert_ok(
        &promptune(&["gen-data", "--task", "cycle10", "--seed", "7", "--n-per-class", "20", "--out", &s(&again)]),
        "gen-data rerun",
    );
    for file in ["dataset.ndjson", "codebook.json"] {
        assert_eq!(
            std::fs::read(w.cycle_data.join(file)).unwrap(),
            std::fs::read(again.join(file)).unwrap(),
            "{file} differs across identical invocations"
        );
    }
}

#[test]
fn gen_data_rejects_unknown_task() {
    let dir = tempfile::tempdir().unwrap();
    let out = promptune(&["gen-data", "--task", "nosuch", "--out", &s(&dir.path().join("x"))]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown task"));
}

#[test]
fn gen_data_requires_a_task() {
    let dir = tempfile::tempdir().unwrap();
    let out = promptune(&["gen-data", "--out", &s(&dir.path().join("x"))]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn gen_data_summary_names_classes_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = promptune(&["gen-data", "--task", "cycle10", "--seed", "9", "--n-per-class", "10", "--out", &s(&dir.path().join("d"))]);
    assert_ok(&out, "gen-data");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("2 classes"), "summary: {stdout}");
    assert!(stdout.contains("train 16 / valid 2 / test 2"), "summary: {stdout}");
}

// ---------------------------------------------------------------------------
// pretrain

#[test]
fn pretrain_memorizes_the_cycle_corpus() {
    let w = world();
    let lm = load_lm(&w.cycle_backbone).unwrap();
    assert!(lm.frozen());
    let data = Dataset::read_ndjson(&w.cycle_data.join("dataset.ndjson")).unwrap();
    let ppl = unit_perplexity(&lm, &data, Split::Valid).unwrap();
    assert!(ppl < 1.1, "valid perplexity {ppl} on a memorizable corpus");
}

#[test]
fn pretrain_is_byte_deterministic_across_reruns() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("b.json");
    assert_ok(
        &promptune(&["pretrain", "--data", &s(&w.cycle_data.join("dataset.ndjson")), "--out", &s(&again), "--epochs", "30", "--lr", "3e-3"]),
        "pretrain rerun",
    );
    assert_eq!(
        std::fs::read(&w.cycle_backbone).unwrap(),
        std::fs::read(&again).unwrap(),
        "identical seed and data must reproduce the checkpoint bytes"
    );
}

#[test]
fn pretrain_rejects_missing_data_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = promptune(&["pretrain", "--data", &s(&dir.path().join("absent.ndjson")), "--out", &s(&dir.path().join("b.json"))]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn pretrain_rejects_bad_config_values() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let data = s(&w.cycle_data.join("dataset.ndjson"));
    let out = promptune(&["pretrain", "--data", &data, "--out", &s(&dir.path().join("b.json")), "--epochs", "0"]);
    assert_eq!(exit_code(&out), 2, "zero epochs");
    let out = promptune(&["pretrain", "--data", &data, "--out", &s(&dir.path().join("b.json")), "--variant", "hubert"]);
    assert_eq!(exit_code(&out), 2, "unknown variant");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = promptune(&["pretrain", "--config", &s(&bad), "--data", &data, "--out", &s(&dir.path().join("b.json"))]);
    assert_eq!(exit_code(&out), 2, "malformed config file");
}

// ---------------------------------------------------------------------------
// tune

#[test]
fn tune_writes_run_log_and_metrics_with_default_prompt_len() {
    let w = world();
    let run_dir = w.cycle_runs.join("seed-3");
    for file in ["run.json", "tune_log.ndjson", "metrics.json", "manifest.json"] {
        assert!(run_dir.join(file).exists(), "missing {file}");
    }
    let run = read_json(&run_dir.join("run.json"));
    assert_eq!(run["config"]["tune_config"]["prompt_len"], 5, "default prompt length");
    let metrics = read_json(&run_dir.join("metrics.json"));
    assert_eq!(metrics["task"], "cycle10");
    assert_eq!(metrics["metric"], "acc");
}

#[test]
fn tune_config_file_runs_every_seed_and_flags_override() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("runs");
    let config = dir.path().join("experiment.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "task": "alternator3",
            "backbone": s(&w.mini_backbone),
            "data": s(&w.mini_data),
            "seeds": [11, 12],
            "epochs": 2,
            "out_dir": s(&out_dir),
        })
        .to_string(),
    )
    .unwrap();
    assert_ok(&promptune(&["tune", "--config", &s(&config)]), "tune from config");
    assert!(out_dir.join("seed-11").join("run.json").exists());
    assert!(out_dir.join("seed-12").join("run.json").exists());

    // Both manifests must agree on the backbone they consumed.
    let m11 = read_json(&out_dir.join("seed-11").join("manifest.json"));
    let m12 = read_json(&out_dir.join("seed-12").join("manifest.json"));
    assert_eq!(m11["inputs"][0]["sha256"], m12["inputs"][0]["sha256"]);
    assert_eq!(m11["backbone_path"], m12["backbone_path"]);

    // --seed overrides the whole list.
    let out_dir2 = dir.path().join("runs2");
    assert_ok(
        &promptune(&["tune", "--config", &s(&config), "--seed", "13", "--out", &s(&out_dir2)]),
        "tune with seed override",
    );
    assert!(out_dir2.join("seed-13").join("run.json").exists());
    assert!(!out_dir2.join("seed-11").exists());
}

#[test]
fn tune_is_byte_deterministic_across_reruns() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("runs");
    assert_ok(
        &promptune(&["tune", "--backbone", &s(&w.cycle_backbone), "--data", &s(&w.cycle_data.join("dataset.ndjson")), "--task", "cycle10", "--seed", "3", "--out", &s(&again)]),
        "tune rerun",
    );
    for file in ["run.json", "tune_log.ndjson", "metrics.json"] {
        assert_eq!(
            std::fs::read(w.cycle_runs.join("seed-3").join(file)).unwrap(),
            std::fs::read(again.join("seed-3").join(file)).unwrap(),
            "{file} differs across identical invocations"
        );
    }
}

#[test]
fn tune_zero_prompt_len_still_reports_metrics() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("runs");
    assert_ok(
        &promptune(&["tune", "--backbone", &s(&w.mini_backbone), "--data", &s(&w.mini_data), "--prompt-len", "0", "--epochs", "3", "--seed", "1", "--out", &s(&out_dir)]),
        "zero-prompt tune",
    );
    let metrics = read_json(&out_dir.join("seed-1").join("metrics.json"));
    assert!(metrics["value"].is_number());
}

#[test]
fn tune_rejects_unfrozen_backbone_with_exit_3() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let unfrozen = dir.path().join("unfrozen.json");
    let lm = build_lm(LMConfig::desk_scale(Variant::Gslm, 10), 1).unwrap();
    save_lm_with(&lm, &unfrozen, true).unwrap();
    let out = promptune(&["tune", "--backbone", &s(&unfrozen), "--data", &s(&w.mini_data), "--out", &s(&dir.path().join("runs"))]);
    assert_eq!(exit_code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not frozen"));
}

#[test]
fn tune_rejects_empty_seed_list() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("experiment.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "backbone": s(&w.mini_backbone),
            "data": s(&w.mini_data),
            "seeds": [],
            "out_dir": s(&dir.path().join("runs")),
        })
        .to_string(),
    )
    .unwrap();
    let out = promptune(&["tune", "--config", &s(&config)]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn tune_leaves_its_inputs_untouched() {
    let w = world();
    let before_data = std::fs::read(&w.mini_data).unwrap();
    let before_backbone = std::fs::read(&w.mini_backbone).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert_ok(
        &promptune(&["tune", "--backbone", &s(&w.mini_backbone), "--data", &s(&w.mini_data), "--epochs", "2", "--out", &s(&dir.path().join("runs"))]),
        "tune",
    );
    assert_eq!(before_data, std::fs::read(&w.mini_data).unwrap());
    assert_eq!(before_backbone, std::fs::read(&w.mini_backbone).unwrap());
}

// ---------------------------------------------------------------------------
// eval

#[test]
fn eval_memorized_run_scores_train_split_near_one() {
    let w = world();
    let out = promptune(&["eval", "--run", &s(&w.mini_run), "--data", &s(&w.mini_data), "--metric", "acc", "--split", "train"]);
    assert_ok(&out, "eval train acc");
    let report: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert!(
        report["value"].as_f64().unwrap() >= 0.99,
        "memorized run should score the train split near 1.0: {report}"
    );
}

#[test]
fn eval_report_matches_documented_schema() {
    let w = world();
    let out = promptune(&["eval", "--run", &s(&w.mini_run), "--data", &s(&w.mini_data), "--metric", "f1"]);
    assert_ok(&out, "eval f1");
    let report: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    let keys: Vec<&str> = report.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["confusion", "metric", "n", "task", "value"]);
    assert_eq!(report["metric"], "f1");
    assert_eq!(report["n"], 6);
    assert_eq!(report["confusion"].as_array().unwrap().len(), 3);

    // The same report lands on disk next to the run.
    let on_disk = read_json(&w.mini_run.join("metrics-test-f1.json"));
    assert_eq!(on_disk, report);
}

#[test]
fn eval_rejects_eer_on_a_three_class_task() {
    let w = world();
    let out = promptune(&["eval", "--run", &s(&w.mini_run), "--data", &s(&w.mini_data), "--metric", "eer"]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("binary task"));
}

#[test]
fn eval_rejects_unknown_metric_and_split() {
    let w = world();
    let out = promptune(&["eval", "--run", &s(&w.mini_run), "--data", &s(&w.mini_data), "--metric", "auc"]);
    assert_eq!(exit_code(&out), 2);
    let out = promptune(&["eval", "--run", &s(&w.mini_run), "--data", &s(&w.mini_data), "--split", "dev"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn eval_rejects_a_mismatched_backbone() {
    let w = world();
    let out = promptune(&["eval", "--run", &s(&w.mini_run), "--data", &s(&w.mini_data), "--backbone", &s(&w.cycle_backbone)]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}

// ---------------------------------------------------------------------------
// analyze

#[test]
fn analyze_exports_one_beeswarm_per_class_with_full_row_counts() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("shap");
    assert_ok(
        &promptune(&["analyze", "--run", &s(&w.mini_run), "--data", &s(&w.mini_data), "--out", &s(&out_dir)]),
        "analyze",
    );
    for class in 0..3 {
        let path = out_dir.join(format!("beeswarm-class-{class}.ndjson"));
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        // Default top-k is 10 and the mini vocabulary is exactly 10 units;
        // the test split holds 6 datapoints.
        assert_eq!(rows.len(), 10 * 6, "rows = top-k x datapoints for class {class}");
        let first: serde_json::Value = serde_json::from_str(rows[0]).unwrap();
        for key in ["unit", "rank", "phi", "feature_value", "datapoint"] {
            assert!(first.get(key).is_some(), "row missing {key}");
        }
    }
}

#[test]
fn analyze_svg_export_is_well_formed() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("shap");
    assert_ok(
        &promptune(&["analyze", "--run", &s(&w.mini_run), "--data", &s(&w.mini_data), "--class", "1", "--format", "svg", "--out", &s(&out_dir)]),
        "analyze svg",
    );
    let svg = std::fs::read_to_string(out_dir.join("beeswarm-class-1.svg")).unwrap();
    assert!(svg.trim_start().starts_with("<svg"), "starts with an svg root");
    assert!(svg.trim_end().ends_with("</svg>"), "closes the svg root");
    assert!(!out_dir.join("beeswarm-class-0.svg").exists(), "--class limits the export");
}

#[test]
fn analyze_rejects_mapped_verbalizer_runs_with_exit_3() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let out = promptune(&["analyze", "--run", &s(&w.mini_mapped_run), "--data", &s(&w.mini_data), "--out", &s(&dir.path().join("shap"))]);
    assert_eq!(exit_code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnable"));
}

#[test]
fn analyze_rejects_out_of_range_class() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let out = promptune(&["analyze", "--run", &s(&w.mini_run), "--data", &s(&w.mini_data), "--class", "7", "--out", &s(&dir.path().join("shap"))]);
    assert_eq!(exit_code(&out), 2);
}
