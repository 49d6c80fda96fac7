use std::fs;
use std::path::Path;

use prunequant::adapter::AdaptedModel;
use prunequant::bo::{pareto_front, read_history};
use prunequant::checkpoint::Checkpoint;
use prunequant::pipeline::{
    compare_modes, dataset, export_pareto, load_summary, run_pipeline, run_pipeline_until, PipelineConfig,
    RecoverSummary, Stage, TrainSummary,
};
use prunequant::Error;

fn small(out: &Path, extra: &[&str]) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.apply_overrides(
        ["train.steps=150", "recover.steps=30", "bo.iters=3", "data.n=1024", "prune.calib=64"].into_iter().chain(extra.iter().copied()),
    )
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

#[test]
fn no_op_pipeline_keeps_baseline_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(
        dir.path(),
        &["model.arch=mlp-s", "prune.rate=0", "quant.kind=none", "bo.iters=0", "recover.steps=0", "recover.method=gaussian"],
    );
    run_pipeline(&cfg, false).unwrap();
    let train: TrainSummary = load_summary(dir.path(), "train.json").unwrap();
    let rec: RecoverSummary = load_summary(dir.path(), "recover.json").unwrap();
    assert_eq!(rec.val_accuracy, train.val_accuracy);
    assert_eq!(rec.test_accuracy, train.test_accuracy);
}

#[test]
fn completed_run_resumes_without_work_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let first = run_pipeline(&small(&a, &[]), false).unwrap();
    assert_eq!(first.executed, Stage::ALL);
    run_pipeline(&small(&b, &[]), false).unwrap();
    for f in ["manifest.json", "trials.jsonl", "pareto.csv", "baseline.ckpt", "pruned.ckpt", "recovered.ckpt", "config.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let before = fs::read(a.join("manifest.json")).unwrap();
    let again = run_pipeline(&small(&a, &[]), true).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), before);

    // a different config may not reuse the directory
    let err = run_pipeline(&small(&a, &["prune.rate=0.1"]), true).unwrap_err();
    assert!(matches!(err, Error::Config(_)));

    // artifacts load back into their consumer types
    let rec: RecoverSummary = load_summary(&a, "recover.json").unwrap();
    let am = AdaptedModel::from_checkpoint(&Checkpoint::load(&a.join("recovered.ckpt")).unwrap()).unwrap();
    let data = dataset(&small(&a, &[])).unwrap();
    assert_eq!(am.accuracy(&data.validation).unwrap(), rec.val_accuracy);
    assert_eq!(am.memory_bytes(), rec.memory_bytes);
    assert!(!pareto_front(&read_history(&a.join("trials.jsonl")).unwrap()).is_empty());
}

#[test]
fn partial_runs_continue_from_the_last_stage() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let part = run_pipeline_until(&small(&a, &[]), Stage::Allocate, false).unwrap();
    assert_eq!(part.executed, [Stage::Train, Stage::Prune, Stage::Allocate]);
    let rest = run_pipeline(&small(&a, &[]), true).unwrap();
    assert_eq!(rest.executed, [Stage::Optimize, Stage::Recover]);
    run_pipeline(&small(&b, &[]), false).unwrap();
    assert_eq!(fs::read(a.join("recovered.ckpt")).unwrap(), fs::read(b.join("recovered.ckpt")).unwrap());

    // a missing artifact forces its stage and everything after it to rerun
    fs::remove_file(a.join("pruned.ckpt")).unwrap();
    let redo = run_pipeline(&small(&a, &[]), true).unwrap();
    assert_eq!(redo.executed, [Stage::Prune, Stage::Allocate, Stage::Optimize, Stage::Recover]);
    assert_eq!(fs::read(a.join("trials.jsonl")).unwrap(), fs::read(b.join("trials.jsonl")).unwrap());
}

#[test]
fn failing_stage_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &["model.arch=mlp-s", "alloc.budget=10"]);
    let err = run_pipeline(&cfg, false).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "allocate", .. }), "{err}");
    let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(m["failure"]["stage"], "allocate");
    assert_eq!(m["stages"][1]["status"], "done");
    assert_eq!(m["stages"][2]["status"], "failed");
    assert!(dir.path().join("pruned.ckpt").exists());
}

#[test]
fn export_flags_match_dominance() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("h.jsonl");
    fs::write(&hist, "").unwrap();
    let csv_path = dir.path().join("h.csv");
    assert_eq!(export_pareto(&hist, &csv_path).unwrap(), 0);
    assert_eq!(fs::read_to_string(&csv_path).unwrap(), "memory_bytes,performance,config,on_front\n");

    let lines = [
        r#"{"M":100,"P":0.5,"b":[4,4],"iso_time":"1970-01-01T00:00:00Z","seed":0,"steps":1}"#,
        r#"{"M":120,"P":0.7,"b":[8,4],"iso_time":"1970-01-01T00:00:01Z","seed":0,"steps":1}"#,
        r#"{"M":130,"P":0.6,"b":[4,8],"iso_time":"1970-01-01T00:00:02Z","seed":0,"steps":1}"#,
        r#"{"M":90,"P":0.5,"b":[8,8],"iso_time":"1970-01-01T00:00:03Z","seed":0,"steps":1}"#,
    ];
    fs::write(&hist, lines.join("\n") + "\n").unwrap();
    export_pareto(&hist, &csv_path).unwrap();
    let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
    let flags: Vec<String> = rdr.records().map(|r| r.unwrap()[3].to_string()).collect();
    // [4,4] is dominated by [8,8]; [4,8] by [8,4]
    assert_eq!(flags, ["false", "true", "false", "true"]);
    let n_front = pareto_front(&read_history(&hist).unwrap()).len();
    assert_eq!(flags.iter().filter(|f| *f == "true").count(), n_front);

    fs::write(&hist, format!("{}\nnot json\n", lines[0])).unwrap();
    match export_pareto(&hist, &csv_path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn compare_memory_is_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &["bo.iters=2", "recover.steps=20"]);
    let table = compare_modes(&cfg, &[0, 1]).unwrap();
    let (m1, m2, m3) = (&table.modes[0], &table.modes[1], &table.modes[2]);
    for s in 0..2 {
        assert!(m1.memory_bytes[s] < m2.memory_bytes[s]);
        assert!(m2.memory_bytes[s] <= table.m_max[s]);
        assert!(m3.memory_bytes[s] <= table.m_max[s]);
        assert!(m3.accuracy[s] >= m2.accuracy[s]);
    }
    assert!(dir.path().join("compare.csv").exists());
    assert!(dir.path().join("seed-1").join("trials.jsonl").exists());
}
