//! Runs the full pipeline into a directory, then resumes it.
use prunequant::pipeline::{load_summary, run_pipeline, PipelineConfig, RecoverSummary};

fn main() -> prunequant::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example".into());
    let mut cfg = PipelineConfig::default();
    cfg.apply_overrides(["bo.iters=5", "prune.rate=0.3"])?;
    cfg.out = out.clone().into();

    let first = run_pipeline(&cfg, false)?;
    println!("ran {:?}", first.executed);
    let again = run_pipeline(&cfg, true)?;
    println!("resume ran {:?}", again.executed);

    let rec: RecoverSummary = load_summary(&cfg.out, "recover.json")?;
    println!(
        "bits {}, test accuracy {:.3}, {} bytes ({} at fp32)",
        rec.b, rec.test_accuracy, rec.memory_bytes, rec.fp32_bytes
    );
    println!("artifacts in {out}");
    Ok(())
}
