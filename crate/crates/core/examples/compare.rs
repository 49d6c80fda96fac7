//! Compares uniform 4-bit, MI-allocated and search-refined precision.
use prunequant::pipeline::{compare_modes, PipelineConfig};

fn main() -> prunequant::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.out = std::env::args().nth(1).unwrap_or_else(|| "runs/compare".into()).into();
    let table = compare_modes(&cfg, &[0, 1, 2])?;
    for m in &table.modes {
        println!(
            "{:<12} val {:.4} ± {:.4}  test {:.4} ± {:.4}  bytes {:?}",
            m.label, m.mean, m.sd, m.test_mean, m.test_sd, m.memory_bytes
        );
    }
    Ok(())
}
