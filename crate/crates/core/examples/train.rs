//! Trains each toy architecture on the synthetic clusters.
use prunequant::models::{build_model, generate_dataset, train, Arch, ModelSpec, TrainConfig};

fn main() -> prunequant::Result<()> {
    let data = generate_dataset(4, 32, 2048, 0)?;
    for arch in [Arch::MlpS, Arch::MlpM, Arch::TinyTransformer] {
        let mut model = build_model(ModelSpec::new(arch), 1)?;
        let report = train(&mut model, &data, &TrainConfig::default(), 2)?;
        println!(
            "{:<16} {:>6} params, val accuracy {:.3}, final loss {:.4}",
            arch.name(),
            model.param_count(),
            report.val_accuracy,
            report.final_loss
        );
    }
    Ok(())
}
