//! Compares adapter initializations on a quantized, pruned model.
use prunequant::adapter::{finetune, precisions, AdaptedModel, AdapterConfig, FinetuneConfig, InitMethod};
use prunequant::mi::BitConfig;
use prunequant::models::{build_model, generate_dataset, train, Arch, ModelSpec, TrainConfig};
use prunequant::prune::{prune_model, ImportanceConfig};
use prunequant::quant::QuantFormat;

fn main() -> prunequant::Result<()> {
    let data = generate_dataset(4, 32, 2048, 0)?;
    let mut model = build_model(ModelSpec::new(Arch::MlpM), 1)?;
    train(&mut model, &data, &TrainConfig::default(), 2)?;
    let (pruned, _) = prune_model(&model, &data.calibration, &ImportanceConfig::default(), 0.3)?;
    let prec = precisions(&BitConfig::uniform(pruned.linears().len(), 4), Some(QuantFormat::Nf));

    for method in [InitMethod::Gaussian, InitMethod::Pissa, InitMethod::LoftQ { iters: 1 }, InitMethod::LoftQ { iters: 4 }] {
        let cfg = AdapterConfig { method: Some(method), rank: 8 };
        let mut am = AdaptedModel::build(&pruned, &prec, &cfg, 3)?;
        let before = am.accuracy(&data.validation)?;
        finetune(&mut am, &data, &FinetuneConfig::default(), 4)?;
        println!(
            "{:<10} val accuracy {before:.3} -> {:.3}, {} bytes",
            method.to_string(),
            am.accuracy(&data.validation)?,
            am.memory_bytes()
        );
    }
    Ok(())
}
