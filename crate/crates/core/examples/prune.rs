//! Prunes coupled channel groups out of a trained MLP.
use prunequant::models::{accuracy, build_model, generate_dataset, train, Arch, ModelSpec, TrainConfig};
use prunequant::prune::{build_dependency_graph, form_groups, prune_model, ImportanceConfig};

fn main() -> prunequant::Result<()> {
    let data = generate_dataset(4, 32, 2048, 0)?;
    let mut model = build_model(ModelSpec::new(Arch::MlpM), 1)?;
    train(&mut model, &data, &TrainConfig::default(), 2)?;
    let groups = form_groups(&build_dependency_graph(&model)?);
    println!("{} coupled groups, {} params", groups.len(), model.param_count());
    let base = accuracy(&model.predict(&data.test.inputs)?, &data.test.labels);
    for rate in [0.1, 0.3, 0.5] {
        let (pruned, report) = prune_model(&model, &data.calibration, &ImportanceConfig::default(), rate)?;
        let acc = accuracy(&pruned.predict(&data.test.inputs)?, &data.test.labels);
        println!(
            "rate {rate:.1}: realized {:.3}, {} params, test accuracy {acc:.3} (baseline {base:.3})",
            report.realized_rate,
            pruned.param_count()
        );
    }
    Ok(())
}
