//! Ranks layers by mutual information and picks 8-bit layers under a budget.
use prunequant::mi::{allocate_bits, mi_report, trace_activations, BitConfig, MemoryModel};
use prunequant::models::{build_model, generate_dataset, train, Arch, ModelSpec, TrainConfig};

fn main() -> prunequant::Result<()> {
    let data = generate_dataset(4, 32, 2048, 0)?;
    let mut model = build_model(ModelSpec::new(Arch::MlpM), 1)?;
    train(&mut model, &data, &TrainConfig::default(), 2)?;
    let traces = trace_activations(&model, &data.validation.inputs, 3)?;
    let report = mi_report(&traces, 16, 3)?;
    for (id, mi) in report.layer_ids.iter().zip(&report.mi) {
        println!("{id:<12} MI {mi:.4} nats");
    }
    let memory = MemoryModel::for_model(&model, 8);
    let layers = memory.layers();
    let floor = memory.cost(&BitConfig::uniform(layers, 4));
    let ceiling = memory.cost(&BitConfig::uniform(layers, 8));
    let m_max = floor + (ceiling - floor) / 2;
    let b = allocate_bits(&report.mi, &memory, m_max, 0.5)?;
    println!("budget {m_max} bytes: bits {:?}, cost {} bytes", b.bits(), memory.cost(&b));
    Ok(())
}
