//! Searches bit configurations of a real model's memory layout against a
//! cheap made-up performance function, then prints the Pareto front.
use prunequant::bo::{pareto_front, run_loop, Evaluation, Feasibility, LoopConfig};
use prunequant::mi::{BitConfig, MemoryModel};
use prunequant::models::{build_model, Arch, ModelSpec};

fn main() -> prunequant::Result<()> {
    let model = build_model(ModelSpec::new(Arch::TinyTransformer), 0)?;
    let memory = MemoryModel::for_model(&model, 8);
    let layers = memory.layers();
    let floor = memory.cost(&BitConfig::uniform(layers, 4));
    let ceiling = memory.cost(&BitConfig::uniform(layers, 8));
    let feas = Feasibility { memory: memory.clone(), m_max: floor + (ceiling - floor) / 3, cap_fraction: 0.5 };

    // later layers gain more from 8 bits
    let mut evaluate = |b: &BitConfig, _seed: u64| {
        let gain: f64 = b.bits().iter().enumerate().filter(|(_, &x)| x == 8).map(|(i, _)| 0.01 * (i + 1) as f64).sum();
        Ok(Evaluation { p: 0.8 + gain, m: memory.cost(b) })
    };
    let cfg = LoopConfig { iterations: 15, seed: 4, ..LoopConfig::default() };
    let result = run_loop(&BitConfig::uniform(layers, 4), &mut evaluate, &feas, &cfg, None)?;
    println!("{} trials, stopped: {:?}", result.trials.len(), result.stop);
    for t in &result.front {
        println!("M {:>6}  P {:.3}  b {}", t.m, t.p, t.b);
    }
    let again = pareto_front(&result.trials);
    assert_eq!(again.len(), result.front.len());
    Ok(())
}
