use std::collections::BTreeSet;

use prunequant::bo::{
    acquisition_ei, expected_improvement, gp_fit, pareto_front, propose_next, read_history, run_loop, run_loop_from,
    Clock, Evaluation, Feasibility, GpHyper, LoopConfig, TrialRecord, history_text,
};
use prunequant::mi::{BitConfig, MemoryModel};
use prunequant::{rng, Error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Solves `a·x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Textbook posterior: μ = m + kᵀK⁻¹(y − m), σ² = k(x,x) − kᵀK⁻¹k.
fn oracle_posterior(xs: &[Vec<f64>], ys: &[f64], h: GpHyper, x: &[f64]) -> (f64, f64) {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        h.signal_var * (-0.5 * d2 / (h.length_scale * h.length_scale)).exp()
    };
    let n = xs.len();
    let gram: Vec<Vec<f64>> =
        (0..n).map(|i| (0..n).map(|j| k(&xs[i], &xs[j]) + if i == j { h.noise_var } else { 0.0 }).collect()).collect();
    let m = ys.iter().sum::<f64>() / n as f64;
    let kx: Vec<f64> = xs.iter().map(|xi| k(xi, x)).collect();
    let alpha = solve(gram.clone(), ys.iter().map(|y| y - m).collect());
    let beta = solve(gram, kx.clone());
    let mean = m + kx.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
    let var = k(x, x) - kx.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
    (mean, var)
}

#[test]
fn posterior_matches_dense_oracle() {
    let xs = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    let ys = [0.61, 0.72, 0.55];
    for h in [GpHyper::for_layers(2), GpHyper { length_scale: 0.9, signal_var: 0.3, noise_var: 0.0 }] {
        let gp = gp_fit(&xs, &ys, h).unwrap();
        for x in [[0.0, 0.0], [1.0, 1.0], [0.5, 0.25], [1.0, 0.0]] {
            let (m, v) = gp.predict(&x);
            let (om, ov) = oracle_posterior(&xs, &ys, h, &x);
            assert!((m - om).abs() <= 1e-8, "mean {m} vs {om}");
            assert!((v - ov.max(0.0)).abs() <= 1e-8, "var {v} vs {ov}");
        }
    }
}

#[test]
fn ei_vanishes_at_noise_free_best() {
    let h = GpHyper { noise_var: 0.0, ..GpHyper::for_layers(3) };
    let bs: Vec<BitConfig> = ["4,4,4", "8,4,4", "4,8,8"].iter().map(|s| s.parse().unwrap()).collect();
    let ys = [0.5, 0.8, 0.6];
    let gp = gp_fit(&bs.iter().map(|b| b.encode()).collect::<Vec<_>>(), &ys, h).unwrap();
    assert_eq!(acquisition_ei(&gp, &bs[1], 0.8), 0.0);
    // standard normal: EI(μ = best, σ = 1) = φ(0) = 1/√(2π)
    assert!((expected_improvement(0.3, 1.0, 0.3) - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
}

fn open_feasibility(layers: usize) -> Feasibility {
    Feasibility { memory: MemoryModel { dims: vec![(8, 8); layers], adapter_rank: 0 }, m_max: u64::MAX, cap_fraction: 1.0 }
}

#[test]
fn two_layer_proposal_matches_enumeration() {
    let feas = open_feasibility(2);
    let b0: BitConfig = "4,8".parse().unwrap();
    let gp = gp_fit(&[b0.encode()], &[0.4], GpHyper::for_layers(2)).unwrap();
    let evaluated: BTreeSet<BitConfig> = [b0].into_iter().collect();
    let mut g = rng::rng(0);
    let got = propose_next(&gp, &feas, &evaluated, &[], 0.4, &mut g).unwrap();
    let mut best: Option<(f64, BitConfig)> = None;
    for s in ["4,4", "8,4", "8,8"] {
        let b: BitConfig = s.parse().unwrap();
        let ei = acquisition_ei(&gp, &b, 0.4);
        if best.as_ref().is_none_or(|(e, _)| ei > *e) {
            best = Some((ei, b));
        }
    }
    assert_eq!(got.b, best.unwrap().1);
}

#[test]
fn last_remaining_config_is_proposed() {
    let feas = open_feasibility(2);
    let done: Vec<BitConfig> = ["4,4", "4,8", "8,8"].iter().map(|s| s.parse().unwrap()).collect();
    let gp = gp_fit(&done.iter().map(|b| b.encode()).collect::<Vec<_>>(), &[0.9, 0.1, 0.1], GpHyper::for_layers(2)).unwrap();
    let evaluated: BTreeSet<BitConfig> = done.into_iter().collect();
    let p = propose_next(&gp, &feas, &evaluated, &[], 0.9, &mut rng::rng(1)).unwrap();
    assert_eq!(p.b, "8,4".parse().unwrap());
    let all: BTreeSet<BitConfig> = evaluated.iter().cloned().chain([p.b]).collect();
    assert!(matches!(propose_next(&gp, &feas, &all, &[], 0.9, &mut rng::rng(1)), Err(Error::Exhausted)));
}

/// Separable objective over L = 8 layers with a binding budget.
struct Separable {
    weights: Vec<f64>,
    feas: Feasibility,
}

impl Separable {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..0.12)).collect();
        let dims: Vec<(usize, usize)> = (0..8).map(|_| (rng.random_range(16..64), rng.random_range(16..64))).collect();
        let memory = MemoryModel { dims, adapter_rank: 8 };
        let floor = memory.cost(&BitConfig::uniform(8, 4));
        let full = memory.cost(&BitConfig::uniform(8, 8));
        let m_max = floor + (full - floor) / 5;
        Separable { weights, feas: Feasibility { memory, m_max, cap_fraction: 0.25 } }
    }

    fn p(&self, b: &BitConfig) -> f64 {
        0.1 + b.bits().iter().zip(&self.weights).filter(|(b, _)| **b == 8).map(|(_, w)| w).sum::<f64>()
    }

    fn optimum(&self) -> f64 {
        (0u32..256)
            .map(|mask| BitConfig((0..8).map(|i| if mask >> i & 1 == 1 { 8 } else { 4 }).collect()))
            .filter(|b| self.feas.is_feasible(b))
            .map(|b| self.p(&b))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn brute_front(trials: &[TrialRecord]) -> BTreeSet<(u64, u64, BitConfig)> {
    trials
        .iter()
        .filter(|t| !trials.iter().any(|o| o.p >= t.p && o.m <= t.m && (o.p > t.p || o.m < t.m)))
        .map(|t| (t.m, t.p.to_bits(), t.b.clone()))
        .collect()
}

#[test]
fn finds_separable_optimum_within_fifteen_evaluations() {
    let mut hits = 0;
    for seed in 0..20 {
        let task = Separable::new(seed);
        let mut eval = |b: &BitConfig, _| Ok(Evaluation { p: task.p(b), m: task.feas.memory.cost(b) });
        let cfg = LoopConfig { iterations: 14, seed, ..Default::default() };
        let r = run_loop(&BitConfig::uniform(8, 4), &mut eval, &task.feas, &cfg, None).unwrap();
        assert!(r.trials.len() <= 15);
        let best = r.trials.iter().map(|t| t.p).fold(f64::NEG_INFINITY, f64::max);
        if (best - task.optimum()).abs() < 1e-12 {
            hits += 1;
        }
        let got: BTreeSet<_> = r.front.iter().map(|t| (t.m, t.p.to_bits(), t.b.clone())).collect();
        assert_eq!(got, brute_front(&r.trials));
        assert!(r.trials.iter().all(|t| task.feas.is_feasible(&t.b)));
    }
    assert!(hits >= 16, "optimum found in {hits} of 20 seeds");
}

#[test]
fn loop_is_reproducible_and_resumable() {
    let task = Separable::new(3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = LoopConfig { iterations: 10, seed: 3, steps: 50, ..Default::default() };
    let eval = |b: &BitConfig, _| Ok(Evaluation { p: task.p(b), m: task.feas.memory.cost(b) });
    let b0 = BitConfig::uniform(8, 4);
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let a = run_loop(&b0, &mut eval.clone(), &task.feas, &cfg, Some(&pa)).unwrap();
    run_loop(&b0, &mut eval.clone(), &task.feas, &cfg, Some(&pb)).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    assert_eq!(read_history(&pa).unwrap(), a.trials);

    // a run that dies after 4 evaluations, then resumes from its history
    let pc = dir.path().join("c.jsonl");
    let mut calls = 0;
    let mut flaky = |b: &BitConfig, s| {
        calls += 1;
        if calls > 4 {
            return Err(Error::Numeric("evaluator crashed".into()));
        }
        eval(b, s)
    };
    assert!(run_loop(&b0, &mut flaky, &task.feas, &cfg, Some(&pc)).is_err());
    let partial = read_history(&pc).unwrap();
    assert_eq!(partial.len(), 4);
    let resumed = run_loop_from(partial, &b0, &mut eval.clone(), &task.feas, &cfg, Some(&pc)).unwrap();
    assert_eq!(resumed.trials, a.trials);
    assert_eq!(std::fs::read(&pc).unwrap(), std::fs::read(&pa).unwrap());
}

fn random_trials(seed: u64, n: usize) -> Vec<TrialRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| TrialRecord {
            b: BitConfig((0..6).map(|_| if rng.random_bool(0.3) { 8 } else { 4 }).collect()),
            p: (rng.random_range(0..20) as f64) / 20.0,
            m: rng.random_range(1..30),
            seed,
            steps: 0,
            iso_time: Clock::Logical.stamp(i),
        })
        .collect()
}

proptest! {
    #[test]
    fn front_matches_dominance_oracle(seed in any::<u64>()) {
        let trials = random_trials(seed, 50);
        let front = pareto_front(&trials);
        let got: BTreeSet<_> = front.iter().map(|t| (t.m, t.p.to_bits(), t.b.clone())).collect();
        prop_assert_eq!(&got, &brute_front(&trials));
        prop_assert!(front.windows(2).all(|w| w[0].m <= w[1].m));
    }

    #[test]
    fn front_ignores_trial_order(seed in any::<u64>()) {
        let trials = random_trials(seed, 30);
        let mut shuffled = trials.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let key = |f: Vec<TrialRecord>| f.into_iter().map(|t| (t.m, t.p.to_bits(), t.b)).collect::<Vec<_>>();
        prop_assert_eq!(key(pareto_front(&trials)), key(pareto_front(&shuffled)));
    }

    #[test]
    fn training_inputs_have_no_posterior_variance(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs: Vec<Vec<f64>> = Vec::new();
        while xs.len() < n {
            let x: Vec<f64> = (0..4).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            if !xs.contains(&x) {
                xs.push(x);
            }
        }
        let ys: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let gp = gp_fit(&xs, &ys, GpHyper { noise_var: 0.0, ..GpHyper::for_layers(4) }).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (m, v) = gp.predict(x);
            prop_assert!(v <= 1e-8);
            prop_assert!((m - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn ei_nonnegative_and_increasing_in_sd(mu in -1.0f64..1.0, gap in 0.0f64..1.0, s1 in 0.0f64..2.0, ds in 0.0f64..2.0) {
        let best = mu + gap;
        let lo = expected_improvement(mu, s1, best);
        let hi = expected_improvement(mu, s1 + ds, best);
        prop_assert!(lo >= 0.0);
        prop_assert!(hi >= lo - 1e-15);
    }

    #[test]
    fn proposals_are_feasible_and_new(seed in any::<u64>(), l in 2usize..20, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<(usize, usize)> = (0..l).map(|_| (rng.random_range(2..40), rng.random_range(2..40))).collect();
        let memory = MemoryModel { dims, adapter_rank: rng.random_range(0..4) };
        let floor = memory.cost(&BitConfig::uniform(l, 4));
        let feas = Feasibility { m_max: floor + rng.random_range(0..3000), memory, cap_fraction: 0.25 };
        let mut evaluated = BTreeSet::new();
        evaluated.insert(BitConfig::uniform(l, 4));
        let xs: Vec<Vec<f64>> = evaluated.iter().map(|b| b.encode()).collect();
        let gp = gp_fit(&xs, &vec![0.5; xs.len()], GpHyper::for_layers(l)).unwrap();
        let mut g = rng::rng(seed);
        for _ in 0..k {
            match propose_next(&gp, &feas, &evaluated, &[], 0.5, &mut g) {
                Ok(p) => {
                    prop_assert!(feas.is_feasible(&p.b));
                    prop_assert!(evaluated.insert(p.b));
                }
                Err(Error::Exhausted) => break,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}

#[test]
fn history_is_one_json_object_per_line() {
    let trials = random_trials(1, 3);
    let text = history_text(&trials).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["M", "P", "b", "iso_time", "seed", "steps"]);
    }
}
