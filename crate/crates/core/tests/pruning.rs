use prunequant::models::{build_model, generate_dataset, Arch, ModelSpec, ToyModel};
use prunequant::prune::{
    build_dependency_graph, form_groups, prunable_params, prune, score_groups, taylor_importance, zero_groups,
    CoupledGroup, ImportanceConfig,
};
use prunequant::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixed_input(rows: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    Tensor::from_fn(&[rows, 32], |_| rng.random_range(-2.0..2.0))
}

fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

fn removal_matches_masking(model: &ToyModel, rate: f64, seed: u64) -> f32 {
    let groups = form_groups(&build_dependency_graph(model).unwrap());
    let scores = random_scores(groups.len(), seed);
    let (pruned, report) = prune(model, &groups, &scores, rate).unwrap();
    let removed: Vec<&CoupledGroup> = report.removed_group_ids.iter().map(|&id| &groups[id]).collect();
    let masked = zero_groups(model, &removed);
    let x = fixed_input(17);
    pruned.predict(&x).unwrap().max_abs_diff(&masked.predict(&x).unwrap())
}

#[test]
fn structural_removal_equals_masking() {
    for arch in [Arch::MlpS, Arch::MlpM, Arch::TinyTransformer] {
        let model = build_model(ModelSpec::new(arch), 7).unwrap();
        for rate in [0.1, 0.2, 0.5] {
            let d = removal_matches_masking(&model, rate, 3);
            assert!(d <= 1e-6, "{arch} rate {rate}: {d}");
        }
    }
}

#[test]
fn mlp_s_realized_rate_within_one_group() {
    let model = build_model(ModelSpec::new(Arch::MlpS), 1).unwrap();
    let groups = form_groups(&build_dependency_graph(&model).unwrap());
    let (_, report) = prune(&model, &groups, &random_scores(groups.len(), 5), 0.2).unwrap();
    let total = prunable_params(&model, &groups) as f64;
    let one = groups[0].param_mass(&model) as f64 / total;
    assert!(report.realized_rate >= 0.2);
    assert!(report.realized_rate < 0.2 + one + 1e-12);
}

#[test]
fn transformer_value_channel_couples_to_output_column() {
    // zeroing v's row j alone, o's column j alone, or both gives the same logits
    let model = build_model(ModelSpec::new(Arch::TinyTransformer), 4).unwrap();
    let v = model.linear_index("attn.v").unwrap();
    let o = model.linear_index("attn.o").unwrap();
    let x = fixed_input(5);
    for j in [0usize, 5, 15] {
        let mut only_v = model.clone();
        {
            let mut ls = only_v.linears_mut();
            let cols = ls[v].in_dim();
            ls[v].weight.data_mut()[j * cols..(j + 1) * cols].fill(0.0);
            ls[v].bias.data_mut()[j] = 0.0;
        }
        let mut only_o = model.clone();
        {
            let mut ls = only_o.linears_mut();
            let (rows, cols) = (ls[o].out_dim(), ls[o].in_dim());
            for r in 0..rows {
                ls[o].weight.data_mut()[r * cols + j] = 0.0;
            }
        }
        let mut both = only_v.clone();
        {
            let mut ls = both.linears_mut();
            let (rows, cols) = (ls[o].out_dim(), ls[o].in_dim());
            for r in 0..rows {
                ls[o].weight.data_mut()[r * cols + j] = 0.0;
            }
        }
        let a = only_v.predict(&x).unwrap();
        let b = only_o.predict(&x).unwrap();
        let c = both.predict(&x).unwrap();
        assert!(a.max_abs_diff(&c) <= 1e-6);
        assert!(b.max_abs_diff(&c) <= 1e-6);
        assert!(c.max_abs_diff(&model.predict(&x).unwrap()) > 0.0);
    }
}

#[test]
fn scores_are_permutation_equivariant() {
    let data = generate_dataset(4, 32, 512, 3).unwrap();
    let model = build_model(ModelSpec::new(Arch::MlpS), 2).unwrap();
    let perm: Vec<usize> = (0..64).map(|i| (i * 37) % 64).collect();
    let mut permuted = model.clone();
    {
        let orig = model.linears();
        let mut ls = permuted.linears_mut();
        for (new, &old) in perm.iter().enumerate() {
            let row = orig[0].weight.row(old).to_vec();
            ls[0].weight.data_mut()[new * 32..(new + 1) * 32].copy_from_slice(&row);
            ls[0].bias.data_mut()[new] = orig[0].bias.data()[old];
            for r in 0..4 {
                ls[1].weight.set(r, new, orig[1].weight.at(r, old));
            }
        }
    }
    let cfg = ImportanceConfig { calib_size: 64, ..Default::default() };
    let groups = form_groups(&build_dependency_graph(&model).unwrap());
    let a = score_groups(&groups, &model, &data.calibration, &cfg).unwrap();
    let b = score_groups(&groups, &permuted, &data.calibration, &cfg).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        let tol = 1e-5 * a[old].abs().max(1e-9);
        assert!((b[new] - a[old]).abs() <= tol, "channel {old}: {} vs {}", a[old], b[new]);
    }
}

/// Exact loss change of ½wᵀAw when the entries in `group` are zeroed.
fn quadratic_removal_delta(a: &[f64], w: &[f64], group: &[usize]) -> f64 {
    let n = w.len();
    let loss = |w: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += w[i] * a[i * n + j] * w[j];
            }
        }
        0.5 * s
    };
    let mut cut = w.to_vec();
    group.iter().for_each(|&i| cut[i] = 0.0);
    (loss(w) - loss(&cut)).abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn second_order_taylor_is_exact_on_quadratics(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // A = MᵀM is a symmetric Hessian
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum();
            }
        }
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let size = rng.random_range(1..=n);
        let mut group: Vec<usize> = (0..n).collect();
        for i in 0..n {
            let j = rng.random_range(i..n);
            group.swap(i, j);
        }
        group.truncate(size);
        group.sort();
        let g: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * w[j]).sum()).collect();
        let gg: Vec<f64> = group.iter().map(|&i| g[i]).collect();
        let wg: Vec<f64> = group.iter().map(|&i| w[i]).collect();
        let hg: Vec<f64> = group.iter().flat_map(|&i| group.iter().map(move |&j| (i, j))).map(|(i, j)| a[i * n + j]).collect();
        let score = taylor_importance(&gg, &wg, &hg);
        let exact = quadratic_removal_delta(&a, &w, &group);
        prop_assert!((score - exact).abs() <= 1e-6 * exact.max(1.0));
    }

    #[test]
    fn removal_equals_masking_random_rates(seed in any::<u64>(), rate in 0.0f64..0.6) {
        let model = build_model(ModelSpec::new(Arch::MlpM), seed % 1000).unwrap();
        let d = removal_matches_masking(&model, rate, seed);
        prop_assert!(d <= 1e-6);
    }
}
