use archlearn_core::arch::{ArchSpec, InitConfig};
use archlearn_core::nn::{DenseLayer, GateParams, Layer, Network};
use archlearn_core::surgery::{
    apply_plan, architecture_of, collapse_depth, compress_svd, equivalence_check, param_count, prune_widths,
    ArchReport, SurgeryPlan,
};
use archlearn_core::{SeededRng, Tensor};
use proptest::prelude::*;

fn build(arch: &str, input: [usize; 3], seed: u64) -> Network {
    ArchSpec::parse(arch).unwrap().build(input, &InitConfig::default(), &mut SeededRng::new(seed)).unwrap()
}

/// Sets width gates from `pattern` (true = keep) and, optionally, depth gates.
fn set_gates(net: &mut Network, layer: usize, keep: &[bool], linear: Option<bool>) {
    let g = net.layers_mut()[layer].gate_mut().unwrap();
    g.w = keep.iter().map(|&k| if k { 0.8 } else { 0.3 }).collect();
    if let Some(l) = linear {
        g.d = if l { 0.9 } else { 0.1 };
    }
}

fn randomize_biases(net: &mut Network, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for layer in net.layers_mut() {
        match layer {
            Layer::Dense(l) => l.bias.iter_mut().flatten().for_each(|b| *b = rng.uniform_in(-0.3, 0.3)),
            Layer::Conv(l) => l.bias.iter_mut().for_each(|b| *b = rng.uniform_in(-0.3, 0.3)),
            Layer::Pool(_) => {}
        }
    }
}

#[test]
fn dense_prune_example() {
    let mut net = build("fc:4 out:2", [1, 1, 3], 1);
    randomize_biases(&mut net, 2);
    set_gates(&mut net, 0, &[true, false, true, false], None);
    let pruned = prune_widths(&net).unwrap();
    assert_eq!(architecture_of(&pruned), vec![2, 2]);
    let Layer::Dense(out) = &pruned.layers()[1] else { unreachable!() };
    assert_eq!(out.weights.shape(), &[2, 2]);
    let eq = equivalence_check(&net, &pruned, 100, 3, 1e-6).unwrap();
    assert!(eq.passed && eq.max_deviation == 0.0, "{eq:?}");
}

#[test]
fn all_on_prune_only_keeps_structure() {
    let net = build("conv:3x3x3 pool:2 fc:5 out:2", [1, 8, 8], 1);
    let pruned = prune_widths(&net).unwrap();
    assert_eq!(pruned.layers(), net.layers());
}

#[test]
fn conv_prune_drops_next_conv_channels() {
    let mut net = build("conv:20x5x5 pool:2 conv:50x5x5 pool:2 fc:30 out:10", [1, 28, 28], 3);
    let keep: Vec<bool> = (0..20).map(|i| i % 5 != 0).collect();
    set_gates(&mut net, 0, &keep, None);
    let pruned = prune_widths(&net).unwrap();
    assert_eq!(architecture_of(&pruned), vec![16, 50, 30, 10]);
    let Layer::Conv(c) = &pruned.layers()[2] else { unreachable!() };
    assert_eq!(c.kernels.shape(), &[50, 16, 5, 5]);
    assert_eq!(equivalence_check(&net, &pruned, 20, 1, 0.0).unwrap().max_deviation, 0.0);
}

#[test]
fn conv_pool_dense_prune_drops_flattened_blocks() {
    let mut net = build("conv:20x5x5 pool:2 conv:50x5x5 pool:2 fc:30 out:10", [1, 28, 28], 4);
    randomize_biases(&mut net, 5);
    let keep: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
    set_gates(&mut net, 2, &keep, None);
    let kept = keep.iter().filter(|&&k| k).count();
    let pruned = prune_widths(&net).unwrap();
    let Layer::Dense(fc) = &pruned.layers()[4] else { unreachable!() };
    assert_eq!(fc.weights.shape(), &[30, kept * 16]);
    assert_eq!(equivalence_check(&net, &pruned, 20, 1, 0.0).unwrap().max_deviation, 0.0);
    assert!(param_count(&pruned) < param_count(&net));
}

#[test]
fn identity_middle_layer_collapses_exactly() {
    let mut rng = SeededRng::new(1);
    let outer = Tensor::new(vec![2, 3], (0..6).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap();
    let net = Network::new(
        [3, 1, 1],
        vec![
            Layer::Dense(
                DenseLayer::new(Tensor::identity(3), Some(vec![0.0; 3]), Some(GateParams::new(3, 1.0, 1.0))).unwrap(),
            ),
            Layer::Dense(DenseLayer::new(outer.clone(), Some(vec![0.5, -0.5]), None).unwrap()),
        ],
    )
    .unwrap();
    let c = collapse_depth(&net, &SurgeryPlan { prune: false, collapse_layers: vec![0] }).unwrap();
    let Layer::Dense(l) = &c.layers()[0] else { unreachable!() };
    assert_eq!(l.weights, outer);
    assert_eq!(l.bias, Some(vec![0.5, -0.5]));
}

#[test]
fn random_collapse_matches_two_layer_evaluation() {
    let mut net = build("fc:3 out:2", [1, 1, 4], 7);
    randomize_biases(&mut net, 8);
    set_gates(&mut net, 0, &[true, false, true], Some(true));
    let c = collapse_depth(&net, &SurgeryPlan { prune: false, collapse_layers: vec![0] }).unwrap();
    assert_eq!(architecture_of(&c), vec![2]);
    assert!(equivalence_check(&net, &c, 100, 2, 1e-6).unwrap().passed);
}

#[test]
fn six_layers_to_five() {
    let mut net = build("conv:4x3x3 pool:2 (fc:12)*3 out:3", [1, 10, 10], 9);
    randomize_biases(&mut net, 1);
    for i in [2, 3, 4] {
        let linear = i == 3;
        set_gates(&mut net, i, &[true; 12], Some(linear));
    }
    assert_eq!(net.parametric_indices().len(), 5);
    let c = collapse_depth(&net, &SurgeryPlan { prune: false, collapse_layers: vec![3] }).unwrap();
    assert_eq!(c.parametric_indices().len(), 4);
    assert_eq!(architecture_of(&c), vec![4, 12, 12, 3]);
    assert!(equivalence_check(&net, &c, 1000, 3, 1e-5).unwrap().passed);
}

#[test]
fn plan_with_prune_and_collapse_and_report() {
    let mut net = build("fc:10 fc:8 fc:6 out:3", [1, 1, 5], 11);
    randomize_biases(&mut net, 12);
    set_gates(&mut net, 0, &[true, true, false, true, false, true, true, false, true, true], Some(true));
    set_gates(&mut net, 1, &[false, true, true, true, false, true, true, true], Some(true));
    set_gates(&mut net, 2, &[true, true, true, false, true, true], Some(false));
    let plan = SurgeryPlan { prune: true, collapse_layers: vec![1, 0] };
    let after = apply_plan(&net, &plan).unwrap();
    assert_eq!(architecture_of(&after), vec![5, 3]);
    assert!(equivalence_check(&net, &after, 1000, 5, 1e-5).unwrap().passed);
    let report = ArchReport::new(&net, &after, plan.collapse_layers.clone()).unwrap();
    assert_eq!(report.phi_before, vec![10, 8, 6, 3]);
    assert!(report.params_after < report.params_before);
    let json = serde_json::to_value(&report).unwrap();
    for key in
        ["phi_before", "phi_after", "params_before", "params_after", "collapsed_layers", "acc_before", "acc_after"]
    {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn svd_compression_counts() {
    let net = build("fc:800 fc:500 out:10", [1, 1, 20], 2);
    let idx = 1; // fc:500 has a 500×800 weight matrix
    for (k, expected) in [(10, 13_000), (40, 52_000)] {
        let c = compress_svd(&net, idx, k).unwrap();
        let weights: Vec<usize> = c
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.weights.len(),
                _ => 0,
            })
            .collect();
        assert_eq!(weights[1] + weights[2], expected);
        assert_eq!(architecture_of(&c), vec![800, k, 500, 10]);
    }
}

#[test]
fn full_rank_svd_compression_is_equivalent() {
    let mut net = build("fc:12 fc:7 out:3", [1, 1, 9], 6);
    randomize_biases(&mut net, 3);
    let c = compress_svd(&net, 1, 7).unwrap();
    assert!(equivalence_check(&net, &c, 200, 4, 1e-5).unwrap().passed);
}

fn arb_gated_mlp() -> impl Strategy<Value = (Network, u64)> {
    (any::<u64>(), 2usize..7, 2usize..7, 2usize..7).prop_map(|(seed, a, b, c)| {
        let mut net = build(&format!("fc:{a} fc:{b} fc:{c} out:3"), [1, 1, 4], seed);
        randomize_biases(&mut net, seed ^ 1);
        let mut rng = SeededRng::new(seed ^ 2);
        for layer in net.layers_mut() {
            if let Some(g) = layer.gate_mut() {
                g.w.iter_mut().for_each(|w| *w = rng.uniform());
                // make sure one unit survives
                g.w[0] = 0.9;
                g.d = rng.uniform();
            }
        }
        (net, seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prune_is_exactly_equivalent((net, seed) in arb_gated_mlp()) {
        let pruned = prune_widths(&net).unwrap();
        prop_assert_eq!(equivalence_check(&net, &pruned, 64, seed, 0.0).unwrap().max_deviation, 0.0);
        let any_off = net.gates().any(|(_, g)| g.w.iter().any(|&w| w < 0.5));
        if any_off {
            prop_assert!(param_count(&pruned) < param_count(&net));
        } else {
            prop_assert_eq!(param_count(&pruned), param_count(&net));
        }
        let expected: Vec<usize> = net
            .layers()
            .iter()
            .map(|l| l.gate().map_or(l.width().unwrap(), |g| g.w.iter().filter(|&&w| w >= 0.5).count()))
            .collect();
        prop_assert_eq!(architecture_of(&pruned), expected);
    }

    #[test]
    fn collapse_is_equivalent((net, seed) in arb_gated_mlp()) {
        let eligible = archlearn_core::surgery::eligible_collapse_layers(&net);
        let plan = SurgeryPlan { prune: false, collapse_layers: eligible.clone() };
        let c = collapse_depth(&net, &plan).unwrap();
        prop_assert_eq!(c.layers().len(), net.layers().len() - eligible.len());
        let eq = equivalence_check(&net, &c, 1000, seed, 1e-5).unwrap();
        prop_assert!(eq.passed, "{:?}", eq);
        prop_assert!(param_count(&c) <= param_count(&net) || !eligible.is_empty());
    }
}
