use care_core::model::*;
use care_core::tensor::grad_check_many;
use care_core::{Error, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn input(cfg: &CareConfig, seed: u64) -> Tensor {
    random(&cfg.input_shape, seed)
}

fn frozen(_: ParamGroup) -> bool {
    false
}

fn all(_: ParamGroup) -> bool {
    true
}

fn nonzero(t: &Option<Tensor>) -> bool {
    t.as_ref().is_some_and(|t| t.data().iter().any(|&v| v != 0.0))
}

fn zero_or_absent(t: &Option<Tensor>) -> bool {
    !nonzero(t)
}

/// Gradients of each group under `loss`, as (group, any slot nonzero, all slots zero).
fn group_flags(params: &CareParams, grads: &[Option<Tensor>], group: ParamGroup) -> (bool, bool) {
    let slots = params.slots_of(group);
    assert!(!slots.is_empty());
    (
        slots.iter().any(|&s| nonzero(&grads[s])),
        slots.iter().all(|&s| zero_or_absent(&grads[s])),
    )
}

fn one_hot_weights(g: &mut Graph, cfg: &CareConfig, j: usize) -> RelevanceWeights {
    let [_, h, w] = cfg.elab_shape;
    let t = Tensor::from_fn(vec![cfg.domains, h, w], |i| if i / (h * w) == j { 1.0 } else { 0.0 });
    let v = g.constant(t);
    RelevanceWeights::forced(g, cfg, v, WeightMode::Spatial).unwrap()
}

#[test]
fn zero_backbone_maps_zero_input_to_zero() {
    let cfg = CareConfig::tiny();
    let p = CareParams::zeros(&cfg).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    let x = g.constant(Tensor::zeros(cfg.input_shape.to_vec()));
    let f = extract_base(&mut g, &b, x).unwrap();
    assert_eq!(g.shape(f.var()), cfg.base_shape);
    assert!(g.value(f.var()).data().iter().all(|&v| v == 0.0));
}

#[test]
fn reference_config_shapes() {
    let cfg = CareConfig::reference(4, 6);
    let plan = cfg.validate().unwrap();
    let [_, t, mut h, mut w] = cfg.input_shape;
    for &s in &plan.backbone_strides {
        h = (h - 1) / s + 1;
        w = (w - 1) / s + 1;
    }
    assert_eq!([cfg.base_shape[0], t / plan.frames_per_step, h, w], [256, 8, 23, 40]);

    let p = CareParams::init(&cfg, 1).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    let base = g.constant(random(&cfg.base_shape, 2));
    let base = care_core::model::BaseFeature::from_var(&g, &cfg, base).unwrap();
    let e = elaborate(&mut g, &b, Elaborator::General, base).unwrap();
    assert_eq!(g.shape(e.var()), [4, 12, 20]);
}

#[test]
fn rejects_wrong_input_shape() {
    let cfg = CareConfig::tiny();
    let p = CareParams::init(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    let x = g.constant(Tensor::zeros(vec![2, 4, 12, 11]));
    assert!(matches!(extract_base(&mut g, &b, x), Err(Error::Dimension { .. })));
}

#[test]
fn forwards_are_deterministic() {
    let cfg = CareConfig::tiny();
    let run = || {
        let p = CareParams::init(&cfg, 7).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, frozen);
        let x = g.constant(input(&cfg, 8));
        let base = extract_base(&mut g, &b, x).unwrap();
        let seen = forward_seen(&mut g, &b, x, 1).unwrap();
        let unseen = forward_unseen(&mut g, &b, x).unwrap();
        (
            g.value(base.var()).clone(),
            g.value(seen).clone(),
            g.value(unseen).clone(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
    assert_eq!(a.2.shape(), [cfg.classes]);
}

#[test]
fn tied_elaborators_agree() {
    let cfg = CareConfig::tiny();
    let mut p = CareParams::init(&cfg, 3).unwrap();
    let general = p.slots_of(ParamGroup::General);
    let specific = p.slots_of(ParamGroup::Specific(2));
    for (&gs, &ss) in general.iter().zip(&specific) {
        let t = p.tensors()[gs].clone();
        *p.tensor_mut(ss) = t;
    }
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    let x = g.constant(input(&cfg, 4));
    let base = extract_base(&mut g, &b, x).unwrap();
    let a = elaborate(&mut g, &b, Elaborator::General, base).unwrap();
    let s = elaborate(&mut g, &b, Elaborator::Specific(2), base).unwrap();
    assert_eq!(g.value(a.var()).data(), g.value(s.var()).data());
    let s1 = elaborate(&mut g, &b, Elaborator::Specific(1), base).unwrap();
    assert_ne!(g.value(a.var()).data(), g.value(s1.var()).data());
    assert_eq!(s.kind(), FeatureKind::Specific(2));
    assert!(matches!(elaborate(&mut g, &b, Elaborator::Specific(3), base), Err(Error::Input(_))));
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = CareConfig::tiny();
    let p = CareParams::init(&cfg, 5).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    let x = g.constant(input(&cfg, 6));
    let base = extract_base(&mut g, &b, x).unwrap();
    let (_, maps) = elaborate_traced(&mut g, &b, Elaborator::General, base).unwrap();
    assert_eq!(maps.len(), ATTENTION_LAYERS * cfg.attention_heads);
    let tokens = cfg.base_shape[2] * cfg.base_shape[3];
    for m in maps {
        assert_eq!(g.shape(m), [tokens, tokens]);
        for row in g.value(m).data().chunks(tokens) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn classifier_contract() {
    let cfg = CareConfig::tiny();
    let mut p = CareParams::init(&cfg, 9).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    let fa = g.constant(random(&cfg.elab_shape, 10));
    let fb = g.constant(random(&cfg.elab_shape, 11));
    let fa = ElabFeature::from_var(&g, &cfg, fa, FeatureKind::General).unwrap();
    let fb = ElabFeature::from_var(&g, &cfg, fb, FeatureKind::Specific(0)).unwrap();
    let ab = classify(&mut g, &b, fa, fb).unwrap();
    let ba = classify(&mut g, &b, fb, fa).unwrap();
    assert_eq!(g.shape(ab), [cfg.classes]);
    let diff = g.value(ab).max_abs_diff(g.value(ba));
    assert!(diff > 1e-6, "ordered concatenation, got diff {diff}");

    let bad = g.constant(Tensor::zeros(vec![2, 3, 2]));
    assert!(ElabFeature::from_var(&g, &cfg, bad, FeatureKind::General).is_err());

    for s in p.slots_of(ParamGroup::Classifier) {
        p.tensor_mut(s).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    let fa = g.constant(random(&cfg.elab_shape, 10));
    let fa = ElabFeature::from_var(&g, &cfg, fa, FeatureKind::General).unwrap();
    let y = classify(&mut g, &b, fa, fa).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn seen_path_is_the_composition() {
    let cfg = CareConfig::tiny();
    let p = CareParams::init(&cfg, 12).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    let x = g.constant(input(&cfg, 13));
    let direct = forward_seen(&mut g, &b, x, 1).unwrap();
    let base = extract_base(&mut g, &b, x).unwrap();
    let gen = elaborate(&mut g, &b, Elaborator::General, base).unwrap();
    let spec = elaborate(&mut g, &b, Elaborator::Specific(1), base).unwrap();
    let composed = classify(&mut g, &b, gen, spec).unwrap();
    assert_eq!(g.value(direct).data(), g.value(composed).data());
    assert!(matches!(forward_seen(&mut g, &b, x, 3), Err(Error::Input(_))));
}

#[test]
fn one_hot_weights_reduce_unseen_to_seen() {
    let cfg = CareConfig::tiny();
    let p = CareParams::init(&cfg, 14).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    let x = g.constant(input(&cfg, 15));
    let base = extract_base(&mut g, &b, x).unwrap();
    let gen = elaborate(&mut g, &b, Elaborator::General, base).unwrap();
    let specs: Vec<_> = (0..cfg.domains)
        .map(|k| elaborate(&mut g, &b, Elaborator::Specific(k), base).unwrap())
        .collect();
    for j in 0..cfg.domains {
        let w = one_hot_weights(&mut g, &cfg, j);
        let unscaled = weighted_sum(&mut g, w, &specs).unwrap();
        let unscaled = ElabFeature::from_var(&g, &cfg, unscaled, FeatureKind::Approximated).unwrap();
        let logits = classify(&mut g, &b, gen, unscaled).unwrap();
        let seen = forward_seen(&mut g, &b, x, j).unwrap();
        assert_eq!(g.value(logits).data(), g.value(seen).data());

        let approx = approximate_specific(&mut g, &cfg, w, &specs).unwrap();
        let expect: Vec<f64> = g.value(specs[j].var()).data().iter().map(|v| v / cfg.domains as f64).collect();
        assert_eq!(g.value(approx.var()).data(), expect.as_slice());
    }
}

#[test]
fn seen_loss_reaches_base_groups_only() {
    let cfg = CareConfig::tiny();
    let p = CareParams::init(&cfg, 16).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, all);
    let x = g.constant(input(&cfg, 17));
    let logits = forward_seen(&mut g, &b, x, 1).unwrap();
    let loss = g.cross_entropy_logits(logits, 2).unwrap();
    g.backward(loss).unwrap();
    let grads = b.grads(&g);
    for group in [
        ParamGroup::Backbone,
        ParamGroup::General,
        ParamGroup::Specific(1),
        ParamGroup::Classifier,
    ] {
        assert!(group_flags(&p, &grads, group).0, "{group:?} received no gradient");
    }
    for group in [ParamGroup::Relevance, ParamGroup::Specific(0), ParamGroup::Specific(2)] {
        assert!(group_flags(&p, &grads, group).1, "{group:?} must be untouched");
    }
}

#[test]
fn unseen_loss_reaches_every_group() {
    let cfg = CareConfig::tiny();
    let p = CareParams::init(&cfg, 18).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, all);
    let x = g.constant(input(&cfg, 19));
    let logits = forward_unseen(&mut g, &b, x).unwrap();
    let loss = g.cross_entropy_logits(logits, 0).unwrap();
    g.backward(loss).unwrap();
    let grads = b.grads(&g);
    let mut groups = vec![ParamGroup::Backbone, ParamGroup::General, ParamGroup::Classifier, ParamGroup::Relevance];
    groups.extend((0..cfg.domains).map(ParamGroup::Specific));
    for group in groups {
        assert!(group_flags(&p, &grads, group).0, "{group:?} received no gradient");
    }
}

#[test]
fn relevance_contract() {
    let cfg = CareConfig::tiny();
    let p = CareParams::init(&cfg, 20).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    for seed in 0..5 {
        let x = g.constant(input(&cfg, 100 + seed));
        let scaled = g.scale(x, 50.0);
        let trace = forward_unseen_traced(&mut g, &b, scaled).unwrap();
        let w = g.value(trace.weights.var());
        assert_eq!(w.shape(), [cfg.domains, 3, 3]);
        assert!(w.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    let x = g.constant(input(&cfg, 21));
    let base = extract_base(&mut g, &b, x).unwrap();
    let specs: Vec<_> = (0..cfg.domains)
        .map(|k| elaborate(&mut g, &b, Elaborator::Specific(k), base).unwrap())
        .collect();
    assert!(matches!(evaluate_relevance(&mut g, &b, base, &specs[..2]), Err(Error::Input(_))));
}

#[test]
fn zero_heads_score_one_half() {
    let cfg = CareConfig::tiny();
    let mut p = CareParams::init(&cfg, 22).unwrap();
    for head in p.layout().relevance.heads.clone() {
        p.tensor_mut(head.weight).data_mut().fill(0.0);
        p.tensor_mut(head.bias).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    let x = g.constant(input(&cfg, 23));
    let trace = forward_unseen_traced(&mut g, &b, x).unwrap();
    assert!(g.value(trace.weights.var()).data().iter().all(|&v| v == 0.5));
}

#[test]
fn relevance_is_equivariant_under_domain_permutation() {
    let cfg = CareConfig::tiny();
    let p = CareParams::init(&cfg, 24).unwrap();
    let perm = [2usize, 0, 1];
    let mut q = p.clone();
    let heads = p.layout().relevance.heads.clone();
    for (i, &src) in perm.iter().enumerate() {
        *q.tensor_mut(heads[i].weight) = p.tensors()[heads[src].weight].clone();
        *q.tensor_mut(heads[i].bias) = p.tensors()[heads[src].bias].clone();
    }
    let mut g = Graph::new();
    let bp = p.bind(&mut g, frozen);
    let bq = q.bind(&mut g, frozen);
    let x = g.constant(input(&cfg, 25));
    let base = extract_base(&mut g, &bp, x).unwrap();
    let specs: Vec<_> = (0..cfg.domains)
        .map(|k| elaborate(&mut g, &bp, Elaborator::Specific(k), base).unwrap())
        .collect();
    let permuted: Vec<_> = perm.iter().map(|&k| specs[k]).collect();
    let w = evaluate_relevance(&mut g, &bp, base, &specs).unwrap();
    let wp = evaluate_relevance(&mut g, &bq, base, &permuted).unwrap();
    for (i, &src) in perm.iter().enumerate() {
        let a = g.select(wp.var(), i).unwrap();
        let b = g.select(w.var(), src).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }
}

#[test]
fn hand_computed_weighted_average() {
    let cfg = CareConfig {
        domains: 2,
        classes: 2,
        input_shape: [1, 2, 4, 4],
        base_shape: [1, 1, 4, 4],
        elab_shape: [1, 2, 2],
        attention_heads: 1,
        weight_mode: WeightMode::Spatial,
        second_order_meta: false,
        relevance_kernel: 3,
    };
    cfg.validate().unwrap();
    let mut g = Graph::new();
    let mk = |g: &mut Graph, d: [f64; 4]| {
        let v = g.constant(Tensor::new(vec![1, 2, 2], d.to_vec()).unwrap());
        ElabFeature::from_var(g, &cfg, v, FeatureKind::Specific(0)).unwrap()
    };
    let f1 = mk(&mut g, [1., 2., 3., 4.]);
    let f2 = mk(&mut g, [5., 6., 7., 8.]);
    let w = g.constant(Tensor::new(vec![2, 2, 2], vec![1., 0., 0.5, 1., 0., 1., 0.5, 2.]).unwrap());
    let w = RelevanceWeights::forced(&g, &cfg, w, WeightMode::Spatial).unwrap();
    let out = approximate_specific(&mut g, &cfg, w, &[f1, f2]).unwrap();
    assert_eq!(g.value(out.var()).data(), &[0.5, 3.0, 2.5, 10.0]);
    assert_eq!(out.kind(), FeatureKind::Approximated);

    let zero = g.constant(Tensor::zeros(vec![2, 2, 2]));
    let zero = RelevanceWeights::forced(&g, &cfg, zero, WeightMode::Spatial).unwrap();
    let out = approximate_specific(&mut g, &cfg, zero, &[f1, f2]).unwrap();
    assert!(g.value(out.var()).data().iter().all(|&v| v == 0.0));

    let scalar = g.constant(Tensor::new(vec![2], vec![1., 1.]).unwrap());
    let scalar = RelevanceWeights::forced(&g, &cfg, scalar, WeightMode::Scalar).unwrap();
    assert!(matches!(approximate_specific(&mut g, &cfg, scalar, &[f1, f2]), Err(Error::Usage(_))));
}

#[test]
fn approximation_is_linear_and_additive() {
    let cfg = CareConfig::tiny();
    let mut g = Graph::new();
    let specs: Vec<_> = (0..cfg.domains)
        .map(|k| {
            let v = g.constant(random(&cfg.elab_shape, 30 + k as u64));
            ElabFeature::from_var(&g, &cfg, v, FeatureKind::Specific(k)).unwrap()
        })
        .collect();
    let raw = random(&[cfg.domains, 3, 3], 40);
    let wv = g.constant(raw.clone());
    let w = RelevanceWeights::forced(&g, &cfg, wv, WeightMode::Spatial).unwrap();
    let base = approximate_specific(&mut g, &cfg, w, &specs).unwrap();
    let alpha = -2.75;
    let scaled = g.scale(wv, alpha);
    let ws = RelevanceWeights::forced(&g, &cfg, scaled, WeightMode::Spatial).unwrap();
    let out = approximate_specific(&mut g, &cfg, ws, &specs).unwrap();
    for (a, b) in g.value(out.var()).data().iter().zip(g.value(base.var()).data()) {
        assert!((a - alpha * b).abs() < 1e-12);
    }

    let mut masked = raw.clone();
    masked.data_mut()[9..18].fill(0.0);
    let mv = g.constant(masked);
    let wm = RelevanceWeights::forced(&g, &cfg, mv, WeightMode::Spatial).unwrap();
    let with = approximate_specific(&mut g, &cfg, wm, &specs).unwrap();
    let other = g.constant(random(&cfg.elab_shape, 99));
    let mut swapped = specs.clone();
    swapped[1] = ElabFeature::from_var(&g, &cfg, other, FeatureKind::Specific(1)).unwrap();
    let without = approximate_specific(&mut g, &cfg, wm, &swapped).unwrap();
    assert_eq!(g.value(with.var()).data(), g.value(without.var()).data());
}

#[test]
fn ablations_substitute_zero_features() {
    let cfg = CareConfig::tiny();
    let p = CareParams::init(&cfg, 50).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    let x = g.constant(input(&cfg, 51));
    let ns = ablated_forward(&mut g, &b, x, Variant::NoSpecific).unwrap();
    let ng = ablated_forward(&mut g, &b, x, Variant::NoGeneral).unwrap();
    let full = ablated_forward(&mut g, &b, x, Variant::Full).unwrap();
    let trace = forward_unseen_traced(&mut g, &b, x).unwrap();
    let zero = ElabFeature::zero(&mut g, &cfg);
    let ns_ref = classify(&mut g, &b, trace.general, zero).unwrap();
    let ng_ref = classify(&mut g, &b, zero, trace.approximated).unwrap();
    assert_eq!(g.value(ns).data(), g.value(ns_ref).data());
    assert_eq!(g.value(ng).data(), g.value(ng_ref).data());
    assert_eq!(g.value(full).data(), g.value(trace.logits).data());
    assert!(g.value(trace.general.var()).max_abs_diff(g.value(trace.approximated.var())) > 0.0);
    assert!(g.value(ns).max_abs_diff(g.value(ng)) > 0.0);
    assert!(matches!(ablated_forward(&mut g, &b, x, Variant::ScalarWeights), Err(Error::Usage(_))));
}

#[test]
fn scalar_mode_matches_spatial_mode_with_constant_maps() {
    let mut cfg = CareConfig::tiny();
    cfg.weight_mode = WeightMode::Scalar;
    let p = CareParams::init(&cfg, 60).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, frozen);
    let x = g.constant(input(&cfg, 61));
    let scalar_logits = ablated_forward(&mut g, &b, x, Variant::ScalarWeights).unwrap();
    let trace = forward_unseen_traced(&mut g, &b, x).unwrap();
    assert_eq!(g.shape(trace.weights.var()), [cfg.domains]);

    let mut spatial = cfg.clone();
    spatial.weight_mode = WeightMode::Spatial;
    let w = g.value(trace.weights.var()).clone();
    let maps = Tensor::from_fn(vec![cfg.domains, 3, 3], |i| w.data()[i / 9]);
    let maps = g.constant(maps);
    let maps = RelevanceWeights::forced(&g, &spatial, maps, WeightMode::Spatial).unwrap();
    let approx = approximate_specific(&mut g, &spatial, maps, &trace.specific).unwrap();
    let logits = classify(&mut g, &b, trace.general, approx).unwrap();
    assert_eq!(g.value(logits).data(), g.value(scalar_logits).data());
}

#[test]
fn ablated_gradients_flow_only_through_live_branches() {
    let cfg = CareConfig::tiny();
    let p = CareParams::init(&cfg, 70).unwrap();
    let grads = |variant: Variant| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, all);
        let x = g.constant(input(&cfg, 71));
        let logits = ablated_forward(&mut g, &b, x, variant).unwrap();
        let loss = g.cross_entropy_logits(logits, 1).unwrap();
        g.backward(loss).unwrap();
        b.grads(&g)
    };
    let ns = grads(Variant::NoSpecific);
    assert!(group_flags(&p, &ns, ParamGroup::General).0);
    assert!(group_flags(&p, &ns, ParamGroup::Relevance).1);
    for k in 0..cfg.domains {
        assert!(group_flags(&p, &ns, ParamGroup::Specific(k)).1);
    }
    let ng = grads(Variant::NoGeneral);
    assert!(group_flags(&p, &ng, ParamGroup::General).1);
    assert!(group_flags(&p, &ng, ParamGroup::Relevance).0);
    for k in 0..cfg.domains {
        assert!(group_flags(&p, &ng, ParamGroup::Specific(k)).0);
    }
}

#[test]
fn full_model_gradient_check() {
    let cfg = CareConfig::tiny();
    assert_eq!((cfg.domains, cfg.classes, cfg.elab_shape), (3, 4, [2, 3, 3]));
    let p = CareParams::init(&cfg, 80).unwrap();
    let x = input(&cfg, 81);
    let f = |g: &mut Graph, vars: &[Var]| {
        let b = p.attach(g, vars.to_vec())?;
        let xv = g.constant(x.clone());
        let logits = forward_unseen(g, &b, xv)?;
        g.cross_entropy_logits(logits, 3)
    };
    // Attention query/key gradients are ~1e-8 here; a 1e-5 step drowns them in rounding.
    let err = grad_check_many(f, p.tensors(), 1e-4).unwrap();
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn params_round_trip_and_count() {
    let cfg = CareConfig::tiny();
    let p = CareParams::init(&cfg, 90).unwrap();
    let q = CareParams::init(&cfg, 91).unwrap();
    assert_eq!(p.scalar_count(), q.scalar_count());
    assert_ne!(p.to_flat(), q.to_flat());
    assert_eq!(CareParams::from_flat(&cfg, &p.to_flat()).unwrap(), p);
    assert!(matches!(CareParams::from_flat(&cfg, &[0.0; 3]), Err(Error::Compatibility(_))));
    assert_eq!(p.layout().specific.len(), cfg.domains);
    assert_eq!(p.layout().relevance.heads.len(), cfg.domains);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    p.save(&path).unwrap();
    assert_eq!(CareParams::load(&path).unwrap(), p);
}
