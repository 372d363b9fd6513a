mod common;

use cba_core::autodiff::{finite_difference_gradient, max_relative_error, GradMap, Tape};
use cba_core::methods::{rehearsal_loss, Method, MethodConfig, TrainBatch};
use cba_core::nn::{self, ParamGroup};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

#[test]
fn mlp_cross_entropy_matches_finite_differences() {
    for seed in 0..20 {
        let err = gradient_oracle_error(seed);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn adapted_loss_gradients_match_finite_differences() {
    for seed in 100..110 {
        let inst = instance(seed);
        let cfg = MethodConfig {
            method: if seed % 2 == 0 { Method::Er } else { Method::Derpp },
            use_cba: true,
            ..MethodConfig::default()
        };
        let trn = TrainBatch {
            new: inst.a.clone(),
            buf: Some(inst.b.clone()),
        };
        let second = (cfg.method == Method::Derpp).then(|| {
            let mut s = inst.c.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            s.logits = Some(gaussian(&mut rng, &[s.len(), inst.params.classifier.class_count()], 1.0));
            s
        });
        let tape = Tape::new();
        let tracked = inst.params.track(&tape);
        let loss = rehearsal_loss(&tape, &tracked, &trn, second.as_ref(), &cfg, true).unwrap();
        let groups = [ParamGroup::Backbone, ParamGroup::Head, ParamGroup::Cba];
        let analytic = nn::backward(&tape, loss, &inst.params, &tracked, &groups).unwrap();

        let fd = finite_difference_gradient(&inst.params, FD_EPSILON, |p| {
            let tape = Tape::new();
            let tracked = p.track(&tape);
            Ok(rehearsal_loss(&tape, &tracked, &trn, second.as_ref(), &cfg, true)?.value().item())
        })
        .unwrap();
        let err = max_relative_error(&analytic, &fd, REL_FLOOR);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn hypergradient_matches_frozen_backbone_oracle() {
    for seed in 0..12 {
        let err = hypergradient_oracle_error(seed);
        assert!(err <= 1e-3, "seed {seed}: relative error {err:e}");
    }
}

/// Hessian-vector products from differentiating the gradient graph, checked
/// against central differences of first-order gradients along the same
/// direction.
#[test]
fn second_order_matches_differenced_gradients() {
    for seed in 200..206 {
        let inst = instance(seed);
        let theta = classifier_map(&inst.params.classifier);
        let names: Vec<String> = inst.params.classifier.named().into_iter().map(|(n, _)| n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = GradMap(theta.iter().map(|(k, t)| (k.clone(), gaussian(&mut rng, t.shape(), 1.0))).collect());

        let tape = Tape::new();
        let tracked = inst.params.classifier.track(&tape);
        let vars = tracked.vars();
        let x = tape.constant(inst.a.x.clone());
        let loss = tracked.logits(x).unwrap().cross_entropy(&inst.a.y).unwrap();
        let grads = tape.gradients_graph(loss, &vars).unwrap();
        let mut gv = None;
        for (name, g) in names.iter().zip(&grads) {
            let term = g.mul(tape.constant(v.get(name).unwrap().clone())).unwrap().sum().unwrap();
            gv = Some(match gv {
                None => term,
                Some(acc) => term.add(acc).unwrap(),
            });
        }
        let hv = tape.gradients(gv.unwrap(), &vars).unwrap();
        let hv = nn::grad_map(names.clone(), hv);

        let directional = |m: &GradMap| -> f64 {
            let c = classifier_from(&inst.params.classifier, m);
            let tape = Tape::new();
            let tracked = c.track(&tape);
            let x = tape.constant(inst.a.x.clone());
            let loss = tracked.logits(x).unwrap().cross_entropy(&inst.a.y).unwrap();
            let g = tape.gradients(loss, &tracked.vars()).unwrap();
            names.iter().zip(&g).map(|(k, g)| g.dot(v.get(k).unwrap())).sum()
        };
        let fd = finite_difference_gradient(&theta, FD_EPSILON, |m| Ok(directional(m))).unwrap();
        let err = max_relative_error(&hv, &fd, 1e-5);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn hypergradient_of_zero_adaptor_reaches_output_layer_only() {
    let mut inst = instance(7);
    inst.params.cba.zero();
    let cfg = MethodConfig {
        use_cba: true,
        alpha: 0.1,
        ..MethodConfig::default()
    };
    let state = cba_core::bilevel::BilevelState::new(inst.params.clone(), 0.1, 0.1).unwrap();
    let trn = TrainBatch {
        new: inst.a.clone(),
        buf: Some(inst.b.clone()),
    };
    let g = cba_core::bilevel::hypergradient(&state, &trn, None, &inst.c, &cfg).unwrap();
    assert_eq!(g.get("cba.hidden.weight").unwrap().max_abs(), 0.0);
    assert_eq!(g.get("cba.hidden.bias").unwrap().max_abs(), 0.0);
    assert!(g.get("cba.out.bias").unwrap().max_abs() > 0.0);
}
