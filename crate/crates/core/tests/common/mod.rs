#![allow(dead_code)]

use cba_core::autodiff::{finite_difference_gradient, max_relative_error, GradMap, Tape};
use cba_core::bilevel::{hypergradient, hypergradient_fd_oracle, BilevelState};
use cba_core::methods::{cross_entropy, Method, MethodConfig, TrainBatch};
use cba_core::nn::{self, init_params, Classifier, ModelSpec, ParamGroup, ParamSet};
use cba_core::stream::Batch;
use cba_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_EPSILON: f64 = 1e-5;
/// Denominator floor for relative errors, so that coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn gaussian(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_batch(rng: &mut impl Rng, n: usize, d: usize, classes: usize) -> Batch {
    let x = gaussian(rng, &[n, d], 1.0);
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(x, y).unwrap()
}

pub struct Instance {
    pub params: ParamSet,
    pub a: Batch,
    pub b: Batch,
    pub c: Batch,
}

/// Smallest |pre-activation| over every ReLU the batch passes through.
fn kink_margin(params: &ParamSet, batch: &Batch) -> f64 {
    let mut h = batch.x.clone();
    let mut margin = f64::INFINITY;
    for layer in &params.classifier.backbone {
        let a = layer.forward(&h).unwrap();
        margin = margin.min(a.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
        h = a.relu();
    }
    let z = params.classifier.head.forward(&h).unwrap();
    let a = params.cba.hidden.forward(&z).unwrap();
    margin.min(a.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

/// A random MLP (all dims <= 16) with a non-trivial adaptor and three batches,
/// redrawn until no ReLU input lies within 1e-3 of its kink, so central
/// differences never straddle one.
pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let inst = draw_instance(&mut rng);
        if [&inst.a, &inst.b, &inst.c].iter().all(|b| kink_margin(&inst.params, b) > 1e-3) {
            return inst;
        }
    }
}

fn draw_instance(rng: &mut ChaCha8Rng) -> Instance {
    let d = rng.random_range(2..=16);
    let depth = rng.random_range(0..=2);
    let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=16)).collect();
    let classes = rng.random_range(2..=10);
    let mut params = init_params(&ModelSpec {
        cba_hidden: rng.random_range(2..=16),
        seed: rng.random(),
        ..ModelSpec::new(d, widths, classes)
    })
    .unwrap();
    let h = params.cba.hidden.outputs();
    params.cba.out.weight = gaussian(rng, &[classes, h], 0.3);
    params.cba.out.bias = gaussian(rng, &[classes], 0.3);
    let batch = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(1..=16);
        random_batch(rng, n, d, classes)
    };
    let a = batch(rng);
    let b = batch(rng);
    let c = batch(rng);
    Instance { params, a, b, c }
}

/// Mean cross-entropy of the plain classifier computed with tensor ops only.
pub fn plain_ce(classifier: &Classifier, batch: &Batch) -> f64 {
    let z = nn::logits(classifier, &batch.x).unwrap();
    let lp = z.log_softmax_rows().pick(&batch.y).unwrap();
    -lp.data().iter().sum::<f64>() / batch.len() as f64
}

/// Worst relative error of tape gradients of plain MLP cross-entropy against
/// central differences.
pub fn gradient_oracle_error(seed: u64) -> f64 {
    let inst = instance(seed);
    let tape = Tape::new();
    let tracked = inst.params.track(&tape);
    let loss = cross_entropy(&tape, &tracked, &inst.a, false).unwrap();
    let groups = [ParamGroup::Backbone, ParamGroup::Head];
    let analytic = nn::backward(&tape, loss, &inst.params, &tracked, &groups).unwrap();

    let theta = classifier_map(&inst.params.classifier);
    let fd = finite_difference_gradient(&theta, FD_EPSILON, |m| {
        Ok(plain_ce(&classifier_from(&inst.params.classifier, m), &inst.a))
    })
    .unwrap();
    max_relative_error(&analytic, &fd, REL_FLOOR)
}

pub fn classifier_map(c: &Classifier) -> GradMap {
    GradMap(c.named().into_iter().map(|(n, t)| (n, t.clone())).collect())
}

pub fn classifier_from(template: &Classifier, m: &GradMap) -> Classifier {
    let mut c = template.clone();
    for (i, layer) in c.backbone.iter_mut().enumerate() {
        layer.weight = m.get(&format!("backbone.{i}.weight")).unwrap().clone();
        layer.bias = m.get(&format!("backbone.{i}.bias")).unwrap().clone();
    }
    c.head.weight = m.get("head.weight").unwrap().clone();
    c.head.bias = m.get("head.bias").unwrap().clone();
    c
}

/// Worst relative error of the one-step hypergradient against the
/// finite-difference oracle with the backbone frozen. Even seeds use ER, odd
/// seeds DER++.
pub fn hypergradient_oracle_error(seed: u64) -> f64 {
    let inst = instance(seed);
    let method = if seed.is_multiple_of(2) { Method::Er } else { Method::Derpp };
    let cfg = MethodConfig {
        method,
        use_cba: true,
        alpha: 0.1,
        ..MethodConfig::default()
    };
    let mut state = BilevelState::new(inst.params.clone(), cfg.alpha, 0.1).unwrap();
    state.freeze_backbone = true;
    let trn = TrainBatch {
        new: inst.a.clone(),
        buf: Some(inst.b.clone()),
    };
    let second = (method == Method::Derpp).then(|| {
        let mut s = inst.b.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD15);
        s.logits = Some(gaussian(&mut rng, &[s.len(), inst.params.classifier.class_count()], 1.0));
        s
    });
    let analytic = hypergradient(&state, &trn, second.as_ref(), &inst.c, &cfg).unwrap();
    let fd = hypergradient_fd_oracle(&state, &trn, second.as_ref(), &inst.c, &cfg, FD_EPSILON).unwrap();
    max_relative_error(&analytic, &fd, REL_FLOOR)
}
