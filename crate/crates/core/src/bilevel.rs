//! Bi-level training of the continual bias adaptor.
//!
//! Each step pairs one inner SGD update of the classifier, taken through the
//! adapted posterior `g_omega(f_theta(x))`, with one outer SGD update of the
//! adaptor. The outer gradient is taken through the inner update of the
//! linear head only: the head after the step is kept on the tape as
//! `W~(omega) = W - alpha * dL_trn/dW`, while the backbone's new values enter
//! the outer loss as constants.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_gradient, GradMap, Tape, Var};
use crate::buffer::MemoryBuffer;
use crate::error::{Error, Result};
use crate::methods::{baseline_train_step, rehearsal_loss, Method, MethodConfig, TrainBatch};
use crate::metrics::{gradient_alignment, AlignmentRecord};
use crate::nn::{self, grad_map, Cba, Classifier, ParamSet, TrackedCba, TrackedParams};
use crate::stream::Batch;

#[derive(Clone, Debug)]
pub struct BilevelState {
    pub params: ParamSet,
    pub step: u64,
    pub alpha: f64,
    pub beta: f64,
    /// Skip the actual backbone update (used to isolate the head-only
    /// hypergradient when probing it against finite differences).
    pub freeze_backbone: bool,
    pub last_diag: Option<AlignmentRecord>,
}

impl BilevelState {
    pub fn new(params: ParamSet, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::invalid(format!("bad learning rates alpha={alpha}, beta={beta}")));
        }
        params.validate()?;
        Ok(Self {
            params,
            step: 0,
            alpha,
            beta,
            freeze_backbone: false,
            last_diag: None,
        })
    }
}

/// Result of the inner step.
pub struct InnerStep<'t> {
    /// `L_trn` at `(theta^k, omega^k)`.
    pub loss: f64,
    /// The classifier after the actual (detached) SGD step.
    pub theta_next: Classifier,
    /// `W - alpha * dL_trn/dW`, differentiable in omega.
    pub head_weight: Var<'t>,
    pub head_bias: Var<'t>,
    /// The adaptor leaves the inner loss was built from.
    pub cba: TrackedCba<'t>,
    /// `dL_trn/dtheta` at `theta^k`, detached.
    pub trn_grad: GradMap,
}

/// The rehearsal loss evaluated through the adapted network.
pub fn inner_loss<'t>(
    tape: &'t Tape,
    tracked: &TrackedParams<'t>,
    trn: &TrainBatch,
    second: Option<&Batch>,
    cfg: &MethodConfig,
) -> Result<Var<'t>> {
    rehearsal_loss(tape, tracked, trn, second, cfg, true)
}

pub fn inner_update<'t>(
    tape: &'t Tape,
    state: &BilevelState,
    trn: &TrainBatch,
    second: Option<&Batch>,
    cfg: &MethodConfig,
) -> Result<InnerStep<'t>> {
    let tracked = state.params.track(tape);
    let loss = inner_loss(tape, &tracked, trn, second, cfg)?;
    let theta = tracked.classifier.vars();
    let grads = tape.gradients_graph(loss, &theta)?;

    let names: Vec<String> = state.params.classifier.named().into_iter().map(|(n, _)| n).collect();
    let trn_grad = grad_map(names, grads.iter().map(|g| (*g.value()).clone()).collect());
    let loss_value = loss.value().item();
    if !loss_value.is_finite() || !trn_grad.all_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            what: format!("inner loss {loss_value} or its gradient"),
        });
    }

    let n = grads.len();
    let (grad_w, grad_b) = (grads[n - 2], grads[n - 1]);
    let head_weight = tracked.classifier.head.weight.sub(grad_w.scale(state.alpha)?)?;
    let head_bias = tracked.classifier.head.bias.sub(grad_b.scale(state.alpha)?)?;

    let mut theta_next = state.params.classifier.clone();
    if state.freeze_backbone {
        let mut head_only = GradMap::new();
        for key in ["head.weight", "head.bias"] {
            head_only.insert(key, trn_grad.get(key).expect("head gradient").clone());
        }
        theta_next.sgd_step(&head_only, state.alpha)?;
    } else {
        theta_next.sgd_step(&trn_grad, state.alpha)?;
    }

    Ok(InnerStep {
        loss: loss_value,
        theta_next,
        head_weight,
        head_bias,
        cba: tracked.cba,
        trn_grad,
    })
}

/// `L_buf` of the plain classifier (no adaptor) with the omega-dependent head
/// on features from the updated backbone.
pub fn outer_loss<'t>(tape: &'t Tape, inner: &InnerStep<'t>, buf2: &Batch) -> Result<Var<'t>> {
    if buf2.is_empty() {
        return Err(Error::EmptyBatch("outer loss needs a buffer batch"));
    }
    let features = tape.constant(nn::backbone_forward(&inner.theta_next, &buf2.x)?);
    let z = features.matmul(inner.head_weight.t()?)?.add_row(inner.head_bias)?;
    z.cross_entropy(&buf2.y)
}

fn cba_names() -> Vec<String> {
    ["cba.hidden.weight", "cba.hidden.bias", "cba.out.weight", "cba.out.bias"]
        .map(String::from)
        .to_vec()
}

/// Gradient of an outer loss with respect to the adaptor leaves of `inner`.
pub fn outer_gradient<'t>(tape: &'t Tape, inner: &InnerStep<'t>, outer: Var<'t>) -> Result<GradMap> {
    let grads = tape.gradients(outer, &inner.cba.vars())?;
    Ok(grad_map(cba_names(), grads))
}

/// `dL_buf/domega` through the one-step head update.
pub fn hypergradient(
    state: &BilevelState,
    trn: &TrainBatch,
    second: Option<&Batch>,
    buf2: &Batch,
    cfg: &MethodConfig,
) -> Result<GradMap> {
    let tape = Tape::new();
    let inner = inner_update(&tape, state, trn, second, cfg)?;
    let outer = outer_loss(&tape, &inner, buf2)?;
    outer_gradient(&tape, &inner, outer)
}

/// `omega <- omega - beta * grad`. A non-finite gradient skips the update and
/// returns `false`.
pub fn outer_update(state: &mut BilevelState, grad: &GradMap) -> Result<bool> {
    if !grad.all_finite() {
        log::warn!("step {}: non-finite hypergradient, outer update skipped", state.step);
        return Ok(false);
    }
    state.params.cba.sgd_step(grad, state.beta)?;
    Ok(true)
}

/// Central differences of `omega -> L_buf(theta^{k+1}(omega))`, recomputing a
/// first-order inner step at every probe. Unlike [`hypergradient`], the probe
/// also sees the backbone's dependence on omega unless the backbone is frozen.
pub fn hypergradient_fd_oracle(
    state: &BilevelState,
    trn: &TrainBatch,
    second: Option<&Batch>,
    buf2: &Batch,
    cfg: &MethodConfig,
    epsilon: f64,
) -> Result<GradMap> {
    let omega = grad_map(
        cba_names(),
        state.params.cba.named().into_iter().map(|(_, t)| t.clone()).collect(),
    );
    finite_difference_gradient(&omega, epsilon, |w| {
        let mut probe = state.params.clone();
        probe.cba = cba_from(w);
        let tape = Tape::new();
        let tracked = probe.track(&tape);
        let loss = rehearsal_loss(&tape, &tracked, trn, second, cfg, true)?;
        let groups: &[nn::ParamGroup] = if state.freeze_backbone {
            &[nn::ParamGroup::Head]
        } else {
            &[nn::ParamGroup::Backbone, nn::ParamGroup::Head]
        };
        let g = nn::backward(&tape, loss, &probe, &tracked, groups)?;
        probe.classifier.sgd_step(&g, state.alpha)?;
        let z = nn::logits(&probe.classifier, &buf2.x)?;
        let logp = z.log_softmax_rows().pick(&buf2.y)?;
        Ok(-logp.data().iter().sum::<f64>() / buf2.len() as f64)
    })
}

fn cba_from(w: &GradMap) -> Cba {
    let get = |k: &str| w.get(k).expect("adaptor tensor").clone();
    Cba {
        hidden: nn::Linear {
            weight: get("cba.hidden.weight"),
            bias: get("cba.hidden.bias"),
        },
        out: nn::Linear {
            weight: get("cba.out.weight"),
            bias: get("cba.out.bias"),
        },
    }
}

/// Random streams used by an online step. Inner replay batches and reservoir
/// decisions share `buffer`; the outer replay batch draws from `outer`, so a
/// run with the adaptor consumes `buffer` exactly like the baseline does.
#[derive(Clone, Debug)]
pub struct StepRngs {
    pub buffer: ChaCha8Rng,
    pub outer: ChaCha8Rng,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub inner_loss: f64,
    pub outer_loss: Option<f64>,
    pub outer_applied: bool,
    pub alignment: Option<AlignmentRecord>,
}

/// Offers `new` to the reservoir, attaching current head logits for DER++.
pub fn insert_into_buffer(
    buffer: &mut MemoryBuffer,
    new: &Batch,
    classifier: &Classifier,
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let logits = match cfg.method {
        Method::Derpp => Some(nn::logits(classifier, &new.x)?),
        Method::Er => None,
    };
    buffer.reservoir_update(new, logits.as_ref(), rng)
}

/// Draws the inner replay batch (and the DER++ distillation batch).
fn draw_replay(
    buffer: &MemoryBuffer,
    replay_batch: usize,
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> (Option<Batch>, Option<Batch>) {
    let buf = buffer.sample(replay_batch, rng);
    let second = match cfg.method {
        Method::Derpp if buf.is_some() => buffer.sample(replay_batch, rng),
        _ => None,
    };
    (buf, second)
}

/// Baseline online step: replay sample, SGD on the classifier, reservoir insert.
pub fn baseline_online_step(
    params: &mut ParamSet,
    new: &Batch,
    buffer: &mut MemoryBuffer,
    rngs: &mut StepRngs,
    cfg: &MethodConfig,
    replay_batch: usize,
    step: u64,
) -> Result<f64> {
    let (buf, second) = draw_replay(buffer, replay_batch, cfg, &mut rngs.buffer);
    let trn = TrainBatch { new: new.clone(), buf };
    let loss = baseline_train_step(params, &trn, second.as_ref(), cfg, step)?;
    insert_into_buffer(buffer, new, &params.classifier, cfg, &mut rngs.buffer)?;
    Ok(loss)
}

/// One iteration of the CBA training loop:
/// replay sample, inner loss and update, fresh replay sample, outer loss,
/// hypergradient, outer update, reservoir insert. With an empty buffer the
/// step falls back to the baseline update on `new` and leaves omega alone.
pub fn cba_train_step(
    state: &mut BilevelState,
    new: &Batch,
    buffer: &mut MemoryBuffer,
    rngs: &mut StepRngs,
    cfg: &MethodConfig,
    replay_batch: usize,
    diagnostics: bool,
) -> Result<StepReport> {
    if new.is_empty() {
        return Err(Error::EmptyBatch("incoming batch"));
    }
    let (buf, second) = draw_replay(buffer, replay_batch, cfg, &mut rngs.buffer);
    let Some(buf) = buf else {
        let trn = TrainBatch::new_only(new.clone());
        let loss = baseline_train_step(&mut state.params, &trn, None, cfg, state.step)?;
        insert_into_buffer(buffer, new, &state.params.classifier, cfg, &mut rngs.buffer)?;
        state.step += 1;
        return Ok(StepReport {
            inner_loss: loss,
            ..StepReport::default()
        });
    };
    let trn = TrainBatch {
        new: new.clone(),
        buf: Some(buf),
    };

    let tape = Tape::new();
    let inner = inner_update(&tape, state, &trn, second.as_ref(), cfg)?;
    let buf2 = buffer.sample(replay_batch, &mut rngs.outer).expect("buffer is nonempty");
    let outer = outer_loss(&tape, &inner, &buf2)?;
    let outer_value = outer.value().item();
    let hyper = outer_gradient(&tape, &inner, outer)?;

    let alignment = if diagnostics {
        Some(gradient_alignment(&state.params, &trn, second.as_ref(), &buf2, cfg, state.step)?)
    } else {
        None
    };

    let inner_loss = inner.loss;
    state.params.classifier = inner.theta_next;
    drop(tape);
    let outer_applied = outer_update(state, &hyper)?;
    insert_into_buffer(buffer, new, &state.params.classifier, cfg, &mut rngs.buffer)?;

    state.last_diag = alignment.clone();
    state.step += 1;
    Ok(StepReport {
        inner_loss,
        outer_loss: Some(outer_value),
        outer_applied,
        alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelSpec};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn state(alpha: f64) -> BilevelState {
        let p = init_params(&ModelSpec {
            seed: 9,
            cba_hidden: 5,
            ..ModelSpec::new(3, vec![4], 3)
        })
        .unwrap();
        BilevelState::new(p, alpha, 0.1).unwrap()
    }

    fn batch(n: usize, shift: f64) -> Batch {
        let x: Vec<f64> = (0..3 * n).map(|i| ((i * 5 % 7) as f64 - 3.0) / 2.0 + shift).collect();
        Batch::new(Tensor::matrix(n, 3, x).unwrap(), (0..n).map(|i| i % 3).collect()).unwrap()
    }

    fn trn() -> TrainBatch {
        TrainBatch {
            new: batch(4, 0.2),
            buf: Some(batch(3, -0.4)),
        }
    }

    #[test]
    fn zero_alpha_gives_zero_hypergradient_and_no_step() {
        let s = state(0.0);
        let cfg = MethodConfig::default();
        let g = hypergradient(&s, &trn(), None, &batch(5, 0.1), &cfg).unwrap();
        assert!(g.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        let tape = Tape::new();
        let inner = inner_update(&tape, &s, &trn(), None, &cfg).unwrap();
        assert_eq!(inner.theta_next, s.params.classifier);
        assert_eq!(*inner.head_weight.value(), s.params.classifier.head.weight);
    }

    #[test]
    fn zero_cba_inner_step_equals_baseline_step() {
        let s = state(0.05);
        let cfg = MethodConfig {
            alpha: 0.05,
            ..MethodConfig::default()
        };
        let tape = Tape::new();
        let inner = inner_update(&tape, &s, &trn(), None, &cfg).unwrap();
        let mut p = s.params.clone();
        let base_loss = baseline_train_step(&mut p, &trn(), None, &cfg, 0).unwrap();
        assert_eq!(inner.loss, base_loss);
        assert_eq!(inner.theta_next, p.classifier);
    }

    #[test]
    fn materialized_head_matches_tape_head() {
        let s = state(0.1);
        let tape = Tape::new();
        let inner = inner_update(&tape, &s, &trn(), None, &MethodConfig::default()).unwrap();
        assert_eq!(*inner.head_weight.value(), inner.theta_next.head.weight);
        assert_eq!(*inner.head_bias.value(), inner.theta_next.head.bias);
    }

    #[test]
    fn outer_update_respects_rate_and_non_finite() {
        let mut s = state(0.1);
        s.beta = 0.0;
        let before = s.params.clone();
        let g = hypergradient(&s, &trn(), None, &batch(4, 0.0), &MethodConfig::default()).unwrap();
        assert!(outer_update(&mut s, &g).unwrap());
        assert_eq!(s.params, before);

        s.beta = 0.5;
        let mut bad = g.clone();
        bad.0.get_mut("cba.out.bias").unwrap().data_mut()[0] = f64::NAN;
        assert!(!outer_update(&mut s, &bad).unwrap());
        assert_eq!(s.params, before);

        let zeros = GradMap(g.0.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect());
        assert!(outer_update(&mut s, &zeros).unwrap());
        assert_eq!(s.params, before);
    }

    #[test]
    fn empty_outer_batch_rejected() {
        let s = state(0.1);
        let tape = Tape::new();
        let inner = inner_update(&tape, &s, &trn(), None, &MethodConfig::default()).unwrap();
        assert!(outer_loss(&tape, &inner, &Batch::empty(3)).is_err());
    }

    #[test]
    fn empty_buffer_falls_back_to_baseline() {
        let mut s = state(0.1);
        let mut buffer = MemoryBuffer::new(10);
        let mut rngs = StepRngs {
            buffer: ChaCha8Rng::seed_from_u64(1),
            outer: ChaCha8Rng::seed_from_u64(2),
        };
        let cba_before = s.params.cba.clone();
        let cls_before = s.params.classifier.clone();
        let r = cba_train_step(&mut s, &batch(4, 0.0), &mut buffer, &mut rngs, &MethodConfig::default(), 4, true).unwrap();
        assert_eq!(s.params.cba, cba_before);
        assert_ne!(s.params.classifier, cls_before);
        assert!(r.outer_loss.is_none() && r.alignment.is_none());
        assert_eq!(buffer.len(), 4);
        assert_eq!(s.step, 1);
    }
}
