//! Rehearsal losses (ER, DER++) and the plain SGD step of the baselines.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ParamGroup, ParamSet, TrackedParams};
use crate::stream::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Er,
    Derpp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Er => "er",
            Method::Derpp => "derpp",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "er" => Ok(Method::Er),
            "derpp" | "der++" => Ok(Method::Derpp),
            other => Err(Error::invalid(format!("unknown method `{other}` (expected er or derpp)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub use_cba: bool,
    /// Inner (classifier) learning rate.
    pub alpha: f64,
    /// Outer (adaptor) learning rate.
    pub beta: f64,
    pub derpp_distill_weight: f64,
    pub derpp_replay_weight: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Er,
            use_cba: false,
            alpha: 0.03,
            beta: 0.01,
            derpp_distill_weight: 0.5,
            derpp_replay_weight: 0.5,
        }
    }
}

impl MethodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::invalid(format!(
                "learning rates must be finite and non-negative (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        if !(self.derpp_distill_weight >= 0.0 && self.derpp_replay_weight >= 0.0) {
            return Err(Error::invalid("DER++ weights must be >= 0"));
        }
        Ok(())
    }
}

/// Incoming batch plus an optional replay batch drawn from the buffer.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub new: Batch,
    pub buf: Option<Batch>,
}

impl TrainBatch {
    pub fn new_only(new: Batch) -> Self {
        Self { new, buf: None }
    }

    pub fn len(&self) -> usize {
        self.new.len() + self.buf.as_ref().map_or(0, Batch::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `new` followed by `buf`.
    pub fn combined(&self) -> Result<Batch> {
        match &self.buf {
            Some(b) if !b.is_empty() => self.new.concat(b),
            _ => Ok(self.new.clone()),
        }
    }
}

/// Logits of the classifier on `batch`, optionally passed through the adaptor.
pub fn batch_logits<'t>(tape: &'t Tape, tracked: &TrackedParams<'t>, batch: &Batch, with_cba: bool) -> Result<Var<'t>> {
    let x = tape.constant(batch.x.clone());
    let z = tracked.classifier.logits(x)?;
    if with_cba {
        tracked.cba.adjusted_logits(z)
    } else {
        Ok(z)
    }
}

/// Mean cross-entropy on one batch. With the adaptor enabled this is
/// `-log softmax(g(z))[y]`, the log of the adapted posterior.
pub fn cross_entropy<'t>(tape: &'t Tape, tracked: &TrackedParams<'t>, batch: &Batch, with_cba: bool) -> Result<Var<'t>> {
    batch_logits(tape, tracked, batch, with_cba)?.cross_entropy(&batch.y)
}

/// ER: mean cross-entropy over `new` and `buf` together.
pub fn er_loss<'t>(tape: &'t Tape, tracked: &TrackedParams<'t>, batch: &TrainBatch, with_cba: bool) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("ER loss on an empty training batch"));
    }
    cross_entropy(tape, tracked, &batch.combined()?, with_cba)
}

/// DER++: `CE(new) + replay * CE(buf) + distill * MSE(z(second.x), second.logits)`.
/// The adaptor only wraps the cross-entropy terms.
pub fn derpp_loss<'t>(
    tape: &'t Tape,
    tracked: &TrackedParams<'t>,
    batch: &TrainBatch,
    second: Option<&Batch>,
    with_cba: bool,
    cfg: &MethodConfig,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("DER++ loss on an empty training batch"));
    }
    let mut terms: Vec<Var<'t>> = Vec::with_capacity(3);
    if !batch.new.is_empty() {
        terms.push(cross_entropy(tape, tracked, &batch.new, with_cba)?);
    }
    if let Some(buf) = batch.buf.as_ref().filter(|b| !b.is_empty()) {
        terms.push(cross_entropy(tape, tracked, buf, with_cba)?.scale(cfg.derpp_replay_weight)?);
    }
    if let Some(second) = second.filter(|b| !b.is_empty()) {
        let stored = second
            .logits
            .as_ref()
            .ok_or(Error::EmptyBatch("DER++ distillation batch has no stored logits"))?;
        let z = batch_logits(tape, tracked, second, false)?;
        let target = tape.constant(stored.clone());
        terms.push(z.mse(target)?.scale(cfg.derpp_distill_weight)?);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    Ok(total)
}

pub fn rehearsal_loss<'t>(
    tape: &'t Tape,
    tracked: &TrackedParams<'t>,
    batch: &TrainBatch,
    second: Option<&Batch>,
    cfg: &MethodConfig,
    with_cba: bool,
) -> Result<Var<'t>> {
    match cfg.method {
        Method::Er => er_loss(tape, tracked, batch, with_cba),
        Method::Derpp => derpp_loss(tape, tracked, batch, second, with_cba, cfg),
    }
}

/// One SGD step of the baseline on the classifier: `theta <- theta - alpha * grad`.
/// Returns the loss before the step; on a non-finite loss or gradient the
/// parameters are left untouched.
pub fn baseline_train_step(
    params: &mut ParamSet,
    batch: &TrainBatch,
    second: Option<&Batch>,
    cfg: &MethodConfig,
    step: u64,
) -> Result<f64> {
    let tape = Tape::new();
    let tracked = params.track(&tape);
    let loss = rehearsal_loss(&tape, &tracked, batch, second, cfg, false)?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            step,
            what: format!("training loss {value}"),
        });
    }
    let grads = nn::backward(&tape, loss, params, &tracked, &[ParamGroup::Backbone, ParamGroup::Head])?;
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            step,
            what: "classifier gradient".into(),
        });
    }
    params.classifier.sgd_step(&grads, cfg.alpha)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelSpec};
    use crate::tensor::Tensor;

    fn params() -> ParamSet {
        init_params(&ModelSpec {
            seed: 4,
            cba_hidden: 6,
            ..ModelSpec::new(3, vec![5], 4)
        })
        .unwrap()
    }

    fn batch(n: usize, seed: u64) -> Batch {
        let x: Vec<f64> = (0..n * 3).map(|i| ((i as u64 * 7 + seed * 13) % 11) as f64 / 5.0 - 1.0).collect();
        Batch::new(Tensor::matrix(n, 3, x).unwrap(), (0..n).map(|i| (i + seed as usize) % 4).collect()).unwrap()
    }

    fn loss_value(p: &ParamSet, b: &TrainBatch, second: Option<&Batch>, cfg: &MethodConfig, cba: bool) -> f64 {
        let tape = Tape::new();
        let tr = p.track(&tape);
        rehearsal_loss(&tape, &tr, b, second, cfg, cba).unwrap().value().item()
    }

    #[test]
    fn two_class_uniform_logits_give_ln2() {
        let mut p = init_params(&ModelSpec::new(2, vec![], 2)).unwrap();
        p.classifier.head = nn::Linear::zeros(2, 2);
        let b = TrainBatch::new_only(Batch::new(Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap(), vec![0]).unwrap());
        let v = loss_value(&p, &b, None, &MethodConfig::default(), false);
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_cba_matches_plain_loss_exactly() {
        let p = params();
        let b = TrainBatch {
            new: batch(5, 1),
            buf: Some(batch(4, 2)),
        };
        let cfg = MethodConfig::default();
        assert_eq!(loss_value(&p, &b, None, &cfg, true), loss_value(&p, &b, None, &cfg, false));
    }

    #[test]
    fn empty_batch_rejected() {
        let p = params();
        let tape = Tape::new();
        let tr = p.track(&tape);
        let b = TrainBatch::new_only(Batch::empty(3));
        assert!(matches!(er_loss(&tape, &tr, &b, false), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn derpp_with_zero_weights_is_ce_on_new() {
        let p = params();
        let mut second = batch(3, 5);
        second.logits = Some(Tensor::full(&[3, 4], 0.7));
        let b = TrainBatch {
            new: batch(5, 1),
            buf: Some(batch(4, 2)),
        };
        let cfg = MethodConfig {
            method: Method::Derpp,
            derpp_distill_weight: 0.0,
            derpp_replay_weight: 0.0,
            ..MethodConfig::default()
        };
        let er_new = loss_value(&p, &TrainBatch::new_only(b.new.clone()), None, &MethodConfig::default(), false);
        assert_eq!(loss_value(&p, &b, Some(&second), &cfg, false), er_new);
    }

    #[test]
    fn derpp_needs_stored_logits() {
        let p = params();
        let cfg = MethodConfig {
            method: Method::Derpp,
            ..MethodConfig::default()
        };
        let tape = Tape::new();
        let tr = p.track(&tape);
        let b = TrainBatch::new_only(batch(2, 0));
        assert!(derpp_loss(&tape, &tr, &b, Some(&batch(2, 1)), false, &cfg).is_err());
    }

    #[test]
    fn distillation_vanishes_when_stored_logits_are_current() {
        let p = params();
        let mut second = batch(3, 5);
        second.logits = Some(nn::logits(&p.classifier, &second.x).unwrap());
        let cfg = MethodConfig {
            method: Method::Derpp,
            derpp_replay_weight: 0.0,
            ..MethodConfig::default()
        };
        let b = TrainBatch::new_only(batch(5, 1));
        let with = loss_value(&p, &b, Some(&second), &cfg, false);
        let without = loss_value(&p, &b, None, &cfg, false);
        assert_eq!(with, without);
    }

    #[test]
    fn zero_rate_leaves_params() {
        let mut p = params();
        let before = p.clone();
        let cfg = MethodConfig {
            alpha: 0.0,
            ..MethodConfig::default()
        };
        baseline_train_step(&mut p, &TrainBatch::new_only(batch(4, 0)), None, &cfg, 0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn step_is_deterministic_and_leaves_cba() {
        let cfg = MethodConfig::default();
        let b = TrainBatch {
            new: batch(4, 0),
            buf: Some(batch(3, 1)),
        };
        let (mut p1, mut p2) = (params(), params());
        baseline_train_step(&mut p1, &b, None, &cfg, 0).unwrap();
        baseline_train_step(&mut p2, &b, None, &cfg, 0).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.cba, params().cba);
        assert_ne!(p1.classifier, params().classifier);
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let mut p = params();
        p.classifier.head.bias.data_mut()[0] = f64::NAN;
        let before = p.clone();
        let err = baseline_train_step(&mut p, &TrainBatch::new_only(batch(2, 0)), None, &MethodConfig::default(), 17)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 17, .. }));
        assert_eq!(format!("{:?}", p), format!("{:?}", before));
    }
}
