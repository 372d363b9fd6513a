//! Classifier network (ReLU MLP backbone plus linear head) and the continual
//! bias adaptor that rewrites the head's logits during training.
//!
//! Weights are stored `out x in`; a layer maps a batch `X` to `X W^T + b`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradMap, NamedTensors, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CBA_HIDDEN: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub backbone_widths: Vec<usize>,
    pub class_count: usize,
    pub cba_hidden: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(input_dim: usize, backbone_widths: Vec<usize>, class_count: usize) -> Self {
        Self {
            input_dim,
            backbone_widths,
            class_count,
            cba_hidden: DEFAULT_CBA_HIDDEN,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.class_count == 0
            || self.cba_hidden == 0
            || self.backbone_widths.contains(&0)
        {
            return Err(Error::invalid(format!("model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Width of the features fed to the head.
    pub fn feature_dim(&self) -> usize {
        self.backbone_widths.last().copied().unwrap_or(self.input_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and bias.
    fn uniform(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = Tensor::matrix(outputs, inputs, draw(outputs * inputs)).expect("sized");
        let bias = Tensor::vector(draw(outputs));
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.transpose()?)?.add_row(&self.bias)
    }

    pub fn track<'t>(&self, tape: &'t Tape) -> TrackedLinear<'t> {
        TrackedLinear {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

/// The network `f_theta` used at test time.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub backbone: Vec<Linear>,
    pub head: Linear,
}

/// Single-hidden-layer adaptor with a skip connection from its input logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Cba {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub classifier: Classifier,
    pub cba: Cba,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
    Cba,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        if name.starts_with("backbone.") {
            Some(Self::Backbone)
        } else if name.starts_with("head.") {
            Some(Self::Head)
        } else if name.starts_with("cba.") {
            Some(Self::Cba)
        } else {
            None
        }
    }
}

pub fn init_params(spec: &ModelSpec) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut backbone = Vec::with_capacity(spec.backbone_widths.len());
    let mut width = spec.input_dim;
    for &w in &spec.backbone_widths {
        backbone.push(Linear::uniform(width, w, &mut rng));
        width = w;
    }
    let head = Linear::uniform(width, spec.class_count, &mut rng);
    let hidden = Linear::uniform(spec.class_count, spec.cba_hidden, &mut rng);
    let out = Linear::zeros(spec.cba_hidden, spec.class_count);
    Ok(ParamSet {
        classifier: Classifier { backbone, head },
        cba: Cba { hidden, out },
    })
}

impl Classifier {
    pub fn class_count(&self) -> usize {
        self.head.outputs()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.first().unwrap_or(&self.head).inputs()
    }

    /// Names and tensors in canonical order: backbone layers, then the head.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.backbone.len() + 2);
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "head.weight" => return Some(&mut self.head.weight),
            "head.bias" => return Some(&mut self.head.bias),
            _ => {}
        }
        let rest = name.strip_prefix("backbone.")?;
        let (idx, field) = rest.split_once('.')?;
        let layer = self.backbone.get_mut(idx.parse::<usize>().ok()?)?;
        match field {
            "weight" => Some(&mut layer.weight),
            "bias" => Some(&mut layer.bias),
            _ => None,
        }
    }

    /// Plain SGD on every classifier tensor that has an entry in `grads`.
    pub fn sgd_step(&mut self, grads: &GradMap, rate: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            if let Some(t) = self.tensor_mut(name) {
                *t = t.sgd(g, rate)?;
            }
        }
        Ok(())
    }

    pub fn track<'t>(&self, tape: &'t Tape) -> TrackedClassifier<'t> {
        TrackedClassifier {
            backbone: self.backbone.iter().map(|l| l.track(tape)).collect(),
            head: self.head.track(tape),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_dim();
        for layer in self.backbone.iter().chain(std::iter::once(&self.head)) {
            check_linear(layer, width)?;
            width = layer.outputs();
        }
        Ok(())
    }
}

fn check_linear(layer: &Linear, inputs: usize) -> Result<()> {
    if layer.weight.rank() != 2 || layer.inputs() != inputs || layer.bias.shape() != [layer.outputs()] {
        return Err(Error::Shape {
            op: "layer chain",
            lhs: layer.weight.shape().to_vec(),
            rhs: layer.bias.shape().to_vec(),
        });
    }
    Ok(())
}

impl Cba {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("cba.hidden.weight".into(), &self.hidden.weight),
            ("cba.hidden.bias".into(), &self.hidden.bias),
            ("cba.out.weight".into(), &self.out.weight),
            ("cba.out.bias".into(), &self.out.bias),
        ]
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "cba.hidden.weight" => Some(&mut self.hidden.weight),
            "cba.hidden.bias" => Some(&mut self.hidden.bias),
            "cba.out.weight" => Some(&mut self.out.weight),
            "cba.out.bias" => Some(&mut self.out.bias),
            _ => None,
        }
    }

    pub fn sgd_step(&mut self, grads: &GradMap, rate: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            if let Some(t) = self.tensor_mut(name) {
                *t = t.sgd(g, rate)?;
            }
        }
        Ok(())
    }

    /// Sets every adaptor tensor to zero.
    pub fn zero(&mut self) {
        for t in [
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ] {
            t.data_mut().fill(0.0);
        }
    }

    /// Logits after the adaptor's residual correction, before the softmax.
    pub fn adjusted_logits(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.hidden.forward(z)?.relu();
        z.add(&self.out.forward(&h)?)
    }

    pub fn track<'t>(&self, tape: &'t Tape) -> TrackedCba<'t> {
        TrackedCba {
            hidden: self.hidden.track(tape),
            out: self.out.track(tape),
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        check_linear(&self.hidden, classes)?;
        check_linear(&self.out, self.hidden.outputs())?;
        if self.out.outputs() != classes {
            return Err(Error::Shape {
                op: "cba output",
                lhs: self.out.weight.shape().to_vec(),
                rhs: vec![classes],
            });
        }
        Ok(())
    }
}

impl ParamSet {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.classifier.named();
        out.extend(self.cba.named());
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.cba.validate(self.classifier.class_count())
    }

    pub fn track<'t>(&self, tape: &'t Tape) -> TrackedParams<'t> {
        TrackedParams {
            classifier: self.classifier.track(tape),
            cba: self.cba.track(tape),
        }
    }
}

impl NamedTensors for ParamSet {
    fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name.starts_with("cba.") {
            self.cba.tensor_mut(name)
        } else {
            self.classifier.tensor_mut(name)
        }
    }
}

pub fn backbone_forward(classifier: &Classifier, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for layer in &classifier.backbone {
        h = layer.forward(&h)?.relu();
    }
    Ok(h)
}

pub fn head_forward(classifier: &Classifier, features: &Tensor) -> Result<Tensor> {
    classifier.head.forward(features)
}

pub fn logits(classifier: &Classifier, x: &Tensor) -> Result<Tensor> {
    head_forward(classifier, &backbone_forward(classifier, x)?)
}

/// Adapted posterior `softmax(z + W2 relu(W1 z + b1) + b2)`, row-wise.
pub fn cba_forward(cba: &Cba, z: &Tensor) -> Result<Tensor> {
    Ok(cba.adjusted_logits(z)?.softmax_rows())
}

/// Test-time prediction. Only the classifier is consulted.
pub fn predict(classifier: &Classifier, x: &Tensor) -> Result<Vec<usize>> {
    if x.rows() == 0 || x.is_empty() {
        return Ok(Vec::new());
    }
    Ok(logits(classifier, x)?.argmax_rows())
}

pub struct TrackedLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> TrackedLinear<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.weight.t()?)?.add_row(self.bias)
    }
}

pub struct TrackedClassifier<'t> {
    pub backbone: Vec<TrackedLinear<'t>>,
    pub head: TrackedLinear<'t>,
}

impl<'t> TrackedClassifier<'t> {
    pub fn features(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for layer in &self.backbone {
            h = layer.forward(h)?.relu()?;
        }
        Ok(h)
    }

    pub fn logits(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.head.forward(self.features(x)?)
    }

    /// Vars in the same order as [`Classifier::named`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out: Vec<Var<'t>> = self.backbone.iter().flat_map(|l| [l.weight, l.bias]).collect();
        out.extend([self.head.weight, self.head.bias]);
        out
    }
}

pub struct TrackedCba<'t> {
    pub hidden: TrackedLinear<'t>,
    pub out: TrackedLinear<'t>,
}

impl<'t> TrackedCba<'t> {
    pub fn adjusted_logits(&self, z: Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(z)?.relu()?;
        z.add(self.out.forward(h)?)
    }

    /// Vars in the same order as [`Cba::named`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        vec![self.hidden.weight, self.hidden.bias, self.out.weight, self.out.bias]
    }
}

pub struct TrackedParams<'t> {
    pub classifier: TrackedClassifier<'t>,
    pub cba: TrackedCba<'t>,
}

/// Pairs names with tensors, in order.
pub fn grad_map(names: impl IntoIterator<Item = String>, grads: Vec<Tensor>) -> GradMap {
    let mut out = GradMap::new();
    for (n, g) in names.into_iter().zip(grads) {
        out.insert(n, g);
    }
    out
}

/// Gradients of `loss` w.r.t. the named parameters of a tracked [`ParamSet`],
/// optionally restricted to some groups.
pub fn backward<'t>(
    tape: &'t Tape,
    loss: Var<'t>,
    params: &ParamSet,
    tracked: &TrackedParams<'t>,
    groups: &[ParamGroup],
) -> Result<GradMap> {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut vars = tracked.classifier.vars();
    vars.extend(tracked.cba.vars());
    let (names, vars): (Vec<String>, Vec<Var<'t>>) = names
        .into_iter()
        .zip(vars)
        .filter(|(n, _)| ParamGroup::of(n).is_some_and(|g| groups.contains(&g)))
        .unzip();
    let grads = tape.gradients(loss, &vars)?;
    Ok(grad_map(names, grads))
}

const MAGIC: &[u8; 4] = b"CBA1";

/// Writes the checkpoint: `CBA1`, then per tensor in canonical order the name
/// length (u32), name bytes, rank (u32), dims (u32 each) and values (f64 each),
/// all little-endian.
pub fn write_checkpoint(params: &ParamSet, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in params.named() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing CBA1 magic".into()));
    }
    let mut cur = &bytes[4..];
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    while !cur.is_empty() {
        let name_len = take_u32(&mut cur)? as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = take_u32(&mut cur)? as usize;
        let shape = (0..rank).map(|_| take_u32(&mut cur).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = take(&mut cur, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }

    let depth = (0..)
        .take_while(|i| tensors.contains_key(&format!("backbone.{i}.weight")))
        .count();
    let mut linear = |prefix: &str| -> Result<Linear> {
        let mut get = |field: &str| {
            let name = format!("{prefix}.{field}");
            tensors
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        Ok(Linear {
            weight: get("weight")?,
            bias: get("bias")?,
        })
    };
    let backbone = (0..depth)
        .map(|i| linear(&format!("backbone.{i}")))
        .collect::<Result<Vec<_>>>()?;
    let head = linear("head")?;
    let cba = Cba {
        hidden: linear("cba.hidden")?,
        out: linear("cba.out")?,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    let params = ParamSet {
        classifier: Classifier { backbone, head },
        cba,
    };
    params.validate()?;
    Ok(params)
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::Checkpoint("truncated".into()));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

fn take_u32(cur: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(cur, 4)?.try_into().expect("4 bytes")))
}
