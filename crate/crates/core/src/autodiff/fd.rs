use super::{GradMap, NamedTensors};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central differences `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)` for every
/// coordinate of every named tensor.
pub fn finite_difference_gradient<P, F>(params: &P, epsilon: f64, mut eval: F) -> Result<GradMap>
where
    P: NamedTensors,
    F: FnMut(&P) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probe = params.clone();
    let mut out = GradMap::new();
    for name in params.names() {
        let base = params.tensor(&name).expect("name listed by params").clone();
        let mut grad = Tensor::zeros(base.shape());
        for i in 0..base.len() {
            let x = base.data()[i];
            set_coord(&mut probe, &name, i, x + epsilon);
            let up = eval(&probe)?;
            set_coord(&mut probe, &name, i, x - epsilon);
            let down = eval(&probe)?;
            set_coord(&mut probe, &name, i, x);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFiniteProbe { param: name, index: i });
            }
            grad.data_mut()[i] = (up - down) / (2.0 * epsilon);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

fn set_coord<P: NamedTensors>(p: &mut P, name: &str, i: usize, v: f64) {
    p.tensor_mut(name).expect("name listed by params").data_mut()[i] = v;
}

/// Largest coordinate-wise `|a - b| / max(|a|, |b|, floor)` over the keys of `b`.
/// A key missing from `a` counts as a zero tensor.
pub fn max_relative_error(a: &GradMap, b: &GradMap, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, tb) in b.iter() {
        let zeros;
        let ta = match a.get(name) {
            Some(t) => t,
            None => {
                zeros = Tensor::zeros(tb.shape());
                &zeros
            }
        };
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            let err = if denom == 0.0 { 0.0 } else { (x - y).abs() / denom };
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    worst
}
