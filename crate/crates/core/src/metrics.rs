//! Accuracy bookkeeping, forgetting, area under the accuracy curve and the
//! gradient-alignment diagnostic.

use std::io::{BufRead, Write};

use crate::autodiff::{GradMap, Tape};
use crate::error::{Error, Result};
use crate::methods::{cross_entropy, rehearsal_loss, MethodConfig, TrainBatch};
use crate::nn::{self, Classifier, ParamGroup, ParamSet};
use crate::stream::{Batch, Task};
use crate::tensor::Tensor;

/// `a[i][j]`: accuracy (percent) on task `i` after training task `j`, set for
/// `i <= j` only.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            cells: vec![None; tasks * tasks],
        }
    }

    /// Builds a matrix from a dense upper triangle, ignoring entries below the
    /// diagonal.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != rows.len() {
                return Err(Error::invalid("accuracy matrix must be square"));
            }
            for (j, &v) in row.iter().enumerate().skip(i) {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i < self.tasks && j < self.tasks {
            self.cells[i * self.tasks + j]
        } else {
            None
        }
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if i >= self.tasks || j >= self.tasks || i > j {
            return Err(Error::invalid(format!("cell ({i}, {j}) is outside the upper triangle of a {0}x{0} matrix", self.tasks)));
        }
        if !(0.0..=100.0).contains(&value) {
            return Err(Error::invalid(format!("accuracy {value} outside [0, 100]")));
        }
        self.cells[i * self.tasks + j] = Some(value);
        Ok(())
    }

    /// Fills column `j` from per-task accuracies of tasks `0..=j`.
    pub fn set_column(&mut self, j: usize, accs: &[f64]) -> Result<()> {
        if accs.len() != j + 1 {
            return Err(Error::invalid(format!("column {j} needs {} entries, got {}", j + 1, accs.len())));
        }
        for (i, &a) in accs.iter().enumerate() {
            self.set(i, j, a)?;
        }
        Ok(())
    }

    fn require(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j)
            .ok_or_else(|| Error::invalid(format!("accuracy matrix entry ({i}, {j}) is unset")))
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut header = String::from("task");
        for j in 1..=self.tasks {
            header.push_str(&format!(",after_task_{j}"));
        }
        writeln!(w, "{header}")?;
        for i in 0..self.tasks {
            write!(w, "task_{}", i + 1)?;
            for j in 0..self.tasks {
                match self.get(i, j) {
                    Some(v) => write!(w, ",{v}")?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<matrix>".into(),
            line,
            msg,
        };
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))??;
        let tasks = header.split(',').count() - 1;
        let mut m = Self::new(tasks);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split(',').collect();
            if i >= tasks || fields.len() != tasks + 1 {
                return Err(bad(i + 2, "unexpected row shape".into()));
            }
            for (j, f) in fields[1..].iter().enumerate() {
                if f.is_empty() {
                    continue;
                }
                let v: f64 = f.parse().map_err(|e| bad(i + 2, format!("{e}")))?;
                m.set(i, j, v).map_err(|e| bad(i + 2, e.to_string()))?;
            }
        }
        Ok(m)
    }
}

/// Mean final-column accuracy.
pub fn compute_acc(m: &AccuracyMatrix) -> Result<f64> {
    if m.tasks == 0 {
        return Err(Error::invalid("empty accuracy matrix"));
    }
    let last = m.tasks - 1;
    let mut total = 0.0;
    for i in 0..m.tasks {
        total += m.require(i, last)?;
    }
    Ok(total / m.tasks as f64)
}

/// Mean drop from each task's best accuracy (over `j >= i`) to its final one.
pub fn compute_fm(m: &AccuracyMatrix) -> Result<f64> {
    if m.tasks == 0 {
        return Err(Error::invalid("empty accuracy matrix"));
    }
    let last = m.tasks - 1;
    let mut total = 0.0;
    for i in 0..m.tasks {
        let mut best = f64::NEG_INFINITY;
        for j in i..m.tasks {
            best = best.max(m.require(i, j)?);
        }
        total += best - m.require(i, last)?;
    }
    Ok(total / m.tasks as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub step: u64,
    /// Mean accuracy over the test sets of tasks seen so far.
    pub avg_acc: f64,
    pub per_task: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyTrace {
    pub points: Vec<TracePoint>,
}

impl AccuracyTrace {
    pub fn push(&mut self, step: u64, per_task: Vec<f64>) {
        let avg_acc = per_task.iter().sum::<f64>() / per_task.len().max(1) as f64;
        self.points.push(TracePoint { step, avg_acc, per_task });
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "step,avg_acc")?;
        for p in &self.points {
            writeln!(w, "{},{}", p.step, p.avg_acc)?;
        }
        Ok(())
    }

    /// Accuracy of `task` at every trace point where it had been seen.
    pub fn task_series(&self, task: usize) -> Vec<(u64, f64)> {
        self.points
            .iter()
            .filter_map(|p| p.per_task.get(task).map(|&a| (p.step, a)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccAuc {
    /// `sum_i abar(i * dn) * dn`.
    pub raw: f64,
    /// `raw` divided by the number of steps it covers.
    pub normalized: f64,
}

pub fn compute_acc_auc(trace: &AccuracyTrace, dn: u64) -> Result<AccAuc> {
    if trace.points.is_empty() {
        return Err(Error::invalid("empty accuracy trace"));
    }
    if dn == 0 {
        return Err(Error::invalid("evaluation interval must be positive"));
    }
    for w in trace.points.windows(2) {
        if w[1].step != w[0].step + dn {
            return Err(Error::invalid(format!(
                "trace spacing {} -> {} is not {dn}",
                w[0].step, w[1].step
            )));
        }
    }
    let raw: f64 = trace.points.iter().map(|p| p.avg_acc * dn as f64).sum();
    let covered = (trace.points.len() as u64 * dn) as f64;
    Ok(AccAuc {
        raw,
        normalized: raw / covered,
    })
}

fn accuracy(classifier: &Classifier, test: &Batch) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyBatch("test set"));
    }
    let pred = nn::predict(classifier, &test.x)?;
    let hits = pred.iter().zip(&test.y).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / test.len() as f64)
}

/// Accuracy (percent) of the plain classifier on each test set, predicting
/// over the full label range.
pub fn evaluate_model(classifier: &Classifier, tests: &[&Batch]) -> Result<Vec<f64>> {
    tests.iter().map(|t| accuracy(classifier, t)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionAnalysis {
    /// Row-normalized, rows are true labels.
    pub confusion: Tensor,
    /// Fraction of all test predictions that land in each task's classes.
    pub task_mass: Vec<f64>,
}

pub fn confusion_and_task_distribution(classifier: &Classifier, tasks: &[Task]) -> Result<PredictionAnalysis> {
    let c = classifier.class_count();
    let mut counts = vec![0.0; c * c];
    let mut owner = vec![None; c];
    for (t, task) in tasks.iter().enumerate() {
        for &k in &task.classes {
            if k < c {
                owner[k] = Some(t);
            }
        }
    }
    let mut mass = vec![0.0; tasks.len()];
    let mut total = 0usize;
    for task in tasks {
        if let Some(&y) = task.test.y.iter().find(|&&y| y >= c) {
            return Err(Error::Label { row: 0, label: y, classes: c });
        }
        let pred = nn::predict(classifier, &task.test.x)?;
        for (&p, &y) in pred.iter().zip(&task.test.y) {
            counts[y * c + p] += 1.0;
            if let Some(t) = owner[p] {
                mass[t] += 1.0;
            }
            total += 1;
        }
    }
    for row in counts.chunks_mut(c) {
        let n: f64 = row.iter().sum();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    if total > 0 {
        mass.iter_mut().for_each(|m| *m /= total as f64);
    }
    Ok(PredictionAnalysis {
        confusion: Tensor::matrix(c, c, counts)?,
        task_mass: mass,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentRecord {
    pub step: u64,
    pub inner_product: f64,
    pub trn_grad_sq: f64,
}

impl AlignmentRecord {
    pub fn from_grads(step: u64, buf_grad: &GradMap, trn_grad: &GradMap) -> Self {
        Self {
            step,
            inner_product: buf_grad.dot(trn_grad),
            trn_grad_sq: trn_grad.norm_sq(),
        }
    }
}

/// `<dL_buf(f)/dtheta, dL_trn(F)/dtheta>` and `|dL_trn(F)/dtheta|^2`, where
/// `f` is the plain classifier and `F` the adapted one.
pub fn gradient_alignment(
    params: &ParamSet,
    trn: &TrainBatch,
    second: Option<&Batch>,
    buf: &Batch,
    cfg: &MethodConfig,
    step: u64,
) -> Result<AlignmentRecord> {
    if buf.is_empty() {
        return Err(Error::EmptyBatch("alignment buffer batch"));
    }
    let groups = [ParamGroup::Backbone, ParamGroup::Head];

    let tape = Tape::new();
    let tracked = params.track(&tape);
    let loss = cross_entropy(&tape, &tracked, buf, false)?;
    let buf_grad = nn::backward(&tape, loss, params, &tracked, &groups)?;

    let tape = Tape::new();
    let tracked = params.track(&tape);
    let loss = rehearsal_loss(&tape, &tracked, trn, second, cfg, true)?;
    let trn_grad = nn::backward(&tape, loss, params, &tracked, &groups)?;

    Ok(AlignmentRecord::from_grads(step, &buf_grad, &trn_grad))
}
