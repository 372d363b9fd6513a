//! Datasets and task streams: synthetic Gaussian mixtures, disjoint and blurry
//! class-incremental splits, task reordering, single- or multi-pass batch
//! iteration, and the plain-text dataset format.
//!
//! Dataset files look like
//!
//! ```text
//! #cba-dataset,C=3,d=2
//! 0,0.5,-1.25
//! 2,3,4.5
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows of features with labels, optionally with stored logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub logits: Option<Tensor>,
}

impl Batch {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.rank() != 2 || x.rows() != y.len() {
            return Err(Error::Shape {
                op: "batch",
                lhs: x.shape().to_vec(),
                rhs: vec![y.len()],
            });
        }
        Ok(Self { x, y, logits: None })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            x: Tensor::zeros(&[0, dim]),
            y: Vec::new(),
            logits: None,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            logits: self.logits.as_ref().map(|l| l.select_rows(idx)),
        }
    }

    /// Rows of `self` followed by rows of `other`. Logits are kept only when
    /// both sides carry them.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        let logits = match (&self.logits, &other.logits) {
            (Some(a), Some(b)) => Some(a.vstack(b)?),
            _ => None,
        };
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Ok(Batch {
            x: self.x.vstack(&other.x)?,
            y,
            logits,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Batch,
    pub class_count: usize,
    pub name: String,
}

impl Dataset {
    /// Checks that the set is nonempty, labels lie in `[0, C)` and every class occurs.
    pub fn new(x: Tensor, y: Vec<usize>, class_count: usize, name: impl Into<String>) -> Result<Self> {
        let samples = Batch::new(x, y)?;
        if samples.is_empty() {
            return Err(Error::EmptyBatch("dataset has no examples"));
        }
        let mut present = vec![false; class_count];
        for (row, &label) in samples.y.iter().enumerate() {
            if label >= class_count {
                return Err(Error::Label {
                    row,
                    label,
                    classes: class_count,
                });
            }
            present[label] = true;
        }
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(Error::invalid(format!("class {missing} has no examples")));
        }
        Ok(Self {
            samples,
            class_count,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: Batch,
    pub test: Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamMode {
    Disjoint,
    /// Percentage of each task's training data moved into other tasks.
    Blurry(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub mode: StreamMode,
    pub epochs_per_task: usize,
    pub class_count: usize,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs_per_task = epochs;
        self
    }

    pub fn train_len(&self) -> usize {
        self.tasks.iter().map(|t| t.train.len()).sum()
    }

    /// Index of the task whose nominal class set contains `class`.
    pub fn task_of_class(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.classes.contains(&class))
    }
}

/// Class `c` is centred at `separation * u_c`. With `C <= d` the `u_c` are the
/// first `C` coordinate axes; otherwise they sit evenly on the unit circle of
/// the first two coordinates. Noise is isotropic Gaussian with std `spread`.
pub fn gen_gaussian_mixture(
    class_count: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 || dim < 2 || n_per_class == 0 {
        return Err(Error::invalid(format!(
            "need C >= 2, d >= 2, n_per_class >= 1 (got C={class_count}, d={dim}, n={n_per_class})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(class_count * n_per_class * dim);
    let mut y = Vec::with_capacity(class_count * n_per_class);
    for c in 0..class_count {
        let mut center = vec![0.0; dim];
        if class_count <= dim {
            center[c] = separation;
        } else {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / class_count as f64;
            center[0] = separation * angle.cos();
            center[1] = separation * angle.sin();
        }
        for _ in 0..n_per_class {
            for &mu in &center {
                let z: f64 = rng.sample(StandardNormal);
                x.push(mu + spread * z);
            }
            y.push(c);
        }
    }
    let x = Tensor::matrix(y.len(), dim, x)?;
    Dataset::new(x, y, class_count, format!("gaussian-mixture-{class_count}x{dim}"))
}

/// Consecutive groups of `C / T` classes per task; each class's examples are
/// shuffled and the first `round(test_fraction * n_c)` go to the test split.
pub fn split_disjoint(dataset: &Dataset, tasks: usize, test_fraction: f64, seed: u64) -> Result<TaskStream> {
    let c = dataset.class_count;
    if tasks == 0 || !c.is_multiple_of(tasks) {
        let divisors: Vec<String> = (1..=c).filter(|t| c.is_multiple_of(*t)).map(|t| t.to_string()).collect();
        return Err(Error::invalid(format!(
            "{c} classes cannot be split evenly into {tasks} tasks; try one of {}",
            divisors.join(", ")
        )));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!("test fraction must be in [0, 1), got {test_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &label) in dataset.samples.y.iter().enumerate() {
        by_class[label].push(i);
    }
    let per_task = c / tasks;
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let classes: Vec<usize> = (t * per_task..(t + 1) * per_task).collect();
        let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
        for &k in &classes {
            let mut idx = by_class[k].clone();
            idx.shuffle(&mut rng);
            let n_test = (test_fraction * idx.len() as f64).round() as usize;
            test_idx.extend_from_slice(&idx[..n_test]);
            train_idx.extend_from_slice(&idx[n_test..]);
        }
        out.push(Task {
            classes,
            train: dataset.samples.select(&train_idx),
            test: dataset.samples.select(&test_idx),
        });
    }
    Ok(TaskStream {
        tasks: out,
        mode: StreamMode::Disjoint,
        epochs_per_task: 1,
        class_count: c,
    })
}

/// Starts from [`split_disjoint`] and moves `floor(K% of n_t)` uniformly chosen
/// training examples out of every task `t`. Each moved example lands in a
/// uniformly drawn other task, subject to every task receiving exactly as many
/// examples as it gave away, so no task holds more than `K%` foreign examples.
/// Test splits are untouched.
pub fn split_blurry(dataset: &Dataset, tasks: usize, k_percent: u32, test_fraction: f64, seed: u64) -> Result<TaskStream> {
    if k_percent >= 100 {
        return Err(Error::invalid(format!("blurry K must be in [0, 100), got {k_percent}")));
    }
    let mut stream = split_disjoint(dataset, tasks, test_fraction, seed)?;
    stream.mode = StreamMode::Blurry(k_percent);
    if k_percent == 0 {
        return Ok(stream);
    }
    if tasks < 2 {
        return Err(Error::invalid("blurry streams need at least two tasks"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut moved: Vec<(usize, usize)> = Vec::new(); // (origin task, row)
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(tasks);
    for (t, task) in stream.tasks.iter().enumerate() {
        let n = task.train.len();
        let m = n * k_percent as usize / 100;
        let mut out = index::sample(&mut rng, n, m).into_vec();
        out.sort_unstable();
        let mut is_out = vec![false; n];
        for &i in &out {
            is_out[i] = true;
            moved.push((t, i));
        }
        kept.push((0..n).filter(|&i| !is_out[i]).collect());
    }

    let mut receivers: Vec<usize> = moved.iter().map(|&(t, _)| t).collect();
    receivers.shuffle(&mut rng);
    for i in 0..moved.len() {
        if receivers[i] != moved[i].0 {
            continue;
        }
        let start = rng.random_range(0..moved.len());
        let swap = (0..moved.len())
            .map(|o| (start + o) % moved.len())
            .find(|&j| receivers[j] != moved[i].0 && receivers[i] != moved[j].0)
            .ok_or_else(|| Error::invalid("blurry redistribution infeasible for these task sizes"))?;
        receivers.swap(i, swap);
    }

    let mut incoming: Vec<Vec<(usize, usize)>> = vec![Vec::new(); tasks];
    for (&(origin, row), &to) in moved.iter().zip(&receivers) {
        incoming[to].push((origin, row));
    }
    let originals: Vec<Batch> = stream.tasks.iter().map(|t| t.train.clone()).collect();
    for (t, task) in stream.tasks.iter_mut().enumerate() {
        let mut train = originals[t].select(&kept[t]);
        for &(origin, row) in &incoming[t] {
            train = train.concat(&originals[origin].select(&[row]))?;
        }
        task.train = train;
    }
    Ok(stream)
}

/// New task `k` is old task `perm[k]`.
pub fn permute_task_order(stream: &TaskStream, perm: &[usize]) -> Result<TaskStream> {
    let n = stream.tasks.len();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!("{perm:?} is not a permutation of 0..{n}")));
    }
    Ok(TaskStream {
        tasks: perm.iter().map(|&p| stream.tasks[p].clone()).collect(),
        ..stream.clone()
    })
}

/// Yields `(task id, batch)` over the stream. Each task is reshuffled at the
/// start of every epoch and fully consumed before the next task starts.
pub struct OnlineIter<'a> {
    stream: &'a TaskStream,
    batch_size: usize,
    rng: ChaCha8Rng,
    task: usize,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

pub fn online_iterator(stream: &TaskStream, batch_size: usize, seed: u64) -> Result<OnlineIter<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let mut it = OnlineIter {
        stream,
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
        task: 0,
        epoch: 0,
        order: Vec::new(),
        pos: 0,
    };
    it.reshuffle();
    Ok(it)
}

impl OnlineIter<'_> {
    fn reshuffle(&mut self) {
        if let Some(task) = self.stream.tasks.get(self.task) {
            self.order = (0..task.train.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }
}

impl Iterator for OnlineIter<'_> {
    type Item = (usize, Batch);

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let task = self.stream.tasks.get(self.task)?;
            if self.pos < self.order.len() {
                let end = (self.pos + self.batch_size).min(self.order.len());
                let batch = task.train.select(&self.order[self.pos..end]);
                self.pos = end;
                return Some((self.task, batch));
            }
            self.epoch += 1;
            if self.epoch >= self.stream.epochs_per_task.max(1) {
                self.epoch = 0;
                self.task += 1;
            }
            self.reshuffle();
        }
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let name = path.file_stem().map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
    parse_dataset(BufReader::new(file), path, name)
}

pub fn parse_dataset(reader: impl BufRead, path: &Path, name: String) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.ok_or_else(|| err(1, "empty file".into()))?;
    let (classes, dim) = parse_header(&header).ok_or_else(|| {
        err(1, format!("expected `#cba-dataset,C=<int>,d=<int>`, found `{header}`"))
    })?;

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(err(lineno, format!("expected {} fields, found {}", dim + 1, fields.len())));
        }
        let label: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| err(lineno, format!("bad label `{}`", fields[0])))?;
        if label >= classes {
            return Err(err(lineno, format!("label {label} >= declared C={classes}")));
        }
        for f in &fields[1..] {
            let v: f64 = f.trim().parse().map_err(|_| err(lineno, format!("bad number `{f}`")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite value `{f}`")));
            }
            x.push(v);
        }
        y.push(label);
    }
    let x = Tensor::matrix(y.len(), dim, x)?;
    Dataset::new(x, y, classes, name)
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let mut parts = line.trim_end().split(',');
    if parts.next()? != "#cba-dataset" {
        return None;
    }
    let c = parts.next()?.strip_prefix("C=")?.parse().ok()?;
    let d = parts.next()?.strip_prefix("d=")?.parse().ok()?;
    if parts.next().is_some() || d == 0 {
        return None;
    }
    Some((c, d))
}

pub fn write_dataset(dataset: &Dataset, mut w: impl Write) -> Result<()> {
    writeln!(w, "#cba-dataset,C={},d={}", dataset.class_count, dataset.dim())?;
    for (i, &label) in dataset.samples.y.iter().enumerate() {
        write!(w, "{label}")?;
        for v in dataset.samples.x.row(i) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        gen_gaussian_mixture(10, 16, 20, 6.0, 1.0, 5).unwrap()
    }

    #[test]
    fn zero_spread_hits_centers() {
        let ds = gen_gaussian_mixture(3, 4, 5, 2.0, 0.0, 1).unwrap();
        for i in 0..ds.len() {
            let c = ds.samples.y[i];
            let mut expect = [0.0; 4];
            expect[c] = 2.0;
            assert_eq!(ds.samples.x.row(i), &expect[..]);
        }
    }

    #[test]
    fn more_classes_than_dims_uses_circle() {
        let ds = gen_gaussian_mixture(4, 2, 1, 1.0, 0.0, 0).unwrap();
        assert!((ds.samples.x.get(1, 1) - 1.0).abs() < 1e-15);
        assert!((ds.samples.x.get(2, 0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn five_binary_tasks() {
        let s = split_disjoint(&small(), 5, 0.2, 0).unwrap();
        let sets: Vec<Vec<usize>> = s.tasks.iter().map(|t| t.classes.clone()).collect();
        assert_eq!(sets, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]);
        assert_eq!(s.tasks[0].test.len(), 8);
        assert_eq!(s.tasks[0].train.len(), 32);
    }

    #[test]
    fn single_task_holds_all_classes() {
        let s = split_disjoint(&small(), 1, 0.2, 0).unwrap();
        assert_eq!(s.tasks[0].classes, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn indivisible_split_suggests_task_counts() {
        let msg = split_disjoint(&small(), 3, 0.2, 0).unwrap_err().to_string();
        assert!(msg.contains("1, 2, 5, 10"), "{msg}");
    }

    #[test]
    fn blurry_zero_matches_disjoint() {
        let d = split_disjoint(&small(), 5, 0.2, 9).unwrap();
        let b = split_blurry(&small(), 5, 0, 0.2, 9).unwrap();
        assert_eq!(d.tasks, b.tasks);
        assert!(split_blurry(&small(), 5, 100, 0.2, 9).is_err());
    }

    #[test]
    fn permutation_validation() {
        let s = split_disjoint(&small(), 5, 0.2, 0).unwrap();
        assert!(permute_task_order(&s, &[0, 1, 2, 3]).is_err());
        assert!(permute_task_order(&s, &[0, 1, 1, 3, 4]).is_err());
        assert_eq!(permute_task_order(&s, &[0, 1, 2, 3, 4]).unwrap(), s);
        let swapped = permute_task_order(&s, &[0, 1, 2, 4, 3]).unwrap();
        assert_eq!(swapped.tasks[3].classes, vec![8, 9]);
        assert_eq!(swapped.tasks[4].classes, vec![6, 7]);
    }

    #[test]
    fn iterator_epochs_and_determinism() {
        let s = split_disjoint(&small(), 5, 0.2, 0).unwrap().with_epochs(3);
        let counts: usize = online_iterator(&s, 7, 1).unwrap().map(|(_, b)| b.len()).sum();
        assert_eq!(counts, 3 * s.train_len());
        let a: Vec<_> = online_iterator(&s, 7, 1).unwrap().collect();
        let b: Vec<_> = online_iterator(&s, 7, 1).unwrap().collect();
        assert_eq!(a, b);
        let tasks: Vec<usize> = a.iter().map(|(t, _)| *t).collect();
        assert!(tasks.windows(2).all(|w| w[0] <= w[1]));
        assert!(online_iterator(&s, 0, 1).is_err());
    }

    #[test]
    fn dataset_requires_every_class() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(Dataset::new(x.clone(), vec![0, 0], 2, "d").is_err());
        assert!(Dataset::new(x, vec![0, 1], 2, "d").is_ok());
    }

    #[test]
    fn header_and_row_errors_carry_line_numbers() {
        let p = Path::new("mem.csv");
        let bad_header = parse_dataset("#nope\n".as_bytes(), p, "m".into()).unwrap_err();
        assert!(matches!(bad_header, Error::Parse { line: 1, .. }));
        let bad_row = parse_dataset("#cba-dataset,C=2,d=2\n0,1,2\n1,x,2\n".as_bytes(), p, "m".into()).unwrap_err();
        assert!(matches!(bad_row, Error::Parse { line: 3, .. }), "{bad_row}");
        let short = parse_dataset("#cba-dataset,C=2,d=2\n0,1\n".as_bytes(), p, "m".into()).unwrap_err();
        assert!(matches!(short, Error::Parse { line: 2, .. }));
    }
}
