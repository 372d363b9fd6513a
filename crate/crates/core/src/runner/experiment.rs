use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bilevel::{baseline_online_step, cba_train_step, BilevelState, StepRngs};
use crate::buffer::MemoryBuffer;
use crate::error::{Error, Result};
use crate::metrics::{compute_acc, compute_acc_auc, compute_fm, evaluate_model, AccAuc, AccuracyMatrix, AccuracyTrace};
use crate::nn::{init_params, ParamSet};
use crate::stream::{
    gen_gaussian_mixture, load_dataset, online_iterator, permute_task_order, split_blurry, split_disjoint, Batch,
    Dataset, TaskStream,
};

use super::config::RunConfig;

/// Sub-seed slots derived from a run's master seed.
#[derive(Clone, Copy, Debug)]
pub enum SeedSlot {
    Data = 0,
    Split = 1,
    Init = 2,
    Shuffle = 3,
    Buffer = 4,
    Outer = 5,
}

/// `k`-th output of a SplitMix64 generator started at `master`: the state
/// after `k + 1` increments of the golden-ratio constant, then mixed.
pub fn sub_seed(master: u64, slot: SeedSlot) -> u64 {
    let mut z = master.wrapping_add((slot as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagRow {
    pub step: u64,
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub align_ip: f64,
    pub trn_grad_sq: f64,
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub acc: f64,
    pub fm: f64,
    pub auc: AccAuc,
    pub trace: AccuracyTrace,
    pub diag: Vec<DiagRow>,
    pub steps: u64,
    pub params: ParamSet,
}

/// Whatever a failed seed managed to record before it stopped.
#[derive(Clone, Debug)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
    pub matrix: AccuracyMatrix,
    pub trace: AccuracyTrace,
    pub diag: Vec<DiagRow>,
}

#[derive(Clone, Debug)]
pub enum SeedOutcome {
    Done(Box<SeedResult>),
    Failed(Box<SeedFailure>),
}

impl SeedOutcome {
    pub fn seed(&self) -> u64 {
        match self {
            SeedOutcome::Done(r) => r.seed,
            SeedOutcome::Failed(f) => f.seed,
        }
    }

    pub fn done(&self) -> Option<&SeedResult> {
        match self {
            SeedOutcome::Done(r) => Some(r),
            SeedOutcome::Failed(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub acc: Stat,
    pub fm: Stat,
    pub auc_raw: Stat,
    pub auc_norm: Stat,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcomes: Vec<SeedOutcome>,
    /// Over the seeds that completed.
    pub aggregate: Aggregate,
}

impl RunResult {
    pub fn completed(&self) -> impl Iterator<Item = &SeedResult> {
        self.outcomes.iter().filter_map(SeedOutcome::done)
    }
}

pub fn load_or_generate(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    if cfg.dataset == "synthetic" {
        let s = &cfg.synthetic;
        gen_gaussian_mixture(s.classes, s.dim, s.per_class, s.separation, s.spread, sub_seed(seed, SeedSlot::Data))
    } else {
        load_dataset(Path::new(&cfg.dataset))
    }
}

/// The task stream a given seed trains on.
pub fn build_stream(cfg: &RunConfig, seed: u64) -> Result<TaskStream> {
    let data = load_or_generate(cfg, seed)?;
    let split = sub_seed(seed, SeedSlot::Split);
    let stream = if cfg.blurry_k > 0 {
        split_blurry(&data, cfg.tasks, cfg.blurry_k, cfg.test_fraction, split)?
    } else {
        split_disjoint(&data, cfg.tasks, cfg.test_fraction, split)?
    };
    let stream = match &cfg.task_order {
        Some(order) => permute_task_order(&stream, order)?,
        None => stream,
    };
    Ok(stream.with_epochs(cfg.epochs))
}

struct Recorder {
    matrix: AccuracyMatrix,
    trace: AccuracyTrace,
    diag: Vec<DiagRow>,
}

fn evaluate_seen(params: &ParamSet, stream: &TaskStream, last_task: usize) -> Result<Vec<f64>> {
    let tests: Vec<&Batch> = stream.tasks[..=last_task].iter().map(|t| &t.test).collect();
    evaluate_model(&params.classifier, &tests)
}

fn train_seed(cfg: &RunConfig, seed: u64, rec: &mut Recorder) -> Result<(ParamSet, u64)> {
    let stream = build_stream(cfg, seed)?;
    let data_dim = stream.tasks[0].train.dim();
    let params = init_params(&cfg.model_spec(data_dim, stream.class_count, sub_seed(seed, SeedSlot::Init)))?;
    let mcfg = cfg.method_config();
    let mut state = BilevelState::new(params, cfg.alpha, cfg.beta)?;
    let mut buffer = MemoryBuffer::new(cfg.buffer);
    let mut rngs = StepRngs {
        buffer: ChaCha8Rng::seed_from_u64(sub_seed(seed, SeedSlot::Buffer)),
        outer: ChaCha8Rng::seed_from_u64(sub_seed(seed, SeedSlot::Outer)),
    };
    let replay = cfg.replay_batch();
    let mut current = 0usize;
    let mut step = 0u64;

    for (task, mut batch) in online_iterator(&stream, cfg.batch, sub_seed(seed, SeedSlot::Shuffle))? {
        if task != current {
            let accs = evaluate_seen(&state.params, &stream, current)?;
            rec.matrix.set_column(current, &accs)?;
            current = task;
        }
        if cfg.fault.is_some_and(|f| f.seed == seed && f.step == step) {
            batch.x.data_mut()[0] = f64::NAN;
        }
        if cfg.cba {
            let report = cba_train_step(&mut state, &batch, &mut buffer, &mut rngs, &mcfg, replay, cfg.diag)?;
            if let (Some(a), Some(outer)) = (report.alignment, report.outer_loss) {
                rec.diag.push(DiagRow {
                    step: a.step,
                    inner_loss: report.inner_loss,
                    outer_loss: outer,
                    align_ip: a.inner_product,
                    trn_grad_sq: a.trn_grad_sq,
                });
            }
        } else {
            baseline_online_step(&mut state.params, &batch, &mut buffer, &mut rngs, &mcfg, replay, step)?;
            state.step += 1;
        }
        step += 1;
        if step.is_multiple_of(cfg.eval_interval) {
            rec.trace.push(step, evaluate_seen(&state.params, &stream, current)?);
        }
    }
    let accs = evaluate_seen(&state.params, &stream, current)?;
    rec.matrix.set_column(current, &accs)?;
    Ok((state.params, step))
}

/// Trains and evaluates a single seed.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> SeedOutcome {
    let mut rec = Recorder {
        matrix: AccuracyMatrix::new(cfg.tasks),
        trace: AccuracyTrace::default(),
        diag: Vec::new(),
    };
    let finished = train_seed(cfg, seed, &mut rec).and_then(|(params, steps)| {
        let acc = compute_acc(&rec.matrix)?;
        let fm = compute_fm(&rec.matrix)?;
        let auc = if rec.trace.points.is_empty() {
            return Err(Error::invalid(format!(
                "run of {steps} steps is shorter than the eval interval {}",
                cfg.eval_interval
            )));
        } else {
            compute_acc_auc(&rec.trace, cfg.eval_interval)?
        };
        Ok((params, steps, acc, fm, auc))
    });
    match finished {
        Ok((params, steps, acc, fm, auc)) => SeedOutcome::Done(Box::new(SeedResult {
            seed,
            matrix: rec.matrix,
            acc,
            fm,
            auc,
            trace: rec.trace,
            diag: rec.diag,
            steps,
            params,
        })),
        Err(e) => {
            log::error!("seed {seed} failed: {e}");
            SeedOutcome::Failed(Box::new(SeedFailure {
                seed,
                error: e.to_string(),
                matrix: rec.matrix,
                trace: rec.trace,
                diag: rec.diag,
            }))
        }
    }
}

pub fn aggregate(outcomes: &[SeedOutcome]) -> Aggregate {
    let done: Vec<&SeedResult> = outcomes.iter().filter_map(SeedOutcome::done).collect();
    let pick = |f: fn(&SeedResult) -> f64| Stat::of(&done.iter().map(|r| f(r)).collect::<Vec<_>>());
    Aggregate {
        acc: pick(|r| r.acc),
        fm: pick(|r| r.fm),
        auc_raw: pick(|r| r.auc.raw),
        auc_norm: pick(|r| r.auc.normalized),
    }
}

/// Runs every configured seed (in parallel when `workers != 1`), keeping the
/// outcomes in seed order.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    build_stream(cfg, cfg.seeds[0]).map_err(|e| Error::Usage(e.to_string()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outcomes: Vec<SeedOutcome> = pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect());
    let aggregate = aggregate(&outcomes);
    Ok(RunResult { outcomes, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_differ_per_slot_and_master() {
        let a = [SeedSlot::Data, SeedSlot::Split, SeedSlot::Init, SeedSlot::Shuffle, SeedSlot::Buffer, SeedSlot::Outer]
            .map(|s| sub_seed(0, s));
        for i in 0..a.len() {
            for j in 0..i {
                assert_ne!(a[i], a[j]);
            }
        }
        assert_ne!(sub_seed(1, SeedSlot::Data), sub_seed(0, SeedSlot::Data));
    }

    #[test]
    fn sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).std, 0.0);
    }
}
