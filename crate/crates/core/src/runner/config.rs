use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::methods::{Method, MethodConfig};
use crate::nn::ModelSpec;

/// Parameters of the built-in Gaussian-mixture benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 16,
            per_class: 500,
            separation: 3.0,
            spread: 1.0,
        }
    }
}

/// Where a failure should be injected; used to exercise crash isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub cba: bool,
    /// `"synthetic"` or a path to a dataset file.
    pub dataset: String,
    pub synthetic: SyntheticSpec,
    pub tasks: usize,
    /// Blurry percentage; 0 gives disjoint tasks.
    pub blurry_k: u32,
    pub epochs: usize,
    pub batch: usize,
    /// Replay batch size; 0 reuses `batch`.
    pub replay_batch: usize,
    pub test_fraction: f64,
    pub task_order: Option<Vec<usize>>,
    pub backbone: Vec<usize>,
    pub cba_hidden: usize,
    pub alpha: f64,
    pub beta: f64,
    pub derpp_distill_weight: f64,
    pub derpp_replay_weight: f64,
    /// Buffer capacity M.
    pub buffer: usize,
    pub seeds: Vec<u64>,
    pub eval_interval: u64,
    pub out: PathBuf,
    pub diag: bool,
    /// Worker threads for seeds; 0 uses every available core.
    pub workers: usize,
    pub fault: Option<FaultInjection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Er,
            cba: false,
            dataset: "synthetic".into(),
            synthetic: SyntheticSpec::default(),
            tasks: 5,
            blurry_k: 0,
            epochs: 1,
            batch: 10,
            replay_batch: 15,
            test_fraction: 0.2,
            task_order: None,
            backbone: vec![64],
            cba_hidden: 256,
            alpha: 0.03,
            beta: 0.3,
            derpp_distill_weight: 0.5,
            derpp_replay_weight: 0.5,
            buffer: 500,
            seeds: (0..10).collect(),
            eval_interval: 5,
            out: PathBuf::from("results"),
            diag: false,
            workers: 0,
            fault: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.eval_interval == 0 {
            return bad("eval interval must be >= 1".into());
        }
        if self.blurry_k >= 100 {
            return bad(format!("blurry K must be in [0, 100), got {}", self.blurry_k));
        }
        if self.tasks == 0 || self.batch == 0 || self.epochs == 0 {
            return bad("tasks, batch and epochs must be >= 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test fraction must be in (0, 1), got {}", self.test_fraction));
        }
        if let Some(order) = &self.task_order {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..self.tasks).collect::<Vec<_>>() {
                return bad(format!("task order {order:?} is not a permutation of 0..{}", self.tasks));
            }
        }
        if self.dataset == "synthetic" {
            let s = &self.synthetic;
            if s.classes < 2 || s.dim < 2 || s.per_class == 0 || !(s.spread > 0.0) || !s.separation.is_finite() {
                return bad("bad synthetic benchmark parameters".into());
            }
            if !s.classes.is_multiple_of(self.tasks) {
                return bad(format!("{} classes cannot be split evenly into {} tasks", s.classes, self.tasks));
            }
        }
        self.method_config().validate().map_err(|e| Error::Usage(e.to_string()))
    }

    pub fn replay_batch(&self) -> usize {
        if self.replay_batch == 0 {
            self.batch
        } else {
            self.replay_batch
        }
    }

    pub fn method_config(&self) -> MethodConfig {
        MethodConfig {
            method: self.method,
            use_cba: self.cba,
            alpha: self.alpha,
            beta: self.beta,
            derpp_distill_weight: self.derpp_distill_weight,
            derpp_replay_weight: self.derpp_replay_weight,
        }
    }

    pub fn model_spec(&self, input_dim: usize, class_count: usize, seed: u64) -> ModelSpec {
        ModelSpec {
            cba_hidden: self.cba_hidden,
            seed,
            ..ModelSpec::new(input_dim, self.backbone.clone(), class_count)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

fn parse_fault(s: &str) -> std::result::Result<FaultInjection, String> {
    let (seed, step) = s.split_once(':').ok_or("expected SEED:STEP")?;
    Ok(FaultInjection {
        seed: seed.parse().map_err(|e| format!("{e}"))?,
        step: step.parse().map_err(|e| format!("{e}"))?,
    })
}

/// Online continual learning runs with optional bias adaptation.
#[derive(Debug, Parser)]
#[command(name = "cba", version, about)]
pub struct Cli {
    /// TOML file with base settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// er or derpp
    #[arg(long)]
    pub method: Option<Method>,
    /// Train the bias adaptor.
    #[arg(long)]
    pub cba: bool,
    /// Buffer capacity.
    #[arg(long = "M")]
    pub buffer: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Percentage of each task's data moved to other tasks.
    #[arg(long = "blurry-K", alias = "K")]
    pub blurry_k: Option<u32>,
    /// Passes over each task (1 = online).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Replay examples drawn per step (0 = same as --batch).
    #[arg(long)]
    pub replay_batch: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// `synthetic` or a dataset file.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Comma-separated permutation of task indices (0-based).
    #[arg(long)]
    pub task_order: Option<String>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Record the gradient-alignment diagnostic.
    #[arg(long)]
    pub diag: bool,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, hide = true, value_parser = parse_fault)]
    pub inject_nan: Option<FaultInjection>,
}

impl std::str::FromStr for FaultInjection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_fault(s)
    }
}

impl Cli {
    pub fn into_config(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$target = v; })*
            };
        }
        take!(method => method, buffer => buffer, tasks => tasks, blurry_k => blurry_k,
              epochs => epochs, batch => batch, replay_batch => replay_batch, alpha => alpha, beta => beta,
              dataset => dataset, eval_interval => eval_interval,
              out => out, workers => workers);
        cfg.cba |= self.cba;
        cfg.diag |= self.diag;
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_list(s).map_err(|e| Error::Usage(format!("--seeds {e}")))?;
        }
        if let Some(s) = &self.task_order {
            cfg.task_order = Some(parse_list(s).map_err(|e| Error::Usage(format!("--task-order {e}")))?);
        }
        if self.inject_nan.is_some() {
            cfg.fault = self.inject_nan;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` (program name first) into a validated config.
pub fn parse_config<I, T>(argv: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(argv)
        .map_err(|e| Error::Usage(e.to_string()))?
        .into_config()
}
