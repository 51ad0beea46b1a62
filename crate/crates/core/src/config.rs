//! Run configuration as flat `section.key = value` text.
//!
//! `#` starts a comment. Unknown keys are errors. A bare key such as
//! `epochs` is accepted when exactly one section defines it.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{Scenario, DEFAULT_SPLIT_PAIRS};
use crate::diversity::EntropySign;
use crate::error::{Error, Result};
use crate::harness::{BaselineMode, KlScale, TrainConfig};
use crate::model::Architecture;

/// Every accepted key, in the order they are written out.
pub const KEYS: &[&str] = &[
    "run.scenario",
    "run.seeds",
    "model.hidden",
    "model.experts",
    "model.top_k",
    "train.mode",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.beta1",
    "train.beta2",
    "train.beta3",
    "train.beta4",
    "train.kernel_width",
    "train.jitter",
    "train.entropy_sign",
    "train.kl_scale",
    "data.dir",
    "data.split_pairs",
    "data.permuted_tasks",
    "data.train_limit",
    "data.synthetic_tasks",
    "data.synthetic_per_task",
    "data.synthetic_separation",
    "output.dir",
];

/// Prefix of the configuration echo inside a run summary.
pub const SUMMARY_PREFIX: &str = "config.";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub hidden: Vec<usize>,
    pub experts: usize,
    pub top_k: usize,
    /// Everything except the seed, which comes from `seeds`.
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub split_pairs: Vec<(usize, usize)>,
    pub permuted_tasks: usize,
    /// Training samples kept per task; 0 keeps all.
    pub train_limit: usize,
    pub synthetic_tasks: usize,
    pub synthetic_per_task: usize,
    pub synthetic_separation: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: Scenario::Split,
            seeds: vec![1],
            hidden: vec![256, 256],
            experts: 2,
            top_k: 1,
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data/mnist"),
            split_pairs: DEFAULT_SPLIT_PAIRS.to_vec(),
            permuted_tasks: 10,
            train_limit: 0,
            synthetic_tasks: 2,
            synthetic_per_task: 500,
            synthetic_separation: 10.0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_pairs(key: &str, value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|p| {
            let (a, b) = p
                .trim()
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("{key}: expected 'a-b' pairs, got '{p}'")))?;
            Ok((parse(key, a.trim())?, parse(key, b.trim())?))
        })
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Canonical name for `key`, resolving unambiguous bare keys.
pub fn resolve_key(key: &str) -> Result<&'static str> {
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Ok(k);
    }
    let matches: Vec<&'static str> = KEYS
        .iter()
        .copied()
        .filter(|k| k.split_once('.').is_some_and(|(_, name)| name == key))
        .collect();
    match matches.as_slice() {
        [one] => Ok(one),
        [] => Err(Error::Config(format!("unknown key '{key}'"))),
        many => Err(Error::Config(format!(
            "ambiguous key '{key}': one of {}",
            many.join(", ")
        ))),
    }
}

impl RunConfig {
    /// Assigns one key; `key` may be a bare alias.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = resolve_key(key.trim())?;
        let v = value.trim();
        match key {
            "run.scenario" => self.scenario = v.parse()?,
            "run.seeds" => self.seeds = parse_list(key, v)?,
            "model.hidden" => self.hidden = parse_list(key, v)?,
            "model.experts" => self.experts = parse(key, v)?,
            "model.top_k" => self.top_k = parse(key, v)?,
            "train.mode" => self.train.mode = v.parse()?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.beta1" => self.train.betas.gating_kl = parse(key, v)?,
            "train.beta2" => self.train.betas.weight_kl = parse(key, v)?,
            "train.beta3" => self.train.betas.entropy = parse(key, v)?,
            "train.beta4" => self.train.betas.diversity = parse(key, v)?,
            "train.kernel_width" => self.train.kernel_width = parse(key, v)?,
            "train.jitter" => self.train.jitter = parse(key, v)?,
            "train.entropy_sign" => self.train.entropy_sign = v.parse::<EntropySign>()?,
            "train.kl_scale" => self.train.kl_scale = v.parse::<KlScale>()?,
            "data.dir" => self.data_dir = PathBuf::from(v),
            "data.split_pairs" => self.split_pairs = parse_pairs(key, v)?,
            "data.permuted_tasks" => self.permuted_tasks = parse(key, v)?,
            "data.train_limit" => self.train_limit = parse(key, v)?,
            "data.synthetic_tasks" => self.synthetic_tasks = parse(key, v)?,
            "data.synthetic_per_task" => self.synthetic_per_task = parse(key, v)?,
            "data.synthetic_separation" => self.synthetic_separation = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            other => unreachable!("key {other} listed but not handled"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let key = resolve_key(key)?;
        let t = &self.train;
        Ok(match key {
            "run.scenario" => self.scenario.as_str().to_string(),
            "run.seeds" => join(&self.seeds),
            "model.hidden" => join(&self.hidden),
            "model.experts" => self.experts.to_string(),
            "model.top_k" => self.top_k.to_string(),
            "train.mode" => t.mode.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.beta1" => t.betas.gating_kl.to_string(),
            "train.beta2" => t.betas.weight_kl.to_string(),
            "train.beta3" => t.betas.entropy.to_string(),
            "train.beta4" => t.betas.diversity.to_string(),
            "train.kernel_width" => t.kernel_width.to_string(),
            "train.jitter" => t.jitter.to_string(),
            "train.entropy_sign" => t.entropy_sign.to_string(),
            "train.kl_scale" => t.kl_scale.to_string(),
            "data.dir" => self.data_dir.display().to_string(),
            "data.split_pairs" => self
                .split_pairs
                .iter()
                .map(|(a, b)| format!("{a}-{b}"))
                .collect::<Vec<_>>()
                .join(","),
            "data.permuted_tasks" => self.permuted_tasks.to_string(),
            "data.train_limit" => self.train_limit.to_string(),
            "data.synthetic_tasks" => self.synthetic_tasks.to_string(),
            "data.synthetic_per_task" => self.synthetic_per_task.to_string(),
            "data.synthetic_separation" => self.synthetic_separation.to_string(),
            "output.dir" => self.output_dir.display().to_string(),
            other => unreachable!("key {other} listed but not handled"),
        })
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen: Vec<&'static str> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let canonical = resolve_key(key.trim()).map_err(at)?;
            if seen.contains(&canonical) {
                return Err(Error::Config(format!("line {}: '{canonical}' set twice", lineno + 1)));
            }
            seen.push(canonical);
            self.set(canonical, value).map_err(at)?;
        }
        Ok(())
    }

    /// Defaults overlaid with `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key, one `key = value` line each, prefixed by `prefix`.
    pub fn to_text_with_prefix(&self, prefix: &str) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{prefix}{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.to_text_with_prefix("")
    }

    /// Rebuilds a configuration from the `config.*` lines of a run summary.
    pub fn from_summary(summary: &str) -> Result<Self> {
        let echoed: String = summary
            .lines()
            .filter_map(|l| l.trim().strip_prefix(SUMMARY_PREFIX))
            .map(|l| format!("{l}\n"))
            .collect();
        if echoed.is_empty() {
            return Err(Error::Config("summary has no configuration echo".into()));
        }
        RunConfig::from_text(&echoed)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds is empty".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!(
                "model.top_k = {} needs 1 <= top_k <= experts = {}",
                self.top_k, self.experts
            )));
        }
        match self.scenario {
            Scenario::Split if self.split_pairs.is_empty() => {
                return Err(Error::Config("data.split_pairs is empty".into()));
            }
            Scenario::Permuted if self.permuted_tasks == 0 => {
                return Err(Error::Config("data.permuted_tasks must be positive".into()));
            }
            Scenario::Synthetic => {
                if self.synthetic_tasks == 0 || self.synthetic_per_task == 0 {
                    return Err(Error::Config("synthetic stream must be non-empty".into()));
                }
                if !(self.synthetic_separation > 0.0) {
                    return Err(Error::Config("data.synthetic_separation must be > 0".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Training settings for one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Network for a stream with the given input width and class count.
    pub fn architecture(&self, input_dim: usize, output_dim: usize) -> Architecture {
        let single = matches!(self.train.mode, BaselineMode::VclSingleExpert);
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            output_dim,
            experts: if single { 1 } else { self.experts },
            top_k: if single { 1 } else { self.top_k },
        }
    }
}
