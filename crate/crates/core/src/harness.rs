//! Sequential task training, baselines and accuracy bookkeeping.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledDataset, TaskStream};
use crate::diversity::EntropySign;
use crate::error::{Error, Result};
use crate::mixture::{AuxSettings, Betas};
use crate::model::{Architecture, LayerKind, LayerVars, Model};
use crate::optim::Adam;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Rows per chunk when evaluating.
const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BaselineMode {
    /// Mixture layers with every auxiliary term.
    #[default]
    Hvcl,
    /// Single variational expert per layer, weight KL only.
    VclSingleExpert,
    /// Deterministic dense layers, cross-entropy only.
    NaiveDense,
    /// Dense layers retrained from scratch on all tasks seen so far.
    OfflineOracle,
}

impl BaselineMode {
    pub const ALL: [BaselineMode; 4] = [
        BaselineMode::Hvcl,
        BaselineMode::VclSingleExpert,
        BaselineMode::NaiveDense,
        BaselineMode::OfflineOracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMode::Hvcl => "hvcl",
            BaselineMode::VclSingleExpert => "vcl_single_expert",
            BaselineMode::NaiveDense => "naive_dense",
            BaselineMode::OfflineOracle => "offline_oracle",
        }
    }

    pub fn layer_kind(self) -> LayerKind {
        match self {
            BaselineMode::Hvcl => LayerKind::Mixture,
            BaselineMode::VclSingleExpert => LayerKind::Variational,
            BaselineMode::NaiveDense | BaselineMode::OfflineOracle => LayerKind::Dense,
        }
    }
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

/// How the weight KL enters each mini-batch step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KlScale {
    /// Divided by the task's training-set size, matching a per-sample
    /// utility mean.
    #[default]
    PerSample,
    /// Added unscaled on every step.
    PerStep,
}

impl KlScale {
    pub fn as_str(self) -> &'static str {
        match self {
            KlScale::PerSample => "per_sample",
            KlScale::PerStep => "per_step",
        }
    }
}

impl fmt::Display for KlScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KlScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_sample" => Ok(KlScale::PerSample),
            "per_step" => Ok(KlScale::PerStep),
            other => Err(Error::Config(format!("unknown kl scale '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub betas: Betas,
    pub kernel_width: f64,
    pub jitter: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mode: BaselineMode,
    pub entropy_sign: EntropySign,
    pub kl_scale: KlScale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            betas: Betas::default(),
            kernel_width: crate::diversity::DEFAULT_KERNEL_WIDTH,
            jitter: crate::diversity::DEFAULT_JITTER,
            epochs: 20,
            batch_size: 256,
            learning_rate: 6e-4,
            seed: 0,
            mode: BaselineMode::Hvcl,
            entropy_sign: EntropySign::default(),
            kl_scale: KlScale::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in ["beta1", "beta2", "beta3", "beta4"].iter().zip(self.betas.as_array()) {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {b}")));
            }
        }
        if !(self.kernel_width.is_finite() && self.kernel_width > 0.0) {
            return Err(Error::Config(format!(
                "kernel width must be > 0, got {}",
                self.kernel_width
            )));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::Config(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Weights actually applied in the current mode.
    pub fn effective_betas(&self) -> Betas {
        match self.mode {
            BaselineMode::Hvcl | BaselineMode::VclSingleExpert => self.betas,
            BaselineMode::NaiveDense | BaselineMode::OfflineOracle => Betas::ZERO,
        }
    }

    pub fn aux_settings(&self) -> AuxSettings {
        AuxSettings {
            kernel_width: self.kernel_width,
            jitter: self.jitter,
            entropy_sign: self.entropy_sign,
        }
    }
}

/// Loss components of one step, summed over layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub nll: f64,
    pub gating_kl: f64,
    pub weight_kl: f64,
    pub entropy_cost: f64,
    pub dpp_diversity: f64,
    pub conditional_entropy: f64,
    pub marginal_entropy: f64,
    /// Smallest `det K` over mixture layers.
    pub kernel_det: Option<f64>,
    /// Rows routed to each expert, per mixture layer.
    pub routed: Vec<Vec<usize>>,
    pub correct: usize,
    pub batch_size: usize,
}

/// Per-epoch means of [`StepStats`].
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub gating_kl: f64,
    pub weight_kl: f64,
    pub entropy_cost: f64,
    pub dpp_diversity: f64,
    pub conditional_entropy: f64,
    pub marginal_entropy: f64,
    pub kernel_det: Option<f64>,
    /// Routing fractions per mixture layer.
    pub expert_loads: Vec<Vec<f64>>,
    /// Running accuracy of the sampled forward passes.
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "task,epoch,loss,nll,gating_kl,weight_kl,entropy_cost,dpp_diversity,\
conditional_entropy,marginal_entropy,kernel_det,train_accuracy,expert_loads";

impl TrainingLog {
    pub fn extend(&mut self, other: TrainingLog) {
        self.epochs.extend(other.epochs);
    }

    /// One row per epoch. Loads are `|`-separated per expert and
    /// `;`-separated per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let det = r.kernel_det.map_or(String::new(), |d| format!("{d:e}"));
            let loads = r
                .expert_loads
                .iter()
                .map(|l| l.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join("|"))
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{:.6},{}\n",
                r.task + 1,
                r.epoch + 1,
                r.loss,
                r.nll,
                r.gating_kl,
                r.weight_kl,
                r.entropy_cost,
                r.dpp_diversity,
                r.conditional_entropy,
                r.marginal_entropy,
                det,
                r.train_accuracy,
                loads
            ));
        }
        out
    }
}

/// `A[t][j]`: accuracy on task `j` after training through task `t` (`j ≤ t`).
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl AccuracyMatrix {
    /// Empty matrix over tasks with the given held-out sizes.
    pub fn new(counts: Vec<usize>) -> Self {
        AccuracyMatrix {
            rows: Vec::new(),
            counts,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, counts: Vec<usize>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(counts);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(j)).copied()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.counts.len()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.counts.len() {
            return Err(Error::Invalid("accuracy matrix is already complete".into()));
        }
        if row.len() != t + 1 {
            return Err(Error::Invalid(format!(
                "row {} needs {} entries, got {}",
                t + 1,
                t + 1,
                row.len()
            )));
        }
        if let Some(a) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Invalid(format!("accuracy {a} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    /// Mean of row `t`.
    pub fn average_accuracy(&self, t: usize) -> Option<f64> {
        self.rows.get(t).map(|r| r.iter().sum::<f64>() / r.len() as f64)
    }

    /// `(ACC, forgetting)` of the complete matrix.
    pub fn forgetting_metrics(&self) -> Result<(f64, f64)> {
        if !self.is_complete() || self.rows.is_empty() {
            return Err(Error::Invalid(format!(
                "accuracy matrix incomplete: {} of {} rows",
                self.rows.len(),
                self.counts.len()
            )));
        }
        let last = self.rows.len() - 1;
        let acc = self.average_accuracy(last).expect("non-empty");
        if last == 0 {
            return Ok((acc, 0.0));
        }
        let drop: f64 = (0..last)
            .map(|j| {
                let best = (j..=last).map(|t| self.rows[t][j]).fold(f64::NEG_INFINITY, f64::max);
                best - self.rows[last][j]
            })
            .sum();
        Ok((acc, drop / last as f64))
    }

    /// Full `T×T` grid; cells after the diagonal are empty.
    pub fn to_csv(&self) -> String {
        let n = self.num_tasks();
        let mut out = String::from("after_task");
        for j in 0..n {
            out.push_str(&format!(",task_{}", j + 1));
        }
        out.push('\n');
        for (t, row) in self.rows.iter().enumerate() {
            out.push_str(&(t + 1).to_string());
            for j in 0..n {
                out.push(',');
                if let Some(a) = row.get(j) {
                    out.push_str(&format!("{a:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Fraction of `data` classified correctly at posterior means.
pub fn accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    Ok(correct_count(model, data)? as f64 / data.len().max(1) as f64)
}

fn correct_count(model: &Model, data: &LabeledDataset) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::Invalid("evaluation on an empty held-out split".into()));
    }
    let mut correct = 0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = data.batch(&idx);
        correct += model.predict(&x)?.iter().zip(&y).filter(|(p, t)| p == t).count();
        start = end;
    }
    Ok(correct)
}

/// Row `up_to` of the accuracy matrix: held-out accuracy on tasks `0..=up_to`.
pub fn evaluate_matrix(model: &Model, stream: &TaskStream, up_to: usize) -> Result<Vec<f64>> {
    if up_to >= stream.len() {
        return Err(Error::Invalid(format!(
            "task {} not in a {}-task stream",
            up_to + 1,
            stream.len()
        )));
    }
    stream.tasks[..=up_to]
        .iter()
        .map(|t| accuracy(model, &t.test))
        .collect()
}

/// Records the training objective for one batch: mean negative
/// log-likelihood plus the β-weighted auxiliary terms of every layer.
/// Weights are sampled from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn objective<R: Rng>(
    model: &Model,
    tape: &mut Tape,
    vars: &[LayerVars],
    x: Tensor,
    labels: &[usize],
    config: &TrainConfig,
    n_train: usize,
    rng: &mut R,
) -> Result<(Var, StepStats)> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let betas = config.effective_betas();
    let betas = Betas {
        weight_kl: betas.weight_kl
            * match config.kl_scale {
                KlScale::PerSample => 1.0 / n_train.max(1) as f64,
                KlScale::PerStep => 1.0,
            },
        ..betas
    };
    let xv = tape.constant(x)?;
    let out = model.forward(tape, vars, xv, Some(rng), &config.aux_settings())?;
    let correct = crate::mixture::top1_route(tape.value(out.logits))?
        .iter()
        .zip(labels)
        .filter(|(p, t)| p == t)
        .count();
    let lp = tape.log_softmax(out.logits, 1)?;
    let picked = tape.pick_per_row(lp, labels)?;
    let mean_lp = tape.mean(picked)?;
    let nll = tape.neg(mean_lp)?;

    let mut stats = StepStats {
        nll: tape.scalar_value(nll),
        correct,
        batch_size: n,
        ..StepStats::default()
    };
    let mut total = nll;
    for (_, bundle) in &out.aux {
        let w = bundle.weighted(tape, &betas)?;
        total = tape.add(total, w)?;
        let [g, wk, e, d] = bundle.values(tape);
        stats.gating_kl += g;
        stats.weight_kl += wk;
        stats.entropy_cost += e;
        stats.dpp_diversity += d;
        stats.conditional_entropy += bundle.entropy.conditional_entropy;
        stats.marginal_entropy += bundle.entropy.marginal_entropy;
        if let Some(det) = bundle.kernel_det {
            stats.kernel_det = Some(stats.kernel_det.map_or(det, |m: f64| m.min(det)));
            stats.routed.push(bundle.routed.clone());
        }
    }
    stats.loss = tape.scalar_value(total);
    if !stats.loss.is_finite() {
        return Err(Error::Divergence(format!("loss {} (nll {})", stats.loss, stats.nll)));
    }
    Ok((total, stats))
}

/// A model with its optimizer and random streams.
pub struct Learner {
    pub model: Model,
    config: TrainConfig,
    optimizer: Adam,
    rng: ChaCha8Rng,
    tape: Tape,
    task: usize,
}

impl Learner {
    /// Builds a model of `arch` with layers matching `config.mode`.
    pub fn new(arch: &Architecture, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(arch, config.mode.layer_kind(), &mut init)?;
        Learner::with_model(model, config)
    }

    pub fn with_model(model: Model, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Learner {
            model,
            config: config.clone(),
            optimizer: Adam::new(config.learning_rate),
            rng,
            tape: Tape::new(),
            task: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of completed task boundaries.
    pub fn task(&self) -> usize {
        self.task
    }

    /// One gradient step on a batch; `n_train` scales the weight KL under
    /// [`KlScale::PerSample`].
    pub fn step(&mut self, x: Tensor, labels: &[usize], n_train: usize) -> Result<StepStats> {
        let stats = self.loss_and_update(x, labels, n_train, true)?;
        Ok(stats)
    }

    /// Loss of a batch with a fresh weight sample, without updating.
    pub fn total_loss(&mut self, x: Tensor, labels: &[usize], n_train: usize) -> Result<StepStats> {
        self.loss_and_update(x, labels, n_train, false)
    }

    fn loss_and_update(&mut self, x: Tensor, labels: &[usize], n_train: usize, update: bool) -> Result<StepStats> {
        let tape = &mut self.tape;
        tape.clear();
        let (vars, leaves) = self.model.bind(tape)?;
        let (total, stats) = objective(
            &self.model,
            tape,
            &vars,
            x,
            labels,
            &self.config,
            n_train,
            &mut self.rng,
        )
        .map_err(|e| match e {
            Error::Divergence(msg) => Error::Divergence(format!("task {}: {msg}", self.task + 1)),
            other => other,
        })?;
        if update {
            let grads = tape.backward(total)?;
            let grads: Vec<Vec<f64>> = leaves
                .iter()
                .map(|&v| grads.get_or_zeros(v, tape.value(v).len()))
                .collect();
            self.optimizer.update(&mut self.model.params_mut(), &grads)?;
        }
        Ok(stats)
    }

    /// Trains on `data` for the configured number of epochs.
    pub fn train_task(&mut self, data: &LabeledDataset) -> Result<TrainingLog> {
        let mut log = TrainingLog::default();
        if data.is_empty() {
            return Err(Error::Invalid("training on an empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            let mut sums = StepStats::default();
            let mut steps = 0usize;
            let mut routed: Vec<Vec<usize>> = Vec::new();
            let mut det: Option<f64> = None;
            for chunk in order.chunks(self.config.batch_size) {
                let (x, y) = data.batch(chunk);
                let s = self.step(x, &y, data.len()).map_err(|e| match e {
                    Error::Divergence(msg) => Error::Divergence(format!("epoch {}: {msg}", epoch + 1)),
                    other => other,
                })?;
                steps += 1;
                sums.loss += s.loss;
                sums.nll += s.nll;
                sums.gating_kl += s.gating_kl;
                sums.weight_kl += s.weight_kl;
                sums.entropy_cost += s.entropy_cost;
                sums.dpp_diversity += s.dpp_diversity;
                sums.conditional_entropy += s.conditional_entropy;
                sums.marginal_entropy += s.marginal_entropy;
                sums.correct += s.correct;
                sums.batch_size += s.batch_size;
                if let Some(d) = s.kernel_det {
                    det = Some(d);
                }
                if routed.is_empty() {
                    routed = s.routed.iter().map(|r| vec![0; r.len()]).collect();
                }
                for (acc, r) in routed.iter_mut().zip(&s.routed) {
                    for (a, c) in acc.iter_mut().zip(r) {
                        *a += c;
                    }
                }
            }
            let k = steps as f64;
            log.epochs.push(EpochRecord {
                task: self.task,
                epoch,
                loss: sums.loss / k,
                nll: sums.nll / k,
                gating_kl: sums.gating_kl / k,
                weight_kl: sums.weight_kl / k,
                entropy_cost: sums.entropy_cost / k,
                dpp_diversity: sums.dpp_diversity / k,
                conditional_entropy: sums.conditional_entropy / k,
                marginal_entropy: sums.marginal_entropy / k,
                kernel_det: det,
                expert_loads: routed
                    .iter()
                    .map(|r| {
                        let total = r.iter().sum::<usize>().max(1) as f64;
                        r.iter().map(|&c| c as f64 / total).collect()
                    })
                    .collect(),
                train_accuracy: sums.correct as f64 / sums.batch_size as f64,
            });
        }
        Ok(log)
    }

    /// Freezes posteriors as priors and resets the optimizer.
    pub fn advance_task(&mut self) {
        self.model.snapshot_priors();
        self.optimizer.reset();
        self.task += 1;
    }
}

/// Everything produced by one run over a task stream.
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub log: TrainingLog,
    pub model: Model,
}

/// Trains on the stream in order, evaluating after each task.
pub fn run_continual(stream: &TaskStream, arch: &Architecture, config: &TrainConfig) -> Result<RunOutcome> {
    if config.mode == BaselineMode::OfflineOracle {
        return offline_oracle_baseline(stream, arch, config);
    }
    check_stream(stream, arch)?;
    let mut learner = Learner::new(arch, config)?;
    let mut matrix = AccuracyMatrix::new(stream.tasks.iter().map(|t| t.test.len()).collect());
    let mut log = TrainingLog::default();
    for (t, task) in stream.tasks.iter().enumerate() {
        if t > 0 {
            learner.advance_task();
        }
        log.extend(learner.train_task(&task.train)?);
        matrix.push_row(evaluate_matrix(&learner.model, stream, t)?)?;
    }
    Ok(RunOutcome {
        matrix,
        log,
        model: learner.model,
    })
}

/// At each stage `t`, trains a fresh model on the union of tasks `0..=t`.
pub fn offline_oracle_baseline(stream: &TaskStream, arch: &Architecture, config: &TrainConfig) -> Result<RunOutcome> {
    check_stream(stream, arch)?;
    let cfg = TrainConfig {
        mode: BaselineMode::OfflineOracle,
        ..config.clone()
    };
    let mut matrix = AccuracyMatrix::new(stream.tasks.iter().map(|t| t.test.len()).collect());
    let mut log = TrainingLog::default();
    let mut model = None;
    for t in 0..stream.len() {
        let parts: Vec<&LabeledDataset> = stream.tasks[..=t].iter().map(|task| &task.train).collect();
        let union = LabeledDataset::concat(&parts)?;
        let mut learner = Learner::new(arch, &cfg)?;
        let mut stage = learner.train_task(&union)?;
        for r in &mut stage.epochs {
            r.task = t;
        }
        log.extend(stage);
        matrix.push_row(evaluate_matrix(&learner.model, stream, t)?)?;
        model = Some(learner.model);
    }
    Ok(RunOutcome {
        matrix,
        log,
        model: model.ok_or_else(|| Error::Invalid("empty task stream".into()))?,
    })
}

fn check_stream(stream: &TaskStream, arch: &Architecture) -> Result<()> {
    if stream.is_empty() {
        return Err(Error::Invalid("empty task stream".into()));
    }
    if stream.input_dim() != arch.input_dim || stream.num_classes() != arch.output_dim {
        return Err(Error::Config(format!(
            "stream has {} inputs and {} classes but the network is {}→{}",
            stream.input_dim(),
            stream.num_classes(),
            arch.input_dim,
            arch.output_dim
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forgetting_hand_case() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.5, 0.9]], vec![10, 10]).unwrap();
        let (acc, f) = m.forgetting_metrics().unwrap();
        assert!((acc - 0.7).abs() < 1e-12);
        assert!((f - 0.4).abs() < 1e-12);
    }

    #[test]
    fn constant_matrix_has_no_forgetting() {
        let rows = (0..4).map(|t| vec![0.8; t + 1]).collect();
        let m = AccuracyMatrix::from_rows(rows, vec![1; 4]).unwrap();
        assert_eq!(m.forgetting_metrics().unwrap(), (0.8, 0.0));
    }

    #[test]
    fn incomplete_matrix_is_rejected() {
        let mut m = AccuracyMatrix::new(vec![5, 5]);
        m.push_row(vec![0.5]).unwrap();
        assert!(m.forgetting_metrics().is_err());
        assert!(m.push_row(vec![0.5]).is_err());
        assert!(m.push_row(vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in BaselineMode::ALL {
            assert_eq!(m.as_str().parse::<BaselineMode>().unwrap(), m);
        }
        assert!("hvc".parse::<BaselineMode>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.betas.weight_kl = -1.0;
        assert!(c.validate().is_err());
        c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
