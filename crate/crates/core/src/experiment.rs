//! One seed of a configured run: stream construction, training and the
//! key-value summary that makes the run reconstructible.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{RunConfig, SUMMARY_PREFIX};
use crate::data::{load_mnist, make_permuted_tasks, make_split_tasks, make_synthetic_stream, Scenario, TaskStream};
use crate::error::{Error, Result};
use crate::harness::{run_continual, RunOutcome};

/// Builds the task stream of `config` for `seed`. MNIST is read from
/// `config.data_dir`; permutations and synthetic blobs derive from `seed`.
pub fn build_stream(config: &RunConfig, seed: u64) -> Result<TaskStream> {
    let stream = match config.scenario {
        Scenario::Split => make_split_tasks(&load_mnist(&config.data_dir)?, &config.split_pairs)?,
        Scenario::Permuted => make_permuted_tasks(&load_mnist(&config.data_dir)?, config.permuted_tasks, seed)?,
        Scenario::Synthetic => make_synthetic_stream(
            config.synthetic_tasks,
            config.synthetic_per_task,
            config.synthetic_separation,
            seed,
        )?,
    };
    Ok(stream.limit_train(config.train_limit))
}

/// Trains and evaluates one seed on an already built stream.
pub fn run_on_stream(config: &RunConfig, stream: &TaskStream, seed: u64) -> Result<RunOutcome> {
    config.validate()?;
    let arch = config.architecture(stream.input_dim(), stream.num_classes());
    run_continual(stream, &arch, &config.train_config(seed))
}

pub fn run_seed(config: &RunConfig, seed: u64) -> Result<(TaskStream, RunOutcome)> {
    config.validate()?;
    let stream = build_stream(config, seed)?;
    let outcome = run_on_stream(config, &stream, seed)?;
    Ok((stream, outcome))
}

/// Headline numbers parsed back from a summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryMetrics {
    pub seed: u64,
    pub acc: f64,
    pub forgetting: f64,
    pub final_row: Vec<f64>,
}

fn join_exact(values: &[f64]) -> String {
    // `{}` prints the shortest text that parses back to the same bits
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Key-value summary: metrics, β values, entropy sign and the full
/// configuration echo under [`SUMMARY_PREFIX`].
pub fn summary_text(config: &RunConfig, seed: u64, outcome: &RunOutcome) -> Result<String> {
    let (acc, forgetting) = outcome.matrix.forgetting_metrics()?;
    let tc = config.train_config(seed);
    let b = tc.effective_betas();
    let mut out = String::new();
    let _ = writeln!(out, "seed = {seed}");
    let _ = writeln!(out, "scenario = {}", config.scenario.as_str());
    let _ = writeln!(out, "mode = {}", tc.mode.as_str());
    let _ = writeln!(out, "tasks = {}", outcome.matrix.num_tasks());
    let _ = writeln!(out, "acc = {acc}");
    let _ = writeln!(out, "forgetting = {forgetting}");
    let _ = writeln!(
        out,
        "final_row = {}",
        join_exact(outcome.matrix.final_row().unwrap_or(&[]))
    );
    let _ = writeln!(
        out,
        "effective_betas = {}",
        join_exact(&[b.gating_kl, b.weight_kl, b.entropy, b.diversity])
    );
    let _ = writeln!(out, "entropy_sign = {}", tc.entropy_sign.as_str());
    let _ = writeln!(out, "kl_scale = {}", tc.kl_scale.as_str());
    out.push_str(&config.to_text_with_prefix(SUMMARY_PREFIX));
    Ok(out)
}

fn summary_value<'a>(summary: &'a str, key: &str) -> Result<&'a str> {
    summary
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| Error::Config(format!("summary has no '{key}' entry")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("summary {key}: cannot parse '{v}'")))
}

pub fn parse_summary(summary: &str) -> Result<SummaryMetrics> {
    let seed = summary_value(summary, "seed")?;
    let row = summary_value(summary, "final_row")?;
    Ok(SummaryMetrics {
        seed: seed
            .parse()
            .map_err(|_| Error::Config(format!("summary seed: cannot parse '{seed}'")))?,
        acc: parse_f64("acc", summary_value(summary, "acc")?)?,
        forgetting: parse_f64("forgetting", summary_value(summary, "forgetting")?)?,
        final_row: if row.is_empty() {
            Vec::new()
        } else {
            row.split(',')
                .map(|v| parse_f64("final_row", v.trim()))
                .collect::<Result<_>>()?
        },
    })
}

/// Aligned human-readable accuracy table.
pub fn matrix_table(outcome: &RunOutcome) -> String {
    let n = outcome.matrix.num_tasks();
    let mut out = String::from("after  ");
    for j in 0..n {
        let _ = write!(out, " task{:<3}", j + 1);
    }
    out.push('\n');
    for (t, row) in outcome.matrix.rows().iter().enumerate() {
        let _ = write!(out, "{:<7}", t + 1);
        for a in row {
            let _ = write!(out, " {a:>7.4}");
        }
        out.push('\n');
    }
    out
}

/// Writes `summary.txt` and the other artifacts of one seed into `dir`.
pub fn write_artifacts(dir: &Path, summary: &str, outcome: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("summary.txt", summary)?;
    write("accuracy_matrix.csv", &outcome.matrix.to_csv())?;
    write("train_log.csv", &outcome.log.to_csv())?;
    crate::checkpoint::save(&dir.join("model.ckpt"), &outcome.model, summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> RunConfig {
        let mut c = RunConfig::default();
        c.set("scenario", "synthetic").unwrap();
        c.set("synthetic_per_task", "60").unwrap();
        c.set("hidden", "6").unwrap();
        c.set("epochs", "1").unwrap();
        c.set("batch_size", "16").unwrap();
        c
    }

    #[test]
    fn summary_roundtrips_metrics_and_config() {
        let c = synthetic();
        let (_, outcome) = run_seed(&c, 3).unwrap();
        let text = summary_text(&c, 3, &outcome).unwrap();
        let m = parse_summary(&text).unwrap();
        assert_eq!(m.seed, 3);
        assert_eq!(m.final_row, outcome.matrix.final_row().unwrap());
        assert_eq!(RunConfig::from_summary(&text).unwrap(), c);
        assert!(matrix_table(&outcome).lines().count() == 3);
    }

    #[test]
    fn missing_summary_key_is_config_error() {
        assert!(matches!(parse_summary("seed = 1\n"), Err(Error::Config(_))));
    }
}
