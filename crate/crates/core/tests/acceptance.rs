//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so criteria execute serially in a
//! fixed order. Pass criterion numbers as arguments to run a subset:
//! `cargo test -p hvcl-core --test acceptance -- 9 11`.
//!
//! Criteria 9 to 11 train on MNIST for about an hour on one core. They run
//! only when named on the command line or when `HVCL_ACCEPTANCE_MNIST` is
//! set, and otherwise report SKIP. MNIST is read in IDX form from
//! `HVCL_MNIST_DIR` or `<workspace>/data/mnist`.

use std::cell::OnceCell;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use hvcl::config::RunConfig;
use hvcl::data::{
    load_mnist, make_permuted_tasks, make_split_tasks, make_synthetic_stream, DatasetSplits, DEFAULT_SPLIT_PAIRS,
};
use hvcl::diversity::{dpp_diversity_loss, kernel_matrix};
use hvcl::harness::{run_continual, BaselineMode, Learner, TrainConfig};
use hvcl::model::{Architecture, Layer, Model};
use hvcl::selftest::{self, Fixtures};

/// Seeds averaged by the MNIST experiments.
const SEEDS: [u64; 3] = [1, 2, 3];

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn from_check(r: selftest::CheckResult) -> Verdict {
    verdict(r.passed, format!("{}: {}", r.name, r.detail))
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("HVCL_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join("/")
}

/// Final ACC per seed on split-MNIST for one baseline, with default settings.
struct SplitResults {
    hvcl: Vec<f64>,
    naive: Vec<f64>,
    oracle: Vec<f64>,
}

struct Context {
    /// Whether the long MNIST criteria were requested.
    long: bool,
    mnist: OnceCell<Option<DatasetSplits>>,
    split: OnceCell<Option<SplitResults>>,
}

impl Context {
    fn mnist(&self) -> Option<&DatasetSplits> {
        self.mnist
            .get_or_init(|| if self.long { load_mnist(&mnist_dir()).ok() } else { None })
            .as_ref()
    }

    fn split(&self) -> Option<&SplitResults> {
        self.split
            .get_or_init(|| {
                let splits = self.mnist()?;
                let stream = make_split_tasks(splits, &DEFAULT_SPLIT_PAIRS).expect("split tasks");
                let defaults = RunConfig::default();
                let arch = defaults.architecture(stream.input_dim(), stream.num_classes());
                let acc = |mode: BaselineMode| -> Vec<f64> {
                    SEEDS
                        .iter()
                        .map(|&seed| {
                            let t = Instant::now();
                            let cfg = TrainConfig {
                                mode,
                                ..defaults.train_config(seed)
                            };
                            let out = run_continual(&stream, &arch, &cfg).expect("split-MNIST run");
                            let (acc, _) = out.matrix.forgetting_metrics().expect("complete matrix");
                            eprintln!(
                                "  split-MNIST {} seed {seed}: ACC {acc:.4} ({:.0}s)",
                                mode.as_str(),
                                t.elapsed().as_secs_f64()
                            );
                            acc
                        })
                        .collect()
                };
                Some(SplitResults {
                    hvcl: acc(BaselineMode::Hvcl),
                    naive: acc(BaselineMode::NaiveDense),
                    oracle: acc(BaselineMode::OfflineOracle),
                })
            })
            .as_ref()
    }
}

fn no_mnist(ctx: &Context) -> Verdict {
    if !ctx.long {
        return Verdict::Skip(
            "long-running MNIST criterion; run `cargo test -p hvcl-core --test acceptance -- 9 10 11` \
             or set HVCL_ACCEPTANCE_MNIST=1"
                .into(),
        );
    }
    Verdict::Skip(format!("MNIST not found at {}", mnist_dir().display()))
}

fn criterion_9(ctx: &Context) -> Verdict {
    let Some(r) = ctx.split() else { return no_mnist(ctx) };
    let (h, n) = (mean(&r.hvcl), mean(&r.naive));
    verdict(
        h >= 0.85 && h - n >= 0.03,
        format!(
            "split-MNIST mean ACC hvcl {h:.4} [{}] vs naive_dense {n:.4} [{}]; need >= 0.85 and +0.03",
            fmt(&r.hvcl),
            fmt(&r.naive)
        ),
    )
}

fn criterion_11(ctx: &Context) -> Verdict {
    let Some(r) = ctx.split() else { return no_mnist(ctx) };
    let (o, h, n) = (mean(&r.oracle), mean(&r.hvcl), mean(&r.naive));
    verdict(
        o >= h && h >= n,
        format!("mean ACC offline_oracle {o:.4} >= hvcl {h:.4} >= naive_dense {n:.4}"),
    )
}

/// Desk-scale permuted-MNIST: 5 tasks, a training subset per task.
pub const PERMUTED_TASKS: usize = 5;
pub const PERMUTED_TRAIN_LIMIT: usize = 10_000;
pub const PERMUTED_EPOCHS: usize = 5;

fn criterion_10(ctx: &Context) -> Verdict {
    let Some(splits) = ctx.mnist() else {
        return no_mnist(ctx);
    };
    let mut hvcl = Vec::new();
    let mut naive = Vec::new();
    for &seed in &SEEDS {
        let stream = make_permuted_tasks(splits, PERMUTED_TASKS, seed)
            .expect("permuted tasks")
            .limit_train(PERMUTED_TRAIN_LIMIT);
        let defaults = RunConfig::default();
        let arch = defaults.architecture(stream.input_dim(), stream.num_classes());
        for (mode, out) in [(BaselineMode::Hvcl, &mut hvcl), (BaselineMode::NaiveDense, &mut naive)] {
            let t = Instant::now();
            let cfg = TrainConfig {
                mode,
                epochs: PERMUTED_EPOCHS,
                ..defaults.train_config(seed)
            };
            let run = run_continual(&stream, &arch, &cfg).expect("permuted run");
            let first = run.matrix.final_row().expect("complete")[0];
            eprintln!(
                "  permuted-MNIST {} seed {seed}: task 1 after task {PERMUTED_TASKS} {first:.4} ({:.0}s)",
                mode.as_str(),
                t.elapsed().as_secs_f64()
            );
            out.push(first);
        }
    }
    let gaps: Vec<f64> = hvcl.iter().zip(&naive).map(|(h, n)| h - n).collect();
    verdict(
        mean(&gaps) >= 0.20,
        format!(
            "task-1 accuracy after task {PERMUTED_TASKS}: hvcl [{}] naive_dense [{}], mean gap {:.4} (need >= 0.20)",
            fmt(&hvcl),
            fmt(&naive),
            mean(&gaps)
        ),
    )
}

/// Copies expert 0 over every other expert in each mixture layer.
fn duplicate_experts(model: &mut Model) {
    for layer in &mut model.layers {
        if let Layer::Mixture(m) = layer {
            let first = m.experts[0].clone();
            for e in m.experts.iter_mut().skip(1) {
                *e = first.clone();
            }
        }
    }
}

fn dpp_losses(model: &Model, cfg: &TrainConfig) -> Vec<f64> {
    model
        .mixture_layers()
        .map(|m| {
            let k = kernel_matrix(&m.expert_posteriors(), cfg.kernel_width).expect("kernel");
            dpp_diversity_loss(&k, cfg.jitter).expect("dpp loss")
        })
        .collect()
}

/// A single MoVE layer gated on the raw input. The two synthetic tasks
/// have opposite label orientation, so no single linear expert solves both.
fn criterion_12() -> Verdict {
    let stream = make_synthetic_stream(2, 1000, 4.0, 12).expect("synthetic stream");
    let arch = Architecture {
        input_dim: stream.input_dim(),
        hidden: vec![],
        output_dim: stream.num_classes(),
        experts: 2,
        top_k: 1,
    };
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 64,
        learning_rate: 1e-2,
        seed: 12,
        ..TrainConfig::default()
    };
    let mut learner = Learner::new(&arch, &cfg).expect("learner");
    duplicate_experts(&mut learner.model);
    let before = dpp_losses(&learner.model, &cfg);
    for (t, task) in stream.tasks.iter().enumerate() {
        if t > 0 {
            learner.advance_task();
        }
        learner.train_task(&task.train).expect("training");
    }
    let after = dpp_losses(&learner.model, &cfg);
    // (dominant expert, its share of the task's test inputs)
    let dominant: Vec<(usize, f64)> = stream
        .tasks
        .iter()
        .map(|t| {
            let loads = learner.model.expert_loads(t.test.inputs()).expect("loads");
            loads[0]
                .iter()
                .cloned()
                .enumerate()
                .fold((0, 0.0), |best, (e, v)| if v > best.1 { (e, v) } else { best })
        })
        .collect();
    let routed = dominant.iter().all(|&(_, share)| share >= 0.9);
    let diverse = before.iter().zip(&after).all(|(b, a)| a < b);
    let acc: Vec<f64> = stream
        .tasks
        .iter()
        .map(|t| hvcl::harness::accuracy(&learner.model, &t.test).expect("accuracy"))
        .collect();
    verdict(
        routed && diverse,
        format!(
            "task -> (expert, share) {dominant:.3?}; DPP loss {} -> {} (duplicated experts at start); task accuracy {}",
            fmt(&before),
            fmt(&after),
            fmt(&acc)
        ),
    )
}

/// (number, title, check)
type Criterion<'a> = (usize, &'static str, Box<dyn Fn() -> Verdict + 'a>);

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ctx = Context {
        long: !wanted.is_empty() || std::env::var_os("HVCL_ACCEPTANCE_MNIST").is_some(),
        mnist: OnceCell::new(),
        split: OnceCell::new(),
    };
    let fx = Fixtures::default();
    let criteria: Vec<Criterion> = vec![
        (
            1,
            "KL closed form vs Monte Carlo",
            Box::new(|| from_check(selftest::check_kl_monte_carlo(&fx))),
        ),
        (
            2,
            "W2 closed form vs quadrature",
            Box::new(|| from_check(selftest::check_w2_quadrature(&fx))),
        ),
        (
            3,
            "kernel matrices are valid",
            Box::new(|| from_check(selftest::check_kernel_psd(&fx))),
        ),
        (
            4,
            "log-det gradient",
            Box::new(|| from_check(selftest::check_logdet_gradient(&fx))),
        ),
        (
            5,
            "end-to-end loss gradient",
            Box::new(|| from_check(selftest::check_end_to_end_gradient(&fx))),
        ),
        (
            6,
            "sparse top-1 routing",
            Box::new(|| from_check(selftest::check_sparse_routing(&fx))),
        ),
        (
            7,
            "snapshot recursion",
            Box::new(|| from_check(selftest::check_snapshot_recursion(&fx))),
        ),
        (
            8,
            "entropy bounds",
            Box::new(|| from_check(selftest::check_entropy_bounds(&fx))),
        ),
        (9, "split-MNIST HVCL accuracy", Box::new(|| criterion_9(&ctx))),
        (10, "permuted-MNIST retention", Box::new(|| criterion_10(&ctx))),
        (11, "baseline ordering", Box::new(|| criterion_11(&ctx))),
        (12, "expert specialization", Box::new(criterion_12)),
    ];
    let mut failed = 0;
    for (id, title, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let v = run();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("{tag} criterion {id:>2} {title}: {detail} [{secs:.1}s]");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
