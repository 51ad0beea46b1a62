//! Numerical oracle suite: closed forms against independent estimates.
//!
//! Each check returns a [`CheckResult`] with a stable name. The functions
//! under test that have an independent oracle can be swapped through
//! [`Fixtures`], which is how the suite's own failure reporting is tested.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::data::make_synthetic_stream;
use crate::diversity::{self, EntropySign};
use crate::error::Result;
use crate::gradcheck;
use crate::harness::{objective, BaselineMode, KlScale, Learner, TrainConfig};
use crate::mixture::Betas;
use crate::model::{Architecture, Layer, LayerKind, Model};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::variational::{self, GaussianMeanField};

pub type KlFn = fn(&GaussianMeanField, &GaussianMeanField) -> Result<f64>;
pub type W2Fn = fn(&GaussianMeanField, &GaussianMeanField) -> Result<f64>;

/// Implementations checked by the oracle suite.
#[derive(Clone, Copy, Debug)]
pub struct Fixtures {
    pub kl: KlFn,
    pub w2: W2Fn,
    pub seed: u64,
}

impl Default for Fixtures {
    fn default() -> Self {
        Fixtures {
            kl: variational::kl_diag_gaussian,
            w2: diversity::w2_diag_gaussian,
            seed: 20240,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Measured error against the threshold, or the failing observation.
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct SelfTestReport {
    pub checks: Vec<CheckResult>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn random_gaussian(
    rng: &mut impl Rng,
    shape: &[usize],
    mean_range: f64,
    std_lo: f64,
    std_hi: f64,
) -> GaussianMeanField {
    let n: usize = shape.iter().product();
    let mu = Uniform::new(-mean_range, mean_range).expect("range");
    let sd = Uniform::new(std_lo, std_hi).expect("range");
    let means: Vec<f64> = (0..n).map(|_| mu.sample(rng)).collect();
    let stds: Vec<f64> = (0..n).map(|_| sd.sample(rng)).collect();
    GaussianMeanField::from_mean_std(Tensor::new(shape.to_vec(), means).expect("sized"), &stds).expect("positive stds")
}

pub const KL_MC_SAMPLES: usize = 100_000;
pub const KL_MC_TOLERANCE: f64 = 0.02;

/// Closed-form KL against `E_p[log p − log q]` over 50-D random pairs.
pub fn check_kl_monte_carlo(fx: &Fixtures) -> CheckResult {
    timed("kl_monte_carlo", || {
        let mut rng = ChaCha8Rng::seed_from_u64(fx.seed);
        let mut worst: f64 = 0.0;
        for _ in 0..4 {
            let p = random_gaussian(&mut rng, &[50], 1.0, 0.5, 2.0);
            let q = random_gaussian(&mut rng, &[50], 1.0, 0.5, 2.0);
            let closed = (fx.kl)(&p, &q)?;
            let (mp, sp, mq, sq) = (p.mu.data(), p.std(), q.mu.data(), q.std());
            let log_norm: f64 = sq.iter().zip(&sp).map(|(a, b)| (a / b).ln()).sum();
            let mut total = 0.0;
            for _ in 0..KL_MC_SAMPLES {
                let mut s = log_norm;
                for d in 0..50 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let x = mp[d] + sp[d] * z;
                    let u = (x - mq[d]) / sq[d];
                    s += 0.5 * (u * u - z * z);
                }
                total += s;
            }
            let mc = total / KL_MC_SAMPLES as f64;
            worst = worst.max((closed - mc).abs() / mc.abs());
        }
        Ok((
            worst <= KL_MC_TOLERANCE,
            format!("max rel err {worst:.2e} (limit {KL_MC_TOLERANCE})"),
        ))
    })
}

pub const W2_QUADRATURE_POINTS: usize = 100_000;
pub const W2_TOLERANCE: f64 = 1e-4;

/// Closed-form W₂² against per-dimension quantile-coupling quadrature.
pub fn check_w2_quadrature(fx: &Fixtures) -> CheckResult {
    timed("w2_quadrature", || {
        let mut rng = ChaCha8Rng::seed_from_u64(fx.seed + 1);
        let mut worst: f64 = 0.0;
        for _ in 0..5 {
            let p = random_gaussian(&mut rng, &[8], 2.0, 0.1, 3.0);
            let q = random_gaussian(&mut rng, &[8], 2.0, 0.1, 3.0);
            let (sp, sq) = (p.std(), q.std());
            let mut numeric = 0.0;
            for d in 0..8 {
                let dim = diversity::w2_quadrature_oracle(
                    (p.mu.data()[d], sp[d]),
                    (q.mu.data()[d], sq[d]),
                    W2_QUADRATURE_POINTS,
                )?;
                let single = |g: &GaussianMeanField, s: &[f64]| {
                    GaussianMeanField::from_mean_std(Tensor::vector(vec![g.mu.data()[d]]), &[s[d]])
                };
                let closed_dim = (fx.w2)(&single(&p, &sp)?, &single(&q, &sq)?)?;
                worst = worst.max((closed_dim - dim).abs());
                numeric += dim;
            }
            worst = worst.max(((fx.w2)(&p, &q)? - numeric).abs() / 8.0);
        }
        Ok((
            worst <= W2_TOLERANCE,
            format!("max abs err per dim {worst:.2e} (limit {W2_TOLERANCE})"),
        ))
    })
}

pub const KERNEL_EIGEN_FLOOR: f64 = -1e-8;

/// Symmetry, unit diagonal and PSD over 100 random expert sets.
pub fn check_kernel_psd(fx: &Fixtures) -> CheckResult {
    timed("kernel_psd", || {
        let mut rng = ChaCha8Rng::seed_from_u64(fx.seed + 2);
        let mut min_eig = f64::INFINITY;
        let mut max_asym: f64 = 0.0;
        let mut max_diag_err: f64 = 0.0;
        for set in 0..100 {
            let m = rng.random_range(2..=8);
            // every other set clusters experts to stress near-singular kernels
            let spread = if set % 2 == 0 { 1.0 } else { 0.05 };
            let base = random_gaussian(&mut rng, &[3, 4], 1.0, 0.1, 1.0);
            let experts: Vec<GaussianMeanField> = (0..m)
                .map(|_| {
                    let off = random_gaussian(&mut rng, &[3, 4], spread, 0.01, 0.5 * spread + 0.02);
                    let mu = base.mu.data().iter().zip(off.mu.data()).map(|(a, b)| a + b).collect();
                    let std: Vec<f64> = base.std().iter().zip(off.std()).map(|(a, b)| a + b).collect();
                    GaussianMeanField::from_mean_std(Tensor::new(vec![3, 4], mu).expect("sized"), &std)
                })
                .collect::<Result<_>>()?;
            let width = [0.5, 1.0, 2.0][set % 3];
            let k = diversity::kernel_matrix(&experts, width)?;
            max_asym = max_asym.max(k.max_asymmetry());
            for i in 0..m {
                max_diag_err = max_diag_err.max((k.get(i, i) - 1.0).abs());
            }
            min_eig = min_eig.min(k.min_eigenvalue());
        }
        let ok = max_asym == 0.0 && max_diag_err == 0.0 && min_eig >= KERNEL_EIGEN_FLOOR;
        Ok((
            ok,
            format!("min eigenvalue {min_eig:.3e}, asymmetry {max_asym:.1e}, diagonal err {max_diag_err:.1e}"),
        ))
    })
}

pub const LOGDET_TOLERANCE: f64 = 1e-5;

/// Adjoint gradient of `−log det(K + εI)` against symmetric central differences.
pub fn check_logdet_gradient(fx: &Fixtures) -> CheckResult {
    timed("logdet_gradient", || {
        let mut rng = ChaCha8Rng::seed_from_u64(fx.seed + 3);
        let n = 4;
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let a: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    k[i * n + j] = (0..n).map(|l| a[i * n + l] * a[j * n + l]).sum::<f64>();
                }
                k[i * n + i] += 0.1;
            }
            let kt = Tensor::matrix(n, n, k.clone())?;
            let (_, grad, _) = diversity::neg_log_det_with_grad(&kt, diversity::DEFAULT_JITTER)?;
            let f = |m: &[f64]| -> Result<f64> {
                Ok(diversity::neg_log_det_with_grad(&Tensor::matrix(n, n, m.to_vec())?, diversity::DEFAULT_JITTER)?.0)
            };
            for i in 0..n {
                for j in i..n {
                    let mut plus = k.clone();
                    let mut minus = k.clone();
                    for (r, c) in [(i, j), (j, i)] {
                        plus[r * n + c] += h;
                        minus[r * n + c] -= h;
                        if i == j {
                            break;
                        }
                    }
                    let numeric = (f(&plus)? - f(&minus)?) / (2.0 * h);
                    let g = grad.data();
                    let analytic = if i == j {
                        g[i * n + i]
                    } else {
                        g[i * n + j] + g[j * n + i]
                    };
                    let rel =
                        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(gradcheck::DEFAULT_FLOOR);
                    worst = worst.max(rel);
                }
            }
        }
        Ok((
            worst <= LOGDET_TOLERANCE,
            format!("max rel err {worst:.2e} (limit {LOGDET_TOLERANCE})"),
        ))
    })
}

pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// Small two-mixture-layer network with priors offset from the posteriors.
pub fn toy_network(seed: u64) -> Result<Model> {
    let arch = Architecture {
        input_dim: 4,
        hidden: vec![3],
        output_dim: 3,
        experts: 2,
        top_k: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(&arch, LayerKind::Mixture, &mut rng)?;
    model.snapshot_priors();
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(model)
}

/// Tape gradient of the full training objective against central
/// differences, with the weight noise frozen by reseeding.
pub fn check_end_to_end_gradient(fx: &Fixtures) -> CheckResult {
    timed("end_to_end_gradient", || {
        let model = toy_network(fx.seed + 4)?;
        let mut rng = ChaCha8Rng::seed_from_u64(fx.seed + 5);
        let n = 8;
        let x = Tensor::matrix(n, 4, (0..n * 4).map(|_| rng.sample(StandardNormal)).collect())?;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let config = TrainConfig {
            betas: Betas {
                gating_kl: 0.5,
                weight_kl: 0.1,
                entropy: 0.3,
                diversity: 0.2,
            },
            kl_scale: KlScale::PerStep,
            mode: BaselineMode::Hvcl,
            entropy_sign: EntropySign::ConditionalMinusMarginal,
            ..TrainConfig::default()
        };
        let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
        let noise_seed = fx.seed + 6;
        let report = gradcheck::finite_diff_check(
            |tape: &mut Tape, leaves| {
                let vars = model.vars_from_leaves(tape, leaves)?;
                let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
                Ok(objective(&model, tape, &vars, x.clone(), &labels, &config, n, &mut noise)?.0)
            },
            &params,
            1e-6,
        )?;
        let worst = report.max_rel_err;
        Ok((
            worst <= END_TO_END_TOLERANCE,
            format!(
                "max rel err {worst:.2e} over {} values (limit {END_TO_END_TOLERANCE})",
                report.analytic.iter().map(Vec::len).sum::<usize>()
            ),
        ))
    })
}

/// With top-1 routing every row is seen by exactly one expert per layer.
pub fn check_sparse_routing(fx: &Fixtures) -> CheckResult {
    timed("sparse_routing", || {
        let arch = Architecture {
            input_dim: 16,
            hidden: vec![8],
            output_dim: 4,
            experts: 4,
            top_k: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(fx.seed + 7);
        let model = Model::new(&arch, LayerKind::Mixture, &mut rng)?;
        let rows = 256;
        let x = Tensor::matrix(rows, 16, (0..rows * 16).map(|_| rng.sample(StandardNormal)).collect())?;
        let mut tape = Tape::new();
        let (vars, _) = model.bind(&mut tape)?;
        let xv = tape.constant(x)?;
        for l in model.mixture_layers() {
            l.reset_expert_evaluations();
        }
        model.forward(&mut tape, &vars, xv, Some(&mut rng), &Default::default())?;
        let counts: Vec<u64> = model.mixture_layers().map(|l| l.expert_evaluations()).collect();
        let ok = counts.len() == 2 && counts.iter().all(|&c| c == rows as u64);
        Ok((
            ok,
            format!("expert row evaluations per layer {counts:?} for {rows} rows"),
        ))
    })
}

/// KL terms vanish right after a task boundary and reappear after one step.
pub fn check_snapshot_recursion(fx: &Fixtures) -> CheckResult {
    timed("snapshot_recursion", || {
        let stream = make_synthetic_stream(2, 128, 4.0, fx.seed + 8)?;
        let arch = Architecture {
            input_dim: 2,
            hidden: vec![8],
            output_dim: 2,
            experts: 2,
            top_k: 1,
        };
        let config = TrainConfig {
            epochs: 2,
            batch_size: 32,
            seed: fx.seed + 9,
            ..TrainConfig::default()
        };
        let mut learner = Learner::new(&arch, &config)?;
        learner.train_task(&stream.tasks[0].train)?;
        learner.advance_task();
        let data = &stream.tasks[1].train;
        let (x, y) = data.batch(&(0..64).collect::<Vec<_>>());
        let before = learner.total_loss(x.clone(), &y, data.len())?;
        learner.step(x.clone(), &y, data.len())?;
        let after = learner.total_loss(x, &y, data.len())?;
        let ok = before.gating_kl == 0.0 && before.weight_kl == 0.0 && after.gating_kl > 0.0 && after.weight_kl > 0.0;
        Ok((
            ok,
            format!(
                "after snapshot gating_kl={:e} weight_kl={:e}; after one step gating_kl={:.3e} weight_kl={:.3e}",
                before.gating_kl, before.weight_kl, after.gating_kl, after.weight_kl
            ),
        ))
    })
}

pub const ENTROPY_SLACK: f64 = 1e-12;

/// `0 ≤ H(M|X) ≤ H(M) ≤ ln M` on random batches, plus three hand cases.
pub fn check_entropy_bounds(fx: &Fixtures) -> CheckResult {
    timed("entropy_bounds", || {
        let mut rng = ChaCha8Rng::seed_from_u64(fx.seed + 10);
        let mut violations = 0;
        for _ in 0..1000 {
            let n = rng.random_range(1..=64);
            let m = rng.random_range(2..=8);
            let scale = [0.1, 1.0, 10.0, 100.0][rng.random_range(0..4)];
            let mut probs = Vec::with_capacity(n * m);
            for _ in 0..n {
                let logits: Vec<f64> = (0..m).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = e.iter().sum();
                probs.extend(e.iter().map(|v| v / z));
            }
            let (_, r) = diversity::entropy_cost(&Tensor::matrix(n, m, probs)?)?;
            let (hc, hm) = (r.conditional_entropy, r.marginal_entropy);
            if hc < -ENTROPY_SLACK || hc > hm + ENTROPY_SLACK || hm > (m as f64).ln() + ENTROPY_SLACK {
                violations += 1;
            }
        }
        let ln4 = 4f64.ln();
        let uniform = diversity::entropy_cost(&Tensor::filled(&[4, 4], 0.25))?;
        let distinct = diversity::entropy_cost(&Tensor::identity(4))?;
        let mut same = vec![0.0; 16];
        for i in 0..4 {
            same[i * 4] = 1.0;
        }
        let same = diversity::entropy_cost(&Tensor::matrix(4, 4, same)?)?;
        let close = |a: f64, b: f64| (a - b).abs() <= ENTROPY_SLACK;
        let hand = close(uniform.0, 0.0)
            && close(uniform.1.conditional_entropy, ln4)
            && close(uniform.1.marginal_entropy, ln4)
            && close(distinct.0, -ln4)
            && close(distinct.1.conditional_entropy, 0.0)
            && close(distinct.1.marginal_entropy, ln4)
            && close(same.0, 0.0)
            && close(same.1.marginal_entropy, 0.0);
        Ok((
            violations == 0 && hand,
            format!(
                "{violations} bound violations in 1000 batches; hand costs {:.6} / {:.6} / {:.6}",
                uniform.0, distinct.0, same.0
            ),
        ))
    })
}

/// Runs every check.
pub fn run_selftest(fx: &Fixtures) -> SelfTestReport {
    let checks: [fn(&Fixtures) -> CheckResult; 8] = [
        check_kl_monte_carlo,
        check_w2_quadrature,
        check_kernel_psd,
        check_logdet_gradient,
        check_end_to_end_gradient,
        check_sparse_routing,
        check_snapshot_recursion,
        check_entropy_bounds,
    ];
    SelfTestReport {
        checks: checks.iter().map(|c| c(fx)).collect(),
    }
}

/// Whether `layer` is a mixture layer; used by reporting code.
pub fn is_mixture(layer: &Layer) -> bool {
    matches!(layer, Layer::Mixture(_))
}
