//! Mixture-of-variational-experts layer.
//!
//! A deterministic softmax gate scores `M` experts per input row; only the
//! top-`k` experts (default 1) are evaluated, and each selected expert's
//! output is scaled by its gate probability so the gate stays on the
//! gradient path. Every layer keeps frozen copies of its gate and expert
//! posteriors as priors and reports four auxiliary terms per batch:
//!
//! * `gating_kl`: batch mean of `KL(p_t(m|x) ‖ p_prior(m|x))`;
//! * `weight_kl`: `KL(q_m ‖ prior_m)` summed once over the experts routed
//!   in this batch;
//! * `entropy_cost`: see [`crate::diversity::entropy_cost_on_tape`];
//! * `dpp_diversity`: `−log det K` over all experts of the layer.

use std::cell::Cell;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::diversity::{self, EntropyReport, EntropySign};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::variational::{DenseVars, GaussianMeanField, VariationalDense};

/// Weights of the auxiliary terms: gating KL, weight KL, entropy cost and
/// DPP diversity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Betas {
    pub gating_kl: f64,
    pub weight_kl: f64,
    pub entropy: f64,
    pub diversity: f64,
}

impl Default for Betas {
    fn default() -> Self {
        Betas {
            gating_kl: 0.002,
            weight_kl: 0.75,
            entropy: 0.01,
            diversity: 0.01,
        }
    }
}

impl Betas {
    pub const ZERO: Betas = Betas {
        gating_kl: 0.0,
        weight_kl: 0.0,
        entropy: 0.0,
        diversity: 0.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [self.gating_kl, self.weight_kl, self.entropy, self.diversity]
    }
}

/// Settings for the diversity terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxSettings {
    pub kernel_width: f64,
    pub jitter: f64,
    pub entropy_sign: EntropySign,
}

impl Default for AuxSettings {
    fn default() -> Self {
        AuxSettings {
            kernel_width: diversity::DEFAULT_KERNEL_WIDTH,
            jitter: diversity::DEFAULT_JITTER,
            entropy_sign: EntropySign::default(),
        }
    }
}

/// Softmax gate `p(m|x) = softmax(x·W + b)` with a frozen prior copy.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingNet {
    pub weight: Tensor,
    pub bias: Tensor,
    pub prior_weight: Tensor,
    pub prior_bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct GatingVars {
    pub weight: Var,
    pub bias: Var,
}

impl GatingNet {
    /// Small fan-in uniform weights; the prior starts at zero, i.e. uniform routing.
    pub fn new(in_dim: usize, experts: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = (0..in_dim * experts).map(|_| uni.sample(rng)).collect();
        GatingNet {
            weight: Tensor::matrix(in_dim, experts, w).expect("sized above"),
            bias: Tensor::zeros(&[experts]),
            prior_weight: Tensor::zeros(&[in_dim, experts]),
            prior_bias: Tensor::zeros(&[experts]),
        }
    }

    pub fn experts(&self) -> usize {
        self.bias.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<GatingVars> {
        Ok(GatingVars {
            weight: tape.param(self.weight.clone())?,
            bias: tape.param(self.bias.clone())?,
        })
    }

    pub fn snapshot_prior(&mut self) {
        self.prior_weight = self.weight.clone();
        self.prior_bias = self.bias.clone();
    }
}

#[derive(Clone, Debug)]
pub struct MixtureVars {
    pub gating: GatingVars,
    pub experts: Vec<DenseVars>,
}

/// Auxiliary terms of one layer for one batch, as tape scalars plus the
/// diagnostics logged alongside them.
#[derive(Clone, Debug)]
pub struct AuxLossBundle {
    pub gating_kl: Var,
    pub weight_kl: Var,
    pub entropy_cost: Var,
    pub dpp_diversity: Var,
    pub entropy: EntropyReport,
    /// `det K` of the expert kernel matrix (absent for a single expert).
    pub kernel_det: Option<f64>,
    /// Rows routed to each expert in this batch.
    pub routed: Vec<usize>,
}

impl AuxLossBundle {
    /// `β₁·gating_kl + β₂·weight_kl + β₃·entropy_cost + β₄·dpp_diversity`.
    pub fn weighted(&self, tape: &mut Tape, betas: &Betas) -> Result<Var> {
        let terms = [
            (self.gating_kl, betas.gating_kl),
            (self.weight_kl, betas.weight_kl),
            (self.entropy_cost, betas.entropy),
            (self.dpp_diversity, betas.diversity),
        ];
        let mut total = tape.constant(Tensor::scalar(0.0))?;
        for (v, beta) in terms {
            if beta != 0.0 {
                let s = tape.scale(v, beta)?;
                total = tape.add(total, s)?;
            }
        }
        Ok(total)
    }

    pub fn values(&self, tape: &Tape) -> [f64; 4] {
        [
            tape.scalar_value(self.gating_kl),
            tape.scalar_value(self.weight_kl),
            tape.scalar_value(self.entropy_cost),
            tape.scalar_value(self.dpp_diversity),
        ]
    }
}

/// How experts are evaluated in a forward pass.
pub enum Sampling<'a, R: Rng> {
    /// One reparameterized weight sample per routed expert.
    Sample(&'a mut R),
    /// Posterior means, no auxiliary terms.
    Mean,
}

/// Per-row top-`k` expert indices in descending gate order; ties go to the
/// lower expert index.
pub fn top_k_route(probs: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let (n, m) = probs.dims2("top_k_route")?;
    if k == 0 || k > m {
        return Err(Error::Invalid(format!("top_k_route: k = {k} with {m} experts")));
    }
    Ok((0..n)
        .map(|i| {
            let row = probs.row(i);
            let mut idx: Vec<usize> = (0..m).collect();
            // stable sort keeps lower indices first among equal probabilities
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            idx.truncate(k);
            idx
        })
        .collect())
}

/// Per-row argmax, ties toward the lowest expert index.
pub fn top1_route(probs: &Tensor) -> Result<Vec<usize>> {
    let (n, _) = probs.dims2("top1_route")?;
    Ok((0..n)
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (j, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct MoveLayer {
    pub experts: Vec<VariationalDense>,
    pub gating: GatingNet,
    pub top_k: usize,
    pub index: usize,
    expert_rows: Cell<u64>,
}

/// Compares parameters and routing settings; the evaluation counter is ignored.
impl PartialEq for MoveLayer {
    fn eq(&self, other: &Self) -> bool {
        self.experts == other.experts
            && self.gating == other.gating
            && self.top_k == other.top_k
            && self.index == other.index
    }
}

impl MoveLayer {
    pub fn new(
        index: usize,
        in_dim: usize,
        out_dim: usize,
        experts: usize,
        top_k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if experts == 0 || top_k == 0 || top_k > experts {
            return Err(Error::Invalid(format!(
                "mixture layer {index}: {experts} experts with top-{top_k} routing"
            )));
        }
        let gating = GatingNet::new(in_dim, experts, rng);
        let experts = (0..experts)
            .map(|_| VariationalDense::new(in_dim, out_dim, rng))
            .collect();
        Ok(MoveLayer {
            experts,
            gating,
            top_k,
            index,
            expert_rows: Cell::new(0),
        })
    }

    pub fn from_parts(index: usize, experts: Vec<VariationalDense>, gating: GatingNet, top_k: usize) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Invalid(format!("mixture layer {index}: no experts")))?;
        let dims = (first.in_dim(), first.out_dim());
        if experts.iter().any(|e| (e.in_dim(), e.out_dim()) != dims) {
            return Err(Error::shape("mixture_layer", "experts differ in shape"));
        }
        if gating.weight.shape() != [dims.0, experts.len()]
            || gating.bias.shape() != [experts.len()]
            || gating.prior_weight.shape() != gating.weight.shape()
            || gating.prior_bias.shape() != gating.bias.shape()
        {
            return Err(Error::shape("mixture_layer", "gate does not match experts"));
        }
        if top_k == 0 || top_k > experts.len() {
            return Err(Error::Invalid(format!(
                "mixture layer {index}: top-{top_k} of {}",
                experts.len()
            )));
        }
        Ok(MoveLayer {
            experts,
            gating,
            top_k,
            index,
            expert_rows: Cell::new(0),
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn in_dim(&self) -> usize {
        self.experts[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.experts[0].out_dim()
    }

    /// Total rows evaluated by any expert since construction or the last reset.
    pub fn expert_evaluations(&self) -> u64 {
        self.expert_rows.get()
    }

    pub fn reset_expert_evaluations(&self) {
        self.expert_rows.set(0);
    }

    /// Trainable tensors in binding order: gate weight, gate bias, then
    /// `mu, rho, bias` per expert.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.gating.weight, &self.gating.bias];
        for e in &self.experts {
            out.extend(e.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.gating.weight, &mut self.gating.bias];
        for e in &mut self.experts {
            out.extend(e.params_mut());
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<MixtureVars> {
        let gating = self.gating.bind(tape)?;
        let experts = self.experts.iter().map(|e| e.bind(tape)).collect::<Result<Vec<_>>>()?;
        Ok(MixtureVars { gating, experts })
    }

    /// Gate probabilities `softmax(x·W + b)`, without recording.
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let w = tape.constant(self.gating.weight.clone())?;
        let b = tape.constant(self.gating.bias.clone())?;
        let logits = tape.matmul(xv, w)?;
        let logits = tape.add_row_vec(logits, b)?;
        let p = tape.softmax(logits, 1)?;
        Ok(tape.value(p).clone())
    }

    /// Prior-network log-probabilities on the same inputs. The prior
    /// weights are constants; gradient still flows into `x`.
    fn prior_log_probs(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.constant(self.gating.prior_weight.clone())?;
        let b = tape.constant(self.gating.prior_bias.clone())?;
        let logits = tape.matmul(x, w)?;
        let logits = tape.add_row_vec(logits, b)?;
        tape.log_softmax(logits, 1)
    }

    /// Routed layer output; auxiliary terms are computed only when sampling.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        vars: &MixtureVars,
        x: Var,
        sampling: Sampling<'_, R>,
        aux: &AuxSettings,
    ) -> Result<(Var, Option<AuxLossBundle>)> {
        let (n, d_in) = tape.value(x).dims2("mixture_forward")?;
        if d_in != self.in_dim() {
            return Err(Error::shape(
                "mixture_forward",
                format!("layer {} expects {} inputs, got {d_in}", self.index, self.in_dim()),
            ));
        }
        let m = self.num_experts();
        let logits = tape.matmul(x, vars.gating.weight)?;
        let logits = tape.add_row_vec(logits, vars.gating.bias)?;
        let probs = tape.softmax(logits, 1)?;

        let routes = top_k_route(tape.value(probs), self.top_k)?;
        let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (i, sel) in routes.iter().enumerate() {
            for &e in sel {
                rows_of[e].push(i);
            }
        }

        let mut rng = match sampling {
            Sampling::Sample(r) => Some(r),
            Sampling::Mean => None,
        };
        let mut parts = Vec::new();
        for (e, rows) in rows_of.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let expert = &self.experts[e];
            let xe = tape.gather_rows(x, rows)?;
            let ye = match rng.as_deref_mut() {
                Some(r) => expert.sample_forward(tape, &vars.experts[e], xe, r)?,
                None => expert.mean_forward(tape, &vars.experts[e], xe)?,
            };
            self.expert_rows.set(self.expert_rows.get() + rows.len() as u64);
            let pe = tape.gather_rows(probs, rows)?;
            let gate = tape.pick_per_row(pe, &vec![e; rows.len()])?;
            parts.push((tape.scale_rows(ye, gate)?, rows.clone()));
        }
        let out = tape.scatter_add_rows(&parts, n, self.out_dim())?;

        if rng.is_none() {
            return Ok((out, None));
        }

        let log_probs = tape.log_softmax(logits, 1)?;
        let prior_lp = self.prior_log_probs(tape, x)?;
        let log_ratio = tape.sub(log_probs, prior_lp)?;
        let weighted = tape.mul(probs, log_ratio)?;
        let gating_kl = tape.sum(weighted)?;
        let gating_kl = tape.scale(gating_kl, 1.0 / n as f64)?;

        let mut weight_kl = tape.constant(Tensor::scalar(0.0))?;
        for (e, rows) in rows_of.iter().enumerate() {
            if !rows.is_empty() {
                let kl = self.experts[e].weight_kl(tape, &vars.experts[e])?;
                weight_kl = tape.add(weight_kl, kl)?;
            }
        }

        let (entropy_cost, entropy, dpp_diversity, kernel_det) = if m >= 2 {
            let (cost, report) = diversity::entropy_cost_on_tape(tape, probs, aux.entropy_sign)?;
            let mus: Vec<Var> = vars.experts.iter().map(|v| v.mu).collect();
            let sigmas: Vec<Var> = vars.experts.iter().map(|v| v.sigma).collect();
            let k = tape.w2_kernel_matrix(&mus, &sigmas, aux.kernel_width)?;
            let det = crate::linalg::cholesky(tape.value(k).data(), m)
                .map_or(0.0, |l| (0..m).map(|i| l[i * m + i] * l[i * m + i]).product());
            let (dpp, _) = tape.neg_log_det(k, aux.jitter, diversity::MAX_JITTER.max(aux.jitter))?;
            (cost, report, dpp, Some(det))
        } else {
            let zero = tape.constant(Tensor::scalar(0.0))?;
            let report = EntropyReport {
                batch_size: n,
                ..EntropyReport::default()
            };
            (zero, report, zero, None)
        };

        Ok((
            out,
            Some(AuxLossBundle {
                gating_kl,
                weight_kl,
                entropy_cost,
                dpp_diversity,
                entropy,
                kernel_det,
                routed: rows_of.iter().map(Vec::len).collect(),
            }),
        ))
    }

    /// Freeze gate and expert posteriors as priors for the next task.
    pub fn snapshot_priors(&mut self) {
        self.gating.snapshot_prior();
        for e in &mut self.experts {
            e.snapshot_prior();
        }
    }

    /// Fraction of `x`'s rows routed to each expert (top-1 selection).
    pub fn expert_load(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (n, _) = x.dims2("expert_load")?;
        if n == 0 {
            return Err(Error::Invalid("expert_load: empty dataset".into()));
        }
        let mut counts = vec![0usize; self.num_experts()];
        for e in top1_route(&self.gate(x)?)? {
            counts[e] += 1;
        }
        Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
    }

    pub fn expert_posteriors(&self) -> Vec<GaussianMeanField> {
        self.experts.iter().map(|e| e.posterior.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(m: usize, seed: u64) -> MoveLayer {
        MoveLayer::new(0, 4, 3, m, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, 4, crate::variational::standard_normal_vec(&mut rng, n * 4)).unwrap()
    }

    fn run(l: &MoveLayer, x: &Tensor, seed: u64) -> (Tape, Var, AuxLossBundle) {
        let mut tape = Tape::new();
        let vars = l.bind(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, aux) = l
            .forward(
                &mut tape,
                &vars,
                xv,
                Sampling::Sample(&mut rng),
                &AuxSettings::default(),
            )
            .unwrap();
        (tape, y, aux.unwrap())
    }

    #[test]
    fn routing_rules() {
        let p = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        assert_eq!(top1_route(&p).unwrap(), vec![0, 0, 1]);
        assert_eq!(top_k_route(&p, 1).unwrap(), vec![vec![0], vec![0], vec![1]]);
        assert_eq!(top_k_route(&p, 2).unwrap()[2], vec![1, 0]);
        assert!(top_k_route(&p, 3).is_err());
    }

    #[test]
    fn zero_gate_is_uniform() {
        let mut l = layer(3, 1);
        l.gating.weight = Tensor::zeros(&[4, 3]);
        let p = l.gate(&batch(5, 2)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn gate_hand_value() {
        let mut l = MoveLayer::new(0, 1, 1, 2, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        l.gating.weight = Tensor::zeros(&[1, 2]);
        l.gating.bias = Tensor::vector(vec![2f64.ln(), 0.0]);
        let p = l.gate(&Tensor::filled(&[1, 1], 0.7)).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_expert_degenerates_to_dense() {
        let l = layer(1, 4);
        let x = batch(6, 5);
        let (tape, y, aux) = run(&l, &x, 77);
        assert_eq!(tape.scalar_value(aux.gating_kl), 0.0);

        let mut t2 = Tape::new();
        let dv = l.experts[0].bind(&mut t2).unwrap();
        let xv = t2.constant(x).unwrap();
        let y2 = l.experts[0]
            .sample_forward(&mut t2, &dv, xv, &mut ChaCha8Rng::seed_from_u64(77))
            .unwrap();
        assert_eq!(tape.value(y), t2.value(y2));
    }

    #[test]
    fn one_hot_against_uniform_prior_is_ln2() {
        let mut l = MoveLayer::new(0, 1, 1, 2, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        l.gating.weight = Tensor::zeros(&[1, 2]);
        l.gating.bias = Tensor::vector(vec![800.0, 0.0]);
        let (tape, _, aux) = run(&l, &Tensor::filled(&[3, 1], 1.0), 1);
        assert!((tape.scalar_value(aux.gating_kl) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn snapshot_zeroes_both_kls_and_is_idempotent() {
        let mut l = layer(2, 8);
        l.snapshot_priors();
        let once = l.clone();
        l.snapshot_priors();
        assert_eq!(l, once);
        let (tape, _, aux) = run(&l, &batch(16, 9), 3);
        assert_eq!(tape.scalar_value(aux.gating_kl), 0.0);
        assert_eq!(tape.scalar_value(aux.weight_kl), 0.0);
    }

    #[test]
    fn counts_one_expert_evaluation_per_row() {
        let l = layer(4, 12);
        let x = batch(33, 13);
        let (_, _, aux) = run(&l, &x, 1);
        assert_eq!(l.expert_evaluations(), 33);
        assert_eq!(aux.routed.iter().sum::<usize>(), 33);
    }

    #[test]
    fn load_of_single_expert_is_one() {
        let l = layer(1, 2);
        assert_eq!(l.expert_load(&batch(10, 3)).unwrap(), vec![1.0]);
        assert!(l.expert_load(&Tensor::matrix(0, 4, vec![]).unwrap()).is_err());
    }

    #[test]
    fn weight_kl_counts_routed_experts_once() {
        let l = layer(3, 21);
        let x = batch(40, 22);
        let (tape, _, aux) = run(&l, &x, 2);
        let want: f64 = aux
            .routed
            .iter()
            .zip(&l.experts)
            .filter(|(&c, _)| c > 0)
            .map(|(_, e)| e.kl_to_prior().unwrap())
            .sum();
        let got = tape.scalar_value(aux.weight_kl);
        assert!((got - want).abs() <= 1e-9 * want, "{got} vs {want}");
    }
}
