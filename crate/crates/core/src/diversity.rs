//! Expert diversity objectives.
//!
//! Two pressures act on a mixture layer's experts:
//!
//! * a batch entropy cost on the gating distribution, built from the mean
//!   per-input entropy `H(M|X)` and the entropy of the batch-averaged
//!   routing distribution `H(M)`;
//! * a determinantal diversity loss `−log det K` where
//!   `K[i][j] = exp(−W₂²(pᵢ, pⱼ) / 2h²)` compares expert weight posteriors
//!   through the closed-form Wasserstein-2 distance between diagonal
//!   Gaussians: `‖μ_p − μ_q‖² + ‖σ_p − σ_q‖²`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::variational::GaussianMeanField;

pub const DEFAULT_KERNEL_WIDTH: f64 = 1.0;
pub const DEFAULT_JITTER: f64 = 1e-6;
pub const MAX_JITTER: f64 = 1e-3;

/// Which way the batch entropy cost points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EntropySign {
    /// `H(M|X) − H(M)`: confident per-input routing, spread marginal usage.
    #[default]
    ConditionalMinusMarginal,
    /// `H(M) − H(M|X)`.
    MarginalMinusConditional,
}

impl EntropySign {
    pub fn as_str(self) -> &'static str {
        match self {
            EntropySign::ConditionalMinusMarginal => "conditional_minus_marginal",
            EntropySign::MarginalMinusConditional => "marginal_minus_conditional",
        }
    }

    fn factor(self) -> f64 {
        match self {
            EntropySign::ConditionalMinusMarginal => 1.0,
            EntropySign::MarginalMinusConditional => -1.0,
        }
    }
}

impl fmt::Display for EntropySign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntropySign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional_minus_marginal" | "+" => Ok(EntropySign::ConditionalMinusMarginal),
            "marginal_minus_conditional" | "-" => Ok(EntropySign::MarginalMinusConditional),
            other => Err(Error::Config(format!("unknown entropy sign '{other}'"))),
        }
    }
}

/// Batch routing entropies, in nats.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EntropyReport {
    pub conditional_entropy: f64,
    pub marginal_entropy: f64,
    pub batch_size: usize,
}

fn check_probs(probs: &Tensor) -> Result<(usize, usize)> {
    let (n, m) = probs.dims2("entropy_cost")?;
    if n == 0 {
        return Err(Error::Invalid("entropy_cost: empty batch".into()));
    }
    Ok((n, m))
}

fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    -p.into_iter().filter(|&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// `H(M|X) − H(M)` for a batch of gating rows (default sign).
pub fn entropy_cost(probs: &Tensor) -> Result<(f64, EntropyReport)> {
    entropy_cost_signed(probs, EntropySign::default())
}

pub fn entropy_cost_signed(probs: &Tensor, sign: EntropySign) -> Result<(f64, EntropyReport)> {
    let (n, m) = check_probs(probs)?;
    let conditional = (0..n).map(|i| entropy(probs.row(i).iter().copied())).sum::<f64>() / n as f64;
    let marginal = entropy((0..m).map(|j| (0..n).map(|i| probs.at(i, j)).sum::<f64>() / n as f64));
    let report = EntropyReport {
        conditional_entropy: conditional,
        marginal_entropy: marginal,
        batch_size: n,
    };
    Ok((sign.factor() * (conditional - marginal), report))
}

/// Differentiable entropy cost of the gating output `probs` (`n×M`).
pub fn entropy_cost_on_tape(tape: &mut Tape, probs: Var, sign: EntropySign) -> Result<(Var, EntropyReport)> {
    let (n, _) = check_probs(tape.value(probs))?;
    let plogp = tape.xlogx(probs)?;
    let neg_conditional = tape.sum(plogp)?;
    let neg_conditional = tape.scale(neg_conditional, 1.0 / n as f64)?;
    let marginal_p = tape.mean_axis(probs, 0)?;
    let qlogq = tape.xlogx(marginal_p)?;
    let neg_marginal = tape.sum(qlogq)?;
    // H(M|X) − H(M) = (−Σ q ln q) − (−(1/n)Σ p ln p)
    let diff = tape.sub(neg_marginal, neg_conditional)?;
    let cost = tape.scale(diff, sign.factor())?;
    let report = EntropyReport {
        conditional_entropy: -tape.scalar_value(neg_conditional),
        marginal_entropy: -tape.scalar_value(neg_marginal),
        batch_size: n,
    };
    Ok((cost, report))
}

/// Squared Wasserstein-2 distance between diagonal Gaussians.
pub fn w2_diag_gaussian(p: &GaussianMeanField, q: &GaussianMeanField) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape(
            "w2_diag_gaussian",
            format!("{:?} vs {:?}", p.shape(), q.shape()),
        ));
    }
    let mean_term: f64 =
        p.mu.data()
            .iter()
            .zip(q.mu.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
    let std_term: f64 = p.std().iter().zip(q.std()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(mean_term + std_term)
}

/// Numeric `W₂²` between 1-D Gaussians `(mean, std)` through the optimal
/// quantile coupling `∫₀¹ (F_p⁻¹(u) − F_q⁻¹(u))² du`, midpoint rule.
pub fn w2_quadrature_oracle(p: (f64, f64), q: (f64, f64), n_points: usize) -> Result<f64> {
    let np = Normal::new(p.0, p.1).map_err(|e| Error::Invalid(format!("quadrature: {e}")))?;
    let nq = Normal::new(q.0, q.1).map_err(|e| Error::Invalid(format!("quadrature: {e}")))?;
    if n_points == 0 {
        return Err(Error::Invalid("quadrature: zero points".into()));
    }
    let h = 1.0 / n_points as f64;
    Ok((0..n_points)
        .map(|i| {
            let u = (i as f64 + 0.5) * h;
            let d = np.inverse_cdf(u) - nq.inverse_cdf(u);
            d * d
        })
        .sum::<f64>()
        * h)
}

pub fn w2_kernel_from_distance(w2: f64, width: f64) -> Result<f64> {
    if width <= 0.0 || !width.is_finite() {
        return Err(Error::domain(
            "w2_exp_kernel",
            format!("kernel width {width} must be positive"),
        ));
    }
    Ok((-w2 / (2.0 * width * width)).exp())
}

/// `exp(−W₂²(p, q) / 2h²)`.
pub fn w2_exp_kernel(p: &GaussianMeanField, q: &GaussianMeanField, width: f64) -> Result<f64> {
    w2_kernel_from_distance(w2_diag_gaussian(p, q)?, width)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub values: Tensor,
    pub width: f64,
}

impl KernelMatrix {
    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.at(i, j)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.size();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (self.get(i, j) - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.size();
        let m = DMatrix::from_row_slice(n, n, self.values.data());
        SymmetricEigen::new(m)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn determinant(&self) -> f64 {
        let n = self.size();
        DMatrix::from_row_slice(n, n, self.values.data()).determinant()
    }
}

/// Pairwise W₂ kernel matrix over expert posteriors of equal shape.
pub fn kernel_matrix(experts: &[GaussianMeanField], width: f64) -> Result<KernelMatrix> {
    if experts.len() < 2 {
        return Err(Error::Invalid(format!(
            "kernel_matrix: need at least 2 experts, got {}",
            experts.len()
        )));
    }
    if experts.iter().any(|e| e.shape() != experts[0].shape()) {
        return Err(Error::shape("kernel_matrix", "heterogeneous expert shapes"));
    }
    let m = experts.len();
    let mut k = vec![0.0; m * m];
    for i in 0..m {
        k[i * m + i] = 1.0;
        for j in i + 1..m {
            let v = w2_exp_kernel(&experts[i], &experts[j], width)?;
            k[i * m + j] = v;
            k[j * m + i] = v;
        }
    }
    Ok(KernelMatrix {
        values: Tensor::matrix(m, m, k)?,
        width,
    })
}

/// Value and gradient of `−log det(K + jitter·I)`; the gradient w.r.t. `K`
/// is `−(K + jitter·I)⁻¹`. Also returns the jitter actually used.
pub fn neg_log_det_with_grad(k: &Tensor, jitter: f64) -> Result<(f64, Tensor, f64)> {
    let (n, n2) = k.dims2("dpp_diversity_loss")?;
    if n != n2 {
        return Err(Error::shape("dpp_diversity_loss", "kernel matrix is not square"));
    }
    let (logdet, inv, used) = linalg::jittered_logdet_inverse(k.data(), n, jitter, MAX_JITTER.max(jitter))?;
    let grad = Tensor::matrix(n, n, inv.into_iter().map(|v| -v).collect())?;
    Ok((-logdet, grad, used))
}

/// `−log det(K + jitter·I)`; lower means more diverse experts.
pub fn dpp_diversity_loss(kmat: &KernelMatrix, jitter: f64) -> Result<f64> {
    neg_log_det_with_grad(&kmat.values, jitter).map(|(v, _, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(mean: f64, std: f64) -> GaussianMeanField {
        GaussianMeanField::isotropic(&[1], mean, std)
    }

    #[test]
    fn entropy_hand_cases() {
        let uniform = Tensor::filled(&[4, 4], 0.25);
        let (c, r) = entropy_cost(&uniform).unwrap();
        assert!((r.conditional_entropy - 4f64.ln()).abs() < 1e-15);
        assert!((r.marginal_entropy - 4f64.ln()).abs() < 1e-15);
        assert!(c.abs() < 1e-15);

        let distinct = Tensor::identity(4);
        let (c, r) = entropy_cost(&distinct).unwrap();
        assert_eq!(r.conditional_entropy, 0.0);
        assert!((r.marginal_entropy - 4f64.ln()).abs() < 1e-15);
        assert!((c + 4f64.ln()).abs() < 1e-15);

        let same = Tensor::from_rows(&vec![vec![0.0, 1.0, 0.0, 0.0]; 4]).unwrap();
        let (c, r) = entropy_cost(&same).unwrap();
        assert_eq!((c, r.conditional_entropy, r.marginal_entropy), (0.0, 0.0, 0.0));
    }

    #[test]
    fn entropy_sign_flag() {
        let distinct = Tensor::identity(3);
        let (c, _) = entropy_cost_signed(&distinct, EntropySign::MarginalMinusConditional).unwrap();
        assert!((c - 3f64.ln()).abs() < 1e-15);
        assert_eq!(
            "-".parse::<EntropySign>().unwrap(),
            EntropySign::MarginalMinusConditional
        );
        assert!("up".parse::<EntropySign>().is_err());
    }

    #[test]
    fn entropy_rejects_empty_batch() {
        let empty = Tensor::matrix(0, 3, vec![]).unwrap();
        assert!(entropy_cost(&empty).is_err());
    }

    #[test]
    fn tape_entropy_matches_direct() {
        let probs = Tensor::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.0, 0.5, 0.5], vec![1.0, 0.0, 0.0]]).unwrap();
        let (direct, rep) = entropy_cost(&probs).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(probs).unwrap();
        let (cost, trep) = entropy_cost_on_tape(&mut tape, p, EntropySign::default()).unwrap();
        assert!((tape.scalar_value(cost) - direct).abs() < 1e-15);
        assert!((trep.conditional_entropy - rep.conditional_entropy).abs() < 1e-15);
    }

    #[test]
    fn w2_hand_values() {
        assert_eq!(w2_diag_gaussian(&g1(0.0, 1.0), &g1(0.0, 1.0)).unwrap(), 0.0);
        assert!((w2_diag_gaussian(&g1(0.0, 1.0), &g1(3.0, 1.0)).unwrap() - 9.0).abs() < 1e-12);
        assert!((w2_diag_gaussian(&g1(0.0, 1.0), &g1(0.0, 2.0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_hand_value() {
        // W2² = 2 at unit width gives e^-1
        let p = GaussianMeanField::isotropic(&[2], 0.0, 1.0);
        let q = GaussianMeanField::isotropic(&[2], 1.0, 1.0);
        let k = w2_exp_kernel(&p, &q, 1.0).unwrap();
        assert!((k - (-1f64).exp()).abs() < 1e-15);
        assert!((k - 0.367879).abs() < 1e-6);
        assert_eq!(w2_exp_kernel(&p, &p, 1.0).unwrap(), 1.0);
        assert!(w2_exp_kernel(&p, &q, 0.0).is_err());
    }

    #[test]
    fn kernel_matrix_degenerate_and_two_expert_det() {
        let e = g1(0.5, 0.3);
        let k = kernel_matrix(&[e.clone(), e.clone(), e], 1.0).unwrap();
        assert!(k.values.data().iter().all(|&v| v == 1.0));
        assert!(k.determinant().abs() < 1e-12);

        let (p0, p1) = (g1(0.0, 1.0), g1(0.8, 0.6));
        let k = kernel_matrix(&[p0.clone(), p1.clone()], 1.0).unwrap();
        let kv = w2_exp_kernel(&p0, &p1, 1.0).unwrap();
        assert!((k.determinant() - (1.0 - kv * kv)).abs() < 1e-14);
        assert!(kernel_matrix(&[p0], 1.0).is_err());
        assert!(kernel_matrix(&[g1(0.0, 1.0), GaussianMeanField::isotropic(&[2], 0.0, 1.0)], 1.0).is_err());
    }

    #[test]
    fn dpp_loss_hand_values() {
        let id = KernelMatrix {
            values: Tensor::identity(3),
            width: 1.0,
        };
        assert!(dpp_diversity_loss(&id, 0.0).unwrap().abs() < 1e-15);

        let eps: f64 = 1e-6;
        let ones = KernelMatrix {
            values: Tensor::filled(&[2, 2], 1.0),
            width: 1.0,
        };
        let want = -(2.0 * eps + eps * eps).ln();
        let got = dpp_diversity_loss(&ones, eps).unwrap();
        assert!((got - want).abs() < 1e-6 * want, "{got} vs {want}");
    }

    #[test]
    fn quadrature_matches_closed_form() {
        let q = w2_quadrature_oracle((0.0, 1.0), (3.0, 1.0), 100_000).unwrap();
        assert!((q - 9.0).abs() < 1e-4);
        let q = w2_quadrature_oracle((0.0, 1.0), (0.0, 2.0), 100_000).unwrap();
        assert!((q - 1.0).abs() < 1e-4, "{q}");
        assert!(w2_quadrature_oracle((0.0, 1.0), (0.0, 1.0), 1000).unwrap().abs() < 1e-15);
    }
}
