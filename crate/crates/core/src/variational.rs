//! Mean-field Gaussian weights and the variational dense layer.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Std of freshly initialized posteriors.
pub const INIT_POSTERIOR_STD: f64 = 0.05;
/// Std of the weight prior before the first task.
pub const INIT_PRIOR_STD: f64 = 1.0;

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y − 1), rearranged to stay accurate for large y
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Diagonal Gaussian with std `softplus(rho)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMeanField {
    pub mu: Tensor,
    pub rho: Tensor,
}

impl GaussianMeanField {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::shape(
                "gaussian_mean_field",
                format!("mu {:?} vs rho {:?}", mu.shape(), rho.shape()),
            ));
        }
        Ok(GaussianMeanField { mu, rho })
    }

    /// Same mean and std everywhere.
    pub fn isotropic(shape: &[usize], mean: f64, std: f64) -> Self {
        GaussianMeanField {
            mu: Tensor::filled(shape, mean),
            rho: Tensor::filled(shape, softplus_inv(std)),
        }
    }

    /// From explicit means and stds.
    pub fn from_mean_std(mu: Tensor, std: &[f64]) -> Result<Self> {
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::domain("gaussian_mean_field", "std must be positive"));
        }
        let rho = Tensor::new(mu.shape().to_vec(), std.iter().map(|&s| softplus_inv(s)).collect())?;
        Self::new(mu, rho)
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn std(&self) -> Vec<f64> {
        self.rho.data().iter().map(|&r| softplus(r)).collect()
    }
}

/// `KL(p ‖ q)` in nats between diagonal Gaussians of identical shape.
pub fn kl_diag_gaussian(p: &GaussianMeanField, q: &GaussianMeanField) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape(
            "kl_diag_gaussian",
            format!("{:?} vs {:?}", p.shape(), q.shape()),
        ));
    }
    let (sp, sq) = (p.std(), q.std());
    if sp.iter().chain(&sq).any(|&s| s <= 0.0) {
        return Err(Error::domain("kl_diag_gaussian", "std underflowed to zero"));
    }
    Ok(p.mu
        .data()
        .iter()
        .zip(q.mu.data())
        .zip(sp.iter().zip(&sq))
        .map(|((&mp, &mq), (&a, &b))| {
            let d = mp - mq;
            (b / a).ln() + (a * a + d * d) / (2.0 * b * b) - 0.5
        })
        .sum())
}

pub fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// A frozen diagonal Gaussian with the per-element constants the KL needs.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagPrior {
    pub mu: Vec<f64>,
    pub std: Vec<f64>,
    pub ln_std: Vec<f64>,
    /// `2σ²`.
    pub two_var: Vec<f64>,
}

impl DiagPrior {
    pub fn new(dist: &GaussianMeanField) -> Self {
        let std = dist.std();
        DiagPrior {
            mu: dist.mu.data().to_vec(),
            ln_std: std.iter().map(|s| s.ln()).collect(),
            two_var: std.iter().map(|s| 2.0 * s * s).collect(),
            std,
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Tape handles for one dense layer: the trainable leaves plus the derived
/// `sigma = softplus(rho)`.
#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub mu: Var,
    pub rho: Var,
    pub bias: Var,
    pub sigma: Var,
}

impl DenseVars {
    /// Wraps existing leaves and records `sigma = softplus(rho)`.
    pub fn new(tape: &mut Tape, mu: Var, rho: Var, bias: Var) -> Result<Self> {
        let sigma = tape.softplus(rho)?;
        Ok(DenseVars { mu, rho, bias, sigma })
    }
}

/// Dense layer `y = x·W + b` with `W ~ posterior` and a frozen prior over `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalDense {
    pub posterior: GaussianMeanField,
    pub bias: Tensor,
    prior: GaussianMeanField,
    frozen: Arc<DiagPrior>,
}

impl VariationalDense {
    /// Fan-in uniform means, std 0.05, zero bias, `N(0, 1)` prior.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mu = (0..in_dim * out_dim).map(|_| uni.sample(rng)).collect();
        let shape = [in_dim, out_dim];
        let prior = GaussianMeanField::isotropic(&shape, 0.0, INIT_PRIOR_STD);
        VariationalDense {
            posterior: GaussianMeanField {
                mu: Tensor::new(shape.to_vec(), mu).expect("sized above"),
                rho: Tensor::filled(&shape, softplus_inv(INIT_POSTERIOR_STD)),
            },
            bias: Tensor::zeros(&[out_dim]),
            frozen: Arc::new(DiagPrior::new(&prior)),
            prior,
        }
    }

    pub fn from_parts(posterior: GaussianMeanField, prior: GaussianMeanField, bias: Tensor) -> Result<Self> {
        let (in_dim, out_dim) = posterior.mu.dims2("variational_dense")?;
        if prior.shape() != posterior.shape() || bias.shape() != [out_dim] {
            return Err(Error::shape(
                "variational_dense",
                format!(
                    "posterior [{in_dim}x{out_dim}], prior {:?}, bias {:?}",
                    prior.shape(),
                    bias.shape()
                ),
            ));
        }
        if prior.std().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::domain("variational_dense", "prior std must be positive"));
        }
        Ok(VariationalDense {
            posterior,
            bias,
            frozen: Arc::new(DiagPrior::new(&prior)),
            prior,
        })
    }

    pub fn prior(&self) -> &GaussianMeanField {
        &self.prior
    }

    pub fn in_dim(&self) -> usize {
        self.posterior.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.posterior.shape()[1]
    }

    /// Trainable tensors in binding order: `mu, rho, bias`.
    pub fn params(&self) -> [&Tensor; 3] {
        [&self.posterior.mu, &self.posterior.rho, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.posterior.mu, &mut self.posterior.rho, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<DenseVars> {
        let mu = tape.param(self.posterior.mu.clone())?;
        let rho = tape.param(self.posterior.rho.clone())?;
        let bias = tape.param(self.bias.clone())?;
        DenseVars::new(tape, mu, rho, bias)
    }

    /// Output under one weight sample `μ + softplus(ρ)⊙ε` shared by all rows.
    pub fn sample_forward(&self, tape: &mut Tape, vars: &DenseVars, x: Var, rng: &mut impl Rng) -> Result<Var> {
        let eps = standard_normal_vec(rng, self.posterior.len());
        self.forward_with_noise(tape, vars, x, eps)
    }

    pub fn forward_with_noise(&self, tape: &mut Tape, vars: &DenseVars, x: Var, eps: Vec<f64>) -> Result<Var> {
        let w = tape.reparam(vars.mu, vars.sigma, eps)?;
        let xw = tape.matmul(x, w)?;
        tape.add_row_vec(xw, vars.bias)
    }

    /// Deterministic output at the posterior mean.
    pub fn mean_forward(&self, tape: &mut Tape, vars: &DenseVars, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, vars.mu)?;
        tape.add_row_vec(xw, vars.bias)
    }

    /// Differentiable `KL(posterior ‖ prior)`.
    pub fn weight_kl(&self, tape: &mut Tape, vars: &DenseVars) -> Result<Var> {
        tape.kl_diag_gaussian(vars.mu, vars.sigma, Arc::clone(&self.frozen))
    }

    /// Current `KL(posterior ‖ prior)` without recording anything.
    pub fn kl_to_prior(&self) -> Result<f64> {
        kl_diag_gaussian(&self.posterior, &self.prior)
    }

    /// Freeze the current posterior as the prior for the next task.
    pub fn snapshot_prior(&mut self) {
        self.prior = self.posterior.clone();
        self.frozen = Arc::new(DiagPrior::new(&self.prior));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softplus_roundtrip() {
        for &y in &[1e-6, 0.05, 1.0, 3.0, 40.0] {
            let x = softplus_inv(y);
            assert!((softplus(x) - y).abs() <= 1e-12 * y.max(1.0), "{y}");
        }
    }

    #[test]
    fn kl_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = VariationalDense::new(5, 4, &mut rng);
        assert_eq!(kl_diag_gaussian(&layer.posterior, &layer.posterior).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half_nat() {
        let p = GaussianMeanField::isotropic(&[1], 0.0, 1.0);
        let q = GaussianMeanField::isotropic(&[1], 1.0, 1.0);
        let kl = kl_diag_gaussian(&p, &q).unwrap();
        assert!((kl - 0.5).abs() < 1e-12, "{kl}");
    }

    #[test]
    fn kl_shape_mismatch() {
        let p = GaussianMeanField::isotropic(&[2], 0.0, 1.0);
        let q = GaussianMeanField::isotropic(&[3], 0.0, 1.0);
        assert!(matches!(kl_diag_gaussian(&p, &q), Err(Error::Shape { .. })));
    }

    #[test]
    fn kl_rejects_collapsed_std() {
        let p = GaussianMeanField::new(Tensor::vector(vec![0.0]), Tensor::vector(vec![-800.0])).unwrap();
        let q = GaussianMeanField::isotropic(&[1], 0.0, 1.0);
        assert!(matches!(kl_diag_gaussian(&p, &q), Err(Error::Domain { .. })));
    }

    #[test]
    fn snapshot_zeroes_kl_and_detaches() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layer = VariationalDense::new(3, 2, &mut rng);
        assert!(layer.kl_to_prior().unwrap() > 0.0);
        layer.snapshot_prior();
        assert_eq!(layer.kl_to_prior().unwrap(), 0.0);

        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape).unwrap();
        let kl = layer.weight_kl(&mut tape, &vars).unwrap();
        assert_eq!(tape.scalar_value(kl), 0.0);

        layer.posterior.mu.data_mut()[0] += 1e-3;
        assert!(layer.kl_to_prior().unwrap() > 0.0);
        // prior is an independent copy
        assert_ne!(layer.prior().mu, layer.posterior.mu);
    }

    #[test]
    fn zero_variance_limit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = VariationalDense::new(3, 2, &mut rng);
        layer.posterior.rho = Tensor::filled(&[3, 2], -60.0);
        layer.bias = Tensor::vector(vec![0.5, -0.25]);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 0.5]]).unwrap();

        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let sampled = layer.sample_forward(&mut tape, &vars, xv, &mut rng).unwrap();
        let mean = layer.mean_forward(&mut tape, &vars, xv).unwrap();
        for (a, b) in tape.value(sampled).data().iter().zip(tape.value(mean).data()) {
            assert!((a - b).abs() < 1e-20);
        }
    }

    #[test]
    fn fixed_seed_reproduces_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = VariationalDense::new(4, 3, &mut rng);
        let x = Tensor::filled(&[2, 4], 0.3);
        let run = |seed| {
            let mut tape = Tape::new();
            let vars = layer.bind(&mut tape).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let y = layer
                .sample_forward(&mut tape, &vars, xv, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }
}
