//! Layer stacks with a single shared output head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::mixture::{AuxLossBundle, AuxSettings, GatingVars, MixtureVars, MoveLayer, Sampling};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::variational::{DenseVars, VariationalDense};

/// Negative slope of the hidden-layer leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Deterministic dense layer `y = x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = (0..in_dim * out_dim).map(|_| uni.sample(rng)).collect();
        DenseLayer {
            weight: Tensor::matrix(in_dim, out_dim, w).expect("sized above"),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Mixture(MoveLayer),
    Variational(VariationalDense),
    Dense(DenseLayer),
}

#[derive(Clone, Debug)]
pub enum LayerVars {
    Mixture(MixtureVars),
    Variational(DenseVars),
    Dense { weight: Var, bias: Var },
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Mixture(l) => l.in_dim(),
            Layer::Variational(l) => l.in_dim(),
            Layer::Dense(l) => l.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Mixture(l) => l.out_dim(),
            Layer::Variational(l) => l.out_dim(),
            Layer::Dense(l) => l.out_dim(),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Mixture(l) => l.params(),
            Layer::Variational(l) => l.params().to_vec(),
            Layer::Dense(l) => vec![&l.weight, &l.bias],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Mixture(l) => l.params_mut(),
            Layer::Variational(l) => l.params_mut().into_iter().collect(),
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
        }
    }

    /// Builds this layer's handles from leaves given in [`Layer::params`] order.
    fn vars_from(&self, tape: &mut Tape, leaves: &mut impl Iterator<Item = Var>) -> Result<LayerVars> {
        let mut next = || {
            leaves
                .next()
                .ok_or_else(|| Error::Invalid("too few leaves for model".into()))
        };
        Ok(match self {
            Layer::Mixture(l) => {
                let gating = GatingVars {
                    weight: next()?,
                    bias: next()?,
                };
                let experts = (0..l.num_experts())
                    .map(|_| {
                        let (mu, rho, bias) = (next()?, next()?, next()?);
                        DenseVars::new(tape, mu, rho, bias)
                    })
                    .collect::<Result<Vec<_>>>()?;
                LayerVars::Mixture(MixtureVars { gating, experts })
            }
            Layer::Variational(_) => {
                let (mu, rho, bias) = (next()?, next()?, next()?);
                LayerVars::Variational(DenseVars::new(tape, mu, rho, bias)?)
            }
            Layer::Dense(_) => LayerVars::Dense {
                weight: next()?,
                bias: next()?,
            },
        })
    }

    fn snapshot_priors(&mut self) {
        match self {
            Layer::Mixture(l) => l.snapshot_priors(),
            Layer::Variational(l) => l.snapshot_prior(),
            Layer::Dense(_) => {}
        }
    }
}

/// Which family of layers a model is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Mixture,
    Variational,
    Dense,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Mixture => "mixture",
            LayerKind::Variational => "variational",
            LayerKind::Dense => "dense",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(LayerKind::Mixture),
            "variational" => Ok(LayerKind::Variational),
            "dense" => Ok(LayerKind::Dense),
            other => Err(Error::Config(format!("unknown layer kind '{other}'"))),
        }
    }
}

/// Layer sizes of a fully connected classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub experts: usize,
    pub top_k: usize,
}

impl Architecture {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive: {:?}",
                self.widths()
            )));
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!(
                "top_k = {} with {} experts",
                self.top_k, self.experts
            )));
        }
        Ok(())
    }
}

/// Forward-pass result: logits plus one auxiliary bundle per mixture or
/// variational layer (empty when evaluating at the mean).
pub struct ForwardOutput {
    pub logits: Var,
    pub aux: Vec<(usize, AuxLossBundle)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
}

impl Model {
    pub fn new(arch: &Architecture, kind: LayerKind, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let widths = arch.widths();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Ok(match kind {
                    LayerKind::Mixture => Layer::Mixture(MoveLayer::new(i, w[0], w[1], arch.experts, arch.top_k, rng)?),
                    LayerKind::Variational => Layer::Variational(VariationalDense::new(w[0], w[1], rng)),
                    LayerKind::Dense => Layer::Dense(DenseLayer::new(w[0], w[1], rng)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "model",
                    format!(
                        "layer {i} emits {} but layer {} takes {}",
                        pair[0].out_dim(),
                        i + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        Ok(Model { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Records every trainable tensor as a tape leaf, in [`Model::params`] order.
    pub fn bind(&self, tape: &mut Tape) -> Result<(Vec<LayerVars>, Vec<Var>)> {
        let leaves = self
            .params()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let vars = self.vars_from_leaves(tape, &leaves)?;
        Ok((vars, leaves))
    }

    /// Layer handles over existing leaves, one per tensor of [`Model::params`].
    pub fn vars_from_leaves(&self, tape: &mut Tape, leaves: &[Var]) -> Result<Vec<LayerVars>> {
        let expected = self.params().len();
        if leaves.len() != expected {
            return Err(Error::Invalid(format!(
                "model has {expected} tensors, got {} leaves",
                leaves.len()
            )));
        }
        let mut it = leaves.iter().copied();
        self.layers.iter().map(|l| l.vars_from(tape, &mut it)).collect()
    }

    /// Forward pass over `x`; the model sees inputs only.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        vars: &[LayerVars],
        x: Var,
        mut rng: Option<&mut R>,
        settings: &AuxSettings,
    ) -> Result<ForwardOutput> {
        let mut h = x;
        let mut aux = Vec::new();
        let last = self.layers.len() - 1;
        for (i, (layer, lv)) in self.layers.iter().zip(vars).enumerate() {
            let attribute = |e: Error| {
                if e.is_numeric() {
                    Error::LayerNumeric {
                        layer: i,
                        detail: e.to_string(),
                    }
                } else {
                    e
                }
            };
            h = match (layer, lv) {
                (Layer::Mixture(l), LayerVars::Mixture(v)) => {
                    let sampling = match rng.as_deref_mut() {
                        Some(r) => Sampling::Sample(r),
                        None => Sampling::Mean,
                    };
                    let (y, bundle) = l.forward(tape, v, h, sampling, settings).map_err(attribute)?;
                    if let Some(b) = bundle {
                        aux.push((i, b));
                    }
                    y
                }
                (Layer::Variational(l), LayerVars::Variational(v)) => {
                    let y = match rng.as_deref_mut() {
                        Some(r) => {
                            let y = l.sample_forward(tape, v, h, r).map_err(attribute)?;
                            let kl = l.weight_kl(tape, v).map_err(attribute)?;
                            let zero = tape.constant(Tensor::scalar(0.0))?;
                            let n = tape.value(h).shape()[0];
                            aux.push((
                                i,
                                AuxLossBundle {
                                    gating_kl: zero,
                                    weight_kl: kl,
                                    entropy_cost: zero,
                                    dpp_diversity: zero,
                                    entropy: crate::diversity::EntropyReport {
                                        batch_size: n,
                                        ..Default::default()
                                    },
                                    kernel_det: None,
                                    routed: vec![n],
                                },
                            ));
                            y
                        }
                        None => l.mean_forward(tape, v, h).map_err(attribute)?,
                    };
                    y
                }
                (Layer::Dense(_), LayerVars::Dense { weight, bias }) => {
                    let xw = tape.matmul(h, *weight).map_err(attribute)?;
                    tape.add_row_vec(xw, *bias).map_err(attribute)?
                }
                _ => return Err(Error::Invalid(format!("layer {i}: vars do not match layer kind"))),
            };
            if i < last {
                h = tape.leaky_relu(h, LEAKY_SLOPE).map_err(attribute)?;
            }
        }
        Ok(ForwardOutput { logits: h, aux })
    }

    /// Deterministic logits at posterior means, without gradients.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (vars, _) = self.bind(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let out = self.forward::<rand_chacha::ChaCha8Rng>(&mut tape, &vars, xv, None, &AuxSettings::default())?;
        Ok(tape.value(out.logits).clone())
    }

    /// Argmax class per row, ties toward the lower index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.predict_logits(x)?;
        crate::mixture::top1_route(&logits)
    }

    /// Freeze every posterior (and gate) as the prior for the next task.
    pub fn snapshot_priors(&mut self) {
        for l in &mut self.layers {
            l.snapshot_priors();
        }
    }

    pub fn mixture_layers(&self) -> impl Iterator<Item = &MoveLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Mixture(m) => Some(m),
            _ => None,
        })
    }

    /// Routing fractions of each mixture layer over `x`, evaluated at the mean.
    pub fn expert_loads(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (n, _) = x.dims2("expert_loads")?;
        if n == 0 {
            return Err(Error::Invalid("expert_load: empty dataset".into()));
        }
        let mut loads = Vec::new();
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Mixture(m) = layer {
                loads.push(m.expert_load(&h)?);
            }
            if i < last {
                let single = Model {
                    layers: vec![layer.clone()],
                };
                h = single
                    .predict_logits(&h)?
                    .map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
            }
        }
        Ok(loads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Architecture {
        Architecture {
            input_dim: 4,
            hidden: vec![3],
            output_dim: 2,
            experts: 2,
            top_k: 1,
        }
    }

    #[test]
    fn bind_order_matches_params() {
        for kind in [LayerKind::Mixture, LayerKind::Variational, LayerKind::Dense] {
            let m = Model::new(&arch(), kind, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let mut tape = Tape::new();
            let (_, leaves) = m.bind(&mut tape).unwrap();
            let params = m.params();
            assert_eq!(leaves.len(), params.len());
            for (v, p) in leaves.iter().zip(params) {
                assert_eq!(tape.value(*v), p);
            }
        }
    }

    #[test]
    fn rejects_bad_architecture() {
        let mut a = arch();
        a.top_k = 3;
        assert!(Model::new(&a, LayerKind::Mixture, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        a.top_k = 1;
        a.hidden = vec![0];
        assert!(a.validate().is_err());
    }

    #[test]
    fn loads_cover_each_mixture_layer() {
        let m = Model::new(&arch(), LayerKind::Mixture, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = Tensor::filled(&[7, 4], 0.5);
        let loads = m.expert_loads(&x).unwrap();
        assert_eq!(loads.len(), 2);
        for l in loads {
            assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
