//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass as a
//! node holding its output value and the operand handles its backward
//! rule needs. Operands always precede consumers, so [`Tape::backward`]
//! walks the record once in reverse. One tape belongs to one model and is
//! cleared between optimization steps.
//!
//! Broadcasting is deliberately narrow: binary elementwise ops accept equal
//! shapes or a one-element operand. Row-vector bias addition and per-row
//! scaling are separate, explicitly named ops.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Tensor};
use std::sync::Arc;

use crate::variational::DiagPrior;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    LeakyRelu(OrderedSlope),
    /// `x ln x` with the convention `0 ln 0 = 0`.
    XLogX,
}

/// Leaky-ReLU negative slope, stored by bit pattern so [`Unary`] stays `Eq`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrderedSlope(u64);

impl OrderedSlope {
    pub fn new(alpha: f64) -> Self {
        OrderedSlope(alpha.to_bits())
    }

    pub fn get(self) -> f64 {
        f64::from_bits(self.0)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    AddRowVec(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Softplus(Var, Vec<f64>),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Vec<(Var, Vec<usize>)>),
    PickPerRow(Var, Vec<usize>),
    ScaleRows(Var, Var),
    Reparam {
        mu: Var,
        sigma: Var,
        eps: Vec<f64>,
    },
    KlDiagGaussian {
        mu: Var,
        sigma: Var,
        prior: Arc<DiagPrior>,
    },
    W2Kernel {
        mus: Vec<Var>,
        sigmas: Vec<Var>,
        width: f64,
    },
    NegLogDet {
        k: Var,
        inverse: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` is unreachable or
    /// does not require gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Lanes of a rank-1 or rank-2 tensor along `axis`: `(count, len, lane_stride, elem_stride)`.
fn lanes(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match (shape, axis) {
        ([n], 0) => Ok((1, *n, 0, 1)),
        ([r, c], 1) => Ok((*r, *c, *c, 1)),
        ([r, c], 0) => Ok((*c, *r, 1, *c)),
        _ => Err(Error::Axis {
            op,
            axis,
            rank: shape.len(),
        }),
    }
}

fn acc_slot(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drop every recorded node, keeping the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2("matmul")?;
        let (k2, m) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n}x{k}] · [{k2}x{m}]")));
        }
        let mut out = vec![0.0; n * m];
        gemm_acc(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    fn bcast(&self, a: Var, b: Var, op: &'static str) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Bcast::Same)
        } else if ta.is_scalar() {
            Ok(Bcast::LeftScalar)
        } else if tb.is_scalar() {
            Ok(Bcast::RightScalar)
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let kind = self.bcast(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = match kind {
            Bcast::Same => Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            )?,
            Bcast::LeftScalar => {
                let x = ta.item();
                tb.map(|y| f(x, y))
            }
            Bcast::RightScalar => {
                let y = tb.item();
                ta.map(|x| f(x, y))
            }
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, make(a, b, kind), rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// `x[n×m] + b[m]`, adding `b` to every row.
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2("add_row_vec")?;
        if self.value(b).shape() != [m] {
            return Err(Error::shape(
                "add_row_vec",
                format!("[{n}x{m}] + {:?}", self.value(b).shape()),
            ));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(m.max(1))
            .flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c))
            .collect();
        let rg = self.rg(x) || self.rg(b);
        self.push(Tensor::matrix(n, m, data)?, Op::AddRowVec(x, b), rg, "add_row_vec")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg, "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, a: Var, u: Unary, name: &'static str) -> Result<Var> {
        let t = self.value(a);
        let value = match u {
            Unary::Exp => t.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = t.data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::domain("log", format!("argument {bad} is not positive")));
                }
                t.map(f64::ln)
            }
            Unary::LeakyRelu(s) => {
                let alpha = s.get();
                t.map(|x| if x > 0.0 { x } else { alpha * x })
            }
            Unary::XLogX => {
                if let Some(bad) = t.data().iter().find(|&&x| x < 0.0) {
                    return Err(Error::domain("xlogx", format!("argument {bad} is negative")));
                }
                t.map(|x| if x == 0.0 { 0.0 } else { x * x.ln() })
            }
        };
        let rg = self.rg(a);
        self.push(value, Op::Unary(a, u), rg, name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log, "log")
    }

    /// `ln(1 + eˣ)`; the slope `sigmoid(x)` is kept for the reverse pass.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut value = Vec::with_capacity(t.len());
        let mut slope = Vec::with_capacity(t.len());
        for &x in t.data() {
            let e = (-x.abs()).exp();
            value.push(x.max(0.0) + e.ln_1p());
            slope.push(if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) });
        }
        let value = Tensor::new(t.shape().to_vec(), value)?;
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a, slope), rg, "softplus")
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary(a, Unary::LeakyRelu(OrderedSlope::new(alpha)), "leaky_relu")
    }

    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::XLogX, "xlogx")
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (count, len, ls, es) = lanes(t.shape(), axis, "softmax")?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for l in 0..count {
            let base = l * ls;
            let max = (0..len).map(|i| src[base + i * es]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..len {
                let e = (src[base + i * es] - max).exp();
                out[base + i * es] = e;
                z += e;
            }
            for i in 0..len {
                out[base + i * es] /= z;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::Softmax(a, axis), rg, "softmax")
    }

    /// `log softmax` along `axis`, computed as `x − logsumexp(x)`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (count, len, ls, es) = lanes(t.shape(), axis, "log_softmax")?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for l in 0..count {
            let base = l * ls;
            let max = (0..len).map(|i| src[base + i * es]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..len).map(|i| (src[base + i * es] - max).exp()).sum::<f64>().ln();
            for i in 0..len {
                out[base + i * es] = src[base + i * es] - lse;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::LogSoftmax(a, axis), rg, "log_softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let t = self.value(a);
        let (count, len, ls, es) = lanes(t.shape(), axis, name)?;
        if mean && len == 0 {
            return Err(Error::shape(name, "empty axis"));
        }
        let src = t.data();
        let out: Vec<f64> = (0..count)
            .map(|l| {
                let s: f64 = (0..len).map(|i| src[l * ls + i * es]).sum();
                if mean {
                    s / len as f64
                } else {
                    s
                }
            })
            .collect();
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let op = if mean {
            Op::MeanAxis(a, axis)
        } else {
            Op::SumAxis(a, axis)
        };
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, op, rg, name)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Rows `rows[i]` of `x`, in order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2("gather_rows")?;
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {r} out of {n}")));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let rg = self.rg(x);
        self.push(
            Tensor::matrix(rows.len(), d, out)?,
            Op::GatherRows(x, rows.to_vec()),
            rg,
            "gather_rows",
        )
    }

    /// Builds an `n×d` tensor where row `rows[i]` accumulates row `i` of each part.
    pub fn scatter_add_rows(&mut self, parts: &[(Var, Vec<usize>)], n: usize, d: usize) -> Result<Var> {
        let mut out = vec![0.0; n * d];
        let mut rg = false;
        for (part, rows) in parts {
            let t = self.value(*part);
            let (pn, pd) = t.dims2("scatter_add_rows")?;
            if pn != rows.len() || pd != d {
                return Err(Error::shape(
                    "scatter_add_rows",
                    format!("part [{pn}x{pd}] for {} rows of width {d}", rows.len()),
                ));
            }
            for (i, &r) in rows.iter().enumerate() {
                if r >= n {
                    return Err(Error::shape("scatter_add_rows", format!("row {r} out of {n}")));
                }
                for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(t.row(i)) {
                    *o += v;
                }
            }
            rg |= self.rg(*part);
        }
        self.push(
            Tensor::matrix(n, d, out)?,
            Op::ScatterAddRows(parts.to_vec()),
            rg,
            "scatter_add_rows",
        )
    }

    /// `out[i, 0] = x[i, cols[i]]`.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = t.dims2("pick_per_row")?;
        if cols.len() != n || cols.iter().any(|&c| c >= m) {
            return Err(Error::shape(
                "pick_per_row",
                format!("{} indices into [{n}x{m}]", cols.len()),
            ));
        }
        let out = cols.iter().enumerate().map(|(i, &c)| t.at(i, c)).collect();
        let rg = self.rg(x);
        self.push(
            Tensor::matrix(n, 1, out)?,
            Op::PickPerRow(x, cols.to_vec()),
            rg,
            "pick_per_row",
        )
    }

    /// `out[i, j] = x[i, j] · s[i, 0]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("scale_rows")?;
        if self.value(s).shape() != [n, 1] {
            return Err(Error::shape(
                "scale_rows",
                format!("[{n}x{d}] scaled by {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(d.max(1))
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |v| v * c))
            .collect();
        let rg = self.rg(x) || self.rg(s);
        self.push(Tensor::matrix(n, d, data)?, Op::ScaleRows(x, s), rg, "scale_rows")
    }

    /// Reparameterized sample `mu + sigma ⊙ eps`.
    pub fn reparam(&mut self, mu: Var, sigma: Var, eps: Vec<f64>) -> Result<Var> {
        let (tm, ts) = (self.value(mu), self.value(sigma));
        if tm.shape() != ts.shape() || eps.len() != tm.len() {
            return Err(Error::shape(
                "reparam",
                format!("mu {:?}, sigma {:?}, eps {}", tm.shape(), ts.shape(), eps.len()),
            ));
        }
        let data = tm
            .data()
            .iter()
            .zip(ts.data())
            .zip(&eps)
            .map(|((&m, &s), &e)| m + s * e)
            .collect();
        let value = Tensor::new(tm.shape().to_vec(), data)?;
        let rg = self.rg(mu) || self.rg(sigma);
        self.push(value, Op::Reparam { mu, sigma, eps }, rg, "reparam")
    }

    /// Closed-form `KL(N(mu, sigma²) ‖ prior)`, summed over elements.
    pub fn kl_diag_gaussian(&mut self, mu: Var, sigma: Var, prior: Arc<DiagPrior>) -> Result<Var> {
        let (tm, ts) = (self.value(mu), self.value(sigma));
        if ts.shape() != tm.shape() || prior.len() != tm.len() {
            return Err(Error::shape("kl_diag_gaussian", "posterior and prior differ in size"));
        }
        if let Some(s) = ts.data().iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::domain("kl_diag_gaussian", format!("posterior std {s}")));
        }
        let mut kl = 0.0;
        for (i, (&m, &s)) in tm.data().iter().zip(ts.data()).enumerate() {
            let d = m - prior.mu[i];
            kl += prior.ln_std[i] - s.ln() + (s * s + d * d) / prior.two_var[i] - 0.5;
        }
        let rg = self.rg(mu) || self.rg(sigma);
        self.push(
            Tensor::scalar(kl),
            Op::KlDiagGaussian { mu, sigma, prior },
            rg,
            "kl_diag_gaussian",
        )
    }

    /// `M×M` matrix of `exp(−W₂²(pᵢ, pⱼ) / 2h²)` between diagonal Gaussians
    /// `N(mus[i], sigmas[i]²)`.
    pub fn w2_kernel_matrix(&mut self, mus: &[Var], sigmas: &[Var], width: f64) -> Result<Var> {
        if width <= 0.0 || !width.is_finite() {
            return Err(Error::domain("w2_kernel_matrix", format!("kernel width {width}")));
        }
        let m = mus.len();
        if m == 0 || sigmas.len() != m {
            return Err(Error::shape("w2_kernel_matrix", "need one mean and one std per expert"));
        }
        let len = self.value(mus[0]).len();
        if mus.iter().chain(sigmas).any(|&v| self.value(v).len() != len) {
            return Err(Error::shape("w2_kernel_matrix", "heterogeneous expert shapes"));
        }
        let mut k = vec![0.0; m * m];
        for i in 0..m {
            k[i * m + i] = 1.0;
            for j in i + 1..m {
                let w2 = squared_distance(self.value(mus[i]).data(), self.value(mus[j]).data())
                    + squared_distance(self.value(sigmas[i]).data(), self.value(sigmas[j]).data());
                let v = (-w2 / (2.0 * width * width)).exp();
                k[i * m + j] = v;
                k[j * m + i] = v;
            }
        }
        let rg = mus.iter().chain(sigmas).any(|&v| self.rg(v));
        self.push(
            Tensor::matrix(m, m, k)?,
            Op::W2Kernel {
                mus: mus.to_vec(),
                sigmas: sigmas.to_vec(),
                width,
            },
            rg,
            "w2_kernel_matrix",
        )
    }

    /// `−log det(K + jitter·I)` via Cholesky, escalating the jitter ×10 up
    /// to `max_jitter`. Returns the loss and the jitter that succeeded.
    pub fn neg_log_det(&mut self, k: Var, jitter: f64, max_jitter: f64) -> Result<(Var, f64)> {
        let t = self.value(k);
        let (n, n2) = t.dims2("neg_log_det")?;
        if n != n2 {
            return Err(Error::shape("neg_log_det", format!("[{n}x{n2}] is not square")));
        }
        let (logdet, inverse, used) = crate::linalg::jittered_logdet_inverse(t.data(), n, jitter, max_jitter)?;
        let rg = self.rg(k);
        let v = self.push(Tensor::scalar(-logdet), Op::NegLogDet { k, inverse }, rg, "neg_log_det")?;
        Ok((v, used))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backprop_node(i, g, lower);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                if self.rg(*a) {
                    let ga = acc_slot(&mut grads[a.0], n * k);
                    gemm_acc(n, m, k, g, false, tb.data(), true, ga);
                }
                if self.rg(*b) {
                    let gb = acc_slot(&mut grads[b.0], k * m);
                    gemm_acc(k, n, m, ta.data(), true, g, false, gb);
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.acc_bcast(*a, *kind, true, grads, g, |_, gi| gi);
                self.acc_bcast(*b, *kind, false, grads, g, |_, gi| sign * gi);
            }
            Op::Mul(a, b, kind) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let other_of_a = |idx: usize| match kind {
                    Bcast::Same | Bcast::LeftScalar => tb.data()[idx],
                    Bcast::RightScalar => tb.item(),
                };
                let other_of_b = |idx: usize| match kind {
                    Bcast::Same | Bcast::RightScalar => ta.data()[idx],
                    Bcast::LeftScalar => ta.item(),
                };
                self.acc_bcast(*a, *kind, true, grads, g, |idx, gi| gi * other_of_a(idx));
                self.acc_bcast(*b, *kind, false, grads, g, |idx, gi| gi * other_of_b(idx));
            }
            Op::AddRowVec(x, b) => {
                let m = out.shape()[1];
                if self.rg(*x) {
                    let gx = acc_slot(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if self.rg(*b) {
                    let gb = acc_slot(&mut grads[b.0], m);
                    for row in g.chunks_exact(m.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc_slot(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
            }
            Op::Unary(a, u) => {
                let x = self.value(*a).data();
                let ga = acc_slot(&mut grads[a.0], g.len());
                match u {
                    Unary::Exp => {
                        for ((o, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                            *o += gi * y;
                        }
                    }
                    Unary::Log => {
                        for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                            *o += gi / xi;
                        }
                    }
                    Unary::LeakyRelu(s) => {
                        let alpha = s.get();
                        for ((o, gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                            *o += if xi > 0.0 { *gi } else { alpha * gi };
                        }
                    }
                    Unary::XLogX => {
                        for ((o, gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                            *o += gi * (xi.max(f64::MIN_POSITIVE).ln() + 1.0);
                        }
                    }
                }
            }
            Op::Softplus(a, slope) => {
                let ga = acc_slot(&mut grads[a.0], g.len());
                for ((o, gi), s) in ga.iter_mut().zip(g).zip(slope) {
                    *o += gi * s;
                }
            }
            Op::Softmax(a, axis) => {
                let (count, len, ls, es) = lanes(out.shape(), *axis, "softmax").expect("checked in forward");
                let y = out.data();
                let ga = acc_slot(&mut grads[a.0], g.len());
                for l in 0..count {
                    let base = l * ls;
                    let dot: f64 = (0..len).map(|j| g[base + j * es] * y[base + j * es]).sum();
                    for j in 0..len {
                        let idx = base + j * es;
                        ga[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
            Op::LogSoftmax(a, axis) => {
                let (count, len, ls, es) = lanes(out.shape(), *axis, "log_softmax").expect("checked in forward");
                let y = out.data();
                let ga = acc_slot(&mut grads[a.0], g.len());
                for l in 0..count {
                    let base = l * ls;
                    let gsum: f64 = (0..len).map(|j| g[base + j * es]).sum();
                    for j in 0..len {
                        let idx = base + j * es;
                        ga[idx] += g[idx] - y[idx].exp() * gsum;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.value(*a).len();
                let scale = if matches!(node.op, Op::Mean(_)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let ga = acc_slot(&mut grads[a.0], n);
                let gv = g[0] * scale;
                ga.iter_mut().for_each(|o| *o += gv);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let src = self.value(*a);
                let (count, len, ls, es) = lanes(src.shape(), *axis, "reduce").expect("checked in forward");
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let ga = acc_slot(&mut grads[a.0], src.len());
                for (l, gl) in g.iter().enumerate().take(count) {
                    for j in 0..len {
                        ga[l * ls + j * es] += gl * scale;
                    }
                }
            }
            Op::GatherRows(x, rows) => {
                let src = self.value(*x);
                let d = src.shape()[1];
                let gx = acc_slot(&mut grads[x.0], src.len());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in gx[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
            }
            Op::ScatterAddRows(parts) => {
                let d = out.shape()[1];
                for (part, rows) in parts {
                    if !self.rg(*part) {
                        continue;
                    }
                    let gp = acc_slot(&mut grads[part.0], rows.len() * d);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, v) in gp[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::PickPerRow(x, cols) => {
                let m = self.value(*x).shape()[1];
                let gx = acc_slot(&mut grads[x.0], cols.len() * m);
                for (i, &c) in cols.iter().enumerate() {
                    gx[i * m + c] += g[i];
                }
            }
            Op::ScaleRows(x, s) => {
                let tx = self.value(*x);
                let d = tx.shape()[1];
                let sv = self.value(*s).data();
                if self.rg(*x) {
                    let gx = acc_slot(&mut grads[x.0], tx.len());
                    for (i, &c) in sv.iter().enumerate() {
                        for (o, v) in gx[i * d..(i + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *o += c * v;
                        }
                    }
                }
                if self.rg(*s) {
                    let gs = acc_slot(&mut grads[s.0], sv.len());
                    for (i, o) in gs.iter_mut().enumerate() {
                        *o += tx
                            .row(i)
                            .iter()
                            .zip(&g[i * d..(i + 1) * d])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            Op::Reparam { mu, sigma, eps } => {
                if self.rg(*mu) {
                    let gm = acc_slot(&mut grads[mu.0], g.len());
                    gm.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if self.rg(*sigma) {
                    let gs = acc_slot(&mut grads[sigma.0], g.len());
                    for ((o, gi), e) in gs.iter_mut().zip(g).zip(eps) {
                        *o += gi * e;
                    }
                }
            }
            Op::KlDiagGaussian { mu, sigma, prior } => {
                let gv = g[0];
                let m = self.value(*mu).data();
                let s = self.value(*sigma).data();
                if self.rg(*mu) {
                    let gm = acc_slot(&mut grads[mu.0], m.len());
                    for (i, (o, &mi)) in gm.iter_mut().zip(m).enumerate() {
                        *o += gv * 2.0 * (mi - prior.mu[i]) / prior.two_var[i];
                    }
                }
                if self.rg(*sigma) {
                    let gs = acc_slot(&mut grads[sigma.0], s.len());
                    for (i, (o, &si)) in gs.iter_mut().zip(s).enumerate() {
                        *o += gv * (-1.0 / si + 2.0 * si / prior.two_var[i]);
                    }
                }
            }
            Op::W2Kernel { mus, sigmas, width } => {
                let m = mus.len();
                let k = out.data();
                let inv = 1.0 / (2.0 * width * width);
                for i in 0..m {
                    for j in i + 1..m {
                        // dL/dW2 for the symmetric pair (i,j)
                        let c = -(g[i * m + j] + g[j * m + i]) * k[i * m + j] * inv;
                        if c == 0.0 {
                            continue;
                        }
                        self.w2_pair_grad(mus[i], mus[j], c, grads);
                        self.w2_pair_grad(sigmas[i], sigmas[j], c, grads);
                    }
                }
            }
            Op::NegLogDet { k, inverse } => {
                let gk = acc_slot(&mut grads[k.0], inverse.len());
                gk.iter_mut().zip(inverse).for_each(|(o, v)| *o -= g[0] * v);
            }
        }
    }

    /// Accumulates `c · ∂/∂(a,b) Σ (a − b)²`.
    fn w2_pair_grad(&self, a: Var, b: Var, c: f64, grads: &mut [Option<Vec<f64>>]) {
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        if self.rg(a) {
            let ga = acc_slot(&mut grads[a.0], ta.len());
            for ((o, &x), &y) in ga.iter_mut().zip(ta).zip(tb) {
                *o += c * 2.0 * (x - y);
            }
        }
        if self.rg(b) {
            let gb = acc_slot(&mut grads[b.0], tb.len());
            for ((o, &x), &y) in gb.iter_mut().zip(ta).zip(tb) {
                *o -= c * 2.0 * (x - y);
            }
        }
    }

    fn acc_bcast(
        &self,
        v: Var,
        kind: Bcast,
        left: bool,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.rg(v) {
            return;
        }
        let scalar_side = match kind {
            Bcast::Same => false,
            Bcast::LeftScalar => left,
            Bcast::RightScalar => !left,
        };
        let len = self.value(v).len();
        let gv = acc_slot(&mut grads[v.0], len);
        if scalar_side {
            gv[0] += g.iter().enumerate().map(|(i, &gi)| f(i, gi)).sum::<f64>();
        } else {
            for (i, (o, &gi)) in gv.iter_mut().zip(g).enumerate() {
                *o += f(i, gi);
            }
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
