//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so a reverse sweep visits every
//! consumer before its inputs.

use crate::conv::{conv3d, conv3d_backward};
use crate::error::{NetError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Focal-loss exponents and normalizer.
#[derive(Debug, Clone, Copy)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
    pub norm: f64,
}

enum Op {
    Leaf,
    Conv { x: Var, w: Var, stride: usize },
    AddBias { x: Var, b: Var },
    Concat { parts: Vec<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, train: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    SetMean { xs: Vec<Var> },
    SetVar { xs: Vec<Var>, mean: Tensor },
    Upsample { x: Var },
    Focal { logits: Var, target: Tensor, p: FocalParams },
    AbsDiff { x: Var, entries: Vec<(usize, f64)>, weight: f64 },
    Sum { xs: Vec<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-channel batch statistics: mean and unbiased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn channel_chunks(d: [usize; 5]) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> {
    let plane = d[2] * d[3] * d[4];
    (0..d[0] * d[1]).map(move |i| (i % d[1], i * plane..(i + 1) * plane))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss contribution and derivative w.r.t. the logit for one voxel.
fn focal_term(z: f64, t: f64, p: FocalParams) -> (f64, f64) {
    let q = sigmoid(z);
    if t >= 1.0 {
        let log_q = -softplus(-z);
        let m = (1.0 - q).powf(p.alpha);
        (-m * log_q, m * (p.alpha * q * log_q - (1.0 - q)))
    } else {
        let log_1mq = -softplus(z);
        let w = (1.0 - t).powf(p.beta);
        let m = w * q.powf(p.alpha);
        (-m * log_1mq, m * (q - p.alpha * (1.0 - q) * log_1mq))
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let y = conv3d(self.value(x), self.value(w), None, stride)?;
        Ok(self.push(y, Op::Conv { x, w, stride }))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).dims5()?;
        let bias = self.value(b);
        if bias.len() != d[1] {
            return Err(NetError::Shape(format!("bias {} vs {} channels", bias.len(), d[1])));
        }
        let mut y = self.value(x).clone();
        for (c, r) in channel_chunks(d) {
            let bv = bias.data()[c];
            y.data_mut()[r].iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(y, Op::AddBias { x, b }))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let ds: Vec<[usize; 5]> = parts.iter().map(|p| self.value(*p).dims5()).collect::<Result<_>>()?;
        let d0 = ds[0];
        if ds.iter().any(|d| d[0] != d0[0] || d[2..] != d0[2..]) {
            return Err(NetError::Shape(format!("concat of {ds:?}")));
        }
        let plane = d0[2] * d0[3] * d0[4];
        let c_total: usize = ds.iter().map(|d| d[1]).sum();
        let mut data = Vec::with_capacity(d0[0] * c_total * plane);
        for n in 0..d0[0] {
            for (p, d) in parts.iter().zip(&ds) {
                let s = self.value(*p).data();
                data.extend_from_slice(&s[n * d[1] * plane..(n + 1) * d[1] * plane]);
            }
        }
        let y = Tensor::new(vec![d0[0], c_total, d0[2], d0[3], d0[4]], data)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }))
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// statistics used for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let d = self.value(x).dims5()?;
        let m = d[0] * d[2] * d[3] * d[4];
        if m < 2 {
            return Err(NetError::Shape(format!("batch norm over {m} values")));
        }
        let xs = self.value(x).data();
        let mut sum = vec![0.0; d[1]];
        for (c, r) in channel_chunks(d) {
            sum[c] += xs[r].iter().sum::<f64>();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
        let mut ss = vec![0.0; d[1]];
        for (c, r) in channel_chunks(d) {
            ss[c] += xs[r].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
        let var_b: Vec<f64> = ss.iter().map(|s| s / m as f64).collect();
        let inv_std: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats { mean: mean.clone(), var: ss.iter().map(|s| s / (m - 1) as f64).collect() };
        let y = self.normalize(x, gamma, beta, &mean, inv_std, true)?;
        Ok((y, stats))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, false)
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, train: bool) -> Result<Var> {
        let d = self.value(x).dims5()?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != d[1] || b.len() != d[1] || mean.len() != d[1] || inv_std.len() != d[1] {
            return Err(NetError::Shape(format!("batch norm params for {} channels", d[1])));
        }
        let mut xhat = self.value(x).clone();
        let mut y = Tensor::zeros(&d);
        for (c, r) in channel_chunks(d) {
            for i in r {
                let h = (xhat.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g[c] * h + b[c];
            }
        }
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NetError::Shape(format!("add {:?} + {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add { a, b }))
    }

    fn gather_sorted(&self, xs: &[Var]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Err(NetError::EmptyPhases);
        }
        let shape = self.value(xs[0]).shape();
        if xs.iter().any(|v| self.value(*v).shape() != shape) {
            return Err(NetError::Shape("set members differ in shape".into()));
        }
        let n = self.value(xs[0]).len();
        Ok((0..n)
            .map(|i| {
                let mut col: Vec<f64> = xs.iter().map(|v| self.value(*v).data()[i]).collect();
                col.sort_by(f64::total_cmp);
                col
            })
            .collect())
    }

    /// Elementwise mean over a set. Summation runs in sorted order, so the
    /// result is bitwise independent of the order of `xs`.
    pub fn set_mean(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.gather_sorted(xs)?;
        let k = xs.len() as f64;
        let data = cols.iter().map(|c| c.iter().sum::<f64>() / k).collect();
        let y = Tensor::new(self.value(xs[0]).shape().to_vec(), data)?;
        Ok(self.push(y, Op::SetMean { xs: xs.to_vec() }))
    }

    /// Elementwise population variance over a set (zero for one member).
    pub fn set_var(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.gather_sorted(xs)?;
        let k = xs.len() as f64;
        let shape = self.value(xs[0]).shape().to_vec();
        let mut mean = Vec::with_capacity(cols.len());
        let mut var = Vec::with_capacity(cols.len());
        for c in &cols {
            let m = c.iter().sum::<f64>() / k;
            let mut sq: Vec<f64> = c.iter().map(|v| (v - m) * (v - m)).collect();
            sq.sort_by(f64::total_cmp);
            mean.push(m);
            var.push(sq.iter().sum::<f64>() / k);
        }
        let y = Tensor::new(shape.clone(), var)?;
        let mean = Tensor::new(shape, mean)?;
        Ok(self.push(y, Op::SetVar { xs: xs.to_vec(), mean }))
    }

    /// Nearest-neighbour in-plane upsampling by 2, cropped to `(h, w)`.
    pub fn upsample_to(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let d = self.value(x).dims5()?;
        if h.div_ceil(2) != d[3] || w.div_ceil(2) != d[4] {
            return Err(NetError::Shape(format!("cannot upsample {d:?} to {h}x{w}")));
        }
        let xs = self.value(x).data();
        let mut y = Vec::with_capacity(d[0] * d[1] * d[2] * h * w);
        for row in 0..d[0] * d[1] * d[2] {
            for oy in 0..h {
                let src = (row * d[3] + oy / 2) * d[4];
                y.extend((0..w).map(|ox| xs[src + ox / 2]));
            }
        }
        let y = Tensor::new(vec![d[0], d[1], d[2], h, w], y)?;
        Ok(self.push(y, Op::Upsample { x }))
    }

    /// Penalty-reduced focal loss on logits against a `[0, 1]` target
    /// heatmap; voxels with target exactly 1 are positives.
    pub fn focal_loss(&mut self, logits: Var, target: Tensor, p: FocalParams) -> Result<Var> {
        if self.value(logits).shape() != target.shape() {
            return Err(NetError::Shape("focal target shape".into()));
        }
        let s: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .map(|(z, t)| focal_term(*z, *t, p).0)
            .sum();
        Ok(self.push(Tensor::filled(&[1], s / p.norm), Op::Focal { logits, target, p }))
    }

    /// `weight * sum |x[i] - t|` over the listed `(flat index, target)` pairs.
    pub fn abs_diff(&mut self, x: Var, entries: Vec<(usize, f64)>, weight: f64) -> Result<Var> {
        let xs = self.value(x).data();
        if entries.iter().any(|(i, _)| *i >= xs.len()) {
            return Err(NetError::Shape("regression index out of range".into()));
        }
        let s: f64 = entries.iter().map(|(i, t)| (xs[*i] - t).abs()).sum();
        Ok(self.push(Tensor::filled(&[1], weight * s), Op::AbsDiff { x, entries, weight }))
    }

    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.iter().any(|v| self.value(*v).len() != 1) {
            return Err(NetError::Shape("sum of non-scalars".into()));
        }
        let s = xs.iter().map(|v| self.value(*v).data()[0]).sum();
        Ok(self.push(Tensor::filled(&[1], s), Op::Sum { xs: xs.to_vec() }))
    }

    /// Gradients of scalar `root` w.r.t. every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(NetError::Shape("backward from a non-scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(&[1], 1.0));
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, stride } => {
                let (gx, gw, _) = conv3d_backward(self.value(*x), self.value(*w), g, *stride)?;
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::AddBias { x, b } => {
                let d = g.dims5()?;
                let mut gb = Tensor::zeros(&[d[1]]);
                for (c, r) in channel_chunks(d) {
                    gb.data_mut()[c] += g.data()[r].iter().sum::<f64>();
                }
                acc(*x, g.clone());
                acc(*b, gb);
            }
            Op::Concat { parts } => {
                let mut c0 = 0;
                for p in parts {
                    let c = self.value(*p).dims5()?[1];
                    acc(*p, g.slice_axis(1, c0, c0 + c)?);
                    c0 += c;
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let d = g.dims5()?;
                let gam = self.value(*gamma).data();
                let mut sg = vec![0.0; d[1]];
                let mut sgx = vec![0.0; d[1]];
                for (c, r) in channel_chunks(d) {
                    for j in r {
                        sg[c] += g.data()[j];
                        sgx[c] += g.data()[j] * xhat.data()[j];
                    }
                }
                let m = (d[0] * d[2] * d[3] * d[4]) as f64;
                let mut gx = Tensor::zeros(&d);
                for (c, r) in channel_chunks(d) {
                    let k = gam[c] * inv_std[c];
                    for j in r {
                        gx.data_mut()[j] = if *train {
                            k * (g.data()[j] - sg[c] / m - xhat.data()[j] * sgx[c] / m)
                        } else {
                            k * g.data()[j]
                        };
                    }
                }
                acc(*x, gx);
                acc(*gamma, Tensor::new(vec![d[1]], sgx)?);
                acc(*beta, Tensor::new(vec![d[1]], sg)?);
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                let data = g.data().iter().zip(xs).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::SetMean { xs } => {
                let k = xs.len() as f64;
                for v in xs {
                    acc(*v, g.map(|t| t / k));
                }
            }
            Op::SetVar { xs, mean } => {
                let k = xs.len() as f64;
                for v in xs {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.value(*v).data())
                        .zip(mean.data())
                        .map(|((g, x), m)| 2.0 * g * (x - m) / k)
                        .collect();
                    acc(*v, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Upsample { x } => {
                let d = self.value(*x).dims5()?;
                let gd = g.dims5()?;
                let mut gx = Tensor::zeros(&d);
                for row in 0..d[0] * d[1] * d[2] {
                    for oy in 0..gd[3] {
                        let dst = (row * d[3] + oy / 2) * d[4];
                        let src = (row * gd[3] + oy) * gd[4];
                        for ox in 0..gd[4] {
                            gx.data_mut()[dst + ox / 2] += g.data()[src + ox];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Focal { logits, target, p } => {
                let s = g.data()[0] / p.norm;
                let data = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(z, t)| s * focal_term(*z, *t, *p).1)
                    .collect();
                acc(*logits, Tensor::new(target.shape().to_vec(), data)?);
            }
            Op::AbsDiff { x, entries, weight } => {
                let xs = self.value(*x);
                let mut gx = Tensor::zeros(xs.shape());
                for (j, t) in entries {
                    let diff = xs.data()[*j] - t;
                    let sign = if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                    gx.data_mut()[*j] += g.data()[0] * weight * sign;
                }
                acc(*x, gx);
            }
            Op::Sum { xs } => {
                for v in xs {
                    acc(*v, g.clone());
                }
            }
        }
        Ok(())
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node; `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub(crate) fn sigmoid_tensor(t: &Tensor) -> Tensor {
    t.map(sigmoid)
}
