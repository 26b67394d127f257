//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse once and
//! then marks the graph consumed.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{col2im, conv_out, gemm, im2col, Window};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const GN_EPS: f32 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(String),
    Conv2d { x: Var, w: Var, b: Option<Var>, win: Window },
    ConvT2d { x: Var, w: Var, b: Option<Var>, win: Window },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f32, f32)> },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f32),
    Linear { x: Var, w: Var, b: Option<Var> },
    GlobalAvgPool(Var),
    Reshape(Var),
    Fit { x: Var, rows: Vec<usize>, cols: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Dot { x: Var, w: Tensor },
    SmoothCe { logits: Var, labels: Vec<usize>, smoothing: f32 },
    Focal { logits: Var, labels: Vec<usize>, gamma: f32 },
    Signature { x: Var, v: Vec<f32>, lambda: f32 },
    SqErr { pred: Var, target: Tensor },
    KlFreeBits { mu: Var, logvar: Var, tau: f32 },
    Reparam { mu: Var, logvar: Var, eps: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }

    pub fn take_input(&mut self, v: Var) -> Option<Tensor> {
        self.inputs.remove(&v)
    }
}

/// ReLU gate handling. Finite-difference checks record the gates at the base
/// point and replay them in the perturbed evaluations, so every difference
/// quotient sees the one smooth branch the analytic gradient differentiates.
#[derive(Clone, Debug, Default)]
enum Gates {
    #[default]
    Live,
    Record(Vec<Vec<bool>>),
    Replay(Vec<Vec<bool>>, usize),
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params_need_grad: bool,
    consumed: bool,
    gates: Gates,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph whose parameter leaves receive gradients.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params_need_grad: true, consumed: false, gates: Gates::Live }
    }

    /// Graph whose parameters are frozen constants; only [`Graph::input`]
    /// leaves can receive gradients.
    pub fn frozen() -> Self {
        Graph { nodes: Vec::new(), params_need_grad: false, consumed: false, gates: Gates::Live }
    }

    /// Remembers every ReLU gate; read them back with [`Graph::take_gates`].
    pub fn recording_gates(mut self) -> Self {
        self.gates = Gates::Record(Vec::new());
        self
    }

    /// Uses previously recorded gates instead of the sign of the input.
    pub fn replaying_gates(mut self, gates: Vec<Vec<bool>>) -> Self {
        self.gates = Gates::Replay(gates, 0);
        self
    }

    pub fn take_gates(&mut self) -> Vec<Vec<bool>> {
        match std::mem::take(&mut self.gates) {
            Gates::Record(g) | Gates::Replay(g, _) => g,
            Gates::Live => Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Leaf that receives a gradient in [`Gradients::input`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        let ng = self.params_need_grad;
        Ok(self.push(value, Op::Param(name.to_string()), ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, kh, kw) = self.value(w).dims4()?;
        if c != wc {
            return Err(Error::shape(format!("conv2d: input has {c} channels, kernel expects {wc}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::shape("conv2d: bias length must equal output channels"));
            }
        }
        let (oh, ow) = match (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"))),
        };
        let win = Window { channels: c, in_h: h, in_w: wd, k_h: kh, k_w: kw, stride, pad, out_h: oh, out_w: ow };
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let mut cols = vec![0.0f32; win.rows() * win.cols()];
            let plane_in = c * h * wd;
            let plane_out = o * oh * ow;
            let od = out.data_mut();
            for i in 0..n {
                im2col(&xs[i * plane_in..(i + 1) * plane_in], &win, &mut cols);
                gemm(o, win.rows(), win.cols(), ws, false, &cols, false, 0.0, &mut od[i * plane_out..(i + 1) * plane_out]);
            }
            if let Some(b) = b {
                add_channel_bias(od, self.value(b).data(), n, o, oh * ow);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, win }, ng))
    }

    /// Transposed convolution; kernel layout is `(in_channels, out_channels, k, k)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (wc, o, kh, kw) = self.value(w).dims4()?;
        if c != wc {
            return Err(Error::shape(format!("conv_transpose2d: input has {c} channels, kernel expects {wc}")));
        }
        let oh = (h - 1) * stride + kh;
        let ow = (wd - 1) * stride + kw;
        if oh < 2 * pad + 1 || ow < 2 * pad + 1 {
            return Err(Error::shape("conv_transpose2d: padding exceeds output"));
        }
        let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
        let win = Window { channels: o, in_h: oh, in_w: ow, k_h: kh, k_w: kw, stride, pad, out_h: h, out_w: wd };
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let mut cols = vec![0.0f32; win.rows() * win.cols()];
            let plane_in = c * h * wd;
            let plane_out = o * oh * ow;
            let od = out.data_mut();
            for i in 0..n {
                gemm(win.rows(), c, win.cols(), ws, true, &xs[i * plane_in..(i + 1) * plane_in], false, 0.0, &mut cols);
                col2im(&cols, &win, &mut od[i * plane_out..(i + 1) * plane_out]);
            }
            if let Some(b) = b {
                add_channel_bias(od, self.value(b).data(), n, o, oh * ow);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::ConvT2d { x, w, b, win }, ng))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("group_norm: affine parameters must have one entry per channel"));
        }
        let cg = c / groups;
        let hw = h * w;
        let m = (cg * hw) as f64;
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![0.0f32; xs.len()];
        let mut stats = Vec::with_capacity(n * groups);
        for i in 0..n {
            for g in 0..groups {
                let off = (i * c + g * cg) * hw;
                let seg = &xs[off..off + cg * hw];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / m;
                let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m;
                let rstd = 1.0 / (var + GN_EPS as f64).sqrt();
                let (mean, rstd) = (mean as f32, rstd as f32);
                stats.push((mean, rstd));
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let o = off + cc * hw;
                    for j in 0..hw {
                        out[o + j] = (xs[o + j] - mean) * rstd * gs[ch] + bs[ch];
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let data: Vec<f32> = match &mut self.gates {
            Gates::Live => t.data().iter().map(|&v| v.max(0.0)).collect(),
            Gates::Record(all) => {
                all.push(t.data().iter().map(|&v| v > 0.0).collect());
                t.data().iter().map(|&v| v.max(0.0)).collect()
            }
            Gates::Replay(all, next) => {
                let mask = all.get(*next).filter(|m| m.len() == t.numel()).expect("replayed gates match the recorded graph");
                *next += 1;
                t.data().iter().zip(mask).map(|(&v, &on)| if on { v } else { 0.0 }).collect()
            }
        };
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("add: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * k).collect()).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, k), ng)
    }

    /// `x (n × in) · wᵀ (in × out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(w).dims2()?;
        if fin != win {
            return Err(Error::shape(format!("linear: input width {fin}, weight expects {win}")));
        }
        let mut out = Tensor::zeros(&[n, fout]);
        gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, 0.0, out.data_mut());
        if let Some(b) = b {
            if self.value(b).shape() != [fout] {
                return Err(Error::shape("linear: bias length must equal output width"));
            }
            let bs = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(fout) {
                for (v, bb) in row.iter_mut().zip(&bs) {
                    *v += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// `(n, c, h, w) → (n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Pads (edge-replicate) or centre-crops the two trailing axes of a
    /// rank-4 tensor to `out_h × out_w`.
    pub fn fit(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let rows = fit_index(h, out_h);
        let cols = fit_index(w, out_w);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for p in 0..n * c {
            let plane = &xs[p * h * w..(p + 1) * h * w];
            for &r in &rows {
                for &cc in &cols {
                    out.push(plane[r * w + cc]);
                }
            }
        }
        let out = Tensor::new(vec![n, c, out_h, out_w], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Fit { x, rows, cols }, ng))
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let inner: usize = t.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n {
                return Err(Error::shape(format!("select_rows: row {r} out of {n}")));
            }
            data.extend_from_slice(&t.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = super::tensor::sum_f64(self.value(x).data());
        let ng = self.ng(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), ng)
    }

    /// `Σ x ⊙ w` against a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != w.shape() {
            return Err(Error::shape(format!("dot_const: {:?} vs {:?}", xv.shape(), w.shape())));
        }
        let s: f64 = xv.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s as f32), Op::Dot { x, w: w.clone() }, ng))
    }

    /// Mean over the batch of cross-entropy against
    /// `(1 − smoothing)·onehot + smoothing/K`.
    pub fn smooth_ce(&mut self, logits: Var, labels: &[usize], smoothing: f32) -> Result<Var> {
        let (n, k) = self.check_logits(logits, labels)?;
        let zs = self.value(logits).data();
        let mut total = 0.0f64;
        for (row, &y) in zs.chunks(k).zip(labels) {
            let lse = log_sum_exp(row);
            let off = smoothing as f64 / k as f64;
            for (j, &z) in row.iter().enumerate() {
                let t = off + if j == y { 1.0 - smoothing as f64 } else { 0.0 };
                total += t * (lse - z as f64);
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar((total / n as f64) as f32),
            Op::SmoothCe { logits, labels: labels.to_vec(), smoothing },
            ng,
        ))
    }

    /// Mean over the batch of `−(1 − p_y)^γ · log p_y`.
    pub fn focal(&mut self, logits: Var, labels: &[usize], gamma: f32) -> Result<Var> {
        if gamma < 0.0 {
            return Err(Error::InvalidConfig(format!("focal gamma must be ≥ 0, got {gamma}")));
        }
        let (n, k) = self.check_logits(logits, labels)?;
        let zs = self.value(logits).data();
        let mut total = 0.0f64;
        for (row, &y) in zs.chunks(k).zip(labels) {
            let logp = row[y] as f64 - log_sum_exp(row);
            let p = logp.exp();
            total += -(1.0 - p).powf(gamma as f64) * logp;
        }
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar((total / n as f64) as f32), Op::Focal { logits, labels: labels.to_vec(), gamma }, ng))
    }

    fn check_logits(&self, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let (n, k) = self.value(logits).dims2()?;
        if n == 0 {
            return Err(Error::Empty("loss over an empty batch".into()));
        }
        if labels.len() != n {
            return Err(Error::shape(format!("{n} logit rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::shape(format!("label {bad} out of range for {k} classes")));
        }
        Ok((n, k))
    }

    /// `λ(1 − cos(mean_rows(x), v))`.
    pub fn signature(&mut self, x: Var, v: &[f32], lambda: f32) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if d != v.len() {
            return Err(Error::shape(format!("signature: feature width {d}, key vector {}", v.len())));
        }
        if n == 0 {
            return Err(Error::Empty("signature over an empty batch".into()));
        }
        let f = row_mean(self.value(x).data(), n, d);
        let cos = cosine(&f, v).ok_or_else(|| Error::Metric("signature of a zero feature vector".into()))?;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar((lambda as f64 * (1.0 - cos)) as f32),
            Op::Signature { x, v: v.to_vec(), lambda },
            ng,
        ))
    }

    /// Batch mean of per-sample squared error against a constant target.
    pub fn sq_err(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(format!("sq_err: {:?} vs {:?}", p.shape(), target.shape())));
        }
        let n = p.shape().first().copied().unwrap_or(1).max(1);
        let s: f64 = p.data().iter().zip(target.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar((s / n as f64) as f32), Op::SqErr { pred, target: target.clone() }, ng))
    }

    /// `Σ_d max(KL_d, τ)` with `KL_d` the batch-averaged diagonal-Gaussian KL.
    pub fn kl_free_bits(&mut self, mu: Var, logvar: Var, tau: f32) -> Result<Var> {
        let (n, d) = self.value(mu).dims2()?;
        if self.value(logvar).shape() != [n, d] {
            return Err(Error::shape("kl: mu and logvar shapes differ"));
        }
        let kl = kl_per_dim(self.value(mu).data(), self.value(logvar).data(), n, d);
        let total: f64 = kl.iter().map(|&k| k.max(tau as f64)).sum();
        let ng = self.ng(mu) || self.ng(logvar);
        Ok(self.push(Tensor::scalar(total as f32), Op::KlFreeBits { mu, logvar, tau }, ng))
    }

    /// `z = μ + exp(½ logσ²) ⊙ η`.
    pub fn reparam(&mut self, mu: Var, logvar: Var, eps: Tensor) -> Result<Var> {
        let (m, lv) = (self.value(mu), self.value(logvar));
        if m.shape() != lv.shape() || m.shape() != eps.shape() {
            return Err(Error::shape("reparam: mu, logvar and noise shapes differ"));
        }
        let z = m
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((&a, &l), &e)| a + (0.5 * l).exp() * e)
            .collect();
        let out = Tensor::new(m.shape().to_vec(), z)?;
        let ng = self.ng(mu) || self.ng(logvar);
        Ok(self.push(out, Op::Reparam { mu, logvar, eps }, ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph("backward called on a consumed graph".into()));
        }
        if loss.0 >= self.nodes.len() || self.value(loss).numel() != 1 {
            return Err(Error::Graph("backward requires a scalar node of this graph".into()));
        }
        if !self.ng(loss) {
            return Err(Error::Graph("loss is detached from every differentiable leaf".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Input => {
                out.inputs.insert(Var(i), g);
            }
            Op::Param(name) => match out.params.get_mut(name) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    out.params.insert(name.clone(), g);
                }
            },
            Op::Conv2d { x, w, b, win } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, o) = (xv.shape()[0], wv.shape()[0]);
                let (rows, cols) = (win.rows(), win.cols());
                let plane_in = win.channels * win.in_h * win.in_w;
                let gd = g.data();
                let mut cbuf = vec![0.0f32; rows * cols];
                let mut dw = self.ng(*w).then(|| Tensor::zeros(wv.shape()));
                let mut dx = self.ng(*x).then(|| Tensor::zeros(xv.shape()));
                for s in 0..n {
                    let gy = &gd[s * o * cols..(s + 1) * o * cols];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xv.data()[s * plane_in..(s + 1) * plane_in], win, &mut cbuf);
                        gemm(o, cols, rows, gy, false, &cbuf, true, 1.0, dw.data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, o, cols, wv.data(), true, gy, false, 0.0, &mut cbuf);
                        col2im(&cbuf, win, &mut dx.data_mut()[s * plane_in..(s + 1) * plane_in]);
                    }
                }
                if let Some(b) = b {
                    acc(*b, channel_sums(gd, n, o, cols));
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
            }
            Op::ConvT2d { x, w, b, win } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let o = win.channels;
                let (rows, cols) = (win.rows(), win.cols());
                let plane_out = o * win.in_h * win.in_w;
                let gd = g.data();
                let mut cbuf = vec![0.0f32; rows * cols];
                let mut dw = self.ng(*w).then(|| Tensor::zeros(wv.shape()));
                let mut dx = self.ng(*x).then(|| Tensor::zeros(xv.shape()));
                for s in 0..n {
                    im2col(&gd[s * plane_out..(s + 1) * plane_out], win, &mut cbuf);
                    if let Some(dx) = dx.as_mut() {
                        gemm(c, rows, cols, wv.data(), false, &cbuf, false, 0.0, &mut dx.data_mut()[s * c * cols..(s + 1) * c * cols]);
                    }
                    if let Some(dw) = dw.as_mut() {
                        gemm(c, cols, rows, &xv.data()[s * c * cols..(s + 1) * c * cols], false, &cbuf, true, 1.0, dw.data_mut());
                    }
                }
                if let Some(b) = b {
                    acc(*b, channel_sums(gd, n, o, win.in_h * win.in_w));
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4()?;
                let hw = h * w;
                let cg = c / groups;
                let m = (cg * hw) as f64;
                let gs = self.value(*gamma).data();
                let xs = xv.data();
                let gd = g.data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut dx = vec![0.0f32; xs.len()];
                for s in 0..n {
                    for gi in 0..*groups {
                        let (mean, rstd) = stats[s * groups + gi];
                        let off = (s * c + gi * cg) * hw;
                        let mut sum_dxh = 0.0f64;
                        let mut sum_dxh_xh = 0.0f64;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for j in 0..hw {
                                let idx = off + cc * hw + j;
                                let xh = ((xs[idx] - mean) * rstd) as f64;
                                let dy = gd[idx] as f64;
                                dgamma[ch] += dy * xh;
                                dbeta[ch] += dy;
                                let dxh = dy * gs[ch] as f64;
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for j in 0..hw {
                                let idx = off + cc * hw + j;
                                let xh = ((xs[idx] - mean) * rstd) as f64;
                                let dxh = gd[idx] as f64 * gs[ch] as f64;
                                dx[idx] = (rstd as f64 / m * (m * dxh - sum_dxh - xh * sum_dxh_xh)) as f32;
                            }
                        }
                    }
                }
                acc(*gamma, Tensor::new(vec![c], dgamma.into_iter().map(|v| v as f32).collect())?);
                acc(*beta, Tensor::new(vec![c], dbeta.into_iter().map(|v| v as f32).collect())?);
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = xv.data().iter().zip(g.data()).map(|(&a, &b)| if a > 0.0 { b } else { 0.0 }).collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Add(a, b) => {
                if a == b {
                    let d = g.data().iter().map(|v| 2.0 * v).collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), d)?);
                } else {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
            }
            Op::Scale(x, k) => {
                let d = g.data().iter().map(|v| v * k).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, fin) = xv.dims2()?;
                let fout = wv.shape()[0];
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(&[n, fin]);
                    gemm(n, fout, fin, g.data(), false, wv.data(), false, 0.0, dx.data_mut());
                    acc(*x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(&[fout, fin]);
                    gemm(fout, n, fin, g.data(), true, xv.data(), false, 0.0, dw.data_mut());
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    acc(*b, channel_sums(g.data(), n, fout, 1));
                }
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4()?;
                let hw = h * w;
                let mut d = Vec::with_capacity(xv.numel());
                for &gv in g.data() {
                    d.extend(std::iter::repeat(gv / hw as f32).take(hw));
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, g.reshape(&shape)?);
            }
            Op::Fit { x, rows, cols } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4()?;
                let mut d = vec![0.0f32; xv.numel()];
                let gd = g.data();
                let (oh, ow) = (rows.len(), cols.len());
                for p in 0..n * c {
                    for (i, &r) in rows.iter().enumerate() {
                        for (j, &cc) in cols.iter().enumerate() {
                            d[p * h * w + r * w + cc] += gd[p * oh * ow + i * ow + j];
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let inner: usize = xv.shape()[1..].iter().product();
                let mut d = vec![0.0f32; xv.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for (dst, src) in d[r * inner..(r + 1) * inner].iter_mut().zip(&g.data()[k * inner..(k + 1) * inner]) {
                        *dst += src;
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Dot { x, w } => {
                let k = g.item();
                let d = w.data().iter().map(|v| v * k).collect();
                acc(*x, Tensor::new(w.shape().to_vec(), d)?);
            }
            Op::SmoothCe { logits, labels, smoothing } => {
                let zv = self.value(*logits);
                let (n, k) = zv.dims2()?;
                let scale = g.item() as f64 / n as f64;
                let off = *smoothing as f64 / k as f64;
                let mut d = Vec::with_capacity(n * k);
                for (row, &y) in zv.data().chunks(k).zip(labels) {
                    let lse = log_sum_exp(row);
                    for (j, &z) in row.iter().enumerate() {
                        let t = off + if j == y { 1.0 - *smoothing as f64 } else { 0.0 };
                        d.push((((z as f64 - lse).exp() - t) * scale) as f32);
                    }
                }
                acc(*logits, Tensor::new(vec![n, k], d)?);
            }
            Op::Focal { logits, labels, gamma } => {
                let zv = self.value(*logits);
                let (n, k) = zv.dims2()?;
                let scale = g.item() as f64 / n as f64;
                let gm = *gamma as f64;
                let mut d = Vec::with_capacity(n * k);
                for (row, &y) in zv.data().chunks(k).zip(labels) {
                    let lse = log_sum_exp(row);
                    let logp = row[y] as f64 - lse;
                    let p = logp.exp();
                    let q = 1.0 - p;
                    // dL/dp · p, written to stay finite as q → 0.
                    let dl_dp_times_p = if gm == 0.0 {
                        -1.0
                    } else if q <= 0.0 {
                        0.0
                    } else {
                        gm * q.powf(gm - 1.0) * logp * p - q.powf(gm)
                    };
                    for (j, &z) in row.iter().enumerate() {
                        let pj = (z as f64 - lse).exp();
                        let dpj = if j == y { 1.0 - pj } else { -pj };
                        d.push((dl_dp_times_p * dpj * scale) as f32);
                    }
                }
                acc(*logits, Tensor::new(vec![n, k], d)?);
            }
            Op::Signature { x, v, lambda } => {
                let xv = self.value(*x);
                let (n, dim) = xv.dims2()?;
                let f = row_mean(xv.data(), n, dim);
                let fnorm = f.iter().map(|a| a * a).sum::<f64>().sqrt();
                let vnorm = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
                let cos = cosine(&f, v).unwrap_or(0.0);
                let coef = -(*lambda as f64) * g.item() as f64 / n as f64;
                let row: Vec<f32> = (0..dim)
                    .map(|j| (coef * (v[j] as f64 / (fnorm * vnorm) - cos * f[j] / (fnorm * fnorm))) as f32)
                    .collect();
                let mut d = Vec::with_capacity(n * dim);
                for _ in 0..n {
                    d.extend_from_slice(&row);
                }
                acc(*x, Tensor::new(vec![n, dim], d)?);
            }
            Op::SqErr { pred, target } => {
                let pv = self.value(*pred);
                let n = pv.shape().first().copied().unwrap_or(1).max(1);
                let k = 2.0 * g.item() / n as f32;
                let d = pv.data().iter().zip(target.data()).map(|(&a, &b)| k * (a - b)).collect();
                acc(*pred, Tensor::new(pv.shape().to_vec(), d)?);
            }
            Op::KlFreeBits { mu, logvar, tau } => {
                let mv = self.value(*mu);
                let lv = self.value(*logvar);
                let (n, d) = mv.dims2()?;
                let kl = kl_per_dim(mv.data(), lv.data(), n, d);
                let gv = g.item() / n as f32;
                let mut dmu = vec![0.0f32; n * d];
                let mut dlv = vec![0.0f32; n * d];
                for s in 0..n {
                    for j in 0..d {
                        if kl[j] > *tau as f64 {
                            let idx = s * d + j;
                            dmu[idx] = gv * mv.data()[idx];
                            dlv[idx] = gv * 0.5 * (lv.data()[idx].exp() - 1.0);
                        }
                    }
                }
                acc(*mu, Tensor::new(vec![n, d], dmu)?);
                acc(*logvar, Tensor::new(vec![n, d], dlv)?);
            }
            Op::Reparam { mu, logvar, eps } => {
                let lv = self.value(*logvar);
                let dlv = g
                    .data()
                    .iter()
                    .zip(lv.data())
                    .zip(eps.data())
                    .map(|((&gz, &l), &e)| gz * e * 0.5 * (0.5 * l).exp())
                    .collect();
                acc(*logvar, Tensor::new(lv.shape().to_vec(), dlv)?);
                acc(*mu, g);
            }
        }
        Ok(())
    }
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], n: usize, c: usize, hw: usize) {
    for s in 0..n {
        for (ch, &b) in bias.iter().enumerate().take(c) {
            let off = (s * c + ch) * hw;
            for v in &mut out[off..off + hw] {
                *v += b;
            }
        }
    }
}

fn channel_sums(g: &[f32], n: usize, c: usize, hw: usize) -> Tensor {
    let mut s = vec![0.0f64; c];
    for i in 0..n {
        for (ch, acc) in s.iter_mut().enumerate() {
            let off = (i * c + ch) * hw;
            *acc += g[off..off + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    Tensor::new(vec![c], s.into_iter().map(|v| v as f32).collect()).expect("length c")
}

/// Source index for each output position under centred edge-replicate
/// padding or centred cropping.
pub fn fit_index(len: usize, target: usize) -> Vec<usize> {
    if target >= len {
        let before = (target - len) / 2;
        (0..target).map(|i| i.saturating_sub(before).min(len - 1)).collect()
    } else {
        let off = (len - target) / 2;
        (0..target).map(|i| i + off).collect()
    }
}

pub fn log_sum_exp(row: &[f32]) -> f64 {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    m + row.iter().map(|&z| (z as f64 - m).exp()).sum::<f64>().ln()
}

fn row_mean(x: &[f32], n: usize, d: usize) -> Vec<f64> {
    let mut f = vec![0.0f64; d];
    for row in x.chunks(d) {
        for (a, &b) in f.iter_mut().zip(row) {
            *a += b as f64;
        }
    }
    f.iter_mut().for_each(|a| *a /= n as f64);
    f
}

/// Cosine similarity; `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f32]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y as f64).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|&y| (y as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Batch-averaged `½(μ² + σ² − log σ² − 1)` per latent dimension.
pub fn kl_per_dim(mu: &[f32], logvar: &[f32], n: usize, d: usize) -> Vec<f64> {
    let mut kl = vec![0.0f64; d];
    for s in 0..n {
        for j in 0..d {
            let m = mu[s * d + j] as f64;
            let l = logvar[s * d + j] as f64;
            kl[j] += 0.5 * (m * m + l.exp() - l - 1.0);
        }
    }
    kl.iter_mut().for_each(|k| *k /= n as f64);
    kl
}
