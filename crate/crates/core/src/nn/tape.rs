//! Reverse-mode autodiff over a linear recording of tensor operations.
//!
//! A [`Tape`] is single-use: record a forward computation, call
//! [`Tape::backward`] once on a scalar, then read leaf gradients.

use crate::error::{Error, Result};
use crate::nn::ops::{self, LabelBatch};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, w: Var },
    AddBias { a: Var, bias: Var },
    Relu(Var),
    SoftmaxT { x: Var, temperature: f32 },
    LogSoftmaxT { x: Var, temperature: f32 },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    KlDiv { p: Var, log_q: Var },
    Mse { a: Var, b: Var },
    MaskedRowMse {
        x: Var,
        target: Vec<f32>,
        mask: Vec<bool>,
        active: usize,
    },
    Scale { x: Var, factor: f32 },
    Add(Vec<Var>),
}

#[derive(Debug)]
struct Entry {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<Entry>,
    grads: Vec<Option<Vec<f32>>>,
    differentiated: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.differentiated {
            return Err(Error::State(
                "tape already differentiated; record a fresh forward pass".into(),
            ));
        }
        self.entries.push(Entry {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.entries.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.entries[v.0].requires_grad
    }

    /// Trainable leaf; its gradient is retained after `backward`.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let t = if t.grad().is_some() { t.detached() } else { t };
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.entries[v.0].value.values()[0]
    }

    /// Leaf gradient after `backward`; `None` for unreached or non-leaf vars.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(w));
        if wv.shape().len() != 2 {
            return Err(Error::dim("matmul (weight rank)", 2, wv.shape().len()));
        }
        let (b, k, m) = (av.rows(), av.cols(), wv.shape()[1]);
        if wv.shape()[0] != k {
            return Err(Error::dim("matmul (inner width)", wv.shape()[0], k));
        }
        let out = Tensor::new(vec![b, m], ops::matmul(av.values(), wv.values(), b, k, m))?;
        let rg = self.needs(a) || self.needs(w);
        self.push(out, Op::MatMul { a, w }, rg)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.cols();
        if bv.numel() != c {
            return Err(Error::dim("add_bias", c, bv.numel()));
        }
        let mut out = av.detached();
        for row in out.values_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.values()) {
                *o += b;
            }
        }
        let rg = self.needs(a) || self.needs(bias);
        self.push(out, Op::AddBias { a, bias }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).detached();
        for v in out.values_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn softmax_t(&mut self, x: Var, temperature: f32) -> Result<Var> {
        let out = ops::softmax_t(self.value(x), temperature)?;
        let rg = self.needs(x);
        self.push(out, Op::SoftmaxT { x, temperature }, rg)
    }

    pub fn log_softmax_t(&mut self, x: Var, temperature: f32) -> Result<Var> {
        let out = ops::log_softmax_t(self.value(x), temperature)?;
        let rg = self.needs(x);
        self.push(out, Op::LogSoftmaxT { x, temperature }, rg)
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &LabelBatch) -> Result<Var> {
        let lv = self.value(logits);
        ops::check_ce_inputs(lv, labels)?;
        let v = ops::cross_entropy_value(lv.values(), lv.rows(), lv.cols(), labels.labels());
        let rg = self.needs(logits);
        self.push(
            Tensor::scalar(v as f32),
            Op::CrossEntropy {
                logits,
                labels: labels.labels().to_vec(),
            },
            rg,
        )
    }

    pub fn kl_div(&mut self, p: Var, log_q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(log_q));
        ops::check_kl_inputs(pv, qv)?;
        let v = ops::kl_value(pv.values(), qv.values(), pv.rows());
        let rg = self.needs(p) || self.needs(log_q);
        self.push(Tensor::scalar(v as f32), Op::KlDiv { p, log_q }, rg)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mse(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(v), Op::Mse { a, b }, rg)
    }

    /// Mean over rows with `mask[i]` of the per-row mean squared distance to
    /// `target`'s row `i`; rows outside the mask are ignored, and an empty mask
    /// yields 0.
    pub fn masked_row_mse(&mut self, x: Var, target: &Tensor, mask: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::dim(
                "masked_row_mse",
                format!("{:?}", xv.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        if mask.len() != xv.rows() {
            return Err(Error::dim("masked_row_mse (mask)", xv.rows(), mask.len()));
        }
        let active = mask.iter().filter(|&&m| m).count();
        let mut sum = 0.0f64;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            sum += ops::mse_value(xv.row(i), target.row(i));
        }
        let v = if active == 0 { 0.0 } else { sum / active as f64 };
        let rg = self.needs(x);
        self.push(
            Tensor::scalar(v as f32),
            Op::MaskedRowMse {
                x,
                target: target.values().to_vec(),
                mask,
                active,
            },
            rg,
        )
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let mut out = self.value(x).detached();
        for v in out.values_mut() {
            *v *= factor;
        }
        let rg = self.needs(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    /// Elementwise sum of same-shaped vars, accumulated left to right.
    pub fn add(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Parameter {
            name: "add",
            reason: "needs at least one operand".into(),
        })?;
        let mut out = self.value(first).detached();
        for &x in &xs[1..] {
            let xv = self.value(x);
            if xv.shape() != out.shape() {
                return Err(Error::dim(
                    "add",
                    format!("{:?}", out.shape()),
                    format!("{:?}", xv.shape()),
                ));
            }
            for (o, &v) in out.values_mut().iter_mut().zip(xv.values()) {
                *o += v;
            }
        }
        let rg = xs.iter().any(|&x| self.needs(x));
        self.push(out, Op::Add(xs.to_vec()), rg)
    }

    /// Propagates d(loss)/d(var) to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::State(
                "backward called twice on the same tape without a new forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward (loss must be scalar)", 1, self.value(loss).numel()));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.entries.len()];
        if self.entries[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let entry = &self.entries[idx];
            if !entry.requires_grad {
                continue;
            }
            if matches!(entry.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }

        for (idx, entry) in self.entries.iter().enumerate() {
            if !(matches!(entry.op, Op::Leaf) && entry.requires_grad) {
                grads[idx] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let entry = &self.entries[idx];
        let out = &entry.value;
        match &entry.op {
            Op::Leaf => {}
            Op::MatMul { a, w } => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let (b, k, m) = (av.rows(), av.cols(), wv.shape()[1]);
                if self.needs(*a) {
                    accumulate(grads, *a, ops::matmul_grad_input(g, wv.values(), b, k, m));
                }
                if self.needs(*w) {
                    accumulate(grads, *w, ops::matmul_grad_weight(av.values(), g, b, k, m));
                }
            }
            Op::AddBias { a, bias } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*bias) {
                    let c = out.cols();
                    let mut db = vec![0.0f32; c];
                    for row in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(out.values())
                    .map(|(&gv, &o)| if o > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxT { x, temperature } => {
                let c = out.cols();
                let inv_t = 1.0 / *temperature;
                let mut dx = vec![0.0f32; g.len()];
                for ((drow, grow), srow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.values().chunks(c)) {
                    let dot: f32 = grow.iter().zip(srow).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &s) in drow.iter_mut().zip(grow).zip(srow) {
                        *d = s * (gv - dot) * inv_t;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogSoftmaxT { x, temperature } => {
                let c = out.cols();
                let inv_t = 1.0 / *temperature;
                let mut dx = vec![0.0f32; g.len()];
                for ((drow, grow), lrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.values().chunks(c)) {
                    let gsum: f32 = grow.iter().sum();
                    for ((d, &gv), &l) in drow.iter_mut().zip(grow).zip(lrow) {
                        *d = (gv - l.exp() * gsum) * inv_t;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (r, c) = (lv.rows(), lv.cols());
                let mut dx = ops::softmax_rows(lv.values(), r, c, 1.0);
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * c + l] -= 1.0;
                }
                let s = g[0] / r as f32;
                dx.iter_mut().for_each(|d| *d *= s);
                accumulate(grads, *logits, dx);
            }
            Op::KlDiv { p, log_q } => {
                let (pv, qv) = (self.value(*p), self.value(*log_q));
                let s = g[0] / pv.rows() as f32;
                if self.needs(*log_q) {
                    accumulate(grads, *log_q, pv.values().iter().map(|&pi| -s * pi).collect());
                }
                if self.needs(*p) {
                    let dp = pv
                        .values()
                        .iter()
                        .zip(qv.values())
                        .map(|(&pi, &lq)| if pi > 0.0 { s * (pi.ln() + 1.0 - lq) } else { 0.0 })
                        .collect();
                    accumulate(grads, *p, dp);
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = 2.0 * g[0] / av.numel() as f32;
                let d: Vec<f32> = av.values().iter().zip(bv.values()).map(|(x, y)| s * (x - y)).collect();
                if self.needs(*b) {
                    accumulate(grads, *b, d.iter().map(|v| -v).collect());
                }
                if self.needs(*a) {
                    accumulate(grads, *a, d);
                }
            }
            Op::MaskedRowMse {
                x,
                target,
                mask,
                active,
            } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0f32; xv.numel()];
                if *active > 0 {
                    let s = 2.0 * g[0] / (*active * c) as f32;
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for k in i * c..(i + 1) * c {
                            dx[k] = s * (xv.values()[k] - target[k]);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::Add(xs) => {
                for &x in xs {
                    if self.needs(x) {
                        accumulate(grads, x, g.to_vec());
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contribution: Vec<f32>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
