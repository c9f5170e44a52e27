//! Forward kernels shared by eager evaluation and the autograd tape.
//!
//! Reductions accumulate in `f64` and round once; elementwise maps stay in `f32`.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Class indices for a batch, validated against the class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<usize>,
    classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Parameter {
                name: "classes",
                reason: "class count must be positive".into(),
            });
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Data(format!(
                "label {l} at position {i} out of range for {classes} classes"
            )));
        }
        Ok(LabelBatch { labels, classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn one_hot(&self) -> Tensor {
        let mut t = Tensor::zeros(vec![self.labels.len().max(1), self.classes]);
        let n = self.classes;
        for (i, &l) in self.labels.iter().enumerate() {
            t.values_mut()[i * n + l] = 1.0;
        }
        t
    }
}

pub(crate) fn check_temperature(t: f32) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter {
            name: "temperature",
            reason: format!("must be positive and finite, got {t}"),
        })
    }
}

/// `out[b×m] = a[b×k] · w[k×m]`, ikj order so the inner loop is contiguous.
pub(crate) fn matmul(a: &[f32], w: &[f32], b: usize, k: usize, m: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; b * m];
    for i in 0..b {
        let out_row = &mut out[i * m..(i + 1) * m];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let w_row = &w[p * m..(p + 1) * m];
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o += av * wv;
            }
        }
    }
    out
}

/// `da[b×k] = dout[b×m] · wᵀ` for `w[k×m]`.
pub(crate) fn matmul_grad_input(dout: &[f32], w: &[f32], b: usize, k: usize, m: usize) -> Vec<f32> {
    let mut da = vec![0.0f32; b * k];
    for i in 0..b {
        let d_row = &dout[i * m..(i + 1) * m];
        for p in 0..k {
            let w_row = &w[p * m..(p + 1) * m];
            da[i * k + p] = d_row.iter().zip(w_row).map(|(x, y)| x * y).sum();
        }
    }
    da
}

/// `dw[k×m] = aᵀ · dout` for `a[b×k]`, `dout[b×m]`.
pub(crate) fn matmul_grad_weight(a: &[f32], dout: &[f32], b: usize, k: usize, m: usize) -> Vec<f32> {
    let mut dw = vec![0.0f32; k * m];
    for i in 0..b {
        let d_row = &dout[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dw_row = &mut dw[p * m..(p + 1) * m];
            for (g, &d) in dw_row.iter_mut().zip(d_row) {
                *g += av * d;
            }
        }
    }
    dw
}

fn row_view(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

pub(crate) fn softmax_rows(x: &[f32], rows: usize, cols: usize, temperature: f32) -> Vec<f32> {
    let inv_t = 1.0 / temperature as f64;
    let mut out = vec![0.0f32; x.len()];
    let mut scratch = vec![0.0f64; cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64 * inv_t;
        let mut sum = 0.0f64;
        for (s, &v) in scratch.iter_mut().zip(row) {
            *s = (v as f64 * inv_t - max).exp();
            sum += *s;
        }
        for (o, s) in out[r * cols..(r + 1) * cols].iter_mut().zip(&scratch) {
            *o = (s / sum) as f32;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f32], rows: usize, cols: usize, temperature: f32) -> Vec<f32> {
    let inv_t = 1.0 / temperature as f64;
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64 * inv_t;
        let lse = row
            .iter()
            .map(|&v| (v as f64 * inv_t - max).exp())
            .sum::<f64>()
            .ln();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v as f64 * inv_t - max - lse) as f32;
        }
    }
    out
}

/// Row-wise softmax of `logits / T`.
pub fn softmax_t(logits: &Tensor, temperature: f32) -> Result<Tensor> {
    check_temperature(temperature)?;
    let (r, c) = row_view(logits);
    Tensor::new(
        logits.shape().to_vec(),
        softmax_rows(logits.values(), r, c, temperature),
    )
}

/// Row-wise log-softmax of `logits / T` in max-subtracted form.
pub fn log_softmax_t(logits: &Tensor, temperature: f32) -> Result<Tensor> {
    check_temperature(temperature)?;
    let (r, c) = row_view(logits);
    Tensor::new(
        logits.shape().to_vec(),
        log_softmax_rows(logits.values(), r, c, temperature),
    )
}

pub(crate) fn cross_entropy_value(logits: &[f32], rows: usize, cols: usize, labels: &[usize]) -> f64 {
    let logp = log_softmax_rows(logits, rows, cols, 1.0);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -(logp[i * cols + l] as f64))
        .sum();
    total / rows as f64
}

/// Batch-mean cross-entropy of the `T = 1` softmax against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &LabelBatch) -> Result<f32> {
    check_ce_inputs(logits, labels)?;
    let (r, c) = row_view(logits);
    Ok(cross_entropy_value(logits.values(), r, c, labels.labels()) as f32)
}

pub(crate) fn check_ce_inputs(logits: &Tensor, labels: &LabelBatch) -> Result<()> {
    let (r, c) = row_view(logits);
    if c != labels.classes() {
        return Err(Error::dim("cross_entropy (classes)", labels.classes(), c));
    }
    if r != labels.len() {
        return Err(Error::dim("cross_entropy (batch)", labels.len(), r));
    }
    Ok(())
}

pub(crate) fn kl_value(p: &[f32], logq: &[f32], rows: usize) -> f64 {
    let total: f64 = p
        .iter()
        .zip(logq)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &lq)| pv as f64 * ((pv as f64).ln() - lq as f64))
        .sum();
    total / rows as f64
}

pub(crate) fn check_kl_inputs(p_t: &Tensor, log_p_s: &Tensor) -> Result<()> {
    if p_t.shape() != log_p_s.shape() {
        return Err(Error::dim(
            "kl_div",
            format!("{:?}", p_t.shape()),
            format!("{:?}", log_p_s.shape()),
        ));
    }
    if let Some(v) = p_t.values().iter().find(|&&v| v.is_nan() || v < 0.0) {
        return Err(Error::Data(format!(
            "kl_div target distribution has invalid entry {v}"
        )));
    }
    Ok(())
}

/// `KL(p_t ‖ p_s)` per row, averaged over the batch, with `0·ln 0 := 0`.
pub fn kl_div(p_t: &Tensor, log_p_s: &Tensor) -> Result<f32> {
    check_kl_inputs(p_t, log_p_s)?;
    Ok(kl_value(p_t.values(), log_p_s.values(), p_t.rows()) as f32)
}

pub(crate) fn mse_value(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// Mean squared difference; for matrices this is the batch mean of per-row means.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "mse",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(mse_value(a.values(), b.values()) as f32)
}
