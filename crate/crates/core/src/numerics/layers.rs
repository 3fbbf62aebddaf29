use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Which statistics a normalization layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    TrainBatchStats,
    EvalRunningStats,
}

const PAR_FLOPS: usize = 1 << 18;

/// out = a (m×k) · b (k×n)
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::Shape(format!("matmul {m}x{k} · {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        for t in 0..k {
            let av = a.data[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[t * n..t * n + n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n > PAR_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// out = a (m×k) · bᵀ where b is n×k
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.dim(0), a.dim(1));
    let (n, k2) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::Shape(format!("matmul_nt {m}x{k} · ({n}x{k2})ᵀ")));
    }
    let mut out = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        let arow = &a.data[i * k..i * k + k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b.data[j * k..j * k + k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n > PAR_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// out = aᵀ (k×m) · b (m×n) where a is m×k
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.dim(0), a.dim(1));
    let (m2, n) = (b.dim(0), b.dim(1));
    if m != m2 {
        return Err(Error::Shape(format!("matmul_tn ({m}x{k})ᵀ · {m2}x{n}")));
    }
    let mut out = vec![0.0; k * n];
    let body = |p: usize, row: &mut [f64]| {
        for t in 0..m {
            let av = a.data[t * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[t * n..t * n + n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n > PAR_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(|(p, row)| body(p, row));
    } else {
        for (p, row) in out.chunks_mut(n).enumerate() {
            body(p, row);
        }
    }
    Tensor::new(vec![k, n], out)
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// out[b,j] = Σ_i input[b,i]·weight[i,j] + bias[j]
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 {
        return Err(Error::Shape("linear expects 2D input, 2D weight, 1D bias".into()));
    }
    if input.dim(1) != weight.dim(0) || weight.dim(1) != bias.dim(0) {
        return Err(Error::Shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            input.shape, weight.shape, bias.shape
        )));
    }
    let mut out = matmul(input, weight)?;
    let n = out.dim(1);
    for row in out.data.chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    out.assert_finite("linear")?;
    Ok(out)
}

/// Returns (grad_input, grad_weight, grad_bias).
pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let grad_input = matmul_nt(grad_out, weight)?;
    let grad_weight = matmul_tn(input, grad_out)?;
    let n = grad_out.dim(1);
    let mut grad_bias = vec![0.0; n];
    for row in grad_out.data.chunks(n) {
        for (g, v) in grad_bias.iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok((grad_input, grad_weight, Tensor::new(vec![n], grad_bias)?))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel running mean/variance, updated in train mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> RunningStats {
        RunningStats {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::full(vec![channels], 1.0),
            momentum: 0.1,
        }
    }
}

pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub gamma: Tensor,
    pub mode: NormMode,
}

/// (batch, channel-size, per-channel index list stride info) for B×C and B×C×N.
fn bn_dims(input: &Tensor) -> Result<(usize, usize, usize)> {
    match input.rank() {
        2 => Ok((input.dim(0), input.dim(1), 1)),
        3 => Ok((input.dim(0), input.dim(1), input.dim(2))),
        r => Err(Error::Shape(format!("batchnorm expects rank 2 or 3, got {r}"))),
    }
}

#[inline]
fn bn_index(c_dim: usize, n_dim: usize, b: usize, c: usize, n: usize) -> usize {
    (b * c_dim + c) * n_dim + n
}

/// Batch normalization over the channel axis of a B×C or B×C×N tensor.
///
/// Train mode normalizes with the batch's per-channel mean and biased
/// variance and updates `running` with momentum; eval mode uses `running`.
pub fn batchnorm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: NormMode,
    running: Option<&mut RunningStats>,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let (b_dim, c_dim, n_dim) = bn_dims(input)?;
    if gamma.len() != c_dim || beta.len() != c_dim {
        return Err(Error::Shape(format!(
            "batchnorm: {c_dim} channels, gamma {} beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    let count = b_dim * n_dim;
    let (mean, var) = match mode {
        NormMode::TrainBatchStats => {
            if count < 2 {
                return Err(Error::DegenerateBatch(count));
            }
            let mut mean = vec![0.0; c_dim];
            let mut var = vec![0.0; c_dim];
            for c in 0..c_dim {
                let mut s = 0.0;
                for b in 0..b_dim {
                    for n in 0..n_dim {
                        s += input.data[bn_index(c_dim, n_dim, b, c, n)];
                    }
                }
                let m = s / count as f64;
                let mut sq = 0.0;
                for b in 0..b_dim {
                    for n in 0..n_dim {
                        let d = input.data[bn_index(c_dim, n_dim, b, c, n)] - m;
                        sq += d * d;
                    }
                }
                mean[c] = m;
                var[c] = sq / count as f64;
            }
            if let Some(rs) = running {
                for c in 0..c_dim {
                    rs.mean.data[c] = (1.0 - rs.momentum) * rs.mean.data[c] + rs.momentum * mean[c];
                    rs.var.data[c] = (1.0 - rs.momentum) * rs.var.data[c] + rs.momentum * var[c];
                }
            }
            (mean, var)
        }
        NormMode::EvalRunningStats => {
            let rs = running.ok_or_else(|| {
                Error::Structure("batchnorm eval mode requires running stats".into())
            })?;
            (rs.mean.data.clone(), rs.var.data.clone())
        }
    };

    let mut inv_std = vec![0.0; c_dim];
    for c in 0..c_dim {
        let denom = var[c] + eps;
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::NonFinite(format!("batchnorm variance+eps = {denom}")));
        }
        inv_std[c] = 1.0 / denom.sqrt();
    }

    let mut xhat = Tensor::zeros(input.shape.clone());
    let mut out = Tensor::zeros(input.shape.clone());
    for c in 0..c_dim {
        let (m, is, g, bt) = (mean[c], inv_std[c], gamma.data[c], beta.data[c]);
        for b in 0..b_dim {
            for n in 0..n_dim {
                let idx = bn_index(c_dim, n_dim, b, c, n);
                let xh = (input.data[idx] - m) * is;
                xhat.data[idx] = xh;
                out.data[idx] = g * xh + bt;
            }
        }
    }
    out.assert_finite("batchnorm")?;
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            gamma: gamma.clone(),
            mode,
        },
    ))
}

/// Returns (grad_input, grad_gamma, grad_beta).
pub fn batchnorm_backward(cache: &BatchNormCache, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (b_dim, c_dim, n_dim) = bn_dims(grad_out)?;
    if grad_out.shape != cache.xhat.shape {
        return Err(Error::Shape("batchnorm backward: grad_out shape".into()));
    }
    let count = (b_dim * n_dim) as f64;
    let mut grad_gamma = vec![0.0; c_dim];
    let mut grad_beta = vec![0.0; c_dim];
    let mut grad_input = Tensor::zeros(grad_out.shape.clone());

    for c in 0..c_dim {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..b_dim {
            for n in 0..n_dim {
                let idx = bn_index(c_dim, n_dim, b, c, n);
                sum_g += grad_out.data[idx];
                sum_gx += grad_out.data[idx] * cache.xhat.data[idx];
            }
        }
        grad_gamma[c] = sum_gx;
        grad_beta[c] = sum_g;
        let g = cache.gamma.data[c];
        let is = cache.inv_std[c];
        match cache.mode {
            NormMode::TrainBatchStats => {
                // d/dx through batch mean and variance
                for b in 0..b_dim {
                    for n in 0..n_dim {
                        let idx = bn_index(c_dim, n_dim, b, c, n);
                        let gxhat = grad_out.data[idx] * g;
                        grad_input.data[idx] = is / count
                            * (count * gxhat - g * sum_g - cache.xhat.data[idx] * g * sum_gx);
                    }
                }
            }
            NormMode::EvalRunningStats => {
                for b in 0..b_dim {
                    for n in 0..n_dim {
                        let idx = bn_index(c_dim, n_dim, b, c, n);
                        grad_input.data[idx] = grad_out.data[idx] * g * is;
                    }
                }
            }
        }
    }
    Ok((
        grad_input,
        Tensor::new(vec![c_dim], grad_gamma)?,
        Tensor::new(vec![c_dim], grad_beta)?,
    ))
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for x in &mut out.data {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    out
}

/// Subgradient at 0 is 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut grad = grad_out.clone();
    for (g, x) in grad.data.iter_mut().zip(&input.data) {
        if *x <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// Max pool over points
// ---------------------------------------------------------------------------

/// out[b,c] = max_n input[b,c,n]; ties take the smallest n.
pub fn max_pool_points(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if input.rank() != 3 {
        return Err(Error::Shape("max_pool_points expects B×C×N".into()));
    }
    let (b_dim, c_dim, n_dim) = (input.dim(0), input.dim(1), input.dim(2));
    if n_dim < 1 {
        return Err(Error::Shape("max_pool_points: N must be ≥ 1".into()));
    }
    let mut out = Tensor::zeros(vec![b_dim, c_dim]);
    let mut argmax = vec![0usize; b_dim * c_dim];
    for b in 0..b_dim {
        for c in 0..c_dim {
            let base = (b * c_dim + c) * n_dim;
            let mut best = input.data[base];
            let mut best_n = 0;
            for n in 1..n_dim {
                let v = input.data[base + n];
                if v > best {
                    best = v;
                    best_n = n;
                }
            }
            out.data[b * c_dim + c] = best;
            argmax[b * c_dim + c] = best_n;
        }
    }
    Ok((out, argmax))
}

/// Routes grad_out (B×C) to the argmax positions of a B×C×N input.
pub fn max_pool_points_backward(grad_out: &Tensor, argmax: &[usize], n_dim: usize) -> Result<Tensor> {
    let (b_dim, c_dim) = (grad_out.dim(0), grad_out.dim(1));
    let mut grad_input = Tensor::zeros(vec![b_dim, c_dim, n_dim]);
    for bc in 0..b_dim * c_dim {
        grad_input.data[bc * n_dim + argmax[bc]] = grad_out.data[bc];
    }
    Ok(grad_input)
}

// ---------------------------------------------------------------------------
// Softmax entropy / cross-entropy
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::Shape("softmax expects B×C".into()));
    }
    let c = logits.dim(1);
    let mut probs = logits.clone();
    for row in probs.data.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Ok(probs)
}

/// Mean Shannon entropy (natural log) of the softmax predictions.
/// Returns (mean_entropy, probs); grad comes from `softmax_entropy_backward`.
pub fn softmax_entropy(logits: &Tensor) -> Result<(f64, Tensor)> {
    if logits.dim(1) < 2 {
        return Err(Error::Shape("softmax_entropy needs C ≥ 2".into()));
    }
    let probs = softmax(logits)?;
    let c = probs.dim(1);
    let b = probs.dim(0);
    let mut total = 0.0;
    for row in probs.data.chunks(c) {
        for &p in row {
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    Ok((total / b as f64, probs))
}

/// grad_logits[b,k] = (1/B)·(−p_k·(ln p_k + H_b))
pub fn softmax_entropy_backward(probs: &Tensor) -> Tensor {
    let (b_dim, c_dim) = (probs.dim(0), probs.dim(1));
    let mut grad = Tensor::zeros(vec![b_dim, c_dim]);
    for (grow, prow) in grad.data.chunks_mut(c_dim).zip(probs.data.chunks(c_dim)) {
        let h: f64 = prow.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
        for (g, &p) in grow.iter_mut().zip(prow) {
            if p > 0.0 {
                *g = -(p * (p.ln() + h)) / b_dim as f64;
            }
        }
    }
    grad
}

/// Mean negative log-likelihood. Returns (loss, probs).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b_dim, c_dim) = (logits.dim(0), logits.dim(1));
    if labels.len() != b_dim {
        return Err(Error::Shape("cross_entropy: label count != batch".into()));
    }
    for &l in labels {
        if l >= c_dim {
            return Err(Error::Label {
                label: l,
                num_classes: c_dim,
            });
        }
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    for (b, &l) in labels.iter().enumerate() {
        // p is strictly positive after stable softmax unless extremely saturated
        loss -= probs.at2(b, l).max(f64::MIN_POSITIVE).ln();
    }
    Ok((loss / b_dim as f64, probs))
}

/// grad_logits = (probs − onehot)/B
pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Tensor {
    let (b_dim, c_dim) = (probs.dim(0), probs.dim(1));
    let mut grad = probs.clone();
    for (b, &l) in labels.iter().enumerate() {
        grad.data[b * c_dim + l] -= 1.0;
    }
    for g in &mut grad.data {
        *g /= b_dim as f64;
    }
    grad
}
