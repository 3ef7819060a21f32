//! Batch normalization with double-mask selection.
//!
//! Activations arrive in row layout `[rows, n_K]` (one column per channel).
//! The selection mask is applied to the normalized output so that BN's shift
//! cannot reintroduce activations at unselected positions.

use crate::error::{DsgError, Result};
use crate::select::SelectionMask;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps_num: f32,
    /// Compute batch statistics only over selected positions instead of
    /// over all positions (masked zeros included). Off by default.
    pub stats_over_mask: bool,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps_num: BN_EPS,
            stats_over_mask: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub training: bool,
    pub mean: Vec<f32>,
    /// Biased batch variance (training) or running variance (eval).
    pub var: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// Positions contributing to each channel's statistics.
    pub counts: Vec<usize>,
}

fn check(s: &Tensor, bn: &BnParams, mask: &SelectionMask) -> Result<(usize, usize)> {
    let (rows, c) = s.dims2("batch_norm")?;
    if c != bn.channels() || mask.rows() != rows || mask.n_k() != c {
        return Err(DsgError::dim(
            "batch_norm",
            s.shape(),
            &[mask.rows(), bn.channels()],
        ));
    }
    if rows == 0 {
        return Err(DsgError::Empty("batch_norm"));
    }
    Ok((rows, c))
}

/// Normalizes `s`, then multiplies by the mask. Training mode uses batch
/// statistics; eval mode uses the running statistics. Running statistics
/// are not touched here, see [`update_running_stats`].
pub fn bn_forward(
    s: &Tensor,
    bn: &BnParams,
    mask: &SelectionMask,
    training: bool,
) -> Result<(Tensor, BnCache)> {
    let (rows, c) = check(s, bn, mask)?;
    let data = s.data();
    let bits = mask.bits();
    let (mean, var, counts) = if training {
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        let mut counts = vec![0usize; c];
        for r in 0..rows {
            for j in 0..c {
                let i = r * c + j;
                if !bn.stats_over_mask || bits[i] != 0 {
                    let v = data[i] as f64;
                    sum[j] += v;
                    sq[j] += v * v;
                    counts[j] += 1;
                }
            }
        }
        let mut mean = vec![0f32; c];
        let mut var = vec![0f32; c];
        for j in 0..c {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                let mu = sum[j] / n;
                mean[j] = mu as f32;
                var[j] = (sq[j] / n - mu * mu).max(0.0) as f32;
            }
        }
        (mean, var, counts)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone(), vec![rows; c])
    };
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + bn.eps_num).sqrt()).collect();
    let mut out = vec![0f32; rows * c];
    for r in 0..rows {
        for j in 0..c {
            let i = r * c + j;
            if bits[i] != 0 {
                out[i] = bn.scale[j] * (data[i] - mean[j]) * inv_std[j] + bn.shift[j];
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![rows, c], out),
        BnCache {
            training,
            mean,
            var,
            inv_std,
            counts,
        },
    ))
}

/// Momentum update of running statistics from a training-mode cache.
/// The running variance uses the unbiased estimate.
pub fn update_running_stats(bn: &mut BnParams, cache: &BnCache) {
    if !cache.training {
        return;
    }
    let m = bn.momentum;
    for j in 0..bn.channels() {
        let n = cache.counts[j];
        if n == 0 {
            continue;
        }
        let unbiased = if n > 1 {
            cache.var[j] * n as f32 / (n - 1) as f32
        } else {
            cache.var[j]
        };
        bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * cache.mean[j];
        bn.running_var[j] = (1.0 - m) * bn.running_var[j] + m * unbiased;
    }
}

/// Gradients of the masked BN output with respect to its input and affine
/// parameters. `g_out` must already carry the output mask; the returned input
/// gradient is masked as well.
pub fn bn_backward(
    g_out: &Tensor,
    s: &Tensor,
    cache: &BnCache,
    bn: &BnParams,
    mask: &SelectionMask,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let (rows, c) = check(s, bn, mask)?;
    if g_out.shape() != s.shape() {
        return Err(DsgError::dim("bn_backward", g_out.shape(), s.shape()));
    }
    let g = g_out.data();
    let x = s.data();
    let bits = mask.bits();
    let in_stats = |i: usize| !bn.stats_over_mask || bits[i] != 0;

    let mut g_shift = vec![0f64; c];
    let mut g_scale = vec![0f64; c];
    for r in 0..rows {
        for j in 0..c {
            let i = r * c + j;
            let xhat = ((x[i] - cache.mean[j]) * cache.inv_std[j]) as f64;
            g_shift[j] += g[i] as f64;
            g_scale[j] += g[i] as f64 * xhat;
        }
    }
    // Sums restricted to the positions that entered the statistics.
    let (mut sg, mut sgx) = (vec![0f64; c], vec![0f64; c]);
    for r in 0..rows {
        for j in 0..c {
            let i = r * c + j;
            if in_stats(i) {
                let xhat = ((x[i] - cache.mean[j]) * cache.inv_std[j]) as f64;
                sg[j] += g[i] as f64;
                sgx[j] += g[i] as f64 * xhat;
            }
        }
    }
    let mut out = vec![0f32; rows * c];
    for r in 0..rows {
        for j in 0..c {
            let i = r * c + j;
            if bits[i] == 0 {
                continue;
            }
            let k = bn.scale[j] as f64 * cache.inv_std[j] as f64;
            out[i] = if cache.training {
                let n = cache.counts[j] as f64;
                let xhat = ((x[i] - cache.mean[j]) * cache.inv_std[j]) as f64;
                (k * (g[i] as f64 - sg[j] / n - xhat * sgx[j] / n)) as f32
            } else {
                (k * g[i] as f64) as f32
            };
        }
    }
    Ok((
        Tensor::from_parts(vec![rows, c], out),
        g_scale.into_iter().map(|v| v as f32).collect(),
        g_shift.into_iter().map(|v| v as f32).collect(),
    ))
}
