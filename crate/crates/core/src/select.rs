//! Dimension-reduction search: virtual activations, top-k thresholds and
//! binary selection masks, plus oracle/random baselines and mask metrics.
//!
//! Tie-breaking everywhere is "lower flat index wins", and keep counts are
//! `max(1, round((1 − γ)·n))` with half-away-from-zero rounding.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counters::OpCounters;
use crate::error::{DsgError, Result};
use crate::projection::reduced_dim;
use crate::tensor::{dot, Tensor};

/// Binary `rows × n_K` selection matrix. Rows are grouped into samples of
/// `rows_per_sample` consecutive rows (sliding windows for conv, 1 for FC).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    rows: usize,
    n_k: usize,
    rows_per_sample: usize,
    bits: Vec<u8>,
}

impl SelectionMask {
    pub fn ones(rows: usize, n_k: usize) -> Self {
        Self {
            rows,
            n_k,
            rows_per_sample: 1,
            bits: vec![1; rows * n_k],
        }
    }

    pub fn from_bits(rows: usize, n_k: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != rows * n_k {
            return Err(DsgError::dim("mask", &[bits.len()], &[rows * n_k]));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(DsgError::param("mask", "entries must be 0 or 1"));
        }
        Ok(Self {
            rows,
            n_k,
            rows_per_sample: 1,
            bits,
        })
    }

    /// Groups consecutive rows into samples.
    pub fn grouped(mut self, rows_per_sample: usize) -> Result<Self> {
        if rows_per_sample == 0 || self.rows % rows_per_sample != 0 {
            return Err(DsgError::param(
                "rows_per_sample",
                format!("{rows_per_sample} does not divide {}", self.rows),
            ));
        }
        self.rows_per_sample = rows_per_sample;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn rows_per_sample(&self) -> usize {
        self.rows_per_sample
    }

    pub fn samples(&self) -> usize {
        self.rows / self.rows_per_sample
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, r: usize, j: usize) -> bool {
        self.bits[r * self.n_k + j] != 0
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.bits[r * self.n_k..(r + 1) * self.n_k]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn row_popcount(&self, r: usize) -> usize {
        self.row(r).iter().filter(|&&b| b != 0).count()
    }

    /// Fraction of zero entries (achieved sparsity).
    pub fn sparsity(&self) -> f64 {
        1.0 - self.popcount() as f64 / self.bits.len() as f64
    }

    /// Packed bitmap, row-major, least-significant bit first within a byte.
    pub fn to_packed(&self) -> Vec<u8> {
        pack_bits(self.bits.iter().map(|&b| b != 0), self.bits.len())
    }

    pub fn from_packed(rows: usize, n_k: usize, packed: &[u8]) -> Result<Self> {
        let n = rows * n_k;
        if packed.len() != n.div_ceil(8) {
            return Err(DsgError::Corrupt(format!(
                "packed mask is {} bytes, expected {}",
                packed.len(),
                n.div_ceil(8)
            )));
        }
        let bits = (0..n).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
        Self::from_bits(rows, n_k, bits)
    }

    pub fn packed_len(&self) -> usize {
        self.bits.len().div_ceil(8)
    }

    /// Zeroes entries of a `[rows, n_K]` tensor where the mask is 0.
    pub fn apply_rows(&self, t: &mut Tensor) -> Result<()> {
        if t.shape() != [self.rows, self.n_k] {
            return Err(DsgError::dim("mask_rows", t.shape(), &[self.rows, self.n_k]));
        }
        for (v, &b) in t.data_mut().iter_mut().zip(&self.bits) {
            if b == 0 {
                *v = 0.0;
            }
        }
        Ok(())
    }

    /// Zeroes entries of an activation tensor laid out as `[m, n_K]` or
    /// `[m, n_K, p, q]` (rows ordered sample, then spatial position).
    pub fn apply_activation(&self, t: &mut Tensor) -> Result<()> {
        match *t.shape() {
            [_, _] => self.apply_rows(t),
            [m, k, p, q] if m * p * q == self.rows && k == self.n_k => {
                let pq = p * q;
                let data = t.data_mut();
                for n in 0..m {
                    for s in 0..pq {
                        let r = n * pq + s;
                        for c in 0..k {
                            if self.bits[r * k + c] == 0 {
                                data[(n * k + c) * pq + s] = 0.0;
                            }
                        }
                    }
                }
                Ok(())
            }
            _ => Err(DsgError::dim("mask_activation", t.shape(), &[self.rows, self.n_k])),
        }
    }

    /// True if every nonzero of the activation tensor lies inside the mask.
    pub fn covers_support(&self, t: &Tensor) -> bool {
        let mut masked = t.clone();
        if self.apply_activation(&mut masked).is_err() {
            return false;
        }
        masked.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn fallback_empty_rows(&mut self, values: &Tensor) {
        for r in 0..self.rows {
            if self.row_popcount(r) == 0 {
                let j = argmax(values.row(r));
                self.bits[r * self.n_k + j] = 1;
            }
        }
    }
}

pub(crate) fn pack_bits(bits: impl Iterator<Item = bool>, n: usize) -> Vec<u8> {
    let mut out = vec![0u8; n.div_ceil(8)];
    for (i, b) in bits.enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Descending by value, then ascending by index.
fn rank_order(values: &[f32], a: usize, b: usize) -> Ordering {
    values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

/// Number of entries kept out of `n` at sparsity `gamma`.
pub fn keep_count(gamma: f64, n: usize) -> usize {
    (((1.0 - gamma) * n as f64).round() as usize).clamp(1, n.max(1))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(DsgError::param("gamma", format!("{gamma} not in [0, 1)")));
    }
    Ok(())
}

/// How neurons are selected at each DSG layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Dimension-reduction search on projected activations.
    Drs,
    /// Top-k on the exact pre-activations.
    Oracle,
    /// Uniformly random subset per row.
    Random,
    /// No selection (all-ones masks).
    Dense,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Drs => "drs",
            SelectionMode::Oracle => "oracle",
            SelectionMode::Random => "random",
            SelectionMode::Dense => "dense",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = DsgError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drs" => Ok(Self::Drs),
            "oracle" => Ok(Self::Oracle),
            "random" => Ok(Self::Random),
            "dense" => Ok(Self::Dense),
            _ => Err(DsgError::param("selection_mode", format!("unknown mode `{s}`"))),
        }
    }
}

/// Per-layer selection configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsgConfig {
    pub gamma: f64,
    pub epsilon: f64,
    /// Reduced dimension, `reduced_dim(epsilon, n_K)` clamped to the input width.
    pub k: usize,
    pub refresh_interval: u64,
    pub threshold_sharing: bool,
}

impl DsgConfig {
    pub fn new(gamma: f64, epsilon: f64, n_k: usize, d: usize) -> Result<Self> {
        check_gamma(gamma)?;
        let k = reduced_dim(epsilon, n_k.max(2))?.min(d);
        Ok(Self {
            gamma,
            epsilon,
            k,
            refresh_interval: 50,
            threshold_sharing: true,
        })
    }
}

/// Plain matrix product of `fX: [rows, k]` and `fW: [k, n_K]`.
pub fn virtual_activations(fx: &Tensor, fw: &Tensor) -> Result<Tensor> {
    virtual_activations_t(fx, &fw.transpose()?, &OpCounters::new())
}

/// Same as [`virtual_activations`] with the projected weights stored one
/// neuron per row (`[n_K, k]`).
pub(crate) fn virtual_activations_t(
    fx: &Tensor,
    fw_t: &Tensor,
    counters: &OpCounters,
) -> Result<Tensor> {
    let (rows, k) = fx.dims2("virtual_activations")?;
    let (n_k, k2) = fw_t.dims2("virtual_activations")?;
    if k != k2 {
        return Err(DsgError::dim("virtual_activations", fx.shape(), &[k2, n_k]));
    }
    let mut out = vec![0.0f32; rows * n_k];
    for r in 0..rows {
        let xr = fx.row(r);
        for (j, o) in out[r * n_k..(r + 1) * n_k].iter_mut().enumerate() {
            *o = dot(xr, fw_t.row(j));
        }
    }
    OpCounters::add(&counters.macs_search, (rows * n_k * k) as u64);
    Ok(Tensor::from_parts(vec![rows, n_k], out))
}

/// The `keep`-th largest element of the flattened first-sample virtual
/// activations, `keep = max(1, round((1 − γ)·n_PQ·n_K))`.
pub fn shared_threshold(first_sample: &Tensor, gamma: f64) -> Result<f32> {
    check_gamma(gamma)?;
    if first_sample.is_empty() {
        return Err(DsgError::Empty("shared_threshold"));
    }
    let v = first_sample.data();
    let keep = keep_count(gamma, v.len());
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.select_nth_unstable_by(keep - 1, |&a, &b| rank_order(v, a, b));
    Ok(v[idx[keep - 1]])
}

/// `bits[r, j] = virtual[r, j] >= threshold`; a row left empty keeps its
/// single largest entry.
pub fn build_mask(virt: &Tensor, threshold: f32) -> Result<SelectionMask> {
    let (rows, n_k) = virt.dims2("build_mask")?;
    let bits = virt.data().iter().map(|&v| (v >= threshold) as u8).collect();
    let mut m = SelectionMask::from_bits(rows, n_k, bits)?;
    m.fallback_empty_rows(virt);
    Ok(m)
}

/// Threshold-shared mask for a batch whose samples each span
/// `rows_per_sample` rows. The threshold comes from sample 0. Entries equal
/// to the threshold are admitted in flat-index order up to the number of
/// ties sample 0 needs, so sample 0 keeps exactly `keep` entries even with
/// ties and every sample applies the same rule.
pub fn shared_threshold_mask(
    virt: &Tensor,
    rows_per_sample: usize,
    gamma: f64,
) -> Result<SelectionMask> {
    let (rows, n_k) = virt.dims2("shared_threshold_mask")?;
    if rows_per_sample == 0 || rows % rows_per_sample != 0 {
        return Err(DsgError::param("rows_per_sample", "must divide row count"));
    }
    let span = rows_per_sample * n_k;
    if keep_count(gamma, span) == span {
        // nothing to drop; a threshold from sample 0 could still cut others
        check_gamma(gamma)?;
        return SelectionMask::from_bits(rows, n_k, vec![1; rows * n_k])?.grouped(rows_per_sample);
    }
    let first = Tensor::from_parts(vec![rows_per_sample, n_k], virt.data()[..span].to_vec());
    let thr = shared_threshold(&first, gamma)?;
    let keep = keep_count(gamma, span);
    let greater = first.data().iter().filter(|&&v| v > thr).count();
    let tie_quota = keep - greater;
    let mut bits = vec![0u8; rows * n_k];
    for (chunk, out) in virt.data().chunks(span).zip(bits.chunks_mut(span)) {
        let mut ties = 0;
        for (v, b) in chunk.iter().zip(out.iter_mut()) {
            if *v > thr {
                *b = 1;
            } else if *v == thr && ties < tie_quota {
                *b = 1;
                ties += 1;
            }
        }
    }
    let mut m = SelectionMask::from_bits(rows, n_k, bits)?.grouped(rows_per_sample)?;
    m.fallback_empty_rows(virt);
    Ok(m)
}

/// Each row independently keeps its `max(1, round((1 − γ)·n_K))` largest
/// entries.
pub fn per_row_topk_mask(values: &Tensor, gamma: f64) -> Result<SelectionMask> {
    check_gamma(gamma)?;
    let (rows, n_k) = values.dims2("per_row_topk_mask")?;
    let keep = keep_count(gamma, n_k);
    let mut bits = vec![0u8; rows * n_k];
    let mut idx: Vec<usize> = Vec::with_capacity(n_k);
    for r in 0..rows {
        let row = values.row(r);
        let out = &mut bits[r * n_k..(r + 1) * n_k];
        if keep == n_k {
            out.fill(1);
            continue;
        }
        idx.clear();
        idx.extend(0..n_k);
        idx.select_nth_unstable_by(keep - 1, |&a, &b| rank_order(row, a, b));
        for &j in &idx[..keep] {
            out[j] = 1;
        }
    }
    SelectionMask::from_bits(rows, n_k, bits)
}

/// Top-k on exact high-dimensional pre-activations.
pub fn oracle_mask(true_preacts: &Tensor, gamma: f64) -> Result<SelectionMask> {
    per_row_topk_mask(true_preacts, gamma)
}

/// Per row, a uniformly random subset of `keep_count(γ, n_K)` neurons.
pub fn random_mask(rows: usize, n_k: usize, gamma: f64, seed: u64) -> Result<SelectionMask> {
    check_gamma(gamma)?;
    let keep = keep_count(gamma, n_k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = vec![0u8; rows * n_k];
    for r in 0..rows {
        for j in rand::seq::index::sample(&mut rng, n_k, keep).iter() {
            bits[r * n_k + j] = 1;
        }
    }
    SelectionMask::from_bits(rows, n_k, bits)
}

/// Batch-averaged L1 norm of the mask difference.
pub fn mask_change_l1(a: &SelectionMask, b: &SelectionMask) -> Result<f64> {
    if a.rows != b.rows || a.n_k != b.n_k || a.rows_per_sample != b.rows_per_sample {
        return Err(DsgError::dim(
            "mask_change_l1",
            &[a.rows, a.n_k, a.rows_per_sample],
            &[b.rows, b.n_k, b.rows_per_sample],
        ));
    }
    let diff = a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.samples() as f64)
}

/// Mean L1 difference between the mask slices of adjacent samples.
pub fn adjacent_sample_change(m: &SelectionMask) -> f64 {
    let span = m.rows_per_sample * m.n_k;
    let samples = m.samples();
    if samples < 2 {
        return 0.0;
    }
    let total: usize = (0..samples - 1)
        .map(|s| {
            let a = &m.bits[s * span..(s + 1) * span];
            let b = &m.bits[(s + 1) * span..(s + 2) * span];
            a.iter().zip(b).filter(|(x, y)| x != y).count()
        })
        .sum();
    total as f64 / (samples - 1) as f64
}

/// Mean over rows of `|selected ∩ reference| / |reference|`.
pub fn overlap_fraction(selected: &SelectionMask, reference: &SelectionMask) -> Result<f64> {
    if selected.rows != reference.rows || selected.n_k != reference.n_k {
        return Err(DsgError::dim(
            "overlap_fraction",
            &[selected.rows, selected.n_k],
            &[reference.rows, reference.n_k],
        ));
    }
    let mut acc = 0.0;
    for r in 0..selected.rows {
        let both = selected
            .row(r)
            .iter()
            .zip(reference.row(r))
            .filter(|(a, b)| **a != 0 && **b != 0)
            .count();
        acc += both as f64 / reference.row_popcount(r).max(1) as f64;
    }
    Ok(acc / selected.rows as f64)
}
