//! Analytic MAC model, the dimension-reduction search cost table, and
//! memory footprint accounting.
//!
//! MMAC means 2²⁰ MACs throughout.

use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::error::{DsgError, Result};
use crate::layers::{DsgKind, DsgLayer};
use crate::model::{ForwardOptions, LayerContext, Model};
use crate::projection::reduced_dim;
use crate::select::SelectionMode;
use crate::tensor::Tensor;
use crate::train::loss_softmax_xent;
use crate::zvc::zvc_encode;

pub const MMAC: f64 = 1_048_576.0;

pub fn to_mmacs(macs: f64) -> f64 {
    macs / MMAC
}

/// Forward MACs of one layer: low-dimensional search, selected
/// high-dimensional columns, and the dense baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ForwardMacs {
    pub search: f64,
    pub selected: f64,
    pub baseline: f64,
}

impl ForwardMacs {
    pub fn total(&self) -> f64 {
        self.search + self.selected
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BackwardMacs {
    pub error_prop: f64,
    pub weight_grad: f64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DsgError::param("gamma", format!("{gamma} not in [0, 1]")));
    }
    Ok(())
}

fn forward_macs(rows: f64, n_k: usize, d: usize, k: usize, gamma: f64) -> Result<ForwardMacs> {
    check_gamma(gamma)?;
    if k > d {
        return Err(DsgError::param("k", format!("{k} exceeds input width {d}")));
    }
    let (n_k, d) = (n_k as f64, d as f64);
    Ok(ForwardMacs {
        search: rows * n_k * k as f64,
        selected: rows * n_k * (1.0 - gamma) * d,
        baseline: rows * n_k * d,
    })
}

/// `search = m·n_PQ·n_K·k`, `selected = m·n_PQ·n_K·(1−γ)·n_CRS`,
/// `baseline = m·n_PQ·n_K·n_CRS`.
pub fn macs_conv_forward(geom: &ConvGeometry, m: usize, k: usize, gamma: f64) -> Result<ForwardMacs> {
    forward_macs((m * geom.n_pq()) as f64, geom.n_k, geom.n_crs(), k, gamma)
}

pub fn macs_fc_forward(n_c: usize, n_k: usize, m: usize, k: usize, gamma: f64) -> Result<ForwardMacs> {
    forward_macs(m as f64, n_k, n_c, k, gamma)
}

/// Error propagation scales with the kept fraction; the weight gradient is
/// counted dense.
pub fn macs_backward(layer: &DsgLayer, m: usize, gamma: f64) -> Result<BackwardMacs> {
    check_gamma(gamma)?;
    let k = layer.kind();
    let dense = (m * k.rows_per_sample() * k.n_k() * k.d()) as f64;
    Ok(BackwardMacs {
        error_prop: dense * (1.0 - gamma),
        weight_grad: dense,
    })
}

/// Forward MACs of a DSG layer under its own configuration.
pub fn macs_layer_forward(layer: &DsgLayer, m: usize) -> Result<ForwardMacs> {
    let c = layer.config();
    match layer.kind() {
        DsgKind::Conv(g) => macs_conv_forward(g, m, c.k, c.gamma),
        DsgKind::Fc { n_c, n_k } => macs_fc_forward(*n_c, *n_k, m, c.k, c.gamma),
    }
}

/// Layer shapes `(n_PQ, n_CRS, n_K)` of the reference search-cost table.
pub const TABLE2_LAYERS: [(usize, usize, usize); 5] = [
    (1024, 1152, 128),
    (256, 1152, 256),
    (256, 2304, 256),
    (64, 2304, 512),
    (64, 4608, 512),
];

pub const TABLE2_EPSILONS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2Row {
    pub n_pq: usize,
    pub n_crs: usize,
    pub n_k: usize,
    pub baseline_dim: usize,
    pub dims: Vec<usize>,
    pub baseline_mmacs: f64,
    pub search_mmacs: Vec<f64>,
}

/// Reduced dimension and search cost per layer and ε, for a single sample.
pub fn table2_rows(layers: &[(usize, usize, usize)], eps: &[f64]) -> Result<Vec<Table2Row>> {
    layers
        .iter()
        .map(|&(n_pq, n_crs, n_k)| {
            let dims = eps
                .iter()
                .map(|&e| Ok(reduced_dim(e, n_k)?.min(n_crs)))
                .collect::<Result<Vec<_>>>()?;
            let search_mmacs = dims
                .iter()
                .map(|&k| to_mmacs((n_pq * n_k * k) as f64))
                .collect();
            Ok(Table2Row {
                n_pq,
                n_crs,
                n_k,
                baseline_dim: n_crs,
                dims,
                baseline_mmacs: to_mmacs((n_pq * n_crs * n_k) as f64),
                search_mmacs,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Inference,
}

/// Memory (bytes) and compute (MACs, from instrumented counters) for one
/// mini-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub phase: Phase,
    pub bytes_weights: u64,
    pub bytes_activations_raw: u64,
    pub bytes_activations_compressed: u64,
    pub bytes_masks: u64,
    pub macs_forward_search: u64,
    pub macs_forward_selected: u64,
    pub macs_backward_error: u64,
    pub macs_backward_weightgrad: u64,
    pub macs_baseline: u64,
}

impl CostReport {
    pub fn bytes_total(&self) -> u64 {
        self.bytes_weights + self.bytes_activations_compressed + self.bytes_masks
    }

    pub fn mask_overhead(&self) -> f64 {
        self.bytes_masks as f64 / self.bytes_total() as f64
    }

    pub fn activation_compression(&self) -> f64 {
        self.bytes_activations_raw as f64 / self.bytes_activations_compressed as f64
    }
}

fn activation_bytes(t: &Tensor) -> (u64, u64) {
    let b = zvc_encode(t);
    (b.raw_bytes() as u64, b.compressed_bytes() as u64)
}

/// Runs one DRS mini-batch through a copy of `model` and accounts memory
/// and compute.
///
/// Training stashes every distinct activation tensor once, zero-value
/// compressed: each weighted layer's input, each DSG layer's post-ReLU
/// pre-BN tensor `S_k`, and the input of every pooling layer; plus every
/// packed selection mask. Inference keeps only the
/// largest DSG output (compressed) and its mask. Weights are stored raw.
///
/// `gammas`, if non-empty, sets the sparsity of each DSG layer in order.
/// `labels` drive the backward pass in training phase.
pub fn footprint(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    phase: Phase,
    gammas: &[f64],
) -> Result<CostReport> {
    let mut model = model.clone();
    let n_dsg = model.dsg_layers().len();
    if !gammas.is_empty() {
        if gammas.len() != n_dsg {
            return Err(DsgError::dim("footprint_gammas", &[gammas.len()], &[n_dsg]));
        }
        for (l, &g) in model.dsg_layers_mut().into_iter().zip(gammas) {
            l.set_gamma(g)?;
        }
    }
    let training = phase == Phase::Training;
    let opts = ForwardOptions {
        training,
        ..ForwardOptions::eval(SelectionMode::Drs)
    };
    let pass = model.forward(batch, &opts)?;
    if training {
        let (_, g) = loss_softmax_xent(&pass.logits, labels)?;
        model.backward(&pass, &g)?;
    }
    let m = batch.shape()[0];

    let mut raw = 0u64;
    let mut compressed = 0u64;
    let mut masks = 0u64;
    let ctxs = pass.dsg_contexts();
    if training {
        let mut stash = |t: &Tensor| {
            let (r, z) = activation_bytes(t);
            raw += r;
            compressed += z;
        };
        for (i, c) in pass.contexts.iter().enumerate() {
            let feeds_pool = matches!(pass.contexts.get(i + 1), Some(LayerContext::Pool(_)));
            match c {
                LayerContext::Dsg(d) => {
                    stash(&d.input);
                    stash(&d.s);
                    masks += d.mask.packed_len() as u64;
                    if feeds_pool {
                        stash(&d.output);
                    }
                }
                LayerContext::Residual(a, b) => {
                    for d in [a, b] {
                        stash(&d.input);
                        stash(&d.s);
                        masks += d.mask.packed_len() as u64;
                    }
                    if feeds_pool {
                        stash(&a.input.add(&b.output)?);
                    }
                }
                LayerContext::Output(x) => stash(x),
                LayerContext::Pool(_) | LayerContext::Flatten(_) => {}
            }
        }
    } else if let Some(c) = ctxs.iter().max_by_key(|c| c.output.len()) {
        let (r, z) = activation_bytes(&c.output);
        raw = r;
        compressed = z;
        masks = c.mask.packed_len() as u64;
    }

    let snap = model.counters.snapshot();
    let mut baseline = 0u64;
    for l in model.dsg_layers() {
        let k = l.kind();
        baseline += (m * k.rows_per_sample() * k.n_k() * k.d()) as u64;
    }
    baseline += (m * model.output_layer().weights().len()) as u64;
    if training {
        // dense error propagation and weight gradient; the first layer
        // propagates no error
        let first = model
            .dsg_layers()
            .first()
            .map_or(0, |l| (m * l.kind().rows_per_sample() * l.kind().n_k() * l.kind().d()) as u64);
        baseline = 3 * baseline - first;
    }
    Ok(CostReport {
        phase,
        bytes_weights: 4 * model.weight_count() as u64,
        bytes_activations_raw: raw,
        bytes_activations_compressed: compressed,
        bytes_masks: masks,
        macs_forward_search: snap.macs_search,
        macs_forward_selected: snap.macs_selected + snap.macs_dense_forward,
        macs_backward_error: snap.macs_backward_error,
        macs_backward_weightgrad: snap.macs_backward_weightgrad,
        macs_baseline: baseline,
    })
}
