//! Convolution and fully-connected layers with dimension-reduction search.
//!
//! Forward pipeline for one layer:
//!
//! ```text
//! im2col (conv) → project rows → virtual activations → mask
//!   → masked VMM → ReLU → BN → same mask again → output
//! ```
//!
//! Backward follows the mirrored path: the incoming gradient is masked, run
//! through BN backward, masked again, gated by the ReLU derivative, and then
//! used for a dense weight gradient and a sparse error propagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{col2im, im2col, nchw_to_rows, rows_to_nchw, ConvGeometry};
use crate::counters::OpCounters;
use crate::error::{DsgError, Result};
use crate::layers::bn::{bn_backward, bn_forward, update_running_stats, BnCache, BnParams};
use crate::ops::{masked_matmul_nt, matmul_nt, sparse_matmul_nn, weight_grad};
use crate::projection::{make_projection, ProjectionMatrix, DEFAULT_S};
use crate::select::{
    per_row_topk_mask, random_mask, shared_threshold_mask, DsgConfig, SelectionMask, SelectionMode,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsgKind {
    Conv(ConvGeometry),
    Fc { n_c: usize, n_k: usize },
}

impl DsgKind {
    /// Width of one lowered input row (`n_CRS` or `n_C`).
    pub fn d(&self) -> usize {
        match self {
            DsgKind::Conv(g) => g.n_crs(),
            DsgKind::Fc { n_c, .. } => *n_c,
        }
    }

    pub fn n_k(&self) -> usize {
        match self {
            DsgKind::Conv(g) => g.n_k,
            DsgKind::Fc { n_k, .. } => *n_k,
        }
    }

    /// Rows per sample (`n_PQ` or 1).
    pub fn rows_per_sample(&self) -> usize {
        match self {
            DsgKind::Conv(g) => g.n_pq(),
            DsgKind::Fc { .. } => 1,
        }
    }
}

/// Pipeline stages, recorded in execution order for inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Im2col,
    Project,
    Search,
    Select,
    MaskedVmm,
    Relu,
    BatchNorm,
    SecondMask,
}

#[derive(Debug, Clone)]
pub struct DsgLayer {
    pub name: String,
    kind: DsgKind,
    /// `[n_K, d]`: one flattened filter per row.
    weights: Tensor,
    projection: ProjectionMatrix,
    /// `[n_K, k]` projected filters, refreshed on a schedule.
    projected: Tensor,
    config: DsgConfig,
    bn: Option<BnParams>,
    seed: u64,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct DsgContext {
    pub m: usize,
    /// Layer input as received.
    pub input: Tensor,
    /// Lowered input `[rows, d]` (conv only; FC uses `input`).
    pub cols: Option<Tensor>,
    /// Post-mask, post-ReLU, pre-BN activations `[rows, n_K]`.
    pub s: Tensor,
    pub mask: SelectionMask,
    pub bn_cache: Option<BnCache>,
    /// Layer output (after the second mask), in activation layout.
    pub output: Tensor,
    pub stages: Vec<Stage>,
}

pub struct DsgGrads {
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub scale: Option<Vec<f32>>,
    pub shift: Option<Vec<f32>>,
    /// `Mask ⊙ BN_grad(...)`, row layout.
    pub g_s: Tensor,
}

pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-call selection inputs.
#[derive(Debug, Clone, Copy)]
pub struct SelectOptions<'a> {
    pub mode: SelectionMode,
    pub training: bool,
    /// Iteration index; varies random masks between calls.
    pub step: u64,
    pub mask_override: Option<&'a SelectionMask>,
}

impl DsgLayer {
    /// Kaiming-uniform weights, seeded projection, optional BN.
    pub fn new(
        name: impl Into<String>,
        kind: DsgKind,
        gamma: f64,
        epsilon: f64,
        with_bn: bool,
        seed: u64,
    ) -> Result<Self> {
        let (d, n_k) = (kind.d(), kind.n_k());
        let config = DsgConfig::new(gamma, epsilon, n_k, d)?;
        let bound = (6.0 / d as f64).sqrt() as f32;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
        let w = (0..n_k * d).map(|_| rng.gen_range(-bound..bound)).collect();
        let weights = Tensor::from_parts(vec![n_k, d], w);
        let projection = make_projection(d, config.k, DEFAULT_S, mix_seed(seed, 2))?;
        let mut layer = Self {
            name: name.into(),
            kind,
            projected: Tensor::zeros([n_k, projection.k()]),
            weights,
            projection,
            config,
            bn: with_bn.then(|| BnParams::new(n_k)),
            seed,
        };
        layer.refresh_projected_weights();
        Ok(layer)
    }

    pub fn kind(&self) -> &DsgKind {
        &self.kind
    }

    pub fn config(&self) -> &DsgConfig {
        &self.config
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    /// Replaces the weights (`[n_K, d]`) without refreshing the projection.
    pub fn set_weights(&mut self, w: Tensor) -> Result<()> {
        if w.shape() != self.weights.shape() {
            return Err(DsgError::dim("set_weights", w.shape(), self.weights.shape()));
        }
        self.weights = w;
        Ok(())
    }

    /// The weight matrix in its logical `[d, n_K]` orientation.
    pub fn weight_matrix(&self) -> Tensor {
        self.weights.transpose().expect("rank-2 weights")
    }

    /// Weights and BN parameters borrowed together for an optimizer step.
    pub fn params_mut(&mut self) -> (&mut Tensor, Option<&mut BnParams>) {
        (&mut self.weights, self.bn.as_mut())
    }

    pub fn bn(&self) -> Option<&BnParams> {
        self.bn.as_ref()
    }

    pub fn bn_mut(&mut self) -> Option<&mut BnParams> {
        self.bn.as_mut()
    }

    pub fn projection(&self) -> &ProjectionMatrix {
        &self.projection
    }

    /// Projected weights in `[k, n_K]` orientation.
    pub fn projected_weights(&self) -> Tensor {
        self.projected.transpose().expect("rank-2")
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(DsgError::param("gamma", format!("{gamma} not in [0, 1)")));
        }
        self.config.gamma = gamma;
        Ok(())
    }

    pub fn set_threshold_sharing(&mut self, on: bool) {
        self.config.threshold_sharing = on;
    }

    pub fn set_refresh_interval(&mut self, n: u64) {
        self.config.refresh_interval = n.max(1);
    }

    /// Re-derives `k` from a new ε and draws a fresh projection. Meant for
    /// configuration before training; the training loop never calls it.
    pub fn set_epsilon(&mut self, epsilon: f64) -> Result<()> {
        let c = DsgConfig::new(self.config.gamma, epsilon, self.kind.n_k(), self.kind.d())?;
        self.config.epsilon = epsilon;
        self.config.k = c.k;
        self.projection = make_projection(self.kind.d(), c.k, DEFAULT_S, mix_seed(self.seed, 2))?;
        self.refresh_projected_weights();
        Ok(())
    }

    /// Installs an explicit projection (e.g. an exact embedding).
    pub fn set_projection(&mut self, p: ProjectionMatrix) -> Result<()> {
        if p.d() != self.kind.d() {
            return Err(DsgError::dim("set_projection", &[p.k(), p.d()], &[self.config.k, self.kind.d()]));
        }
        self.config.k = p.k();
        self.projection = p;
        self.refresh_projected_weights();
        Ok(())
    }

    /// Recomputes `f(W)` from the current weights.
    pub fn refresh_projected_weights(&mut self) {
        self.projected = self
            .projection
            .project_rows(&self.weights, None)
            .expect("projection width matches weights");
    }

    fn lower(&self, x: &Tensor) -> Result<(usize, Option<Tensor>)> {
        match &self.kind {
            DsgKind::Conv(g) => {
                let cols = im2col(x, g)?;
                Ok((x.shape()[0], Some(cols)))
            }
            DsgKind::Fc { n_c, .. } => match *x.shape() {
                [m, c] if c == *n_c => Ok((m, None)),
                _ => Err(DsgError::dim(
                    "fc_forward",
                    x.shape(),
                    &[x.shape().first().copied().unwrap_or(1), *n_c],
                )),
            },
        }
    }

    /// Generates the selection mask for lowered input `cols`.
    fn select(
        &self,
        cols: &Tensor,
        opts: &SelectOptions<'_>,
        counters: &OpCounters,
        stages: &mut Vec<Stage>,
    ) -> Result<(SelectionMask, Option<Tensor>)> {
        let rows = cols.shape()[0];
        let n_k = self.kind.n_k();
        let rps = self.kind.rows_per_sample();
        let gamma = self.config.gamma;
        if let Some(m) = opts.mask_override {
            if m.rows() != rows || m.n_k() != n_k {
                return Err(DsgError::dim("mask_override", &[m.rows(), m.n_k()], &[rows, n_k]));
            }
            stages.push(Stage::Select);
            return Ok((m.clone().grouped(rps)?, None));
        }
        let out = match opts.mode {
            SelectionMode::Dense => (SelectionMask::ones(rows, n_k), None),
            SelectionMode::Drs => {
                stages.push(Stage::Project);
                let fx = self.projection.project_rows(cols, Some(counters))?;
                stages.push(Stage::Search);
                let virt = crate::select::virtual_activations_t(&fx, &self.projected, counters)?;
                let m = if self.config.threshold_sharing {
                    shared_threshold_mask(&virt, rps, gamma)?
                } else {
                    per_row_topk_mask(&virt, gamma)?
                };
                (m, None)
            }
            SelectionMode::Oracle => {
                let full = matmul_nt(cols, &self.weights)?;
                OpCounters::add(
                    &counters.macs_dense_forward,
                    (rows * n_k * self.kind.d()) as u64,
                );
                (per_row_topk_mask(&full, gamma)?, Some(full))
            }
            SelectionMode::Random => {
                let seed = mix_seed(mix_seed(self.seed, 3), opts.step);
                (random_mask(rows, n_k, gamma, seed)?, None)
            }
        };
        stages.push(Stage::Select);
        Ok((out.0.grouped(rps)?, out.1))
    }

    /// Forward pass; returns the layer output and the saved context.
    pub fn forward(
        &self,
        x: &Tensor,
        opts: &SelectOptions<'_>,
        counters: &OpCounters,
    ) -> Result<(Tensor, DsgContext)> {
        let mut stages = Vec::with_capacity(8);
        let (m, cols) = self.lower(x)?;
        if cols.is_some() {
            stages.push(Stage::Im2col);
        }
        let lowered = cols.as_ref().unwrap_or(x);
        let (mask, dense) = self.select(lowered, opts, counters, &mut stages)?;

        stages.push(Stage::MaskedVmm);
        let y = match dense {
            Some(mut full) => {
                mask.apply_rows(&mut full)?;
                full
            }
            None => masked_matmul_nt(lowered, &self.weights, &mask, counters)?,
        };
        stages.push(Stage::Relu);
        let s = crate::ops::relu(&y);

        let (z, bn_cache) = match &self.bn {
            Some(bn) => {
                stages.push(Stage::BatchNorm);
                let (z, cache) = bn_forward(&s, bn, &mask, opts.training)?;
                stages.push(Stage::SecondMask);
                (z, Some(cache))
            }
            None => (s.clone(), None),
        };
        let output = match &self.kind {
            DsgKind::Conv(g) => rows_to_nchw(&z, m, g.n_p(), g.n_q())?,
            DsgKind::Fc { .. } => z,
        };
        Ok((
            output.clone(),
            DsgContext {
                m,
                input: x.clone(),
                cols,
                s,
                mask,
                bn_cache,
                output,
                stages,
            },
        ))
    }

    /// Folds a training-mode forward's batch statistics into BN running stats.
    pub fn commit_bn_stats(&mut self, ctx: &DsgContext) {
        if let (Some(bn), Some(cache)) = (self.bn.as_mut(), ctx.bn_cache.as_ref()) {
            update_running_stats(bn, cache);
        }
    }

    /// Backward pass. `prev_mask`, when given, is applied to the propagated
    /// input gradient; `need_input` is false for the first layer.
    pub fn backward(
        &self,
        ctx: &DsgContext,
        g_out: &Tensor,
        prev_mask: Option<&SelectionMask>,
        need_input: bool,
        counters: &OpCounters,
    ) -> Result<DsgGrads> {
        if g_out.shape() != ctx.output.shape() {
            return Err(DsgError::dim("dsg_backward", g_out.shape(), ctx.output.shape()));
        }
        let mut g = match &self.kind {
            DsgKind::Conv(_) => nchw_to_rows(g_out)?,
            DsgKind::Fc { .. } => g_out.clone(),
        };
        ctx.mask.apply_rows(&mut g)?;

        let (mut g_s, scale, shift) = match (&self.bn, &ctx.bn_cache) {
            (Some(bn), Some(cache)) => {
                let (gs, gsc, gsh) = bn_backward(&g, &ctx.s, cache, bn, &ctx.mask)?;
                (gs, Some(gsc), Some(gsh))
            }
            _ => (g, None, None),
        };
        ctx.mask.apply_rows(&mut g_s)?;

        // φ'(Y) is the positivity indicator; S = ReLU(Y) shares its support.
        let mut g_y = g_s.clone();
        for (gv, &sv) in g_y.data_mut().iter_mut().zip(ctx.s.data()) {
            if sv <= 0.0 {
                *gv = 0.0;
            }
        }
        let lowered = ctx.cols.as_ref().unwrap_or(&ctx.input);
        let g_w = weight_grad(&g_y, lowered, counters)?;

        let input = if need_input {
            let g_cols = sparse_matmul_nn(&g_y, &self.weights, Some(&ctx.mask), counters)?;
            let mut gi = match &self.kind {
                DsgKind::Conv(geom) => col2im(&g_cols, geom, ctx.m)?,
                DsgKind::Fc { .. } => g_cols,
            };
            if let Some(pm) = prev_mask {
                pm.apply_activation(&mut gi)?;
            }
            Some(gi)
        } else {
            None
        };
        Ok(DsgGrads {
            input,
            weights: g_w,
            scale,
            shift,
            g_s,
        })
    }
}
