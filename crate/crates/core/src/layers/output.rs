//! Final dense linear layer. No mask, no BN, no activation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::counters::OpCounters;
use crate::error::{DsgError, Result};
use crate::layers::dsg::mix_seed;
use crate::ops::{matmul_nt, sparse_matmul_nn, weight_grad};
use crate::select::SelectionMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct OutputLayer {
    pub name: String,
    /// `[classes, n_C]`.
    weights: Tensor,
}

impl OutputLayer {
    pub fn new(name: impl Into<String>, n_c: usize, classes: usize, seed: u64) -> Self {
        let bound = (6.0 / n_c as f64).sqrt() as f32;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
        let w = (0..classes * n_c).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            name: name.into(),
            weights: Tensor::from_parts(vec![classes, n_c], w),
        }
    }

    /// Builds from weights laid out `[classes, n_C]`.
    pub fn from_weights(name: impl Into<String>, weights: Tensor) -> Result<Self> {
        weights.dims2("output_layer")?;
        Ok(Self {
            name: name.into(),
            weights,
        })
    }

    pub fn n_c(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn forward(&self, x: &Tensor, counters: &OpCounters) -> Result<Tensor> {
        let (m, c) = x.dims2("output_forward")?;
        if c != self.n_c() {
            return Err(DsgError::dim("output_forward", x.shape(), self.weights.shape()));
        }
        OpCounters::add(
            &counters.macs_dense_forward,
            (m * c * self.classes()) as u64,
        );
        matmul_nt(x, &self.weights)
    }

    /// Returns `(G_X_prev, G_W)`; the propagated error is masked with the
    /// previous layer's mask when one is given.
    pub fn backward(
        &self,
        x: &Tensor,
        g_logits: &Tensor,
        prev_mask: Option<&SelectionMask>,
        counters: &OpCounters,
    ) -> Result<(Tensor, Tensor)> {
        let (m, k) = g_logits.dims2("output_backward")?;
        if k != self.classes() || x.shape() != [m, self.n_c()] {
            return Err(DsgError::dim("output_backward", g_logits.shape(), x.shape()));
        }
        let g_w = weight_grad(g_logits, x, counters)?;
        let mut g_x = sparse_matmul_nn(g_logits, &self.weights, None, counters)?;
        if let Some(pm) = prev_mask {
            pm.apply_rows(&mut g_x)?;
        }
        Ok((g_x, g_w))
    }
}
