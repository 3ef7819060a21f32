//! Sequential models built from DSG layers, pooling, flatten, residual
//! blocks and a final linear layer.

use std::fmt;

use crate::counters::OpCounters;
use crate::error::{DsgError, Result};
use crate::layers::{
    DsgContext, DsgLayer, OutputLayer, Pool2d, PoolContext, SelectOptions,
};
use crate::select::{SelectionMask, SelectionMode};
use crate::tensor::Tensor;

/// Two same-shape DSG convolutions with an identity skip: `y = x + b(a(x))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub first: DsgLayer,
    pub second: DsgLayer,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dsg(DsgLayer),
    Pool(Pool2d),
    Flatten,
    Residual(ResidualBlock),
    Output(OutputLayer),
}

#[derive(Debug, Clone)]
pub enum LayerContext {
    Dsg(DsgContext),
    Pool(PoolContext),
    Flatten(Vec<usize>),
    Residual(DsgContext, DsgContext),
    Output(Tensor),
}

/// Options for one forward call.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub mode: SelectionMode,
    pub training: bool,
    pub step: u64,
    /// One mask per DSG layer, in [`Model::dsg_layers`] order.
    pub mask_overrides: Option<&'a [SelectionMask]>,
}

impl ForwardOptions<'_> {
    pub fn train(mode: SelectionMode, step: u64) -> Self {
        Self {
            mode,
            training: true,
            step,
            mask_overrides: None,
        }
    }

    pub fn eval(mode: SelectionMode) -> Self {
        Self {
            mode,
            training: false,
            step: 0,
            mask_overrides: None,
        }
    }
}

pub struct ForwardPass {
    pub input: Tensor,
    pub logits: Tensor,
    pub contexts: Vec<LayerContext>,
}

impl ForwardPass {
    /// DSG contexts in [`Model::dsg_layers`] order.
    pub fn dsg_contexts(&self) -> Vec<&DsgContext> {
        let mut v = Vec::new();
        for c in &self.contexts {
            match c {
                LayerContext::Dsg(d) => v.push(d),
                LayerContext::Residual(a, b) => {
                    v.push(a);
                    v.push(b);
                }
                _ => {}
            }
        }
        v
    }

    pub fn masks(&self) -> Vec<SelectionMask> {
        self.dsg_contexts().into_iter().map(|c| c.mask.clone()).collect()
    }
}

/// A mutable view of one parameter tensor, for optimizers.
pub struct ParamMut<'a> {
    pub data: &'a mut [f32],
    /// Whether L2 weight decay applies (weights yes, BN affine no).
    pub decay: bool,
}

pub struct Model {
    pub name: String,
    pub layers: Vec<Layer>,
    pub counters: OpCounters,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            layers: self.layers.clone(),
            counters: OpCounters::new(),
        }
    }
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("layers", &self.layers.len())
            .finish()
    }
}

fn layer_name(layer: &Layer, i: usize) -> String {
    match layer {
        Layer::Dsg(d) => d.name.clone(),
        Layer::Pool(_) => format!("pool{i}"),
        Layer::Flatten => format!("flatten{i}"),
        Layer::Residual(b) => format!("{}+{}", b.first.name, b.second.name),
        Layer::Output(o) => o.name.clone(),
    }
}

impl Model {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>) -> Result<Self> {
        if !matches!(layers.last(), Some(Layer::Output(_))) {
            return Err(DsgError::Config("model must end with an output layer".into()));
        }
        Ok(Self {
            name: name.into(),
            layers,
            counters: OpCounters::new(),
        })
    }

    pub fn dsg_layers(&self) -> Vec<&DsgLayer> {
        let mut v = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dsg(d) => v.push(d),
                Layer::Residual(b) => {
                    v.push(&b.first);
                    v.push(&b.second);
                }
                _ => {}
            }
        }
        v
    }

    pub fn dsg_layers_mut(&mut self) -> Vec<&mut DsgLayer> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dsg(d) => v.push(d),
                Layer::Residual(b) => {
                    v.push(&mut b.first);
                    v.push(&mut b.second);
                }
                _ => {}
            }
        }
        v
    }

    pub fn output_layer(&self) -> &OutputLayer {
        match self.layers.last() {
            Some(Layer::Output(o)) => o,
            _ => unreachable!("checked at construction"),
        }
    }

    pub fn classes(&self) -> usize {
        self.output_layer().classes()
    }

    pub fn weight_count(&self) -> usize {
        self.dsg_layers()
            .iter()
            .map(|d| d.weights().len() + d.bn().map_or(0, |b| 2 * b.channels()))
            .sum::<usize>()
            + self.output_layer().weights().len()
    }

    /// Recomputes every DSG layer's projected weights.
    pub fn refresh_projections(&mut self) {
        for d in self.dsg_layers_mut() {
            d.refresh_projected_weights();
        }
    }

    pub fn forward(&self, x: &Tensor, opts: &ForwardOptions<'_>) -> Result<ForwardPass> {
        let n_dsg = self.dsg_layers().len();
        if let Some(o) = opts.mask_overrides {
            if o.len() != n_dsg {
                return Err(DsgError::dim("mask_overrides", &[o.len()], &[n_dsg]));
            }
        }
        let mut dsg_idx = 0usize;
        let mut next_opts = || {
            let so = SelectOptions {
                mode: opts.mode,
                training: opts.training,
                step: opts.step,
                mask_override: opts.mask_overrides.map(|o| &o[dsg_idx]),
            };
            dsg_idx += 1;
            so
        };
        let mut cur = x.clone();
        let mut contexts = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, ctx) = match layer {
                Layer::Dsg(d) => {
                    let (y, c) = d.forward(&cur, &next_opts(), &self.counters)?;
                    (y, LayerContext::Dsg(c))
                }
                Layer::Pool(p) => {
                    let (y, c) = p.forward(&cur)?;
                    (y, LayerContext::Pool(c))
                }
                Layer::Flatten => {
                    let shape = cur.shape().to_vec();
                    let m = shape.first().copied().unwrap_or(0);
                    let rest = cur.len() / m.max(1);
                    (cur.clone().reshape(vec![m, rest])?, LayerContext::Flatten(shape))
                }
                Layer::Residual(b) => {
                    let (h, ca) = b.first.forward(&cur, &next_opts(), &self.counters)?;
                    let (y, cb) = b.second.forward(&h, &next_opts(), &self.counters)?;
                    (y.add(&cur)?, LayerContext::Residual(ca, cb))
                }
                Layer::Output(o) => (o.forward(&cur, &self.counters)?, LayerContext::Output(cur.clone())),
            };
            if !out.all_finite() {
                return Err(DsgError::Divergence {
                    iteration: opts.step,
                    layer: layer_name(layer, i),
                });
            }
            contexts.push(ctx);
            cur = out;
        }
        Ok(ForwardPass {
            input: x.clone(),
            logits: cur,
            contexts,
        })
    }

    /// Folds batch statistics from a training-mode pass into BN running stats.
    pub fn commit_bn_stats(&mut self, pass: &ForwardPass) {
        let ctxs = pass.dsg_contexts();
        for (d, c) in self.dsg_layers_mut().into_iter().zip(ctxs) {
            d.commit_bn_stats(c);
        }
    }

    /// Parameter tensors in a fixed order: for each DSG layer its weights,
    /// then BN scale and shift; the output weights last.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dsg(d) => push_dsg_params(d, &mut v),
                Layer::Residual(b) => {
                    push_dsg_params(&mut b.first, &mut v);
                    push_dsg_params(&mut b.second, &mut v);
                }
                Layer::Output(o) => v.push(ParamMut {
                    data: o.weights_mut().data_mut(),
                    decay: true,
                }),
                _ => {}
            }
        }
        v
    }

    /// Backward pass for a [`ForwardPass`]; gradients come back in
    /// [`Model::params_mut`] order.
    pub fn backward(&self, pass: &ForwardPass, g_logits: &Tensor) -> Result<Vec<Vec<f32>>> {
        let counters = &self.counters;
        let mut per_layer: Vec<Vec<Vec<f32>>> = vec![Vec::new(); self.layers.len()];
        let mut g = g_logits.clone();
        // layers before the first weighted one only reshape or pool the
        // network input, which needs no gradient
        let first_weighted = self
            .layers
            .iter()
            .position(|l| !matches!(l, Layer::Pool(_) | Layer::Flatten))
            .unwrap_or(0);
        for i in (0..self.layers.len()).rev() {
            let prev_mask = match i.checked_sub(1).map(|j| &pass.contexts[j]) {
                Some(LayerContext::Dsg(c)) => Some(&c.mask),
                _ => None,
            };
            if i < first_weighted {
                break;
            }
            let need_input = i > first_weighted;
            match (&self.layers[i], &pass.contexts[i]) {
                (Layer::Dsg(d), LayerContext::Dsg(c)) => {
                    let gr = d.backward(c, &g, prev_mask, need_input, counters)?;
                    per_layer[i] = dsg_grad_list(gr.weights, gr.scale, gr.shift);
                    if let Some(gi) = gr.input {
                        g = gi;
                    }
                }
                (Layer::Pool(p), LayerContext::Pool(c)) => g = p.backward(c, &g)?,
                (Layer::Flatten, LayerContext::Flatten(shape)) => g = g.reshape(shape.clone())?,
                (Layer::Residual(b), LayerContext::Residual(ca, cb)) => {
                    let gb = b.second.backward(cb, &g, Some(&ca.mask), true, counters)?;
                    let gh = gb.input.expect("requested");
                    let ga = b.first.backward(ca, &gh, prev_mask, true, counters)?;
                    let mut list = dsg_grad_list(ga.weights, ga.scale, ga.shift);
                    list.extend(dsg_grad_list(gb.weights, gb.scale, gb.shift));
                    per_layer[i] = list;
                    let mut skip = g;
                    if let Some(pm) = prev_mask {
                        pm.apply_activation(&mut skip)?;
                    }
                    g = skip.add(&ga.input.expect("requested"))?;
                }
                (Layer::Output(o), LayerContext::Output(x)) => {
                    let (gx, gw) = o.backward(x, &g, prev_mask, counters)?;
                    per_layer[i] = vec![gw.into_data()];
                    g = gx;
                }
                _ => return Err(DsgError::Config("forward pass does not match model".into())),
            }
        }
        Ok(per_layer.into_iter().flatten().collect())
    }
}

fn push_dsg_params<'a>(d: &'a mut DsgLayer, v: &mut Vec<ParamMut<'a>>) {
    let (w, bn) = d.params_mut();
    v.push(ParamMut {
        data: w.data_mut(),
        decay: true,
    });
    if let Some(bn) = bn {
        v.push(ParamMut {
            data: &mut bn.scale,
            decay: false,
        });
        v.push(ParamMut {
            data: &mut bn.shift,
            decay: false,
        });
    }
}

fn dsg_grad_list(w: Tensor, scale: Option<Vec<f32>>, shift: Option<Vec<f32>>) -> Vec<Vec<f32>> {
    let mut v = vec![w.into_data()];
    v.extend(scale);
    v.extend(shift);
    v
}
