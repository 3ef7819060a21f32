//! Training loop: forward with selection, softmax cross-entropy, masked
//! backward, momentum SGD, projected-weight refresh and evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DsgError, Result};
use crate::model::{ForwardOptions, ForwardPass, Model};
use crate::select::{adjacent_sample_change, mask_change_l1, SelectionMask, SelectionMode};
use crate::tensor::Tensor;

/// Selection settings for one DSG layer, by position in
/// [`Model::dsg_layers`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    pub layer: usize,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Leading epochs trained with all-ones masks.
    pub warmup_epochs: usize,
    pub refresh_interval: u64,
    pub seed: u64,
    /// Selection strategy used during training.
    pub mode: SelectionMode,
    /// Multiply the learning rate by `lr_decay` every `lr_step_epochs`
    /// epochs; 0 disables the schedule.
    pub lr_step_epochs: usize,
    pub lr_decay: f64,
    /// Check the double-mask invariant on every stored activation.
    pub audit_double_mask: bool,
    pub layer_overrides: Vec<LayerOverride>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 0,
            refresh_interval: 50,
            seed: 0,
            mode: SelectionMode::Drs,
            lr_step_epochs: 0,
            lr_decay: 0.1,
            audit_double_mask: true,
            layer_overrides: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DsgError::Config("batch_size must be at least 1".into()));
        }
        if self.refresh_interval == 0 {
            return Err(DsgError::Config("refresh_interval must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(DsgError::Config(
                "learning_rate, momentum and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_step_epochs {
            0 => self.learning_rate,
            s => self.learning_rate * self.lr_decay.powi((epoch / s) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Mean mask sparsity per DSG layer over the epoch's iterations.
    pub sparsity: Vec<f64>,
    /// Per-layer probe-batch mask change against the previous epoch.
    pub probe_mask_change: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub iteration_losses: Vec<f64>,
    /// Per-layer mean mask difference between adjacent probe samples after
    /// the last epoch.
    pub adjacent_sample_change: Vec<f64>,
    pub double_mask_checks: u64,
    pub double_mask_violations: u64,
    pub iterations: u64,
}

impl TrainMetrics {
    pub fn final_val_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_acc)
    }

    /// Total probe mask change (summed over layers) for each epoch
    /// transition, starting with epoch 1 → 2.
    pub fn probe_change_series(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .filter_map(|e| e.probe_mask_change.as_ref().map(|v| v.iter().sum()))
            .collect()
    }

    /// One row per epoch: `epoch, train_loss, train_acc, val_acc,
    /// sparsity_layer_0, ...`, preceded by the given comment lines.
    pub fn write_csv<W: Write>(&self, out: W, comments: &[String]) -> Result<()> {
        let mut out = out;
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let n_layers = self.epochs.first().map_or(0, |e| e.sparsity.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "epoch".to_string(),
            "train_loss".into(),
            "train_acc".into(),
            "val_acc".into(),
        ];
        header.extend((0..n_layers).map(|i| format!("sparsity_layer_{i}")));
        w.write_record(&header)?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                format!("{:.6}", e.train_loss),
                format!("{:.6}", e.train_acc),
                format!("{:.6}", e.val_acc),
            ];
            row.extend(e.sparsity.iter().map(|s| format!("{s:.6}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot) / m`.
pub fn loss_softmax_xent(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (m, n) = logits.dims2("softmax_xent")?;
    if targets.len() != m {
        return Err(DsgError::dim("softmax_xent", logits.shape(), &[targets.len(), n]));
    }
    if m == 0 {
        return Err(DsgError::Empty("softmax_xent"));
    }
    let mut grad = vec![0f32; m * n];
    let mut loss = 0f64;
    for (i, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(DsgError::Label {
                index: i,
                label: t,
                classes: n,
            });
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() - (row[t] as f64 - max);
        for j in 0..n {
            let p = exps[j] / sum;
            let y = if j == t { 1.0 } else { 0.0 };
            grad[i * n + j] = ((p - y) / m as f64) as f32;
        }
    }
    Ok((loss / m as f64, Tensor::from_parts(vec![m, n], grad)))
}

/// One momentum-SGD step with L2 decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
pub fn sgd_step(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = mu * *vi + (gi + wd * *wi);
        *wi -= lr * *vi;
    }
}

/// Recomputes projected weights iff `iteration % interval == 0`. Returns
/// whether a refresh happened.
pub fn refresh_projected_weights(model: &mut Model, iteration: u64, interval: u64) -> bool {
    if iteration % interval.max(1) == 0 {
        model.refresh_projections();
        true
    } else {
        false
    }
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

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count()
}

/// Name of the first layer holding a non-finite weight or BN parameter.
pub fn non_finite_parameters(model: &Model) -> Option<String> {
    let finite = |v: &[f32]| v.iter().all(|x| x.is_finite());
    for l in model.dsg_layers() {
        let bn_ok = l.bn().is_none_or(|b| finite(&b.scale) && finite(&b.shift));
        if !finite(l.weights().data()) || !bn_ok {
            return Some(l.name.clone());
        }
    }
    let out = model.output_layer();
    (!finite(out.weights().data())).then(|| out.name.clone())
}

/// Checks support(X_k) ⊆ support(Mask_k) and the same for S_k on every DSG
/// layer of a pass. Returns `(checks, violations)`.
pub fn audit_double_mask(pass: &ForwardPass) -> (u64, u64) {
    let mut checks = 0;
    let mut bad = 0;
    for c in pass.dsg_contexts() {
        for t in [&c.output, &c.s] {
            checks += 1;
            if !c.mask.covers_support(t) {
                bad += 1;
            }
        }
    }
    (checks, bad)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean mask sparsity per DSG layer.
    pub sparsity: Vec<f64>,
}

/// Forward-only evaluation with BN running statistics.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    mode: SelectionMode,
    batch_size: usize,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(DsgError::Empty("evaluate"));
    }
    let bs = batch_size.max(1);
    let n_layers = model.dsg_layers().len();
    let mut sparsity = vec![0f64; n_layers];
    let mut hits = 0usize;
    let mut batches = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for (b, chunk) in idx.chunks(bs).enumerate() {
        let (x, y) = data.batch(chunk);
        let opts = ForwardOptions {
            step: b as u64,
            ..ForwardOptions::eval(mode)
        };
        let pass = model.forward(&x, &opts)?;
        hits += correct(&pass.logits, &y);
        for (s, c) in sparsity.iter_mut().zip(pass.dsg_contexts()) {
            *s += c.mask.sparsity();
        }
        batches += 1;
    }
    for s in &mut sparsity {
        *s /= batches as f64;
    }
    Ok(EvalResult {
        accuracy: hits as f64 / data.len() as f64,
        sparsity,
    })
}

/// Optimizer state kept across epochs (and checkpoints).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Velocities(pub Vec<Vec<f32>>);

fn apply_overrides(model: &mut Model, cfg: &TrainConfig) -> Result<()> {
    let mut layers = model.dsg_layers_mut();
    let n = layers.len();
    for o in &cfg.layer_overrides {
        let l = layers
            .get_mut(o.layer)
            .ok_or_else(|| DsgError::Config(format!("override for layer {} of {n}", o.layer)))?;
        if let Some(g) = o.gamma {
            l.set_gamma(g)?;
        }
        if let Some(e) = o.epsilon {
            l.set_epsilon(e)?;
        }
    }
    for l in layers {
        l.set_refresh_interval(cfg.refresh_interval);
    }
    Ok(())
}

/// Trains `model` in place and returns per-epoch metrics. Fully
/// deterministic for a given config.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainMetrics> {
    let mut velocities = Velocities::default();
    train_with_state(model, train_set, val_set, cfg, &mut velocities)
}

/// Like [`train`], continuing from (and updating) existing optimizer state.
pub fn train_with_state(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    velocities: &mut Velocities,
) -> Result<TrainMetrics> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(DsgError::Empty("train"));
    }
    apply_overrides(model, cfg)?;
    if velocities.0.is_empty() {
        velocities.0 = model.params_mut().iter().map(|p| vec![0.0; p.data.len()]).collect();
    }

    let n_layers = model.dsg_layers().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let probe_idx: Vec<usize> = (0..cfg.batch_size.max(2).min(val_set.len())).collect();
    let (probe_x, _) = val_set.batch(&probe_idx);
    let mut prev_probe: Option<Vec<SelectionMask>> = None;

    let mut metrics = TrainMetrics {
        epochs: Vec::with_capacity(cfg.epochs),
        iteration_losses: Vec::new(),
        adjacent_sample_change: vec![0.0; n_layers],
        double_mask_checks: 0,
        double_mask_violations: 0,
        iterations: 0,
    };
    let mut iteration = 0u64;

    for epoch in 0..cfg.epochs {
        let mode = if epoch < cfg.warmup_epochs {
            SelectionMode::Dense
        } else {
            cfg.mode
        };
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);

        let mut loss_sum = 0f64;
        let mut hits = 0usize;
        let mut sparsity = vec![0f64; n_layers];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            refresh_projected_weights(model, iteration, cfg.refresh_interval);
            let (x, y) = train_set.batch(chunk);
            let pass = model.forward(&x, &ForwardOptions::train(mode, iteration))?;
            if cfg.audit_double_mask {
                let (c, v) = audit_double_mask(&pass);
                metrics.double_mask_checks += c;
                metrics.double_mask_violations += v;
            }
            let (loss, g) = loss_softmax_xent(&pass.logits, &y)?;
            if !loss.is_finite() {
                return Err(DsgError::Divergence {
                    iteration,
                    layer: "loss".into(),
                });
            }
            let grads = model.backward(&pass, &g)?;
            for (s, c) in sparsity.iter_mut().zip(pass.dsg_contexts()) {
                *s += c.mask.sparsity();
            }
            hits += correct(&pass.logits, &y);
            loss_sum += loss * y.len() as f64;
            model.commit_bn_stats(&pass);
            for ((p, gr), v) in model.params_mut().into_iter().zip(&grads).zip(&mut velocities.0) {
                let wd = if p.decay { cfg.weight_decay } else { 0.0 };
                sgd_step(p.data, gr, v, lr, cfg.momentum, wd);
            }
            // a NaN weight is never selected by the search, so it would
            // otherwise sit in the model unnoticed
            if let Some(layer) = non_finite_parameters(model) {
                return Err(DsgError::Divergence { iteration, layer });
            }
            metrics.iteration_losses.push(loss);
            iteration += 1;
            batches += 1;
        }
        for s in &mut sparsity {
            *s /= batches as f64;
        }
        let val = evaluate(model, val_set, mode, cfg.batch_size.max(256))?;

        let probe_mode = if mode == SelectionMode::Random {
            SelectionMode::Drs
        } else {
            mode
        };
        let probe = model.forward(&probe_x, &ForwardOptions::eval(probe_mode))?.masks();
        let change = match &prev_probe {
            Some(prev) => Some(
                prev.iter()
                    .zip(&probe)
                    .map(|(a, b)| mask_change_l1(a, b))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        metrics.adjacent_sample_change = probe.iter().map(adjacent_sample_change).collect();
        prev_probe = Some(probe);

        metrics.epochs.push(EpochMetrics {
            epoch: epoch + 1,
            learning_rate: lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: hits as f64 / train_set.len() as f64,
            val_acc: val.accuracy,
            sparsity,
            probe_mask_change: change,
        });
    }
    metrics.iterations = iteration;
    Ok(metrics)
}
