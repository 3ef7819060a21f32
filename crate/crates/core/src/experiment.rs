//! Experiment configuration, sweeps and report files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::cost::{footprint, table2_rows, CostReport, Phase, TABLE2_EPSILONS, TABLE2_LAYERS};
use crate::data::{load_dataset_dir, Dataset};
use crate::error::{DsgError, Result};
use crate::model::Model;
use crate::select::SelectionMode;
use crate::train::{evaluate, train_with_state, LayerOverride, TrainConfig, TrainMetrics, Velocities};
use crate::zoo::{build_model, ModelName, ModelSpec};

fn default_footprint_batch() -> usize {
    64
}

fn default_true() -> bool {
    true
}

fn default_refresh() -> u64 {
    50
}

fn default_lr_decay() -> f64 {
    0.1
}

/// Flat JSON experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model_name: ModelName,
    pub dataset_path: PathBuf,
    /// Use a seeded subset of this many training samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub val_limit: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default = "default_refresh")]
    pub refresh_interval: u64,
    pub seed: u64,
    #[serde(default)]
    pub lr_step_epochs: usize,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_true")]
    pub audit_double_mask: bool,
    /// DRS thresholds every row at sample 0's cut; false selects per row.
    #[serde(default = "default_true")]
    pub threshold_sharing: bool,
    #[serde(default)]
    pub layer_overrides: Vec<LayerOverride>,
    pub gammas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub modes: Vec<SelectionMode>,
    pub output_dir: PathBuf,
    #[serde(default = "default_footprint_batch")]
    pub footprint_batch: usize,
}

/// One trained sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub epsilon: f64,
    pub mode: SelectionMode,
}

impl SweepPoint {
    pub fn tag(&self) -> String {
        format!("g{:.2}_e{:.2}_{}", self.gamma, self.epsilon, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub model: String,
    pub gamma: f64,
    pub epsilon: f64,
    pub mode: SelectionMode,
    pub val_acc: f64,
    pub mean_sparsity: f64,
    /// Instrumented MACs of one training iteration on the footprint batch.
    pub macs_training: u64,
    pub macs_baseline: u64,
    pub bytes_training: u64,
    pub mask_overhead: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub rows: Vec<SummaryRow>,
    pub metrics: Vec<(SweepPoint, TrainMetrics)>,
    pub costs: Vec<(SweepPoint, CostReport)>,
    pub files: Vec<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() || self.epsilons.is_empty() || self.modes.is_empty() {
            return Err(DsgError::Config("sweep lists must be non-empty".into()));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(0.0..1.0).contains(*g)) {
            return Err(DsgError::Config(format!("gamma {g} not in [0, 1)")));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(DsgError::Config(format!("epsilon {e} not in (0, 1)")));
        }
        if self.footprint_batch == 0 {
            return Err(DsgError::Config("footprint_batch must be at least 1".into()));
        }
        self.train_config(SelectionMode::Drs).validate()
    }

    pub fn train_config(&self, mode: SelectionMode) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            refresh_interval: self.refresh_interval,
            seed: self.seed,
            mode,
            lr_step_epochs: self.lr_step_epochs,
            lr_decay: self.lr_decay,
            audit_double_mask: self.audit_double_mask,
            layer_overrides: self.layer_overrides.clone(),
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn header(&self) -> String {
        format!("config_hash={} seed={}", self.config_hash(), self.seed)
    }

    /// Sweep points in run order. γ = 0 collapses to one dense point.
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        let mut v = Vec::new();
        for &gamma in &self.gammas {
            if gamma == 0.0 {
                v.push(SweepPoint {
                    gamma,
                    epsilon: self.epsilons[0],
                    mode: SelectionMode::Dense,
                });
                continue;
            }
            for &epsilon in &self.epsilons {
                for &mode in &self.modes {
                    v.push(SweepPoint { gamma, epsilon, mode });
                }
            }
        }
        v
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, val) = load_dataset_dir(&self.dataset_path)?;
        let train = match self.train_limit {
            Some(n) => train.sample(n, self.seed),
            None => train,
        };
        let val = match self.val_limit {
            Some(n) => val.take(n),
            None => val,
        };
        Ok((train, val))
    }

    pub fn build(&self, data: &Dataset, gamma: f64, epsilon: f64) -> Result<Model> {
        let mut model = build_model(&ModelSpec {
            name: self.model_name,
            input: data.sample_shape(),
            classes: data.classes(),
            gamma,
            epsilon,
            seed: self.seed,
        })?;
        for l in model.dsg_layers_mut() {
            l.set_threshold_sharing(self.threshold_sharing);
        }
        Ok(model)
    }
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    Ok((p.clone(), BufWriter::new(File::create(p)?)))
}

/// JSON artifacts carry the hash and seed as top-level fields.
fn write_json<T: Serialize>(dir: &Path, name: &str, cfg: &ExperimentConfig, body: &T) -> Result<PathBuf> {
    let (p, mut w) = create(dir, name)?;
    let doc = serde_json::json!({
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "report": body,
    });
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    w.flush()?;
    Ok(p)
}

fn write_summary(dir: &Path, cfg: &ExperimentConfig, rows: &[SummaryRow]) -> Result<PathBuf> {
    let (p, mut w) = create(dir, "summary.csv")?;
    writeln!(w, "# {}", cfg.header())?;
    let mut c = csv::Writer::from_writer(w);
    c.write_record([
        "model",
        "gamma",
        "epsilon",
        "mode",
        "val_acc",
        "mean_sparsity",
        "macs_training",
        "macs_baseline",
        "bytes_training",
        "mask_overhead",
    ])?;
    for r in rows {
        c.write_record([
            r.model.clone(),
            format!("{:.2}", r.gamma),
            format!("{:.2}", r.epsilon),
            r.mode.to_string(),
            format!("{:.6}", r.val_acc),
            format!("{:.6}", r.mean_sparsity),
            r.macs_training.to_string(),
            r.macs_baseline.to_string(),
            r.bytes_training.to_string(),
            format!("{:.6}", r.mask_overhead),
        ])?;
    }
    c.flush()?;
    Ok(p)
}

/// Trains one sweep point from a fresh model.
pub fn run_point(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    point: SweepPoint,
) -> Result<(Model, TrainMetrics, Velocities)> {
    let mut model = cfg.build(train, point.gamma, point.epsilon)?;
    let mut vel = Velocities::default();
    let metrics = train_with_state(&mut model, train, val, &cfg.train_config(point.mode), &mut vel)?;
    Ok((model, metrics, vel))
}

fn cost_for(cfg: &ExperimentConfig, model: &Model, val: &Dataset, point: SweepPoint) -> Result<CostReport> {
    let idx: Vec<usize> = (0..cfg.footprint_batch.min(val.len())).collect();
    let (x, y) = val.batch(&idx);
    let mut m = model.clone();
    if point.mode == SelectionMode::Dense {
        for l in m.dsg_layers_mut() {
            l.set_gamma(0.0)?;
        }
    }
    footprint(&m, &x, &y, Phase::Training, &[])
}

/// Runs the whole sweep and writes per-point metrics CSV and cost JSON
/// plus `summary.csv` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let (train, val) = cfg.load_data()?;
    let dir = cfg.output_dir.clone();
    let mut report = ExperimentReport {
        config_hash: cfg.config_hash(),
        rows: Vec::new(),
        metrics: Vec::new(),
        costs: Vec::new(),
        files: Vec::new(),
    };
    for point in cfg.sweep_points() {
        let (model, metrics, _) = run_point(cfg, &train, &val, point)?;
        let eval = evaluate(&model, &val, point.mode, cfg.batch_size.max(256))?;
        let cost = cost_for(cfg, &model, &val, point)?;

        let (p, w) = create(&dir, &format!("metrics_{}.csv", point.tag()))?;
        metrics.write_csv(w, &[cfg.header()])?;
        report.files.push(p);
        report
            .files
            .push(write_json(&dir, &format!("cost_{}.json", point.tag()), cfg, &cost)?);

        let n = eval.sparsity.len().max(1) as f64;
        report.rows.push(SummaryRow {
            model: cfg.model_name.to_string(),
            gamma: point.gamma,
            epsilon: point.epsilon,
            mode: point.mode,
            val_acc: eval.accuracy,
            mean_sparsity: eval.sparsity.iter().sum::<f64>() / n,
            macs_training: cost.macs_forward_search
                + cost.macs_forward_selected
                + cost.macs_backward_error
                + cost.macs_backward_weightgrad,
            macs_baseline: cost.macs_baseline,
            bytes_training: cost.bytes_total(),
            mask_overhead: cost.mask_overhead(),
        });
        report.metrics.push((point, metrics));
        report.costs.push((point, cost));
    }
    report.files.push(write_summary(&dir, cfg, &report.rows)?);
    Ok(report)
}

/// Trains the first sweep point and saves metrics and a checkpoint.
pub fn run_train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let (train, val) = cfg.load_data()?;
    let point = cfg.sweep_points()[0];
    let (model, metrics, vel) = run_point(cfg, &train, &val, point)?;
    let (p, w) = create(&cfg.output_dir, "metrics.csv")?;
    metrics.write_csv(w, &[cfg.header(), format!("point={}", point.tag())])?;
    let ck = cfg.output_dir.join("model.ckpt");
    save_checkpoint(&model, &vel, &ck)?;
    Ok(vec![p, ck])
}

/// Evaluates a saved checkpoint under every configured selection mode
/// (plus dense) and writes `eval.csv`.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let (train, val) = cfg.load_data()?;
    let point = cfg.sweep_points()[0];
    let mut model = cfg.build(&train, point.gamma, point.epsilon)?;
    load_checkpoint(&mut model, checkpoint)?;
    let mut modes = cfg.modes.clone();
    if !modes.contains(&SelectionMode::Dense) {
        modes.push(SelectionMode::Dense);
    }
    let (p, mut w) = create(&cfg.output_dir, "eval.csv")?;
    writeln!(w, "# {}", cfg.header())?;
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["mode", "accuracy", "mean_sparsity"])?;
    for mode in modes {
        let r = evaluate(&model, &val, mode, cfg.batch_size.max(256))?;
        let n = r.sparsity.len().max(1) as f64;
        c.write_record([
            mode.to_string(),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.sparsity.iter().sum::<f64>() / n),
        ])?;
    }
    c.flush()?;
    Ok(p)
}

/// Training and inference cost reports for an untrained model at each γ.
pub fn run_footprint(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let (train, val) = cfg.load_data()?;
    let idx: Vec<usize> = (0..cfg.footprint_batch.min(val.len())).collect();
    let (x, y) = val.batch(&idx);
    let mut reports = Vec::new();
    for &gamma in &cfg.gammas {
        let model = cfg.build(&train, gamma, cfg.epsilons[0])?;
        for phase in [Phase::Training, Phase::Inference] {
            let r = footprint(&model, &x, &y, phase, &[])?;
            reports.push(serde_json::json!({ "gamma": gamma, "cost": r }));
        }
    }
    write_json(&cfg.output_dir, "footprint.json", cfg, &reports)
}

/// Writes the search-cost table: layer shape, baseline dimension, reduced
/// dimension per ε, baseline MMACs and search MMACs per ε.
pub fn emit_table2(path: impl AsRef<Path>) -> Result<()> {
    let rows = table2_rows(&TABLE2_LAYERS, &TABLE2_EPSILONS)?;
    if let Some(dir) = path.as_ref().parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["n_pq".to_string(), "n_crs".into(), "n_k".into(), "bl_dim".into()];
    header.extend(TABLE2_EPSILONS.iter().map(|e| format!("dim_eps{e}")));
    header.push("bl_mmacs".into());
    header.extend(TABLE2_EPSILONS.iter().map(|e| format!("mmacs_eps{e}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.n_pq.to_string(),
            r.n_crs.to_string(),
            r.n_k.to_string(),
            r.baseline_dim.to_string(),
        ];
        rec.extend(r.dims.iter().map(|d| d.to_string()));
        rec.push(r.baseline_mmacs.to_string());
        rec.extend(r.search_mmacs.iter().map(|m| m.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
