//! Training configuration, the SGD optimizer, the training loop with early
//! stopping, evaluation against a persistence baseline, and an end-to-end
//! finite-difference gradient check.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{
    self, make_windows, EpidemicDataset, Normalizer, SplitKind, WindowSample,
};
use crate::eano::{DriftMode, DriftOptions, EdgeNorm};
use crate::error::{Error, Result};
use crate::fusion::{self, LossMode};
use crate::gltg::{self, TransmissionGraph};
use crate::model::{
    self, BoundParams, GraphMode, GraphVars, ModelConfig, ModelParams, ParamId, QueryMode,
    WindowPaths,
};
use crate::ode::Method;
use crate::rng;
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Threshold above which a true value counts as part of a peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PeakThreshold {
    /// Per-region percentile of the training split.
    Percentile(f64),
    Absolute(f64),
}

impl Default for PeakThreshold {
    fn default() -> Self {
        PeakThreshold::Percentile(80.0)
    }
}

impl fmt::Display for PeakThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeakThreshold::Percentile(p) => write!(f, "percentile:{p}"),
            PeakThreshold::Absolute(v) => write!(f, "absolute:{v}"),
        }
    }
}

impl FromStr for PeakThreshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("peak threshold `{s}` is not percentile:P or absolute:V"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        match kind.trim() {
            "percentile" if (0.0..=100.0).contains(&value) => Ok(PeakThreshold::Percentile(value)),
            "absolute" if value.is_finite() => Ok(PeakThreshold::Absolute(value)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for PeakThreshold {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PeakThreshold> for String {
    fn from(p: PeakThreshold) -> String {
        p.to_string()
    }
}

impl PeakThreshold {
    /// One threshold per region.
    pub fn per_region(&self, ds: &EpidemicDataset) -> Vec<f64> {
        match *self {
            PeakThreshold::Absolute(v) => vec![v; ds.regions()],
            PeakThreshold::Percentile(p) => ds
                .split_series(SplitKind::Train)
                .iter()
                .map(|s| data::percentile(s, p))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub window: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub repeats: usize,
    pub n_heads: usize,
    pub top_k: usize,
    pub solver: Method,
    pub substeps: usize,
    pub seed: u64,
    pub loss: LossMode,
    pub query: QueryMode,
    pub drift: DriftMode,
    pub graph: GraphMode,
    pub edge_norm: EdgeNorm,
    pub edge_threshold: Option<f64>,
    /// Weight of the mean fused edge weight at the end of the window.
    pub sparse_penalty: f64,
    /// Rescale the summed batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub patience: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub missing_rate: f64,
    pub peak_threshold: PeakThreshold,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-5,
            hidden: 64,
            window: 20,
            horizon: 5,
            epochs: 200,
            batch_size: 32,
            repeats: 5,
            n_heads: 4,
            top_k: 3,
            solver: Method::Rk4,
            substeps: 2,
            seed: 0,
            loss: LossMode::Mse,
            query: QueryMode::Z,
            drift: DriftMode::Modulated,
            graph: GraphMode::Fused,
            edge_norm: EdgeNorm::Row,
            edge_threshold: None,
            sparse_penalty: 0.0,
            grad_clip: None,
            patience: 20,
            train_frac: 0.6,
            val_frac: 0.2,
            missing_rate: 0.0,
            peak_threshold: PeakThreshold::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lr, self.momentum, self.weight_decay, self.sparse_penalty]
            .iter()
            .all(|x| x.is_finite() && *x >= 0.0);
        if !finite {
            return Err(Error::Config("lr, momentum, weight_decay and sparse_penalty must be finite and nonnegative".into()));
        }
        if self.window < 2 || self.horizon == 0 || self.batch_size == 0 || self.repeats == 0 {
            return Err(Error::Config(format!(
                "window {} must be >= 2; horizon {}, batch_size {} and repeats {} must be >= 1",
                self.window, self.horizon, self.batch_size, self.repeats
            )));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!("missing_rate {} outside [0, 1)", self.missing_rate)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            channels: 2,
            n_heads: self.n_heads,
            graph: self.graph,
            query: self.query,
            drift: DriftOptions {
                mode: self.drift,
                edge_norm: self.edge_norm,
                edge_threshold: self.edge_threshold,
            },
            solver: self.solver,
            substeps: self.substeps,
        }
    }

    /// Seed of the `r`-th repeat.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

/// In-place momentum SGD on a flat buffer:
/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_update(p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64, wd: f64) {
    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v + (g + wd * *p);
        *p -= lr * *v;
    }
}

/// Scales `grads` down so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = libm::sqrt(
        grads
            .iter()
            .flat_map(|g| g.data())
            .fold(0.0, |acc, x| acc + x * x),
    );
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}

/// Momentum SGD over every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ModelParams, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> &Tensor {
        &self.velocity[id as usize]
    }

    /// `grads` is indexed by [`ParamId`]. Nothing is modified if any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        for (id, g) in ParamId::ALL.iter().zip(grads) {
            if g.shape() != params.get(*id).shape() {
                return Err(Error::shape(id.name(), params.get(*id).shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(id.name().into()));
            }
        }
        for (id, g) in ParamId::ALL.iter().zip(grads) {
            sgd_update(
                params.get_mut(*id).data_mut(),
                self.velocity[*id as usize].data_mut(),
                g.data(),
                self.lr,
                self.momentum,
                self.weight_decay,
            );
        }
        Ok(())
    }
}

/// Pairwise DTW distances between the z-normalized training splits.
pub fn semantic_distances(ds: &EpidemicDataset) -> Result<Tensor> {
    gltg::dtw_matrix(&ds.split_series(SplitKind::Train), true)
}

pub fn build_graph(ds: &EpidemicDataset, top_k: usize) -> Result<TransmissionGraph> {
    graph_from_distances(ds, &semantic_distances(ds)?, top_k)
}

pub fn graph_from_distances(
    ds: &EpidemicDataset,
    distances: &Tensor,
    top_k: usize,
) -> Result<TransmissionGraph> {
    let semantic = gltg::build_semantic_adjacency(&ds.adjacency, distances, top_k)?;
    TransmissionGraph::new(ds.adjacency.clone(), semantic)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    /// Epoch the parameters come from; 0 is the initialization.
    pub epoch: usize,
    pub best_val_rmse: f64,
    pub normalizer: Normalizer,
    pub region_names: Vec<String>,
    pub adjacency: Tensor,
    pub semantic: Tensor,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn graph(&self) -> Result<TransmissionGraph> {
        TransmissionGraph::new(self.adjacency.clone(), self.semantic.clone())
    }

    fn check_regions(&self, ds: &EpidemicDataset) -> Result<()> {
        if self.region_names != ds.region_names {
            return Err(Error::Contract(format!(
                "checkpoint regions {:?} do not match dataset regions {:?}",
                self.region_names, ds.region_names
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    Completed,
    EarlyStopped { epoch: usize },
    /// Training hit a non-finite loss, gradient or state; the checkpoint is
    /// the last good one.
    Diverged { epoch: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

fn knot_seed(seed: u64, split: SplitKind) -> u64 {
    rng::derive(seed, &[0x6b6e, split as u64])
}

/// Windows of one split with their control paths.
pub struct PreparedSplit {
    pub samples: Vec<WindowSample>,
    pub paths: Vec<WindowPaths>,
}

impl PreparedSplit {
    pub fn new(
        ds: &EpidemicDataset,
        norm: &Normalizer,
        split: SplitKind,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let samples = make_windows(
            ds,
            norm,
            split,
            cfg.window,
            cfg.horizon,
            cfg.missing_rate,
            knot_seed(cfg.seed, split),
        )?;
        let paths = samples
            .iter()
            .map(WindowPaths::from_sample)
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSplit { samples, paths })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Loss and gradients (indexed by [`ParamId`]) for one sample.
pub fn sample_gradients(
    params: &ModelParams,
    graph: &TransmissionGraph,
    paths: &WindowPaths,
    target: &[f64],
    cfg: &ModelConfig,
    loss_mode: LossMode,
    sparse_penalty: f64,
    weight: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let gv = GraphVars::record(&mut tape, graph);
    let out = model::forward(&mut tape, &bound, gv, paths, cfg)?;
    let truth = tape.constant(Tensor::matrix(target.len(), 1, target.to_vec())?);
    let loss = fusion::loss(&mut tape, out.prediction, truth, loss_mode)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    let mut total = loss;
    if sparse_penalty > 0.0 {
        let density = tape.mean(out.final_edges);
        total = tape.add_scaled(total, density, sparse_penalty)?;
    }
    let objective = tape.scale(total, weight);
    let grads = tape.backward(objective)?;
    Ok((value, collect_grads(params, &bound, &grads)))
}

fn collect_grads(params: &ModelParams, bound: &BoundParams, grads: &crate::Gradients) -> Vec<Tensor> {
    bound
        .iter()
        .map(|(id, var)| {
            grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
        })
        .collect()
}

/// Raw-unit predictions and truths of every (window, region) pair.
pub fn predict_split(
    params: &ModelParams,
    graph: &TransmissionGraph,
    split: &PreparedSplit,
    norm: &Normalizer,
    cfg: &ModelConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (sample, paths) in split.samples.iter().zip(&split.paths) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let gv = GraphVars::record(&mut tape, graph);
        let out = model::forward(&mut tape, &bound, gv, paths, cfg)?;
        for (v, (&y, &t)) in tape.value(out.prediction).data().iter().zip(&sample.target).enumerate() {
            pred.push(norm.denormalize(v, y));
            truth.push(norm.denormalize(v, t));
        }
    }
    Ok((pred, truth))
}

/// Trains with a fresh initialization derived from `cfg.seed`.
pub fn train(
    ds: &EpidemicDataset,
    graph: &TransmissionGraph,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if graph.regions() != ds.regions() {
        return Err(Error::shape("train", &[ds.regions()], &[graph.regions()]));
    }
    let mcfg = cfg.model_config();
    let norm = Normalizer::fit(ds);
    let train_split = PreparedSplit::new(ds, &norm, SplitKind::Train, cfg)?;
    let val_split = PreparedSplit::new(ds, &norm, SplitKind::Val, cfg)?;

    let mut params = ModelParams::init(cfg.hidden, mcfg.channels, cfg.seed);
    let mut sgd = Sgd::new(&params, cfg.lr, cfg.momentum, cfg.weight_decay);
    let validate = |p: &ModelParams| -> Result<f64> {
        let (pred, truth) = predict_split(p, graph, &val_split, &norm, &mcfg)?;
        data::rmse(&pred, &truth)
    };

    let mut best = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        epoch: 0,
        best_val_rmse: validate(&params)?,
        normalizer: norm.clone(),
        region_names: ds.region_names.clone(),
        adjacency: graph.adjacency.clone(),
        semantic: graph.semantic.clone(),
        params: params.clone(),
    };
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_split.len()).collect();
    let mut stop = StopReason::Completed;

    for epoch in 1..=cfg.epochs {
        let mut shuffle = rng::seeded(rng::derive(cfg.seed, &[0x5f1e, epoch as u64]));
        order.shuffle(&mut shuffle);
        let step = (|| -> Result<f64> {
            let mut loss_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let weight = 1.0 / batch.len() as f64;
                let mut total: Option<Vec<Tensor>> = None;
                for &k in batch {
                    let (loss, grads) = sample_gradients(
                        &params,
                        graph,
                        &train_split.paths[k],
                        &train_split.samples[k].target,
                        &mcfg,
                        cfg.loss,
                        cfg.sparse_penalty,
                        weight,
                    )?;
                    loss_sum += loss;
                    match total.as_mut() {
                        None => total = Some(grads),
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&grads) {
                                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                    *x += y;
                                }
                            }
                        }
                    }
                }
                let mut total = total.expect("batches are nonempty");
                if let Some(c) = cfg.grad_clip {
                    clip_global_norm(&mut total, c);
                }
                sgd.step(&mut params, &total)?;
            }
            Ok(loss_sum / order.len() as f64)
        })();
        let outcome = step.and_then(|loss| {
            if !params.is_finite() {
                return Err(Error::Numeric("parameters became non-finite".into()));
            }
            Ok((loss, validate(&params)?))
        });
        let (train_loss, val_rmse) = match outcome {
            Ok(x) => x,
            Err(
                e @ (Error::Numeric(_) | Error::NonFiniteGradient(_) | Error::Divergence { .. }),
            ) => {
                stop = StopReason::Diverged {
                    epoch,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_rmse,
        };
        on_epoch(&record);
        history.push(record);
        if val_rmse < best.best_val_rmse {
            best.best_val_rmse = val_rmse;
            best.epoch = epoch;
            best.params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                stop = StopReason::EarlyStopped { epoch };
                break;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: best,
        history,
        stop,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    /// `None` when no test point exceeds its threshold.
    pub peak_time_error: Option<f64>,
    pub persistence_rmse: f64,
    pub persistence_peak_time_error: Option<f64>,
    pub windows: usize,
}

/// Test-split metrics in raw units, with the persistence baseline.
pub fn evaluate(ckpt: &Checkpoint, ds: &EpidemicDataset) -> Result<EvalReport> {
    ckpt.check_regions(ds)?;
    let cfg = &ckpt.config;
    let mcfg = cfg.model_config();
    let graph = ckpt.graph()?;
    let norm = &ckpt.normalizer;
    let test = PreparedSplit::new(ds, norm, SplitKind::Test, cfg)?;
    let (pred, truth) = predict_split(&ckpt.params, &graph, &test, norm, &mcfg)?;

    let n = ds.regions();
    let persistence: Vec<f64> = test
        .samples
        .iter()
        .flat_map(|s| (0..n).map(move |v| ds.region(v)[s.last_input_index()]))
        .collect();
    let region_thresholds = cfg.peak_threshold.per_region(ds);
    let thresholds: Vec<f64> = (0..pred.len()).map(|k| region_thresholds[k % n]).collect();
    Ok(EvalReport {
        rmse: data::rmse(&pred, &truth)?,
        peak_time_error: data::peak_time_error_per_point(&pred, &truth, &thresholds),
        persistence_rmse: data::rmse(&persistence, &truth)?,
        persistence_peak_time_error: data::peak_time_error_per_point(&persistence, &truth, &thresholds),
        windows: test.len(),
    })
}

/// Raw-unit forecast `horizon` steps past the last row of `series` (N×L),
/// from its final `window` steps.
pub fn forecast(ckpt: &Checkpoint, region_names: &[String], series: &Tensor) -> Result<Vec<f64>> {
    if ckpt.region_names != region_names {
        return Err(Error::Contract("series regions do not match the checkpoint".into()));
    }
    let cfg = &ckpt.config;
    let (n, len) = (series.rows(), series.cols());
    if len < cfg.window {
        return Err(Error::InsufficientData(format!(
            "series has {len} steps, the model needs a window of {}",
            cfg.window
        )));
    }
    let start = len - cfg.window;
    let mut inputs = Vec::with_capacity(n * cfg.window);
    for v in 0..n {
        inputs.extend(series.row(v)[start..].iter().map(|&x| ckpt.normalizer.normalize(v, x)));
    }
    let sample = WindowSample {
        start,
        split: SplitKind::Test,
        inputs: Tensor::matrix(n, cfg.window, inputs)?,
        target: vec![0.0; n],
        knots: vec![(0..cfg.window).collect(); n],
    };
    let y = model::predict_window(&ckpt.params, &ckpt.graph()?, &sample, &cfg.model_config())?;
    Ok(y.iter().enumerate().map(|(v, &z)| ckpt.normalizer.denormalize(v, z)).collect())
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub regions: usize,
    pub hidden: usize,
    pub window: usize,
    pub n_heads: usize,
    pub step: f64,
    pub seed: u64,
    /// Zero the drive network's output layer, freezing the dynamics.
    pub zero_psi: bool,
    pub graph: GraphMode,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            regions: 3,
            hidden: 4,
            window: 5,
            n_heads: 2,
            step: 1e-6,
            seed: 7,
            zero_psi: false,
            graph: GraphMode::Fused,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub name: &'static str,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
}

fn norm2(x: &[f64]) -> f64 {
    libm::sqrt(x.iter().map(|v| v * v).sum())
}

/// Compares backpropagated gradients with central differences of the loss
/// for every parameter tensor. Per tensor the error is
/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both norms are below 1e-7.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (n, d, w) = (opts.regions, opts.hidden, opts.window);
    let mut rng = rng::seeded(opts.seed);
    let inputs: Vec<f64> = (0..n * w).map(|_| rng.random_range(-1.5..1.5)).collect();
    let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sample = WindowSample {
        start: 0,
        split: SplitKind::Train,
        inputs: Tensor::matrix(n, w, inputs)?,
        target: target.clone(),
        knots: vec![(0..w).collect(); n],
    };
    let paths = WindowPaths::from_sample(&sample)?;
    let mut adjacency = Tensor::zeros(&[n, n]);
    for v in 1..n {
        adjacency.set(v - 1, v, 1.0);
        adjacency.set(v, v - 1, 1.0);
    }
    let mut semantic = adjacency.clone();
    if n > 2 {
        semantic.set(0, n - 1, 1.0);
    }
    let graph = TransmissionGraph::new(adjacency, semantic)?;
    let cfg = ModelConfig {
        hidden: d,
        channels: 2,
        n_heads: opts.n_heads,
        graph: opts.graph,
        query: QueryMode::Z,
        drift: DriftOptions::default(),
        solver: Method::Rk4,
        substeps: 2,
    };

    let mut params = ModelParams::init(d, 2, opts.seed);
    // Move the mask gate off its symmetric start so its gradients are generic.
    *params.get_mut(ParamId::MaskGain) = Tensor::scalar(0.7);
    *params.get_mut(ParamId::MaskBias) = Tensor::scalar(-0.2);
    if opts.zero_psi {
        for id in [ParamId::PsiW2, ParamId::PsiB2] {
            let shape = params.get(id).shape().to_vec();
            *params.get_mut(id) = Tensor::zeros(&shape);
        }
    }
    let loss_at = |p: &ModelParams| -> Result<f64> {
        Ok(sample_gradients(p, &graph, &paths, &target, &cfg, LossMode::Mse, 0.0, 1.0)?.0)
    };
    let (_, analytic) = sample_gradients(&params, &graph, &paths, &target, &cfg, LossMode::Mse, 0.0, 1.0)?;

    let mut entries = Vec::with_capacity(ParamId::ALL.len());
    let mut max_rel_error: f64 = 0.0;
    for &id in ParamId::ALL {
        let mut numeric = vec![0.0; params.get(id).numel()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let original = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = original + opts.step;
            let up = loss_at(&params)?;
            params.get_mut(id).data_mut()[k] = original - opts.step;
            let down = loss_at(&params)?;
            params.get_mut(id).data_mut()[k] = original;
            *slot = (up - down) / (2.0 * opts.step);
        }
        let a = analytic[id as usize].data();
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let (na, nn) = (norm2(a), norm2(&numeric));
        let rel_error = if na.max(nn) < 1e-7 { 0.0 } else { norm2(&diff) / na.max(nn) };
        max_rel_error = max_rel_error.max(rel_error);
        entries.push(GradcheckEntry {
            name: id.name(),
            analytic_norm: na,
            numeric_norm: nn,
            rel_error,
        });
    }
    Ok(GradcheckReport {
        entries,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    #[test]
    fn sgd_hand_unrolled() {
        let (mut p, mut v) = ([1.0], [0.0]);
        let g = [2.0 * p[0]];
        sgd_update(&mut p, &mut v, &g, 0.1, 0.9, 0.0);
        assert!((p[0] - 0.8).abs() < 1e-15);
        let g = [2.0 * p[0]];
        sgd_update(&mut p, &mut v, &g, 0.1, 0.9, 0.0);
        assert!((v[0] - 3.4).abs() < 1e-15);
        assert!((p[0] - 0.46).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_and_plain_descent() {
        let (mut p, mut v) = ([0.3, -2.0], [0.0, 0.0]);
        sgd_update(&mut p, &mut v, &[5.0, 7.0], 0.0, 0.9, 1e-5);
        assert_eq!(p, [0.3, -2.0]);
        let (mut p, mut v) = ([0.3, -2.0], [0.0, 0.0]);
        sgd_update(&mut p, &mut v, &[5.0, 7.0], 0.01, 0.0, 0.0);
        assert_eq!(p, [0.3 - 0.01 * 5.0, -2.0 - 0.01 * 7.0]);
        let (mut p, mut v) = ([0.0; 3], [0.0; 3]);
        sgd_update(&mut p, &mut v, &[0.0; 3], 0.1, 0.9, 1e-5);
        assert_eq!(p, [0.0; 3]);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient_by_name() {
        let mut params = ModelParams::init(2, 2, 0);
        let before = params.clone();
        let mut sgd = Sgd::new(&params, 0.1, 0.9, 0.0);
        let mut grads: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        grads[ParamId::AttnK as usize].data_mut()[0] = f64::NAN;
        let err = sgd.step(&mut params, &grads).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient("attn.w_k".into()));
        assert_eq!(params, before);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Tensor::full(&[1, 2], 3.0), Tensor::full(&[2], 4.0)];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - libm::sqrt(50.0)).abs() < 1e-12);
        let after = libm::sqrt(g.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>());
        assert!((after - 1.0).abs() < 1e-12);
        let mut small = vec![Tensor::full(&[2], 0.1)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1, 0.1]);
    }

    #[test]
    fn peak_threshold_parsing() {
        assert_eq!("percentile:80".parse::<PeakThreshold>().unwrap(), PeakThreshold::Percentile(80.0));
        assert_eq!("absolute:12.5".parse::<PeakThreshold>().unwrap(), PeakThreshold::Absolute(12.5));
        assert!("percentile:120".parse::<PeakThreshold>().is_err());
        assert!("median".parse::<PeakThreshold>().is_err());
        let p = PeakThreshold::Percentile(80.0);
        assert_eq!(p.to_string().parse::<PeakThreshold>().unwrap(), p);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            hidden: 6,
            n_heads: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            missing_rate: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn tiny() -> (EpidemicDataset, TrainConfig) {
        let ds = generate_synthetic(&SynthConfig::benchmark(3, 90, 0.02, 1)).unwrap();
        let cfg = TrainConfig {
            hidden: 4,
            n_heads: 2,
            window: 6,
            horizon: 2,
            epochs: 2,
            batch_size: 8,
            substeps: 1,
            top_k: 1,
            lr: 0.01,
            ..TrainConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (ds, cfg) = tiny();
        let cfg = TrainConfig { epochs: 0, ..cfg };
        let graph = build_graph(&ds, cfg.top_k).unwrap();
        let out = train(&ds, &graph, &cfg, |_| {}).unwrap();
        assert_eq!(out.checkpoint.epoch, 0);
        assert_eq!(out.checkpoint.params, ModelParams::init(cfg.hidden, 2, cfg.seed));
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, cfg) = tiny();
        let graph = build_graph(&ds, cfg.top_k).unwrap();
        let a = train(&ds, &graph, &cfg, |_| {}).unwrap();
        let b = train(&ds, &graph, &cfg, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.checkpoint, b.checkpoint);
        let report = evaluate(&a.checkpoint, &ds).unwrap();
        assert!(report.rmse.is_finite() && report.persistence_rmse.is_finite());
    }

    #[test]
    fn persistence_is_exact_on_constant_series() {
        let (ds, cfg) = tiny();
        let flat = EpidemicDataset {
            series: Tensor::full(ds.series.shape(), 4.0),
            ..ds
        };
        let graph = build_graph(&flat, cfg.top_k).unwrap();
        let out = train(&flat, &graph, &TrainConfig { epochs: 0, ..cfg }, |_| {}).unwrap();
        let report = evaluate(&out.checkpoint, &flat).unwrap();
        assert_eq!(report.persistence_rmse, 0.0);
    }

    #[test]
    fn gradcheck_small() {
        let report = gradcheck(&GradcheckOptions::default()).unwrap();
        assert_eq!(report.entries.len(), ParamId::ALL.len());
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
