//! Datasets, windowing, normalization, metrics and the synthetic
//! networked-SIR generator used as a verification oracle.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::spline::surviving_indices;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Chronological, disjoint index ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// Splits `len` steps into leading `train_frac`, then `val_frac`, then the rest.
    pub fn chronological(len: usize, train_frac: f64, val_frac: f64) -> Result<Self> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0) {
            return Err(Error::Config(format!(
                "split fractions {train_frac}/{val_frac} must be positive and sum below 1"
            )));
        }
        let a = libm::round(len as f64 * train_frac) as usize;
        let b = libm::round(len as f64 * (train_frac + val_frac)) as usize;
        Ok(Splits {
            train: 0..a,
            val: a..b,
            test: b..len,
        })
    }

    pub fn get(&self, kind: SplitKind) -> Range<usize> {
        match kind {
            SplitKind::Train => self.train.clone(),
            SplitKind::Val => self.val.clone(),
            SplitKind::Test => self.test.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpidemicDataset {
    pub region_names: Vec<String>,
    /// N×L counts per step.
    pub series: Tensor,
    /// N×N binary, symmetric, zero diagonal.
    pub adjacency: Tensor,
    pub splits: Splits,
}

impl EpidemicDataset {
    pub fn new(
        region_names: Vec<String>,
        series: Tensor,
        adjacency: Tensor,
        splits: Splits,
    ) -> Result<Self> {
        let n = region_names.len();
        let len = series.cols();
        if series.shape() != [n, len] {
            return Err(Error::shape("EpidemicDataset", &[n, len], series.shape()));
        }
        if adjacency.shape() != [n, n] {
            return Err(Error::shape("EpidemicDataset", &[n, n], adjacency.shape()));
        }
        if let Some(x) = series.data().iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(Error::Contract(format!("series must be finite and nonnegative, found {x}")));
        }
        for u in 0..n {
            if adjacency.get(u, u) != 0.0 {
                return Err(Error::Contract(format!("adjacency has a self-loop at region {u}")));
            }
            for v in 0..n {
                let a = adjacency.get(u, v);
                if (a != 0.0 && a != 1.0) || a != adjacency.get(v, u) {
                    return Err(Error::Contract(
                        "adjacency must be binary and symmetric".into(),
                    ));
                }
            }
        }
        let ordered = splits.train.start == 0
            && splits.train.end <= splits.val.start
            && splits.val.end <= splits.test.start
            && splits.test.end <= len;
        if !ordered || splits.train.is_empty() {
            return Err(Error::Contract(format!("invalid splits {splits:?} for length {len}")));
        }
        Ok(EpidemicDataset {
            region_names,
            series,
            adjacency,
            splits,
        })
    }

    pub fn regions(&self) -> usize {
        self.region_names.len()
    }

    pub fn len(&self) -> usize {
        self.series.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn region(&self, v: usize) -> &[f64] {
        self.series.row(v)
    }

    /// Per-region slices of one split.
    pub fn split_series(&self, kind: SplitKind) -> Vec<Vec<f64>> {
        let r = self.splits.get(kind);
        (0..self.regions()).map(|v| self.region(v)[r.clone()].to_vec()).collect()
    }
}

/// Per-region z-score statistics fitted on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub const STD_FLOOR: f64 = 1e-8;

    pub fn fit(ds: &EpidemicDataset) -> Self {
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for series in ds.split_series(SplitKind::Train) {
            let n = series.len() as f64;
            let m = series.iter().sum::<f64>() / n;
            let var = series.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(libm::sqrt(var).max(Self::STD_FLOOR));
        }
        Normalizer { mean, std }
    }

    pub fn normalize(&self, region: usize, x: f64) -> f64 {
        (x - self.mean[region]) / self.std[region]
    }

    pub fn denormalize(&self, region: usize, z: f64) -> f64 {
        z * self.std[region] + self.mean[region]
    }
}

/// One training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// Absolute index of the first input step.
    pub start: usize,
    pub split: SplitKind,
    /// N×T normalized inputs.
    pub inputs: Tensor,
    /// Normalized target at `start + T - 1 + h`, one per region.
    pub target: Vec<f64>,
    /// Surviving window-relative step indices per region.
    pub knots: Vec<Vec<usize>>,
}

impl WindowSample {
    pub fn window(&self) -> usize {
        self.inputs.cols()
    }

    pub fn last_input_index(&self) -> usize {
        self.start + self.window() - 1
    }

    pub fn knot_times(&self, region: usize) -> Vec<f64> {
        self.knots[region].iter().map(|&k| k as f64).collect()
    }

    pub fn knot_values(&self, region: usize) -> Vec<f64> {
        let row = self.inputs.row(region);
        self.knots[region].iter().map(|&k| row[k]).collect()
    }
}

/// Stride-1 windows lying entirely inside one split.
///
/// With `L` steps in the split there are `L − T − h + 1` windows. Interior
/// knots are dropped per region at `missing_rate`, seeded by
/// `(seed, window start, region)`.
pub fn make_windows(
    ds: &EpidemicDataset,
    norm: &Normalizer,
    split: SplitKind,
    window: usize,
    horizon: usize,
    missing_rate: f64,
    seed: u64,
) -> Result<Vec<WindowSample>> {
    if window < 2 || horizon == 0 {
        return Err(Error::Config(format!(
            "window {window} must be >= 2 and horizon {horizon} >= 1"
        )));
    }
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::Config(format!("missing_rate {missing_rate} outside [0, 1)")));
    }
    let range = ds.splits.get(split);
    if range.len() < window + horizon {
        return Err(Error::Config(format!(
            "{split:?} split has {} steps, need at least window + horizon = {}",
            range.len(),
            window + horizon
        )));
    }
    let n = ds.regions();
    let count = range.len() - window - horizon + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = range.start + w;
        let mut inputs = Vec::with_capacity(n * window);
        let mut target = Vec::with_capacity(n);
        let mut knots = Vec::with_capacity(n);
        for v in 0..n {
            let row = ds.region(v);
            inputs.extend(row[start..start + window].iter().map(|&x| norm.normalize(v, x)));
            target.push(norm.normalize(v, row[start + window - 1 + horizon]));
            let s = rng::derive(seed, &[start as u64, v as u64]);
            knots.push(surviving_indices(window, missing_rate, s)?);
        }
        out.push(WindowSample {
            start,
            split,
            inputs: Tensor::matrix(n, window, inputs)?,
            target,
            knots,
        });
    }
    Ok(out)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let sse = pred
        .iter()
        .zip(truth)
        .fold(0.0, |acc, (p, t)| acc + (p - t) * (p - t));
    Ok(libm::sqrt(sse / pred.len() as f64))
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s = pred.iter().zip(truth).fold(0.0, |acc, (p, t)| acc + libm::fabs(p - t));
    Ok(s / pred.len() as f64)
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Contract("metric over an empty set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape("metric", &[pred.len()], &[truth.len()]));
    }
    Ok(())
}

/// MAE over the points whose truth exceeds `threshold`; `None` when no point
/// qualifies.
pub fn peak_time_error(pred: &[f64], truth: &[f64], threshold: f64) -> Option<f64> {
    let thresholds = vec![threshold; truth.len()];
    peak_time_error_per_point(pred, truth, &thresholds)
}

/// Peak time error with an individual threshold per point.
pub fn peak_time_error_per_point(pred: &[f64], truth: &[f64], thresholds: &[f64]) -> Option<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for ((p, t), th) in pred.iter().zip(truth).zip(thresholds) {
        if t > th {
            total += libm::fabs(p - t);
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Linear-interpolation percentile, `p` in [0, 100].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = libm::floor(rank) as usize;
    let hi = libm::ceil(rank) as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// A change of the transmission rate at `start` (in steps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaChange {
    pub start: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub regions: usize,
    pub length: usize,
    /// `coupling[v][u]`: how strongly infectious people in `u` infect `v`.
    pub coupling: Vec<Vec<f64>>,
    /// Piecewise-constant β(t); the first entry should start at 0.
    pub beta_schedule: Vec<BetaChange>,
    /// Per-region multiplier on β; empty means all ones.
    #[serde(default)]
    pub beta_scale: Vec<f64>,
    pub gamma: f64,
    pub population: Vec<f64>,
    pub initial_infected: Vec<f64>,
    /// Observation noise standard deviation as a fraction of each region's
    /// noise-free peak.
    pub noise_rel: f64,
    pub seed: u64,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

fn default_train_frac() -> f64 {
    0.6
}

fn default_val_frac() -> f64 {
    0.2
}

impl SynthConfig {
    /// Ring of regions under a seasonal transmission rate,
    /// `β(t) = 0.1 + 0.05·sin(2πt/60)` held constant over each step, with
    /// γ = 0.1, and 0.05% of every population initially infectious. Waves
    /// recur every 60 steps at a roughly constant size, so the test split
    /// looks like the training split.
    pub fn benchmark(regions: usize, length: usize, noise_rel: f64, seed: u64) -> Self {
        let mut coupling = vec![vec![0.0; regions]; regions];
        if regions > 1 {
            for (v, row) in coupling.iter_mut().enumerate() {
                row[(v + 1) % regions] = 0.01;
                row[(v + regions - 1) % regions] = 0.01;
            }
        }
        let beta_schedule = (0..length)
            .map(|t| BetaChange {
                start: t as f64,
                beta: 0.1 + 0.05 * libm::sin(2.0 * core::f64::consts::PI * t as f64 / 60.0),
            })
            .collect();
        const SPREAD: [f64; 8] = [1.0, 1.3, 0.8, 1.1, 0.9, 1.2, 1.0, 0.7];
        let population: Vec<f64> = (0..regions).map(|v| 1e6 * (1.0 + 0.5 * (v % 3) as f64)).collect();
        SynthConfig {
            regions,
            length,
            coupling,
            beta_schedule,
            beta_scale: Vec::new(),
            gamma: 0.1,
            initial_infected: population
                .iter()
                .enumerate()
                .map(|(v, p)| 5e-4 * p * SPREAD[v % 8])
                .collect(),
            population,
            noise_rel,
            seed,
            train_frac: default_train_frac(),
            val_frac: default_val_frac(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.regions;
        let sized = self.coupling.len() == n
            && self.coupling.iter().all(|r| r.len() == n)
            && self.population.len() == n
            && self.initial_infected.len() == n
            && (self.beta_scale.is_empty() || self.beta_scale.len() == n);
        if n == 0 || !sized {
            return Err(Error::Config("synthetic config arrays must all have one entry per region".into()));
        }
        if self.length == 0 || self.beta_schedule.is_empty() {
            return Err(Error::Config("synthetic config needs a length and a beta schedule".into()));
        }
        let nonneg = self.gamma >= 0.0
            && self.noise_rel >= 0.0
            && self.beta_schedule.iter().all(|b| b.beta >= 0.0)
            && self.coupling.iter().flatten().all(|c| *c >= 0.0)
            && self.population.iter().all(|p| *p > 0.0)
            && self
                .initial_infected
                .iter()
                .zip(&self.population)
                .all(|(i, p)| *i >= 0.0 && i <= p);
        if !nonneg {
            return Err(Error::Config("synthetic rates, populations and infections must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn beta_at(&self, t: f64) -> f64 {
        self.beta_schedule
            .iter()
            .take_while(|b| b.start <= t + 1e-9)
            .last()
            .unwrap_or(&self.beta_schedule[0])
            .beta
    }

    fn scale(&self, v: usize) -> f64 {
        self.beta_scale.get(v).copied().unwrap_or(1.0)
    }
}

/// Noise-free compartments sampled at every integer step.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrajectory {
    /// `[step][region]`, `length + 1` rows.
    pub s: Vec<Vec<f64>>,
    pub i: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    /// New infections during each step, `[region][step]`.
    pub incidence: Vec<Vec<f64>>,
}

const SYNTH_SUBSTEPS: usize = 10;

/// Integrates the coupled SIR system with RK4 at h = 0.1.
///
/// Region `v` sees force of infection
/// `β(t)·scale_v·(I_v + Σ_u c_vu I_u) / P_v`.
pub fn simulate_synthetic(cfg: &SynthConfig) -> Result<SynthTrajectory> {
    cfg.validate()?;
    let n = cfg.regions;
    let h = 1.0 / SYNTH_SUBSTEPS as f64;
    // State layout: S, I, R, cumulative infections, each n long.
    let mut y: Vec<f64> = Vec::with_capacity(4 * n);
    y.extend((0..n).map(|v| cfg.population[v] - cfg.initial_infected[v]));
    y.extend(cfg.initial_infected.iter().copied());
    y.extend(core::iter::repeat_n(0.0, 2 * n));

    let field = |t: f64, y: &[f64]| -> Vec<f64> {
        let beta = cfg.beta_at(t);
        let mut d = vec![0.0; 4 * n];
        for v in 0..n {
            let pressure = cfg.coupling[v]
                .iter()
                .zip(&y[n..2 * n])
                .fold(y[n + v], |acc, (c, i)| acc + c * i);
            let infection = beta * cfg.scale(v) * y[v] * pressure / cfg.population[v];
            let recovery = cfg.gamma * y[n + v];
            d[v] = -infection;
            d[n + v] = infection - recovery;
            d[2 * n + v] = recovery;
            d[3 * n + v] = infection;
        }
        d
    };
    let axpy = |y: &[f64], k: &[f64], a: f64| -> Vec<f64> {
        y.iter().zip(k).map(|(y, k)| y + a * k).collect()
    };

    let snapshot = |y: &[f64], block: usize| y[block * n..(block + 1) * n].to_vec();
    let mut traj = SynthTrajectory {
        s: vec![snapshot(&y, 0)],
        i: vec![snapshot(&y, 1)],
        r: vec![snapshot(&y, 2)],
        incidence: vec![Vec::with_capacity(cfg.length); n],
    };
    for step in 0..cfg.length {
        let before = snapshot(&y, 3);
        for sub in 0..SYNTH_SUBSTEPS {
            let t = step as f64 + sub as f64 * h;
            let k1 = field(t, &y);
            let k2 = field(t + 0.5 * h, &axpy(&y, &k1, 0.5 * h));
            let k3 = field(t + 0.5 * h, &axpy(&y, &k2, 0.5 * h));
            let k4 = field(t + h, &axpy(&y, &k3, h));
            for j in 0..4 * n {
                y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("synthetic trajectory diverged at step {step}")));
        }
        for v in 0..n {
            traj.incidence[v].push(y[3 * n + v] - before[v]);
        }
        traj.s.push(snapshot(&y, 0));
        traj.i.push(snapshot(&y, 1));
        traj.r.push(snapshot(&y, 2));
    }
    Ok(traj)
}

/// Synthetic dataset: per-step new infections plus Gaussian noise, clipped
/// at zero. Adjacency marks every coupled pair in either direction.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<EpidemicDataset> {
    let traj = simulate_synthetic(cfg)?;
    let n = cfg.regions;
    let mut rng = rng::seeded(rng::derive(cfg.seed, &[0x5e1e5]));
    let mut data = Vec::with_capacity(n * cfg.length);
    for clean in &traj.incidence {
        let peak = clean.iter().copied().fold(0.0, f64::max);
        let std = cfg.noise_rel * peak;
        for &x in clean {
            let eps: f64 = StandardNormal.sample(&mut rng);
            data.push((x + std * eps).max(0.0));
        }
    }
    let mut adjacency = Tensor::zeros(&[n, n]);
    for u in 0..n {
        for v in 0..n {
            if u != v && (cfg.coupling[u][v] > 0.0 || cfg.coupling[v][u] > 0.0) {
                adjacency.set(u, v, 1.0);
            }
        }
    }
    let names = (0..n).map(|v| format!("region{v}")).collect();
    EpidemicDataset::new(
        names,
        Tensor::matrix(n, cfg.length, data)?,
        adjacency,
        Splits::chronological(cfg.length, cfg.train_frac, cfg.val_frac)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(len: usize) -> EpidemicDataset {
        let series = Tensor::matrix(2, len, (0..2 * len).map(|x| x as f64).collect()).unwrap();
        let adjacency = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        EpidemicDataset::new(
            vec!["a".into(), "b".into()],
            series,
            adjacency,
            Splits::chronological(len, 0.6, 0.2).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn window_count() {
        let ds = EpidemicDataset {
            splits: Splits {
                train: 0..100,
                val: 100..100,
                test: 100..100,
            },
            ..toy(100)
        };
        let norm = Normalizer::fit(&ds);
        let w = make_windows(&ds, &norm, SplitKind::Train, 20, 5, 0.0, 1).unwrap();
        assert_eq!(w.len(), 76);
        assert_eq!(w[0].knots[0], (0..20).collect::<Vec<_>>());
        for h in [5, 10, 15] {
            assert!(make_windows(&ds, &norm, SplitKind::Train, 20, h, 0.0, 1).is_ok());
        }
    }

    #[test]
    fn short_split_is_a_config_error() {
        let ds = toy(30);
        let norm = Normalizer::fit(&ds);
        assert!(matches!(
            make_windows(&ds, &norm, SplitKind::Test, 5, 5, 0.0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn windows_stay_inside_their_split() {
        let ds = toy(100);
        let norm = Normalizer::fit(&ds);
        for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            let r = ds.splits.get(kind);
            for w in make_windows(&ds, &norm, kind, 6, 3, 0.3, 9).unwrap() {
                assert!(r.contains(&w.start));
                assert!(r.contains(&(w.last_input_index() + 3)));
            }
        }
    }

    #[test]
    fn normalizer_uses_train_only() {
        let ds = toy(10);
        let norm = Normalizer::fit(&ds);
        // Train covers steps 0..6 of region 0: values 0..5.
        assert_eq!(norm.mean[0], 2.5);
        let x = 123.456;
        assert!((norm.denormalize(1, norm.normalize(1, x)) - x).abs() < 1e-10);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - libm::sqrt(2.5)).abs() < 1e-15);
        assert_eq!(rmse(&[1.0, 2.0], &[2.0, 4.0]), rmse(&[2.0, 4.0], &[1.0, 2.0]));
        assert!(rmse(&[], &[]).is_err());
        assert_eq!(peak_time_error(&[0.0, 8.0, 0.0], &[1.0, 10.0, 1.0], 5.0), Some(2.0));
        assert_eq!(peak_time_error(&[0.0], &[1.0], 5.0), None);
        let p = [0.5, 2.0, -1.0];
        let t = [1.0, 1.0, 1.0];
        assert_eq!(peak_time_error(&p, &t, f64::NEG_INFINITY), Some(mae(&p, &t).unwrap()));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 50.0), 2.5);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 80.0), 4.2);
    }

    #[test]
    fn dataset_validation() {
        let ds = toy(10);
        let bad = Tensor::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        assert!(EpidemicDataset::new(ds.region_names.clone(), ds.series.clone(), bad, ds.splits.clone()).is_err());
        let mut neg = ds.series.clone();
        neg.set(0, 0, -1.0);
        assert!(EpidemicDataset::new(ds.region_names.clone(), neg, ds.adjacency.clone(), ds.splits).is_err());
    }
}
