//! Full forecasting pipeline: parameters, the joint vector field over
//! `[Z, S, I, R, H]`, and the forward pass from a window to a prediction.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::eano::{self, Affine, DriftOptions, DriveMlp, EanoParams, LatentState};
use crate::error::{Error, Result};
use crate::fusion::{self, AttentionParams, HeadParams};
use crate::gltg::{self, GltgParams, TransmissionGraph};
use crate::ode::{self, Method, OdeConfig, VectorField};
use crate::rng;
use crate::spline::ControlPath;
use crate::tensor::{Tape, Tensor, Var};

/// Which edge weights drive the SIR aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    /// Mask-fused blend of geography and the learned dynamic graph.
    #[default]
    Fused,
    /// Geographic adjacency only; the dynamic graph is never built.
    Static,
}

/// Query of the cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    #[default]
    Z,
    H,
}

/// Architecture settings that shape the parameters or the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Path channels including time.
    pub channels: usize,
    pub n_heads: usize,
    pub graph: GraphMode,
    pub query: QueryMode,
    pub drift: DriftOptions,
    pub solver: Method,
    pub substeps: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.channels < 2 || self.substeps == 0 {
            return Err(Error::Config(format!(
                "hidden {} and substeps {} must be positive, channels {} at least 2",
                self.hidden, self.substeps, self.channels
            )));
        }
        if self.n_heads == 0 || self.hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.n_heads
            )));
        }
        Ok(())
    }
}

macro_rules! param_ids {
    ($($variant:ident => $name:literal),* $(,)?) => {
        /// Every learnable tensor, in storage order.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum ParamId { $($variant),* }

        impl ParamId {
            pub const ALL: &'static [ParamId] = &[$(ParamId::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(ParamId::$variant => $name),* }
            }
        }
    };
}

param_ids! {
    WTrans => "eano.w_trans",
    WRecov => "eano.w_recov",
    PsiW1 => "eano.psi.w1",
    PsiB1 => "eano.psi.b1",
    PsiW2 => "eano.psi.w2",
    PsiB2 => "eano.psi.b2",
    EncZW => "eano.enc_z.weight",
    EncZB => "eano.enc_z.bias",
    EncSW => "eano.enc_s.weight",
    EncSB => "eano.enc_s.bias",
    EncIW => "eano.enc_i.weight",
    EncIB => "eano.enc_i.bias",
    EncRW => "eano.enc_r.weight",
    EncRB => "eano.enc_r.bias",
    GnnW => "gltg.w_g",
    GraphW1 => "gltg.w1",
    GraphB1 => "gltg.b1",
    GraphW2 => "gltg.w2",
    GraphB2 => "gltg.b2",
    MaskGain => "gltg.w3",
    MaskBias => "gltg.b3",
    EncHW => "gltg.enc_h.weight",
    EncHB => "gltg.enc_h.bias",
    AttnQ => "attn.w_q",
    AttnK => "attn.w_k",
    AttnV => "attn.w_v",
    AttnO => "attn.w_o",
    HeadW1 => "head.w1",
    HeadB1 => "head.b1",
    HeadW2 => "head.w2",
    HeadB2 => "head.b2",
}

enum Init {
    Xavier,
    /// Xavier scaled down, keeping the initial drive near zero.
    SmallXavier(f64),
    Zeros,
    Value(f64),
}

impl ParamId {
    pub fn shape(self, d: usize, c: usize) -> Vec<usize> {
        use ParamId::*;
        match self {
            WTrans => alloc::vec![2 * d, d],
            WRecov | PsiW1 | GnnW | GraphW1 | GraphW2 | AttnQ | AttnK | AttnV | AttnO => {
                alloc::vec![d, d]
            }
            PsiW2 => alloc::vec![d, d * c],
            PsiB2 => alloc::vec![1, d * c],
            EncZW | EncSW | EncIW | EncRW | EncHW => alloc::vec![c, d],
            PsiB1 | EncZB | EncSB | EncIB | EncRB | GraphB1 | GraphB2 | EncHB | HeadB1 => {
                alloc::vec![1, d]
            }
            MaskGain | MaskBias => Vec::new(),
            HeadW1 => alloc::vec![2 * d, d],
            HeadW2 => alloc::vec![d, 1],
            HeadB2 => alloc::vec![1, 1],
        }
    }

    fn init(self) -> Init {
        use ParamId::*;
        match self {
            PsiW2 => Init::SmallXavier(0.1),
            MaskGain => Init::Value(1.0),
            MaskBias => Init::Value(0.0),
            PsiB1 | PsiB2 | EncZB | EncSB | EncIB | EncRB | GraphB1 | GraphB2 | EncHB | HeadB1
            | HeadB2 => Init::Zeros,
            _ => Init::Xavier,
        }
    }

    pub fn from_name(name: &str) -> Option<ParamId> {
        ParamId::ALL.iter().copied().find(|p| p.name() == name)
    }
}

/// Owned parameter values, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub hidden: usize,
    pub channels: usize,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Xavier-uniform weights (the drive output layer at a tenth of the
    /// usual range), zero biases, mask gain 1 and bias 0.
    pub fn init(hidden: usize, channels: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(rng::derive(seed, &[0x1417]));
        let tensors = ParamId::ALL
            .iter()
            .map(|&id| {
                let shape = id.shape(hidden, channels);
                match id.init() {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Value(v) => Tensor::full(&shape, v),
                    kind @ (Init::Xavier | Init::SmallXavier(_)) => {
                        let gain = if let Init::SmallXavier(g) = kind { g } else { 1.0 };
                        let (fan_in, fan_out) = (shape[0] as f64, shape[1] as f64);
                        let a = gain * libm::sqrt(6.0 / (fan_in + fan_out));
                        let mut t = Tensor::zeros(&shape);
                        for x in t.data_mut() {
                            *x = rng.random_range(-a..a);
                        }
                        t
                    }
                }
            })
            .collect();
        ModelParams {
            hidden,
            channels,
            tensors,
        }
    }

    /// Builds from named tensors, checking that every parameter is present
    /// with the right shape.
    pub fn from_named(
        hidden: usize,
        channels: usize,
        named: impl IntoIterator<Item = (ParamId, Tensor)>,
    ) -> Result<Self> {
        let mut slots: Vec<Option<Tensor>> = alloc::vec![None; ParamId::ALL.len()];
        for (id, t) in named {
            let expected = id.shape(hidden, channels);
            if t.shape() != expected.as_slice() {
                return Err(Error::shape(id.name(), &expected, t.shape()));
            }
            slots[id as usize] = Some(t);
        }
        let tensors = slots
            .into_iter()
            .zip(ParamId::ALL)
            .map(|(t, id)| t.ok_or_else(|| Error::Contract(format!("missing parameter {}", id.name()))))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            hidden,
            channels,
            tensors,
        })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        ParamId::ALL.iter().copied().zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every parameter as a leaf, in [`ParamId`] order. Because the
    /// parameters are the first nodes of a fresh tape, their [`Var`]s are the
    /// same on every tape and gradients from separate tapes can be merged.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        BoundParams { vars }
    }
}

/// On-tape parameter handles.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        ParamId::ALL.iter().copied().zip(self.vars.iter().copied())
    }

    fn affine(&self, weight: ParamId, bias: ParamId) -> Affine {
        Affine {
            weight: self.var(weight),
            bias: self.var(bias),
        }
    }

    pub fn eano(&self) -> EanoParams {
        use ParamId::*;
        EanoParams {
            w_trans: self.var(WTrans),
            w_recov: self.var(WRecov),
            psi_t: DriveMlp {
                w1: self.var(PsiW1),
                b1: self.var(PsiB1),
                w2: self.var(PsiW2),
                b2: self.var(PsiB2),
            },
            enc_z: self.affine(EncZW, EncZB),
            enc_s: self.affine(EncSW, EncSB),
            enc_i: self.affine(EncIW, EncIB),
            enc_r: self.affine(EncRW, EncRB),
        }
    }

    pub fn gltg(&self) -> GltgParams {
        use ParamId::*;
        GltgParams {
            w_g: self.var(GnnW),
            w1: self.var(GraphW1),
            b1: self.var(GraphB1),
            w2: self.var(GraphW2),
            b2: self.var(GraphB2),
            w3: self.var(MaskGain),
            b3: self.var(MaskBias),
            enc_h: self.affine(EncHW, EncHB),
        }
    }

    pub fn attention(&self) -> AttentionParams {
        use ParamId::*;
        AttentionParams {
            w_q: self.var(AttnQ),
            w_k: self.var(AttnK),
            w_v: self.var(AttnV),
            w_o: self.var(AttnO),
        }
    }

    pub fn head(&self) -> HeadParams {
        use ParamId::*;
        HeadParams {
            w1: self.var(HeadW1),
            b1: self.var(HeadB1),
            w2: self.var(HeadW2),
            b2: self.var(HeadB2),
        }
    }
}

/// Control paths of one window, one per region, over window-relative time.
#[derive(Debug, Clone)]
pub struct WindowPaths {
    paths: Vec<ControlPath>,
    start: f64,
    end: f64,
}

impl WindowPaths {
    pub fn from_sample(sample: &WindowSample) -> Result<Self> {
        let n = sample.inputs.rows();
        let paths = (0..n)
            .map(|v| ControlPath::fit_scalar(&sample.knot_times(v), &sample.knot_values(v)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(paths)
    }

    pub fn new(paths: Vec<ControlPath>) -> Result<Self> {
        let first = paths
            .first()
            .ok_or_else(|| Error::InsufficientData("window has no regions".into()))?;
        let (start, end) = (first.start(), first.end());
        if paths
            .iter()
            .any(|p| p.start() != start || p.end() != end || p.channels() != first.channels())
        {
            return Err(Error::Contract(
                "all regions of a window must share the time domain and channel count".into(),
            ));
        }
        Ok(WindowPaths { paths, start, end })
    }

    pub fn regions(&self) -> usize {
        self.paths.len()
    }

    pub fn channels(&self) -> usize {
        self.paths[0].channels()
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    fn stack(&self, f: impl Fn(&ControlPath) -> Result<Vec<f64>>) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.regions() * self.channels());
        for p in &self.paths {
            data.extend(f(p)?);
        }
        Tensor::matrix(self.regions(), self.channels(), data)
    }

    /// `Q(t)` for all regions, N×c.
    pub fn values(&self, t: f64) -> Result<Tensor> {
        let t = t.clamp(self.start, self.end);
        self.stack(|p| p.evaluate(t))
    }

    /// `dQ/dt` for all regions, N×c. Stage times that round past the end of
    /// the domain are clamped onto it.
    pub fn slopes(&self, t: f64) -> Result<Tensor> {
        let t = t.clamp(self.start, self.end);
        self.stack(|p| p.derivative(t))
    }
}

/// Time derivative of `[Z, S, I, R, H]`.
pub struct JointField<'a> {
    pub paths: &'a WindowPaths,
    pub params: &'a BoundParams,
    pub adjacency: Var,
    pub deg_norm: Var,
    pub config: &'a ModelConfig,
}

impl JointField<'_> {
    /// Edge weights the drift aggregates over for a given trend state.
    pub fn edges(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        match self.config.graph {
            GraphMode::Static => Ok(self.adjacency),
            GraphMode::Fused => {
                let gp = self.params.gltg();
                let dynamic = gltg::dynamic_graph(tape, h, &gp)?;
                Ok(gltg::fuse_mask(tape, self.adjacency, dynamic, gp.w3, gp.b3)?.1)
            }
        }
    }
}

impl VectorField for JointField<'_> {
    fn derivative(&self, tape: &mut Tape, t: f64, blocks: &[Var]) -> Result<Vec<Var>> {
        let state = LatentState::from_slice(blocks)?;
        let ep = self.params.eano();
        let slopes = tape.constant(self.paths.slopes(t)?);
        let g = eano::temporal_drive(tape, state.z, slopes, &ep.psi_t)?;
        let dh = gltg::global_trend_field(tape, state.h, g, self.deg_norm, self.params.var(ParamId::GnnW))?;
        let e_t = self.edges(tape, state.h)?;
        let [dz, ds, di, dr] = eano::eano_field(tape, &state, g, e_t, &ep, &self.config.drift)?;
        Ok(alloc::vec![dz, ds, di, dr, dh])
    }
}

/// Graph tensors placed on a tape once per forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GraphVars {
    pub adjacency: Var,
    pub deg_norm: Var,
}

impl GraphVars {
    pub fn record(tape: &mut Tape, graph: &TransmissionGraph) -> Self {
        GraphVars {
            adjacency: tape.constant(graph.adjacency.clone()),
            deg_norm: tape.constant(graph.deg_norm.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// Normalized predictions, N×1.
    pub prediction: Var,
    pub final_state: LatentState,
    pub attention: Vec<Var>,
    /// Fused edge weights at the end of the window.
    pub final_edges: Var,
}

/// Encode `Q(t_0)`, integrate the joint system over the window, fuse and
/// read out.
pub fn forward(
    tape: &mut Tape,
    params: &BoundParams,
    graph: GraphVars,
    paths: &WindowPaths,
    config: &ModelConfig,
) -> Result<Forward> {
    config.validate()?;
    if paths.channels() != config.channels {
        return Err(Error::shape("forward", &[config.channels], &[paths.channels()]));
    }
    if tape.value(graph.adjacency).rows() != paths.regions() {
        return Err(Error::shape(
            "forward",
            tape.shape(graph.adjacency),
            &[paths.regions(), paths.regions()],
        ));
    }
    let q0 = tape.constant(paths.values(paths.start())?);
    let ep = params.eano();
    let initial = LatentState {
        z: ep.enc_z.apply(tape, q0)?,
        s: ep.enc_s.apply(tape, q0)?,
        i: ep.enc_i.apply(tape, q0)?,
        r: ep.enc_r.apply(tape, q0)?,
        h: params.gltg().enc_h.apply(tape, q0)?,
    };
    let field = JointField {
        paths,
        params,
        adjacency: graph.adjacency,
        deg_norm: graph.deg_norm,
        config,
    };
    let ode_cfg = OdeConfig {
        method: config.solver,
        substeps_per_interval: config.substeps,
        t_start: paths.start(),
        t_end: paths.end(),
    };
    let trajectory = ode::integrate(&field, tape, &initial.to_vec(), &ode_cfg)?;
    let last = LatentState::from_slice(trajectory.last())?;
    let final_edges = field.edges(tape, last.h)?;
    let query = match config.query {
        QueryMode::Z => last.z,
        QueryMode::H => last.h,
    };
    let fused = fusion::cross_attention(
        tape,
        query,
        [last.s, last.i, last.r],
        &params.attention(),
        config.n_heads,
    )?;
    let prediction = fusion::predict(tape, fused.fused, last.z, &params.head())?;
    Ok(Forward {
        prediction,
        final_state: last,
        attention: fused.weights,
        final_edges,
    })
}

/// Forward pass on a fresh tape, returning normalized predictions per region.
pub fn predict_window(
    params: &ModelParams,
    graph: &TransmissionGraph,
    sample: &WindowSample,
    config: &ModelConfig,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let gv = GraphVars::record(&mut tape, graph);
    let paths = WindowPaths::from_sample(sample)?;
    let out = forward(&mut tape, &bound, gv, &paths, config)?;
    Ok(tape.value(out.prediction).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitKind;

    fn config(d: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            hidden: d,
            channels: 2,
            n_heads: heads,
            graph: GraphMode::Fused,
            query: QueryMode::Z,
            drift: DriftOptions::default(),
            solver: Method::Rk4,
            substeps: 2,
        }
    }

    fn sample(n: usize, window: usize) -> WindowSample {
        let data = (0..n * window)
            .map(|k| libm::sin(0.3 * k as f64) + 0.1 * (k % n) as f64)
            .collect();
        WindowSample {
            start: 0,
            split: SplitKind::Train,
            inputs: Tensor::matrix(n, window, data).unwrap(),
            target: alloc::vec![0.0; n],
            knots: alloc::vec![(0..window).collect(); n],
        }
    }

    fn ring(n: usize) -> TransmissionGraph {
        let mut a = Tensor::zeros(&[n, n]);
        for v in 0..n {
            a.set(v, (v + 1) % n, 1.0);
            a.set((v + 1) % n, v, 1.0);
        }
        TransmissionGraph::new(a.clone(), a).unwrap()
    }

    #[test]
    fn parameter_registry_is_complete() {
        assert_eq!(ParamId::ALL.len(), 31);
        for (k, id) in ParamId::ALL.iter().enumerate() {
            assert_eq!(*id as usize, k);
            assert_eq!(ParamId::from_name(id.name()), Some(*id));
        }
        let p = ModelParams::init(4, 2, 0);
        assert_eq!(p.get(ParamId::MaskGain).item(), 1.0);
        assert_eq!(p.get(ParamId::WTrans).shape(), &[8, 4]);
        assert_eq!(p.get(ParamId::PsiW2).shape(), &[4, 8]);
        assert_eq!(p, ModelParams::init(4, 2, 0));
        assert_ne!(p, ModelParams::init(4, 2, 1));
    }

    #[test]
    fn from_named_rejects_missing_and_misshaped() {
        let p = ModelParams::init(4, 2, 3);
        let all: Vec<_> = p.iter().map(|(id, t)| (id, t.clone())).collect();
        assert_eq!(ModelParams::from_named(4, 2, all.clone()).unwrap(), p);
        assert!(ModelParams::from_named(4, 2, all[1..].to_vec()).is_err());
        let mut bad = all;
        bad[0].1 = Tensor::zeros(&[3, 3]);
        assert!(ModelParams::from_named(4, 2, bad).is_err());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = config(4, 2);
        let p = ModelParams::init(4, 2, 11);
        let s = sample(3, 5);
        let a = predict_window(&p, &ring(3), &s, &cfg).unwrap();
        let b = predict_window(&p, &ring(3), &s, &cfg).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn static_mode_ignores_dynamic_graph_params() {
        let cfg = ModelConfig {
            graph: GraphMode::Static,
            ..config(4, 1)
        };
        let p = ModelParams::init(4, 2, 5);
        let mut q = p.clone();
        *q.get_mut(ParamId::GraphW1) = Tensor::full(&[4, 4], 3.0);
        *q.get_mut(ParamId::MaskBias) = Tensor::scalar(-2.0);
        let s = sample(3, 6);
        assert_eq!(
            predict_window(&p, &ring(3), &s, &cfg).unwrap(),
            predict_window(&q, &ring(3), &s, &cfg).unwrap()
        );
    }

    #[test]
    fn region_permutation_equivariance() {
        let cfg = config(4, 2);
        let p = ModelParams::init(4, 2, 2);
        let s = sample(3, 5);
        let mut a = Tensor::zeros(&[3, 3]);
        a.set(0, 1, 1.0);
        a.set(1, 0, 1.0);
        let g = TransmissionGraph::new(a.clone(), a.clone()).unwrap();
        let y = predict_window(&p, &g, &s, &cfg).unwrap();

        let perm = [2, 0, 1];
        let mut pa = Tensor::zeros(&[3, 3]);
        let mut inputs = Tensor::zeros(&[3, 5]);
        for u in 0..3 {
            for v in 0..3 {
                pa.set(u, v, a.get(perm[u], perm[v]));
            }
            for k in 0..5 {
                inputs.set(u, k, s.inputs.get(perm[u], k));
            }
        }
        let ps = WindowSample { inputs, ..s };
        let yp = predict_window(&p, &TransmissionGraph::new(pa.clone(), pa).unwrap(), &ps, &cfg).unwrap();
        for u in 0..3 {
            assert!((yp[u] - y[perm[u]]).abs() < 1e-12);
        }
    }
}
