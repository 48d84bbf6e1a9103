//! Epidemic-aware latent dynamics.
//!
//! Latent susceptible, infectious and recovered blocks evolve under a
//! network-SIR drift: the transmission term mixes a region's own susceptible
//! features with the edge-weighted sum of its neighbours' infectious
//! features, and recovery is a linear map of the region's infectious block.
//! The observed path drives everything through the temporal drive
//! `g = reshape(ψ(Z)) · dQ/dt`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// How the SIR drift combines with the temporal drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftMode {
    /// `dC/dt = φ_c(C) ⊙ g(t)`.
    #[default]
    Modulated,
    /// `dC/dt = φ_c(C)`.
    Pure,
}

/// Preprocessing of the fused edge weights before aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeNorm {
    /// Rows rescaled to sum to one.
    #[default]
    Row,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftOptions {
    pub mode: DriftMode,
    pub edge_norm: EdgeNorm,
    /// Edge weights below this value are zeroed before normalization.
    pub edge_threshold: Option<f64>,
}

/// The five integrated blocks, each N×d.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentState {
    pub z: Var,
    pub s: Var,
    pub i: Var,
    pub r: Var,
    pub h: Var,
}

impl LatentState {
    pub fn to_vec(self) -> Vec<Var> {
        alloc::vec![self.z, self.s, self.i, self.r, self.h]
    }

    pub fn from_slice(blocks: &[Var]) -> Result<Self> {
        match *blocks {
            [z, s, i, r, h] => Ok(LatentState { z, s, i, r, h }),
            _ => Err(Error::shape("LatentState", &[5], &[blocks.len()])),
        }
    }

    pub fn validate(&self, tape: &Tape) -> Result<()> {
        let reference = tape.shape(self.z);
        for v in [self.s, self.i, self.r, self.h] {
            if tape.shape(v) != reference {
                return Err(Error::shape("LatentState", reference, tape.shape(v)));
            }
        }
        if self.to_vec().iter().any(|v| !tape.value(*v).is_finite()) {
            return Err(Error::Numeric("latent state has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Two-layer perceptron `tanh(tanh(x W1 + b1) W2 + b2)` producing the
/// flattened d×c drive map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DriveMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub weight: Var,
    pub bias: Var,
}

impl Affine {
    /// `x W + 1 bᵀ` for an m-row input.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rows = tape.value(x).rows();
        let xw = tape.matmul(x, self.weight)?;
        let b = tape.repeat_rows(self.bias, rows)?;
        tape.add(xw, b)
    }
}

/// Bound (on-tape) parameters of the latent disease dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EanoParams {
    /// 2d×d.
    pub w_trans: Var,
    /// d×d.
    pub w_recov: Var,
    pub psi_t: DriveMlp,
    pub enc_z: Affine,
    pub enc_s: Affine,
    pub enc_i: Affine,
    pub enc_r: Affine,
}

/// `g_v = reshape(ψ(Z_v), d×c) · dQ_v/dt`, i.e. dZ/dt.
pub fn temporal_drive(tape: &mut Tape, z: Var, dqdt: Var, psi: &DriveMlp) -> Result<Var> {
    let (n, d) = (tape.value(z).rows(), tape.value(z).cols());
    let c = tape.value(dqdt).cols();
    if tape.value(dqdt).rows() != n {
        return Err(Error::shape("temporal_drive", tape.shape(z), tape.shape(dqdt)));
    }
    let hidden = Affine {
        weight: psi.w1,
        bias: psi.b1,
    }
    .apply(tape, z)?;
    let hidden = tape.tanh(hidden);
    let out = Affine {
        weight: psi.w2,
        bias: psi.b2,
    }
    .apply(tape, hidden)?;
    let map = tape.tanh(out);
    if tape.value(map).cols() != d * c {
        return Err(Error::shape("temporal_drive", &[n, d * c], tape.shape(map)));
    }
    tape.contract_channels(map, dqdt)
}

/// Edge weights actually used for aggregation (threshold, then normalize).
pub fn edge_weights(tape: &mut Tape, e: Var, opts: &DriftOptions) -> Result<Var> {
    let mut w = e;
    if let Some(th) = opts.edge_threshold {
        let keep = tape
            .value(e)
            .data()
            .iter()
            .map(|&x| if x >= th { 1.0 } else { 0.0 })
            .collect();
        w = tape.mask(w, keep)?;
    }
    match opts.edge_norm {
        EdgeNorm::Row => tape.row_normalize(w),
        EdgeNorm::Raw => Ok(w),
    }
}

/// Network-SIR drift `(dS, dI, dR)` for already-prepared edge weights.
///
/// `dI` is formed as `-(dS + dR)`, so `(dS + dR) + dI` is exactly zero in
/// floating point.
pub fn sir_drift_weighted(
    tape: &mut Tape,
    s: Var,
    i: Var,
    weights: Var,
    w_trans: Var,
    w_recov: Var,
) -> Result<(Var, Var, Var)> {
    let aggregated = tape.matmul(weights, i)?;
    let joint = tape.concat(s, aggregated)?;
    let transmission = tape.matmul(joint, w_trans)?;
    let recovery = tape.matmul(i, w_recov)?;
    let ds = tape.neg(transmission);
    let dr = recovery;
    let outflow = tape.add(ds, dr)?;
    let di = tape.neg(outflow);
    check_finite(tape, &[ds, di, dr])?;
    Ok((ds, di, dr))
}

/// Network-SIR drift on raw fused edges `e_t` (N×N, entries in [0, 1]).
pub fn sir_drift(
    tape: &mut Tape,
    s: Var,
    i: Var,
    e_t: Var,
    w_trans: Var,
    w_recov: Var,
    opts: &DriftOptions,
) -> Result<(Var, Var, Var)> {
    let weights = edge_weights(tape, e_t, opts)?;
    sir_drift_weighted(tape, s, i, weights, w_trans, w_recov)
}

fn check_finite(tape: &Tape, vars: &[Var]) -> Result<()> {
    if vars.iter().all(|v| tape.value(*v).is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite value in SIR drift".into()))
    }
}

/// Applies the drive to a drift triple, keeping exact conservation.
pub fn modulate(
    tape: &mut Tape,
    drift: (Var, Var, Var),
    g: Var,
    mode: DriftMode,
) -> Result<(Var, Var, Var)> {
    match mode {
        DriftMode::Pure => Ok(drift),
        DriftMode::Modulated => {
            let ds = tape.mul(drift.0, g)?;
            let dr = tape.mul(drift.2, g)?;
            let outflow = tape.add(ds, dr)?;
            let di = tape.neg(outflow);
            Ok((ds, di, dr))
        }
    }
}

/// Derivatives of `(Z, S, I, R)` given the drive `g` and fused edges `e_t`.
pub fn eano_field(
    tape: &mut Tape,
    state: &LatentState,
    g: Var,
    e_t: Var,
    params: &EanoParams,
    opts: &DriftOptions,
) -> Result<[Var; 4]> {
    let drift = sir_drift(tape, state.s, state.i, e_t, params.w_trans, params.w_recov, opts)?;
    let (ds, di, dr) = modulate(tape, drift, g, opts.mode)?;
    Ok([g, ds, di, dr])
}

/// Textbook SIR with rates per step and total population `population`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalSir {
    pub beta: f64,
    pub gamma: f64,
    pub population: f64,
}

impl ClassicalSir {
    pub fn derivative(&self, s: f64, i: f64, _r: f64) -> (f64, f64, f64) {
        let infection = self.beta * s * i / self.population;
        let recovery = self.gamma * i;
        (-infection, infection - recovery, recovery)
    }

    /// One RK4 step of size `h`.
    pub fn step(&self, s: f64, i: f64, r: f64, h: f64) -> Result<(f64, f64, f64)> {
        let add = |y: (f64, f64, f64), k: (f64, f64, f64), w: f64| {
            (y.0 + w * k.0, y.1 + w * k.1, y.2 + w * k.2)
        };
        let y = (s, i, r);
        let k1 = self.derivative(y.0, y.1, y.2);
        let y2 = add(y, k1, 0.5 * h);
        let k2 = self.derivative(y2.0, y2.1, y2.2);
        let y3 = add(y, k2, 0.5 * h);
        let k3 = self.derivative(y3.0, y3.1, y3.2);
        let y4 = add(y, k3, h);
        let k4 = self.derivative(y4.0, y4.1, y4.2);
        let next = add(
            add(add(add(y, k1, h / 6.0), k2, h / 3.0), k3, h / 3.0),
            k4,
            h / 6.0,
        );
        for (name, v) in [("S", next.0), ("I", next.1), ("R", next.2)] {
            if !v.is_finite() || v < -1e-9 {
                return Err(Error::Numeric(format!("compartment {name} became {v}")));
            }
        }
        Ok(next)
    }

    /// Runs `steps` RK4 steps, returning every state including the first.
    pub fn simulate(&self, s: f64, i: f64, r: f64, h: f64, steps: usize) -> Result<Vec<(f64, f64, f64)>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push((s, i, r));
        let mut y = (s, i, r);
        for _ in 0..steps {
            y = self.step(y.0, y.1, y.2, h)?;
            out.push(y);
        }
        Ok(out)
    }
}
