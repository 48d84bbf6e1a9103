//! Global/local fusion by per-region multi-head cross-attention over the
//! three disease-state tokens, the readout MLP and the training loss.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Bound attention projections. Head `μ` uses columns
/// `μ·d_f .. (μ+1)·d_f` of the query, key and value maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Readout `[F ‖ Z] → ReLU(· W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Fused features, N×d.
    pub fused: Var,
    /// Per-head attention weights, each N×3.
    pub weights: Vec<Var>,
}

/// Cross-attention of each region's query over its own `[S, I, R]` tokens.
pub fn cross_attention(
    tape: &mut Tape,
    query: Var,
    tokens: [Var; 3],
    params: &AttentionParams,
    n_heads: usize,
) -> Result<AttentionOutput> {
    let (n, d) = (tape.value(query).rows(), tape.value(query).cols());
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!(
            "hidden size {d} is not divisible by {n_heads} heads"
        )));
    }
    for t in tokens {
        if tape.shape(t) != tape.shape(query) {
            return Err(Error::shape("cross_attention", tape.shape(query), tape.shape(t)));
        }
    }
    let df = d / n_heads;
    let scale = 1.0 / libm::sqrt(df as f64);
    let q_all = tape.matmul(query, params.w_q)?;
    let mut k_all = [q_all; 3];
    let mut v_all = [q_all; 3];
    for (j, t) in tokens.iter().enumerate() {
        k_all[j] = tape.matmul(*t, params.w_k)?;
        v_all[j] = tape.matmul(*t, params.w_v)?;
    }

    let mut weights = Vec::with_capacity(n_heads);
    let mut heads: Option<Var> = None;
    for mu in 0..n_heads {
        let start = mu * df;
        let q = tape.slice_cols(q_all, start, df)?;
        let mut scores: Option<Var> = None;
        let mut values = [q; 3];
        for j in 0..3 {
            let k = tape.slice_cols(k_all[j], start, df)?;
            values[j] = tape.slice_cols(v_all[j], start, df)?;
            let qk = tape.mul(q, k)?;
            let dot = tape.sum_cols(qk)?;
            let s = tape.scale(dot, scale);
            scores = Some(match scores {
                None => s,
                Some(acc) => tape.concat(acc, s)?,
            });
        }
        let attn = tape.softmax_rows(scores.expect("three tokens"))?;
        let mut omega: Option<Var> = None;
        for (j, v) in values.iter().enumerate() {
            let col = tape.slice_cols(attn, j, 1)?;
            let wide = tape.repeat_cols(col, df)?;
            let term = tape.mul(wide, *v)?;
            omega = Some(match omega {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let omega = omega.expect("three tokens");
        heads = Some(match heads {
            None => omega,
            Some(acc) => tape.concat(acc, omega)?,
        });
        weights.push(attn);
    }
    debug_assert_eq!(tape.value(heads.unwrap()).rows(), n);
    let fused = tape.matmul(heads.expect("at least one head"), params.w_o)?;
    Ok(AttentionOutput { fused, weights })
}

/// Per-region prediction `y_v = MLP([F_v ‖ Z_v])`, returned as N×1.
pub fn predict(tape: &mut Tape, fused: Var, z: Var, params: &HeadParams) -> Result<Var> {
    if tape.shape(fused) != tape.shape(z) {
        return Err(Error::shape("predict", tape.shape(fused), tape.shape(z)));
    }
    let x = tape.concat(fused, z)?;
    let hidden = crate::eano::Affine {
        weight: params.w1,
        bias: params.b1,
    }
    .apply(tape, x)?;
    let hidden = tape.relu(hidden);
    crate::eano::Affine {
        weight: params.w2,
        bias: params.b2,
    }
    .apply(tape, hidden)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    Mse,
    Mae,
}

/// Mean squared or mean absolute residual over every entry.
pub fn loss(tape: &mut Tape, y: Var, y_true: Var, mode: LossMode) -> Result<Var> {
    if tape.shape(y) != tape.shape(y_true) {
        return Err(Error::shape("loss", tape.shape(y), tape.shape(y_true)));
    }
    let r = tape.sub(y, y_true)?;
    let e = match mode {
        LossMode::Mse => tape.square(r),
        LossMode::Mae => tape.abs(r),
    };
    Ok(tape.mean(e))
}
