//! Global-guided local transmission graph.
//!
//! Static part: geographic adjacency `A` augmented with DTW nearest
//! neighbours into `Ã`, normalized with self-loops for the residual GNN that
//! drives the global trend `H`. Dynamic part: an asymmetric graph generated
//! from `H(t)` and blended with `A` through a learned per-edge gate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Dynamic time warping with absolute-difference cost, full window and the
/// symmetric match/insert/delete step pattern.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("dtw_distance needs nonempty series".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &x in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = libm::fabs(x - b[j - 1]) + best;
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// `(x - mean) / std` with a std floor of 1e-8.
pub fn znormalize(series: &[f64]) -> Vec<f64> {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var).max(1e-8);
    series.iter().map(|x| (x - mean) / std).collect()
}

/// Symmetric N×N matrix of pairwise DTW distances between region series.
pub fn dtw_matrix(series: &[Vec<f64>], znorm: bool) -> Result<Tensor> {
    let prepared: Vec<Vec<f64>> = if znorm {
        series.iter().map(|s| znormalize(s)).collect()
    } else {
        series.to_vec()
    };
    let n = prepared.len();
    let mut dist = Tensor::zeros(&[n, n]);
    for u in 0..n {
        for v in u + 1..n {
            let d = dtw_distance(&prepared[u], &prepared[v])?;
            dist.set(u, v, d);
            dist.set(v, u, d);
        }
    }
    Ok(dist)
}

/// Indices of the `k` regions closest to `v` (excluding `v`), nearest first,
/// ties broken by lower index.
pub fn top_k(distances: &Tensor, v: usize, k: usize) -> Vec<usize> {
    let n = distances.rows();
    let mut candidates: Vec<usize> = (0..n).filter(|&u| u != v).collect();
    candidates.sort_by(|&a, &b| {
        distances
            .get(v, a)
            .total_cmp(&distances.get(v, b))
            .then(a.cmp(&b))
    });
    candidates.truncate(k);
    candidates
}

/// Adds DTW nearest-neighbour edges to the geographic adjacency.
///
/// Row `v` of the result marks `v`'s geographic neighbours plus its `k` most
/// similar regions, so the result need not be symmetric.
pub fn build_semantic_adjacency(adjacency: &Tensor, distances: &Tensor, k: usize) -> Result<Tensor> {
    let n = adjacency.rows();
    if adjacency.shape() != [n, n] || distances.shape() != [n, n] {
        return Err(Error::shape(
            "build_semantic_adjacency",
            adjacency.shape(),
            distances.shape(),
        ));
    }
    if k >= n {
        return Err(Error::Config(format!("top_k = {k} must be below the region count {n}")));
    }
    let mut out = adjacency.clone();
    for v in 0..n {
        for u in top_k(distances, v, k) {
            out.set(v, u, 1.0);
        }
    }
    Ok(out)
}

/// Semantic adjacency straight from per-region training series.
pub fn semantic_adjacency_from_series(
    adjacency: &Tensor,
    series: &[Vec<f64>],
    k: usize,
    znorm: bool,
) -> Result<Tensor> {
    build_semantic_adjacency(adjacency, &dtw_matrix(series, znorm)?, k)
}

/// `D̃^{-1/2} (Ã + I) D̃^{-1/2}` with self-loops forced to one.
pub fn degree_normalize(semantic: &Tensor) -> Result<Tensor> {
    let n = semantic.rows();
    if semantic.shape() != [n, n] {
        return Err(Error::shape("degree_normalize", semantic.shape(), &[n, n]));
    }
    let mut a = semantic.clone();
    for v in 0..n {
        a.set(v, v, 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|v| 1.0 / libm::sqrt(a.row(v).iter().sum::<f64>()))
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for u in 0..n {
        for v in 0..n {
            out.set(u, v, inv_sqrt[u] * a.get(u, v) * inv_sqrt[v]);
        }
    }
    Ok(out)
}

/// Static graph quantities shared by every window.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionGraph {
    /// Binary symmetric geographic adjacency with zero diagonal.
    pub adjacency: Tensor,
    /// DTW-augmented adjacency.
    pub semantic: Tensor,
    pub deg_norm: Tensor,
}

impl TransmissionGraph {
    pub fn new(adjacency: Tensor, semantic: Tensor) -> Result<Self> {
        let deg_norm = degree_normalize(&semantic)?;
        Ok(TransmissionGraph {
            adjacency,
            semantic,
            deg_norm,
        })
    }

    pub fn regions(&self) -> usize {
        self.adjacency.rows()
    }
}

/// Bound (on-tape) graph parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GltgParams {
    /// d×d.
    pub w_g: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    /// Scalar gate gain.
    pub w3: Var,
    /// Scalar gate bias.
    pub b3: Var,
    pub enc_h: crate::eano::Affine,
}

/// `ReLU(deg_norm · H · W_g) + H`.
pub fn residual_gnn(tape: &mut Tape, h: Var, deg_norm: Var, w_g: Var) -> Result<Var> {
    let mixed = tape.matmul(deg_norm, h)?;
    let projected = tape.matmul(mixed, w_g)?;
    let act = tape.relu(projected);
    tape.add(act, h)
}

/// `σ(tanh(M₁M₂ᵀ − M₂M₁ᵀ))` with `M_k = tanh(H W_k + b_k)`.
///
/// `M₂M₁ᵀ` is taken as the transpose of `M₁M₂ᵀ`, so the pre-activation is
/// exactly antisymmetric.
pub fn dynamic_graph(tape: &mut Tape, h: Var, params: &GltgParams) -> Result<Var> {
    let proj = |tape: &mut Tape, w: Var, b: Var| -> Result<Var> {
        let a = crate::eano::Affine { weight: w, bias: b }.apply(tape, h)?;
        Ok(tape.tanh(a))
    };
    let m1 = proj(tape, params.w1, params.b1)?;
    let m2 = proj(tape, params.w2, params.b2)?;
    let m2t = tape.transpose(m2)?;
    let p = tape.matmul(m1, m2t)?;
    let pt = tape.transpose(p)?;
    let anti = tape.sub(p, pt)?;
    let squashed = tape.tanh(anti);
    Ok(tape.sigmoid(squashed))
}

/// Per-edge gate `𝕄 = σ(w₃·Ã(t) + b₃)` and fused weights
/// `E = 𝕄 ⊙ A + (J − 𝕄) ⊙ Ã(t)`.
pub fn fuse_mask(tape: &mut Tape, adjacency: Var, dynamic: Var, w3: Var, b3: Var) -> Result<(Var, Var)> {
    let gain = tape.mul(dynamic, w3)?;
    let pre = tape.add(gain, b3)?;
    let mask = tape.sigmoid(pre);
    let one = tape.scalar(1.0);
    let inverse = tape.sub(one, mask)?;
    let static_part = tape.mul(mask, adjacency)?;
    let dynamic_part = tape.mul(inverse, dynamic)?;
    let fused = tape.add(static_part, dynamic_part)?;
    Ok((mask, fused))
}

/// dH/dt = residual_gnn(H) ⊙ g.
pub fn global_trend_field(tape: &mut Tape, h: Var, g: Var, deg_norm: Var, w_g: Var) -> Result<Var> {
    let update = residual_gnn(tape, h, deg_norm, w_g)?;
    tape.mul(update, g)
}

/// Dynamic graph, mask and fused weights evaluated for a fixed `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSnapshot {
    pub dynamic: Tensor,
    pub mask: Tensor,
    pub fused: Tensor,
}

pub fn snapshot(tape: &mut Tape, h: Var, adjacency: Var, params: &GltgParams) -> Result<GraphSnapshot> {
    let dynamic = dynamic_graph(tape, h, params)?;
    let (mask, fused) = fuse_mask(tape, adjacency, dynamic, params.w3, params.b3)?;
    Ok(GraphSnapshot {
        dynamic: tape.value(dynamic).clone(),
        mask: tape.value(mask).clone(),
        fused: tape.value(fused).clone(),
    })
}
