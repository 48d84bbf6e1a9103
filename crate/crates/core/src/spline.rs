//! Continuous control paths built from (possibly irregular) observations.
//!
//! Each region gets a path `Q(t)` with channel 0 equal to time itself and the
//! remaining channels interpolated by natural cubic splines. The vector fields
//! only ever need `dQ/dt`, which is evaluated analytically per segment.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
struct CubicChannel {
    values: Vec<f64>,
    /// Second derivative at each knot; zero at both ends.
    second: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    knots: Vec<f64>,
    channels: Vec<CubicChannel>,
}

impl ControlPath {
    /// Fits a path through `observations[i]` at `times[i]`.
    ///
    /// Every observation row must have the same width `c - 1`; the time
    /// channel is prepended implicitly.
    pub fn fit(times: &[f64], observations: &[Vec<f64>]) -> Result<Self> {
        if times.len() != observations.len() {
            return Err(Error::shape(
                "ControlPath::fit",
                &[times.len()],
                &[observations.len()],
            ));
        }
        check_knots(times)?;
        let width = observations[0].len();
        let mut columns = vec![Vec::with_capacity(times.len()); width];
        for (i, row) in observations.iter().enumerate() {
            if row.len() != width {
                return Err(Error::shape("ControlPath::fit", &[width], &[row.len()]));
            }
            for (col, &x) in columns.iter_mut().zip(row) {
                if x.is_nan() {
                    return Err(Error::Numeric(format!("NaN observation at knot {i}")));
                }
                col.push(x);
            }
        }
        let channels = columns
            .into_iter()
            .map(|values| {
                let second = natural_second_derivatives(times, &values);
                CubicChannel { values, second }
            })
            .collect();
        Ok(ControlPath {
            knots: times.to_vec(),
            channels,
        })
    }

    /// Single observed channel convenience.
    pub fn fit_scalar(times: &[f64], values: &[f64]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        Self::fit(times, &rows)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Total channel count `c`, including the time channel.
    pub fn channels(&self) -> usize {
        self.channels.len() + 1
    }

    pub fn start(&self) -> f64 {
        self.knots[0]
    }

    pub fn end(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    pub fn evaluate(&self, t: f64) -> Result<Vec<f64>> {
        let seg = self.segment(t)?;
        let mut out = Vec::with_capacity(self.channels());
        out.push(t);
        out.extend(self.channels.iter().map(|ch| seg.value(ch)));
        Ok(out)
    }

    pub fn derivative(&self, t: f64) -> Result<Vec<f64>> {
        let seg = self.segment(t)?;
        let mut out = Vec::with_capacity(self.channels());
        out.push(1.0);
        out.extend(self.channels.iter().map(|ch| seg.slope(ch)));
        Ok(out)
    }

    pub fn second_derivative(&self, t: f64) -> Result<Vec<f64>> {
        let seg = self.segment(t)?;
        let mut out = Vec::with_capacity(self.channels());
        out.push(0.0);
        out.extend(self.channels.iter().map(|ch| seg.curvature(ch)));
        Ok(out)
    }

    fn segment(&self, t: f64) -> Result<Segment> {
        let (start, end) = (self.start(), self.end());
        if !(t >= start && t <= end) {
            return Err(Error::Domain { t, start, end });
        }
        let n = self.knots.len();
        // Index of the last knot <= t, capped so the final knot uses the last segment.
        let i = (self.knots.partition_point(|&k| k <= t) - 1).min(n - 2);
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        Ok(Segment {
            i,
            h,
            a: (t1 - t) / h,
            b: (t - t0) / h,
        })
    }
}

struct Segment {
    i: usize,
    h: f64,
    a: f64,
    b: f64,
}

impl Segment {
    fn value(&self, ch: &CubicChannel) -> f64 {
        let (a, b, h, i) = (self.a, self.b, self.h, self.i);
        a * ch.values[i]
            + b * ch.values[i + 1]
            + ((a * a * a - a) * ch.second[i] + (b * b * b - b) * ch.second[i + 1]) * h * h / 6.0
    }

    fn slope(&self, ch: &CubicChannel) -> f64 {
        let (a, b, h, i) = (self.a, self.b, self.h, self.i);
        (ch.values[i + 1] - ch.values[i]) / h - (3.0 * a * a - 1.0) / 6.0 * h * ch.second[i]
            + (3.0 * b * b - 1.0) / 6.0 * h * ch.second[i + 1]
    }

    fn curvature(&self, ch: &CubicChannel) -> f64 {
        self.a * ch.second[self.i] + self.b * ch.second[self.i + 1]
    }
}

fn check_knots(times: &[f64]) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "a control path needs at least 2 knots, got {}",
            times.len()
        )));
    }
    for (index, w) in times.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(Error::Ordering { index: index + 1 });
        }
    }
    Ok(())
}

/// Solves the natural-spline tridiagonal system with the Thomas algorithm.
fn natural_second_derivatives(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let interior = n - 2;
    let mut diag = vec![0.0; interior];
    let mut upper = vec![0.0; interior];
    let mut rhs = vec![0.0; interior];
    for k in 0..interior {
        let i = k + 1;
        let h0 = t[i] - t[i - 1];
        let h1 = t[i + 1] - t[i];
        diag[k] = 2.0 * (h0 + h1);
        upper[k] = h1;
        rhs[k] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
    }
    // Forward elimination; sub-diagonal entry for row k is h_{k} = t[k+1]-t[k].
    for k in 1..interior {
        let lower = t[k + 1] - t[k];
        let w = lower / diag[k - 1];
        diag[k] -= w * upper[k - 1];
        rhs[k] -= w * rhs[k - 1];
    }
    m[interior] = rhs[interior - 1] / diag[interior - 1];
    for k in (0..interior - 1).rev() {
        m[k + 1] = (rhs[k] - upper[k] * m[k + 2]) / diag[k];
    }
    m
}

/// Removes a uniformly random subset of interior knots.
///
/// `round(missing_rate * interior)` interior knots are dropped; the first and
/// last knots always survive so the integration domain is unchanged.
pub fn drop_observations<T: Clone>(
    times: &[f64],
    observations: &[T],
    missing_rate: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<T>)> {
    if times.len() != observations.len() {
        return Err(Error::shape(
            "drop_observations",
            &[times.len()],
            &[observations.len()],
        ));
    }
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::Config(format!(
            "missing_rate must lie in [0, 1), got {missing_rate}"
        )));
    }
    let keep = surviving_indices(times.len(), missing_rate, seed)?;
    Ok((
        keep.iter().map(|&i| times[i]).collect(),
        keep.iter().map(|&i| observations[i].clone()).collect(),
    ))
}

/// Sorted indices kept out of `len` knots at the given missing rate.
pub fn surviving_indices(len: usize, missing_rate: f64, seed: u64) -> Result<Vec<usize>> {
    if len < 2 {
        return Err(Error::InsufficientData(format!(
            "{len} knots cannot survive dropping; at least 2 are required"
        )));
    }
    let interior = len - 2;
    let n_drop = libm::round(missing_rate * interior as f64) as usize;
    if n_drop == 0 {
        return Ok((0..len).collect());
    }
    let mut rng = rng::seeded(seed);
    let mut dropped = vec![false; len];
    for k in index::sample(&mut rng, interior, n_drop) {
        dropped[k + 1] = true;
    }
    Ok((0..len).filter(|&i| !dropped[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_data_is_reproduced() {
        let p = ControlPath::fit_scalar(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((p.evaluate(0.5).unwrap()[1] - 0.5).abs() < 1e-15);
        for t in [0.0, 0.3, 1.0, 1.7, 2.0] {
            assert!((p.derivative(t).unwrap()[1] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn slope_three_line() {
        let p = ControlPath::fit_scalar(&[0.0, 1.0, 2.5, 4.0], &[1.0, 4.0, 8.5, 13.0]).unwrap();
        for t in [0.2, 1.9, 3.3] {
            assert!((p.derivative(t).unwrap()[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn apex_case() {
        // Hand-solved tridiagonal system: (2/3)·M1 = -2, so M1 = -3.
        let p = ControlPath::fit_scalar(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(p.second_derivative(1.0).unwrap()[1], -3.0);
        assert!((p.evaluate(0.5).unwrap()[1] - 0.6875).abs() < 1e-15);
        let left = p.derivative(1.0 - 1e-12).unwrap()[1];
        let right = p.derivative(1.0).unwrap()[1];
        assert!(left.abs() < 1e-9 && right.abs() < 1e-12);
    }

    #[test]
    fn time_channel_is_identity() {
        let p = ControlPath::fit_scalar(&[0.0, 2.0, 3.0], &[5.0, 1.0, 2.0]).unwrap();
        for t in [0.0, 0.77, 2.5, 3.0] {
            assert_eq!(p.evaluate(t).unwrap()[0], t);
            assert_eq!(p.derivative(t).unwrap()[0], 1.0);
        }
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(
            ControlPath::fit_scalar(&[0.0], &[1.0]),
            Err(Error::InsufficientData(_))
        ));
        assert_eq!(
            ControlPath::fit_scalar(&[0.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::Ordering { index: 2 })
        );
        let p = ControlPath::fit_scalar(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert!(matches!(p.derivative(1.5), Err(Error::Domain { .. })));
        assert!(matches!(p.evaluate(-0.1), Err(Error::Domain { .. })));
    }

    #[test]
    fn natural_boundary() {
        let p = ControlPath::fit_scalar(&[0.0, 1.0, 3.0, 4.0, 6.0], &[1.0, -2.0, 0.5, 3.0, 1.0])
            .unwrap();
        assert_eq!(p.second_derivative(0.0).unwrap()[1], 0.0);
        assert_eq!(p.second_derivative(6.0).unwrap()[1], 0.0);
    }

    #[test]
    fn dropping_keeps_endpoints_and_count() {
        let times: Vec<f64> = (0..22).map(|i| i as f64).collect();
        for seed in 0..50 {
            let (t, obs) = drop_observations(&times, &times, 0.4, seed).unwrap();
            assert_eq!(times.len() - t.len(), 8);
            assert_eq!(t, obs);
            assert_eq!(t[0], 0.0);
            assert_eq!(*t.last().unwrap(), 21.0);
        }
        let (t, _) = drop_observations(&times, &times, 0.0, 3).unwrap();
        assert_eq!(t, times);
    }

    #[test]
    fn dropping_rejects_bad_input() {
        assert!(matches!(
            drop_observations(&[0.0], &[1.0], 0.5, 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            drop_observations(&[0.0, 1.0], &[1.0, 2.0], 1.0, 0),
            Err(Error::Config(_))
        ));
    }
}
