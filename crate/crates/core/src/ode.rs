//! Fixed-step explicit integrators over blocks of tape variables.
//!
//! Gradients come from differentiating through the unrolled steps: every
//! stage evaluation is recorded on the tape, so a later `backward` yields
//! derivatives with respect to the initial state and any parameter the field
//! touched.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeConfig {
    pub method: Method,
    /// Solver steps per unit interval between observation times.
    pub substeps_per_interval: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.substeps_per_interval == 0 {
            return Err(Error::Config("substeps_per_interval must be >= 1".into()));
        }
        if !(self.t_end > self.t_start) {
            return Err(Error::Config("t_end must exceed t_start".into()));
        }
        Ok(())
    }

    /// Total number of solver steps over `[t_start, t_end]`.
    pub fn steps(&self) -> usize {
        let intervals = libm::ceil(self.t_end - self.t_start - 1e-9).max(1.0) as usize;
        intervals * self.substeps_per_interval
    }

    pub fn step_size(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps() as f64
    }
}

/// Time derivative of a state made of several tensor blocks.
pub trait VectorField {
    fn derivative(&self, tape: &mut Tape, t: f64, state: &[Var]) -> Result<Vec<Var>>;
}

impl<F> VectorField for F
where
    F: Fn(&mut Tape, f64, &[Var]) -> Result<Vec<Var>>,
{
    fn derivative(&self, tape: &mut Tape, t: f64, state: &[Var]) -> Result<Vec<Var>> {
        self(tape, t, state)
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<Var>>,
}

impl Trajectory {
    pub fn last(&self) -> &[Var] {
        self.states.last().expect("trajectory always holds the initial state")
    }
}

fn combine(tape: &mut Tape, base: &[Var], terms: &[(&[Var], f64)]) -> Result<Vec<Var>> {
    base.iter()
        .enumerate()
        .map(|(b, &y)| {
            terms
                .iter()
                .try_fold(y, |acc, (k, w)| tape.add_scaled(acc, k[b], *w))
        })
        .collect()
}

fn eval_checked<F: VectorField + ?Sized>(
    field: &F,
    tape: &mut Tape,
    t: f64,
    state: &[Var],
) -> Result<Vec<Var>> {
    let d = field.derivative(tape, t, state)?;
    if d.len() != state.len() {
        return Err(Error::shape("vector field", &[state.len()], &[d.len()]));
    }
    for (x, dx) in state.iter().zip(&d) {
        if tape.shape(*x) != tape.shape(*dx) {
            return Err(Error::shape(
                "vector field",
                tape.shape(*x),
                tape.shape(*dx),
            ));
        }
    }
    Ok(d)
}

pub fn step_euler<F: VectorField + ?Sized>(
    field: &F,
    tape: &mut Tape,
    t: f64,
    state: &[Var],
    h: f64,
) -> Result<Vec<Var>> {
    let k = eval_checked(field, tape, t, state)?;
    combine(tape, state, &[(&k, h)])
}

/// Classical four-stage Runge–Kutta step.
pub fn step_rk4<F: VectorField + ?Sized>(
    field: &F,
    tape: &mut Tape,
    t: f64,
    state: &[Var],
    h: f64,
) -> Result<Vec<Var>> {
    if !(h > 0.0) {
        return Err(Error::Config("step size must be positive".into()));
    }
    let k1 = eval_checked(field, tape, t, state)?;
    let y2 = combine(tape, state, &[(&k1, 0.5 * h)])?;
    let k2 = eval_checked(field, tape, t + 0.5 * h, &y2)?;
    let y3 = combine(tape, state, &[(&k2, 0.5 * h)])?;
    let k3 = eval_checked(field, tape, t + 0.5 * h, &y3)?;
    let y4 = combine(tape, state, &[(&k3, h)])?;
    let k4 = eval_checked(field, tape, t + h, &y4)?;
    combine(
        tape,
        state,
        &[(&k1, h / 6.0), (&k2, h / 3.0), (&k3, h / 3.0), (&k4, h / 6.0)],
    )
}

fn check_finite(tape: &Tape, state: &[Var], step: usize) -> Result<()> {
    if state.iter().all(|v| tape.value(*v).is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step })
    }
}

/// Integrates from `cfg.t_start` to `cfg.t_end`, recording every step.
///
/// Time stamps are `t_start + i·h`, computed by multiplication; the last one
/// is pinned to `t_end`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    tape: &mut Tape,
    initial: &[Var],
    cfg: &OdeConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_finite(tape, initial, 0)?;
    let steps = cfg.steps();
    let h = cfg.step_size();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(cfg.t_start);
    states.push(initial.to_vec());
    for i in 0..steps {
        let t = cfg.t_start + i as f64 * h;
        let t_next = if i + 1 == steps {
            cfg.t_end
        } else {
            cfg.t_start + (i + 1) as f64 * h
        };
        let current = &states[i];
        let next = match cfg.method {
            Method::Euler => step_euler(field, tape, t, current, t_next - t)?,
            Method::Rk4 => step_rk4(field, tape, t, current, t_next - t)?,
        };
        check_finite(tape, &next, i + 1)?;
        times.push(t_next);
        states.push(next);
    }
    Ok(Trajectory { times, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_state(tape: &mut Tape, v: f64) -> Vec<Var> {
        alloc::vec![tape.param(Tensor::scalar(v))]
    }

    fn cfg(method: Method, steps: usize, t_end: f64) -> OdeConfig {
        OdeConfig {
            method,
            substeps_per_interval: steps,
            t_start: 0.0,
            t_end,
        }
    }

    #[test]
    fn zero_field_is_stationary() {
        let mut tape = Tape::new();
        let y0 = scalar_state(&mut tape, 7.0);
        let zero = |tape: &mut Tape, _t: f64, s: &[Var]| Ok(alloc::vec![tape.scale(s[0], 0.0)]);
        let traj = integrate(&zero, &mut tape, &y0, &cfg(Method::Rk4, 3, 5.0)).unwrap();
        assert_eq!(tape.value(traj.last()[0]).item(), 7.0);
    }

    #[test]
    fn euler_constant_field_exact() {
        let mut tape = Tape::new();
        let y0 = scalar_state(&mut tape, 0.25);
        let one = |tape: &mut Tape, _t: f64, _s: &[Var]| Ok(alloc::vec![tape.scalar(1.0)]);
        for steps in [1, 4, 8] {
            let traj = integrate(&one, &mut tape, &y0, &cfg(Method::Euler, steps, 1.0)).unwrap();
            assert_eq!(tape.value(traj.last()[0]).item(), 1.25);
        }
    }

    #[test]
    fn rk4_linear_in_time_is_exact() {
        let mut tape = Tape::new();
        let y0 = scalar_state(&mut tape, 0.0);
        let f = |tape: &mut Tape, t: f64, _s: &[Var]| Ok(alloc::vec![tape.scalar(t)]);
        let y1 = step_rk4(&f, &mut tape, 0.0, &y0, 1.0).unwrap();
        assert_eq!(tape.value(y1[0]).item(), 0.5);
    }

    #[test]
    fn timestamps_use_multiplication() {
        let mut tape = Tape::new();
        let y0 = scalar_state(&mut tape, 1.0);
        let f = |tape: &mut Tape, _t: f64, s: &[Var]| Ok(alloc::vec![tape.scale(s[0], 0.0)]);
        let c = OdeConfig {
            method: Method::Euler,
            substeps_per_interval: 7,
            t_start: 0.1,
            t_end: 19.1,
        };
        let traj = integrate(&f, &mut tape, &y0, &c).unwrap();
        let h = c.step_size();
        assert_eq!(traj.times.len(), c.steps() + 1);
        for (i, t) in traj.times.iter().enumerate() {
            assert!((t - (0.1 + i as f64 * h)).abs() < 1e-12);
        }
        assert_eq!(*traj.times.last().unwrap(), 19.1);
    }

    #[test]
    fn divergence_reports_step() {
        let mut tape = Tape::new();
        let y0 = scalar_state(&mut tape, 1.0);
        let blow = |tape: &mut Tape, _t: f64, s: &[Var]| Ok(alloc::vec![tape.scale(s[0], 1e300)]);
        let err = integrate(&blow, &mut tape, &y0, &cfg(Method::Euler, 4, 1.0)).unwrap_err();
        assert_eq!(err, Error::Divergence { step: 2 });
    }

    #[test]
    fn invalid_config() {
        let bad = OdeConfig {
            method: Method::Rk4,
            substeps_per_interval: 0,
            t_start: 0.0,
            t_end: 1.0,
        };
        assert!(bad.validate().is_err());
        let bad = OdeConfig {
            substeps_per_interval: 1,
            t_end: 0.0,
            ..bad
        };
        assert!(bad.validate().is_err());
    }
}
