//! Adam (and plain SGD) parameter updates driven by a cosine-annealing
//! learning-rate schedule with warm restarts.

use std::fmt;
use std::str::FromStr;

use crate::autograd::Parameter;
use crate::error::{Error, Result};
use crate::tensor::{cast, Scalar};

/// First/second moment estimates for Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn first_moment(&self, param: usize) -> Option<&[f64]> {
        self.m.get(param).map(Vec::as_slice)
    }

    pub fn second_moment(&self, param: usize) -> Option<&[f64]> {
        self.v.get(param).map(Vec::as_slice)
    }
}

fn ensure_finite_grads<T: Scalar>(params: &[Parameter<T>]) -> Result<()> {
    for p in params {
        if !p.grad.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient in '{}'",
                p.name
            )));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update. Moments are kept in f64. Nothing is
/// mutated if any gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut [Parameter<T>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    ensure_finite_grads(params)?;
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len()
        || state
            .m
            .iter()
            .zip(params.iter())
            .any(|(m, p)| m.len() != p.value.len())
    {
        return Err(Error::config(
            "optimizer state does not match the parameter set",
        ));
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.data();
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[i].to_f64().unwrap_or(f64::NAN);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
            *w = *w - cast::<T>(update);
        }
    }
    Ok(())
}

/// Plain gradient descent at a fixed rate.
pub fn sgd_step<T: Scalar>(params: &mut [Parameter<T>], lr: f64) -> Result<()> {
    ensure_finite_grads(params)?;
    let lr: T = cast(lr);
    for p in params {
        let grad = p.grad.data().to_vec();
        for (w, g) in p.value.data_mut().iter_mut().zip(grad) {
            *w = *w - lr * g;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::config(format!(
                "unknown optimizer '{other}' (adam|sgd)"
            ))),
        }
    }
}

/// Optimizer selected by configuration, owning whatever state it needs.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd,
}

impl Optimizer {
    pub fn step<T: Scalar>(&mut self, params: &mut [Parameter<T>], lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(params, state, lr),
            Optimizer::Sgd => sgd_step(params, lr),
        }
    }
}

// Restarts snap when the cursor lands this close to the period end, so
// fractional per-iteration advances hit epoch boundaries exactly.
const RESTART_SNAP: f64 = 1e-9;

/// Cosine annealing with warm restarts. Periods are measured in epochs;
/// the cursor may advance fractionally.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    /// Number of restarts so far.
    pub restart: u32,
    /// Length of the current period.
    pub period: f64,
    /// Epochs since the last restart, `0 <= cursor < period`.
    pub cursor: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub t_mult: f64,
}

impl ScheduleState {
    pub fn new(t0: f64, t_mult: f64, eta_min: f64, eta_max: f64) -> Result<Self> {
        if !(t0 > 0.0 && t0.is_finite()) {
            return Err(Error::config(format!(
                "schedule.t0_epochs must be > 0, got {t0}"
            )));
        }
        if !(t_mult >= 1.0 && t_mult.is_finite()) {
            return Err(Error::config(format!(
                "schedule.t_mult must be >= 1, got {t_mult}"
            )));
        }
        if !(0.0..=eta_max).contains(&eta_min) || !eta_max.is_finite() {
            return Err(Error::config(format!(
                "learning-rate bounds must satisfy 0 <= eta_min <= eta_max, got {eta_min}, {eta_max}"
            )));
        }
        Ok(ScheduleState {
            restart: 0,
            period: t0,
            cursor: 0.0,
            eta_min,
            eta_max,
            t_mult,
        })
    }

    /// Current learning rate:
    /// `eta_min + ½(eta_max − eta_min)(1 + cos(π·cursor/period))`.
    pub fn lr(&self) -> Result<f64> {
        cosine_lr(self.cursor, self.period, self.eta_min, self.eta_max)
    }

    /// Move the cursor forward, restarting (and growing the period by
    /// `t_mult`) each time it passes the end of the current period.
    pub fn advance(&mut self, delta_epochs: f64) {
        self.cursor += delta_epochs;
        while self.cursor >= self.period - RESTART_SNAP * self.period.max(1.0) {
            self.cursor -= self.period;
            if self.cursor.abs() < RESTART_SNAP {
                self.cursor = 0.0;
            }
            self.cursor = self.cursor.max(0.0);
            self.restart += 1;
            self.period *= self.t_mult;
        }
    }
}

/// Cosine-annealed learning rate at `cursor` epochs into a `period`-epoch
/// cycle. Evaluated from the upper bound so that `cursor = 0` yields
/// exactly `eta_max`.
pub fn cosine_lr(cursor: f64, period: f64, eta_min: f64, eta_max: f64) -> Result<f64> {
    if period <= 0.0 {
        return Err(Error::config("cosine schedule period must be > 0"));
    }
    let span = eta_max - eta_min;
    Ok(eta_max - 0.5 * span * (1.0 - (std::f64::consts::PI * cursor / period).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamRole;
    use crate::tensor::Tensor;

    fn scalar_param(value: f64, grad: f64) -> Parameter<f64> {
        Parameter {
            name: "x".into(),
            value: Tensor::new(&[1], vec![value]).unwrap(),
            grad: Tensor::new(&[1], vec![grad]).unwrap(),
            role: ParamRole::Bias,
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [scalar_param(0.3, 0.0)];
        let mut s = AdamState::default();
        adam_step(&mut p, &mut s, 1e-4).unwrap();
        assert_eq!(p[0].value.data(), &[0.3]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut p = [scalar_param(0.0, 1.0)];
        let mut s = AdamState::default();
        adam_step(&mut p, &mut s, 1e-4).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p[0].value.data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = [scalar_param(1.0, 0.5), scalar_param(2.0, f64::NAN)];
        let mut s = AdamState::default();
        assert!(matches!(
            adam_step(&mut p, &mut s, 0.1),
            Err(Error::Numeric(_))
        ));
        assert_eq!(s.step, 0);
        assert_eq!(p[0].value.data(), &[1.0]);
        assert!(matches!(sgd_step(&mut p, 0.1), Err(Error::Numeric(_))));
        assert_eq!(p[0].value.data(), &[1.0]);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = [scalar_param(1.0, 2.0)];
        sgd_step(&mut p, 0.25).unwrap();
        assert_eq!(p[0].value.data(), &[0.5]);
    }

    #[test]
    fn schedule_endpoints() {
        let s = ScheduleState::new(10.0, 2.0, 1e-7, 1e-4).unwrap();
        assert_eq!(s.lr().unwrap(), 1e-4);
        let end = cosine_lr(10.0, 10.0, 1e-7, 1e-4).unwrap();
        assert!((end - 1e-7).abs() < 1e-12);
        let mid = cosine_lr(5.0, 10.0, 1e-7, 1e-4).unwrap();
        assert!((mid - (1e-4 + 1e-7) / 2.0).abs() < 1e-12);
        assert!(cosine_lr(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn restart_resets_to_eta_max() {
        let mut s = ScheduleState::new(10.0, 2.0, 1e-7, 1e-4).unwrap();
        s.advance(10.0);
        assert_eq!((s.restart, s.period, s.cursor), (1, 20.0, 0.0));
        assert_eq!(s.lr().unwrap(), 1e-4);
    }

    #[test]
    fn fractional_advances_add_up() {
        let mut a = ScheduleState::new(10.0, 2.0, 0.0, 1.0).unwrap();
        let mut b = a.clone();
        a.advance(0.5);
        a.advance(0.5);
        b.advance(1.0);
        assert!((a.cursor - b.cursor).abs() < 1e-12);
        assert_eq!(a.restart, b.restart);
    }

    #[test]
    fn per_iteration_advance_restarts_on_epoch_boundary() {
        let mut s = ScheduleState::new(10.0, 2.0, 0.0, 1.0).unwrap();
        for _ in 0..10 * 7 {
            s.advance(1.0 / 7.0);
        }
        assert_eq!(s.restart, 1);
        assert_eq!(s.cursor, 0.0);
    }

    #[test]
    fn invalid_schedule_parameters() {
        assert!(ScheduleState::new(0.0, 2.0, 0.0, 1.0).is_err());
        assert!(ScheduleState::new(10.0, 0.5, 0.0, 1.0).is_err());
        assert!(ScheduleState::new(10.0, 2.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn optimizer_kind_parse() {
        assert_eq!(
            "adam".parse::<OptimizerKind>().unwrap(),
            OptimizerKind::Adam
        );
        assert_eq!("sgd".parse::<OptimizerKind>().unwrap(), OptimizerKind::Sgd);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
