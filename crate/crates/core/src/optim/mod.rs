//! SGD with momentum and AdamW with decoupled weight decay, their
//! update-range properties, and a toy training loop that traces the top
//! singular value of every weight.

mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub use toy::{
    divergence_threshold, run_toy_training, toy_batch, toy_gradients, toy_loss, write_trace_csv,
    StepRecord, StepTrace, ToyConfig, ToyModel,
};

pub const DEFAULT_ADAM_EPS: f64 = 1e-8;

/// Learning rate `α_t` as a function of the 1-based step `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Constant {
        lr: f64,
    },
    /// `lr · factor^⌊(t−1)/every⌋`.
    Step {
        lr: f64,
        every: usize,
        factor: f64,
    },
    /// Cosine decay from `lr` to 0 over `total` steps.
    Cosine {
        lr: f64,
        total: usize,
    },
}

impl Schedule {
    pub fn lr_at(&self, t: usize) -> f64 {
        let t = t.max(1);
        match *self {
            Schedule::Constant { lr } => lr,
            Schedule::Step { lr, every, factor } => {
                lr * factor.powi(((t - 1) / every.max(1)) as i32)
            }
            Schedule::Cosine { lr, total } => {
                let frac = ((t - 1) as f64 / total.max(1) as f64).min(1.0);
                0.5 * lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let lr = match *self {
            Schedule::Constant { lr } | Schedule::Step { lr, .. } | Schedule::Cosine { lr, .. } => {
                lr
            }
        };
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub v: DenseMatrix,
    pub beta: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl SgdState {
    pub fn new(
        shape: (usize, usize),
        beta: f64,
        weight_decay: f64,
        schedule: Schedule,
    ) -> Result<Self> {
        let s = SgdState {
            v: DenseMatrix::zeros(shape.0, shape.1),
            beta,
            weight_decay,
            schedule,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidParam(format!(
                "beta must be in [0,1), got {}",
                self.beta
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParam("weight decay must be >= 0".into()));
        }
        self.schedule.validate()
    }
}

/// Whether the moment estimates are divided by the fixed `1−β` or by the
/// step-dependent `1−βᵗ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BiasCorrection {
    Fixed,
    Stepwise,
}

impl std::str::FromStr for BiasCorrection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(BiasCorrection::Fixed),
            "stepwise" => Ok(BiasCorrection::Stepwise),
            _ => Err(Error::InvalidParam(format!(
                "unknown bias correction '{s}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub bias_correction: BiasCorrection,
    /// Steps taken so far.
    pub t: usize,
}

impl AdamState {
    pub fn new(
        shape: (usize, usize),
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
        schedule: Schedule,
    ) -> Result<Self> {
        let s = AdamState {
            m: DenseMatrix::zeros(shape.0, shape.1),
            v: DenseMatrix::zeros(shape.0, shape.1),
            beta1,
            beta2,
            weight_decay,
            eps: DEFAULT_ADAM_EPS,
            schedule,
            bias_correction: BiasCorrection::Fixed,
            t: 0,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParam(format!(
                    "{name} must be in [0,1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidParam("eps must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParam("weight decay must be >= 0".into()));
        }
        self.schedule.validate()
    }
}

fn check_step(op: &'static str, w: &DenseMatrix, g: &DenseMatrix, buf: &DenseMatrix) -> Result<()> {
    if w.shape() != g.shape() || w.shape() != buf.shape() {
        return Err(Error::shape(
            op,
            format!(
                "weights {:?}, gradient {:?}, state {:?}",
                w.shape(),
                g.shape(),
                buf.shape()
            ),
        ));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite(op));
    }
    Ok(())
}

/// `v ← βv + (1−β)g`, `w ← w − α_t v − α_t λ w`. A rejected step leaves the
/// state untouched.
pub fn sgd_step(
    state: &mut SgdState,
    w: &DenseMatrix,
    g: &DenseMatrix,
    t: usize,
) -> Result<DenseMatrix> {
    state.validate()?;
    check_step("sgd_step", w, g, &state.v)?;
    let a = state.schedule.lr_at(t);
    let (b, lambda) = (state.beta, state.weight_decay);
    let mut out = w.clone();
    for ((o, v), gi) in out
        .data_mut()
        .iter_mut()
        .zip(state.v.data_mut())
        .zip(g.data())
    {
        *v = b * *v + (1.0 - b) * gi;
        *o -= a * *v + a * lambda * *o;
    }
    Ok(out)
}

/// One AdamW step with decoupled decay: `w ← w − α_t μ − α_t λ w` with
/// `μ = m̂ ⊘ (√v̂ + ε)`.
pub fn adamw_step(
    state: &mut AdamState,
    w: &DenseMatrix,
    g: &DenseMatrix,
    t: usize,
) -> Result<DenseMatrix> {
    state.validate()?;
    check_step("adamw_step", w, g, &state.m)?;
    let a = state.schedule.lr_at(t);
    let (b1, b2) = (state.beta1, state.beta2);
    let (c1, c2) = match state.bias_correction {
        BiasCorrection::Fixed => (1.0 - b1, 1.0 - b2),
        BiasCorrection::Stepwise => {
            let t = t.max(1) as i32;
            (1.0 - b1.powi(t), 1.0 - b2.powi(t))
        }
    };
    let (lambda, eps) = (state.weight_decay, state.eps);
    let mut out = w.clone();
    for (((o, m), v), gi) in out
        .data_mut()
        .iter_mut()
        .zip(state.m.data_mut())
        .zip(state.v.data_mut())
        .zip(g.data())
    {
        *m = b1 * *m + (1.0 - b1) * gi;
        *v = b2 * *v + (1.0 - b2) * gi * gi;
        let mu = (*m / c1) / ((*v / c2).sqrt() + eps);
        *o -= a * mu + a * lambda * *o;
    }
    state.t += 1;
    Ok(out)
}

/// `|m₁| / √v₁` after one uncorrected step from zero moments, which equals
/// `(1−β₁)/√(1−β₂)` for every `g ≠ 0`.
pub fn raw_update_ratio(beta1: f64, beta2: f64, g: f64) -> Result<f64> {
    if g == 0.0 || !g.is_finite() {
        return Err(Error::Degenerate {
            op: "raw_update_ratio",
            detail: "gradient must be finite and nonzero".into(),
        });
    }
    if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
        return Err(Error::InvalidParam("betas must be in [0,1)".into()));
    }
    let m = (1.0 - beta1) * g;
    let v = (1.0 - beta2) * g * g;
    Ok(m.abs() / v.sqrt())
}

/// `(1−αλ)·w`; only contractions with `αλ < 1` are accepted.
pub fn weight_decay_apply(w: &DenseMatrix, alpha: f64, lambda: f64) -> Result<DenseMatrix> {
    if !(alpha >= 0.0 && lambda >= 0.0) {
        return Err(Error::InvalidParam("alpha and lambda must be >= 0".into()));
    }
    let f = alpha * lambda;
    if f >= 1.0 {
        return Err(Error::InvalidParam(format!(
            "alpha*lambda = {f} >= 1 is not a contraction toward zero"
        )));
    }
    Ok(w.scale(1.0 - f))
}

/// Scales every gradient by `c / ‖g‖₂` when the global norm exceeds `c`.
pub fn clip_global_norm(grads: &[DenseMatrix], c: f64) -> Result<Vec<DenseMatrix>> {
    if !(c > 0.0) {
        return Err(Error::InvalidParam(format!(
            "clip threshold must be > 0, got {c}"
        )));
    }
    let norm = global_norm(grads);
    if norm > c {
        let s = c / norm;
        Ok(grads.iter().map(|g| g.scale(s)).collect())
    } else {
        Ok(grads.to_vec())
    }
}

pub fn global_norm(grads: &[DenseMatrix]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// `decay·ema + (1−decay)·w`.
pub fn ema_update(ema: &DenseMatrix, w: &DenseMatrix, decay: f64) -> Result<DenseMatrix> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidParam(format!(
            "decay must be in [0,1), got {decay}"
        )));
    }
    if ema.shape() != w.shape() {
        return Err(Error::shape(
            "ema_update",
            "ema and weights differ in shape",
        ));
    }
    let mut out = ema.scale(decay);
    out.axpy(1.0 - decay, w)?;
    Ok(out)
}

/// Optimizer choice for [`run_toy_training`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerConfig {
    Sgd {
        beta: f64,
        weight_decay: f64,
        schedule: Schedule,
    },
    AdamW {
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
        eps: f64,
        schedule: Schedule,
        bias_correction: BiasCorrection,
    },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd {
            beta: 0.9,
            weight_decay: 0.0,
            schedule: Schedule::Constant { lr },
        }
    }

    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: DEFAULT_ADAM_EPS,
            schedule: Schedule::Constant { lr },
            bias_correction: BiasCorrection::Fixed,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        let s = Schedule::Constant { lr };
        match self {
            OptimizerConfig::Sgd {
                beta, weight_decay, ..
            } => OptimizerConfig::Sgd {
                beta,
                weight_decay,
                schedule: s,
            },
            OptimizerConfig::AdamW {
                beta1,
                beta2,
                weight_decay,
                eps,
                bias_correction,
                ..
            } => OptimizerConfig::AdamW {
                beta1,
                beta2,
                weight_decay,
                eps,
                schedule: s,
                bias_correction,
            },
        }
    }
}

/// Per-weight optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum OptState {
    Sgd(SgdState),
    Adam(AdamState),
}

impl OptState {
    pub(crate) fn new(cfg: &OptimizerConfig, shape: (usize, usize)) -> Result<Self> {
        Ok(match *cfg {
            OptimizerConfig::Sgd {
                beta,
                weight_decay,
                schedule,
            } => OptState::Sgd(SgdState::new(shape, beta, weight_decay, schedule)?),
            OptimizerConfig::AdamW {
                beta1,
                beta2,
                weight_decay,
                eps,
                schedule,
                bias_correction,
            } => {
                let mut s = AdamState::new(shape, beta1, beta2, weight_decay, schedule)?;
                s.eps = eps;
                s.bias_correction = bias_correction;
                s.validate()?;
                OptState::Adam(s)
            }
        })
    }

    pub(crate) fn step(
        &mut self,
        w: &DenseMatrix,
        g: &DenseMatrix,
        t: usize,
    ) -> Result<DenseMatrix> {
        match self {
            OptState::Sgd(s) => sgd_step(s, w, g, t),
            OptState::Adam(s) => adamw_step(s, w, g, t),
        }
    }
}
