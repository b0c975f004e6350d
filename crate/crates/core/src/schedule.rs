//! Per-iteration bit allocation.
//!
//! Fixed, ternary (2-bit EWU) and sign schedules emit a constant width. The
//! dynamic schedule spends bits where the convergence bound is most
//! sensitive: iteration `t` receives
//!
//! ```text
//! b_t = log2( sqrt(T / ε̂_Q) · α^((T-1-t)/2) · Ḡ_t + 1 ) + 1
//! ```
//!
//! which is the stationary point of total bits subject to the weighted
//! quantization-noise budget `Σ_t α^(T-1-t) Ḡ_t² / (2^(b_t-1) - 1)² = ε̂_Q`.
//! The continuous value is rounded half-up and clamped to `[b_min, b_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Constants;
use crate::quant::continuous_levels;

pub const ALPHA_FLOOR: f64 = 1e-6;
pub const ALPHA_CEIL: f64 = 1.0 - 1e-6;

/// One-step contraction factor `1 − 2μη + Lμη²`.
pub fn alpha_closed_form(learning_rate: f64, smoothness: f64, strong_convexity: f64) -> f64 {
    let (eta, l, mu) = (learning_rate, smoothness, strong_convexity);
    1.0 - 2.0 * mu * eta + l * mu * eta * eta
}

pub fn clamp_alpha(alpha: f64) -> f64 {
    if alpha.is_nan() {
        ALPHA_CEIL
    } else {
        alpha.clamp(ALPHA_FLOOR, ALPHA_CEIL)
    }
}

/// `(F_t / F_0)^(1/t)`, clamped to `[ALPHA_FLOOR, ALPHA_CEIL]`.
pub fn alpha_estimate(initial_loss: f64, loss: f64, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidInput("alpha estimate needs t >= 1".into()));
    }
    if !(initial_loss > 0.0) {
        return Err(Error::InvalidInput(format!("alpha estimate needs F(x_0) > 0, got {initial_loss}")));
    }
    if loss >= initial_loss {
        return Ok(ALPHA_CEIL);
    }
    if !(loss > 0.0) {
        return Ok(ALPHA_FLOOR);
    }
    Ok(clamp_alpha((loss / initial_loss).powf(1.0 / t as f64)))
}

/// `(ε_Q, ε̂_Q)` with `ε_Q = (1−γ)ε` and `ε̂_Q = 8W ε_Q / (L d η²)`.
pub fn quantization_budget(
    epsilon: f64,
    gamma: f64,
    workers: usize,
    smoothness: f64,
    dim: usize,
    learning_rate: f64,
) -> (f64, f64) {
    let eps_q = (1.0 - gamma) * epsilon;
    let eps_hat = 8.0 * workers as f64 / (smoothness * dim as f64 * learning_rate * learning_rate) * eps_q;
    (eps_q, eps_hat)
}

/// Quantization budget left once the sampling-noise floor has settled:
/// `ε − L η² σ² / (2W(1−α))`.
pub fn asymptotic_quantization_budget(
    epsilon: f64,
    smoothness: f64,
    learning_rate: f64,
    sigma: f64,
    workers: usize,
    alpha: f64,
) -> f64 {
    epsilon - smoothness * learning_rate * learning_rate * sigma * sigma / (2.0 * workers as f64 * (1.0 - alpha))
}

/// Unrounded bit count for iteration `t`.
pub fn dq_bits_continuous(iterations: usize, eps_hat: f64, alpha: f64, t: usize, gbar: f64) -> f64 {
    let exponent = (iterations as f64 - 1.0 - t as f64) / 2.0;
    let scale = (iterations as f64 / eps_hat).sqrt() * alpha.powf(exponent) * gbar;
    scale.ln_1p() / std::f64::consts::LN_2 + 1.0
}

/// Rounds half-up and clamps into `[b_min, b_max]`.
pub fn round_bits(continuous: f64, b_min: u8, b_max: u8) -> u8 {
    if continuous.is_nan() {
        return b_min;
    }
    let r = (continuous + 0.5).floor();
    if r <= b_min as f64 {
        b_min
    } else if r >= b_max as f64 {
        b_max
    } else {
        r as u8
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Monotonicity {
    Decreasing,
    Increasing,
    Flat,
}

/// Direction of the unrounded bit count between consecutive iterations:
/// bits fall when `Ḡ_{t+1}/Ḡ_t < √α` and rise when it is larger.
pub fn bits_monotonicity_class(alpha: f64, gbar: f64, gbar_next: f64) -> Result<Monotonicity> {
    if !(gbar > 0.0) {
        return Err(Error::InvalidInput("monotonicity class needs Ḡ_t > 0".into()));
    }
    let ratio = gbar_next / gbar;
    let threshold = alpha.sqrt();
    Ok(if ratio < threshold {
        Monotonicity::Decreasing
    } else if ratio > threshold {
        Monotonicity::Increasing
    } else {
        Monotonicity::Flat
    })
}

/// `Σ_t α^(T-1-t) Ḡ_t² / (2^(b_t-1) − 1)²` for real-valued bits.
pub fn budget_satisfaction_continuous(bits: &[f64], gbar: &[f64], alpha: f64) -> f64 {
    debug_assert_eq!(bits.len(), gbar.len());
    let t_total = bits.len();
    bits.iter()
        .zip(gbar)
        .enumerate()
        .map(|(t, (&b, &g))| {
            let s = continuous_levels(b);
            if g == 0.0 {
                0.0
            } else {
                alpha.powi((t_total - 1 - t) as i32) * g * g / (s * s)
            }
        })
        .sum()
}

/// Left-hand side of the quantization budget for a realized schedule.
pub fn budget_satisfaction(schedule: &BitSchedule, gbar: &[f64], alpha: f64) -> f64 {
    let bits: Vec<f64> = schedule.realized.iter().map(|&b| b as f64).collect();
    budget_satisfaction_continuous(&bits, gbar, alpha)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Fixed { bits: u8 },
    /// 2-bit EWU, the ternary `{-1, 0, +1}·‖g‖` baseline.
    Ternary,
    /// 1-bit sign codec.
    Sign,
    Dynamic,
}

impl ScheduleKind {
    pub fn label(&self) -> String {
        match self {
            ScheduleKind::Fixed { bits } => format!("fixed-{bits}"),
            ScheduleKind::Ternary => "ternary".into(),
            ScheduleKind::Sign => "sign".into(),
            ScheduleKind::Dynamic => "dynamic".into(),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AlphaSource {
    /// `(F(x_t)/F(x_0))^(1/t)` at each refresh.
    Estimated,
    /// `1 − 2μη + Lμη²` from the objective constants.
    ClosedForm,
    /// A user-supplied constant.
    Given(f64),
}

/// Tunables for the dynamic rule.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicParams {
    pub epsilon: f64,
    pub gamma: f64,
    pub tau: usize,
    pub b_min: u8,
    pub b_max: u8,
    pub initial_bits: u8,
    pub alpha: AlphaSource,
}

impl DynamicParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if !(2 <= self.b_min && self.b_min <= self.b_max && self.b_max <= 32) {
            return Err(Error::Config(format!(
                "bit clamps must satisfy 2 <= b_min <= b_max <= 32, got [{}, {}]",
                self.b_min, self.b_max
            )));
        }
        if !(2..=32).contains(&self.initial_bits) {
            return Err(Error::Config(format!("initial bits must be in 2..=32, got {}", self.initial_bits)));
        }
        if let AlphaSource::Given(a) = self.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("alpha must lie in (0, 1), got {a}")));
            }
        }
        Ok(())
    }
}

/// Problem dimensions the dynamic rule depends on.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSize {
    pub iterations: usize,
    pub workers: usize,
    pub dim: usize,
    pub learning_rate: f64,
    pub constants: Constants,
}

/// State of the dynamic rule, owned by the server loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub iterations: usize,
    pub workers: usize,
    pub dim: usize,
    pub learning_rate: f64,
    pub smoothness: f64,
    pub strong_convexity: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub eps_q: f64,
    pub eps_hat: f64,
    pub alpha: f64,
    pub alpha_source: AlphaSource,
    pub gbar_history: Vec<f64>,
    pub tau: usize,
    pub b_min: u8,
    pub b_max: u8,
    pub initial_loss: f64,
}

impl SchedulerState {
    pub fn new(params: &DynamicParams, problem: &ProblemSize, initial_loss: f64) -> Result<Self> {
        params.validate()?;
        let l = problem.constants.smoothness;
        let mu = problem.constants.strong_convexity;
        if !(l > 0.0) || !(problem.learning_rate > 0.0) {
            return Err(Error::Config("dynamic schedule needs L > 0 and η > 0".into()));
        }
        let (eps_q, eps_hat) =
            quantization_budget(params.epsilon, params.gamma, problem.workers, l, problem.dim, problem.learning_rate);
        let alpha = match params.alpha {
            AlphaSource::ClosedForm => clamp_alpha(alpha_closed_form(problem.learning_rate, l, mu)),
            AlphaSource::Given(a) => clamp_alpha(a),
            AlphaSource::Estimated => {
                if !(initial_loss > 0.0) {
                    return Err(Error::Config(format!(
                        "estimated alpha needs a positive initial loss, got {initial_loss}"
                    )));
                }
                ALPHA_CEIL
            }
        };
        Ok(Self {
            iterations: problem.iterations,
            workers: problem.workers,
            dim: problem.dim,
            learning_rate: problem.learning_rate,
            smoothness: l,
            strong_convexity: mu,
            epsilon: params.epsilon,
            gamma: params.gamma,
            eps_q,
            eps_hat,
            alpha,
            alpha_source: params.alpha,
            gbar_history: Vec::new(),
            tau: params.tau,
            b_min: params.b_min,
            b_max: params.b_max,
            initial_loss,
        })
    }

    pub fn quantization_budget(&self) -> (f64, f64) {
        (self.eps_q, self.eps_hat)
    }

    pub fn continuous_bits(&self, t: usize, gbar: f64) -> f64 {
        dq_bits_continuous(self.iterations, self.eps_hat, self.alpha, t, gbar)
    }

    /// Integer bit count for iteration `t` given the latest `Ḡ`.
    pub fn dq_bits(&self, t: usize, gbar: f64) -> u8 {
        if gbar == 0.0 {
            return self.b_min;
        }
        round_bits(self.continuous_bits(t, gbar), self.b_min, self.b_max)
    }

    pub fn monotonicity(&self, gbar: f64, gbar_next: f64) -> Result<Monotonicity> {
        bits_monotonicity_class(self.alpha, gbar, gbar_next)
    }
}

/// The realized bit sequence of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitSchedule {
    pub kind: ScheduleKind,
    pub realized: Vec<u8>,
}

impl BitSchedule {
    pub fn bits_at(&self, t: usize) -> Option<u8> {
        self.realized.get(t).copied()
    }
}

/// Drives a [`ScheduleKind`] through a run.
#[derive(Clone, Debug)]
pub struct Scheduler {
    kind: ScheduleKind,
    state: Option<SchedulerState>,
    current: u8,
    realized: Vec<u8>,
}

impl Scheduler {
    pub fn new(kind: ScheduleKind, params: &DynamicParams, problem: &ProblemSize, initial_loss: f64) -> Result<Self> {
        let (current, state) = match kind {
            ScheduleKind::Fixed { bits } => {
                if !(2..=32).contains(&bits) {
                    return Err(Error::Config(format!("fixed schedule bits must be in 2..=32, got {bits}")));
                }
                (bits, None)
            }
            ScheduleKind::Ternary => (2, None),
            ScheduleKind::Sign => (1, None),
            ScheduleKind::Dynamic => {
                let state = SchedulerState::new(params, problem, initial_loss)?;
                (params.initial_bits.clamp(state.b_min, state.b_max), Some(state))
            }
        };
        Ok(Self { kind, state, current, realized: Vec::with_capacity(problem.iterations) })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn state(&self) -> Option<&SchedulerState> {
        self.state.as_ref()
    }

    /// Width used by the round in progress.
    pub fn current_bits(&self) -> u8 {
        self.current
    }

    /// Records round `t` and picks the width for round `t + 1`.
    ///
    /// `gbar` is the round's `Ḡ_t`; `next_loss` is `F(x_{t+1})`, used when α
    /// is estimated. The dynamic width is refreshed whenever `t + 1` is a
    /// multiple of `τ` and held in between.
    pub fn advance(&mut self, t: usize, gbar: f64, next_loss: f64) -> Result<u8> {
        self.realized.push(self.current);
        if let Some(state) = self.state.as_mut() {
            state.gbar_history.push(gbar);
            let next = t + 1;
            if next % state.tau == 0 && next < state.iterations {
                if state.alpha_source == AlphaSource::Estimated {
                    state.alpha = alpha_estimate(state.initial_loss, next_loss, next)?;
                }
                self.current = state.dq_bits(next, gbar);
            }
        }
        Ok(self.current)
    }

    pub fn schedule(&self) -> BitSchedule {
        BitSchedule { kind: self.kind, realized: self.realized.clone() }
    }
}
