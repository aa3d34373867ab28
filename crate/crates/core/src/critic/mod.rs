//! Off-policy n-step TD with linear function approximation, its exact
//! projected-Bellman fixed point, contraction certification and the
//! finite-sample bound evaluators for constant and diminishing stepsizes.

mod bounds;
mod fixed_point;
mod td;

pub use bounds::{
    largest_compliant_step, BoundTerms, ConstantStepBound, ConstantStepInputs, DiminishingStepBound,
    DiminishingStepInputs, CONSTANT_STEP_GATE, VARIANCE_CONSTANT,
};
pub use fixed_point::{
    certify_contraction, chain_bound, expected_update, fixed_point_from_model, fixed_point_norm_bound,
    solve_projected_bellman,
    NStepModel, ProjectedFixedPoint,
};
pub use td::{run_critic, td_step, CriticRun, Divergence, ErrorCheckpoint, TdEngine};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{BehaviorPolicy, PolicyTable};

/// Iterate ∞-norm beyond which a run is reported as diverged.
pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 1e8;

/// `f(x) = Σ_{i=0}^{n} x^i`, i.e. `n+1` at `x = 1` and `(1 − x^{n+1})/(1 − x)`
/// elsewhere. Near `x = 1` the sum is evaluated directly to stay continuous.
pub fn f_factor(x: f64, n: usize) -> f64 {
    if (x - 1.0).abs() < 1e-3 {
        // Horner: 1 + x(1 + x(1 + …))
        let mut acc = 1.0;
        for _ in 0..n {
            acc = 1.0 + x * acc;
        }
        acc
    } else {
        (1.0 - x.powf(n as f64 + 1.0)) / (1.0 - x)
    }
}

/// Smallest `n ≥ 1` with `n ≥ (2 ln γ_c + ln κ_min)/(2 ln γ)`, equivalently
/// `γ^n ≤ γ_c √κ_min`.
pub fn min_horizon(gamma: f64, gamma_c: f64, kappa_min: f64) -> Result<usize> {
    for (name, v) in [("gamma", gamma), ("gamma_c", gamma_c), ("kappa_min", kappa_min)] {
        if !(v > 0.0 && v <= 1.0) || (name != "kappa_min" && v == 1.0) {
            return Err(Error::config(format!("{name} = {v} must lie in (0, 1)")));
        }
    }
    let target = gamma_c * kappa_min.sqrt();
    let raw = (2.0 * gamma_c.ln() + kappa_min.ln()) / (2.0 * gamma.ln());
    let mut n = (raw.ceil().max(1.0)) as usize;
    // guard against round-off in the closed form
    while gamma.powi(n as i32) > target {
        n += 1;
    }
    while n > 1 && gamma.powi(n as i32 - 1) <= target {
        n -= 1;
    }
    Ok(n)
}

/// `ρ(s,a) = π(a|s)/π_b(a|s)`.
pub fn importance_ratio(target: &PolicyTable, behavior: &BehaviorPolicy, s: usize, a: usize) -> f64 {
    target.prob(s, a) / behavior.prob(s, a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    Constant { alpha: f64 },
    /// `α_k = α/(k+h)^η`.
    Diminishing { alpha: f64, eta: f64, h: f64 },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Constant { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::config(format!("stepsize {alpha} must be positive")));
                }
            }
            StepSchedule::Diminishing { alpha, eta, h } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::config(format!("stepsize {alpha} must be positive")));
                }
                if !(eta > 0.0 && eta <= 1.0) {
                    return Err(Error::config(format!("exponent {eta} must lie in (0, 1]")));
                }
                if !(h > 0.0 && h.is_finite()) {
                    return Err(Error::config(format!("offset {h} must be positive")));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn alpha_at(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::Diminishing { alpha, eta, h } => {
                let base = k as f64 + h;
                if eta == 1.0 {
                    alpha / base
                } else {
                    alpha / base.powf(eta)
                }
            }
        }
    }

    pub fn base_alpha(&self) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } | StepSchedule::Diminishing { alpha, .. } => alpha,
        }
    }
}

fn default_threshold() -> f64 {
    DEFAULT_DIVERGENCE_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    /// Multi-step horizon `n`.
    pub n: usize,
    pub schedule: StepSchedule,
    /// Number of TD updates `K`.
    pub num_iters: usize,
    /// Initial iterate; zeros when absent.
    #[serde(default)]
    pub w0: Option<Vec<f64>>,
    pub gamma_c: f64,
    /// Require the horizon and stepsize conditions of the constant-stepsize
    /// bound before running.
    #[serde(default)]
    pub enforce_bound_conditions: bool,
    #[serde(default = "default_threshold")]
    pub divergence_threshold: f64,
    /// Record every `thin`-th iterate; defaults to `max(1, K/1000)`.
    #[serde(default)]
    pub thin: Option<usize>,
    /// Extra iteration indices at which iterates and errors are recorded.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
}

impl CriticConfig {
    pub fn new(n: usize, schedule: StepSchedule, num_iters: usize, gamma_c: f64) -> Self {
        CriticConfig {
            n,
            schedule,
            num_iters,
            w0: None,
            gamma_c,
            enforce_bound_conditions: false,
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
            thin: None,
            checkpoints: Vec::new(),
        }
    }

    /// Structural checks that need no model information.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("horizon n must be at least 1"));
        }
        if !(self.gamma_c > 0.0 && self.gamma_c < 1.0) {
            return Err(Error::config(format!("gamma_c = {} must lie in (0, 1)", self.gamma_c)));
        }
        self.schedule.validate()?;
        if let Some(w0) = &self.w0 {
            if w0.len() != dim {
                return Err(Error::config(format!(
                    "w0 has length {}, feature dimension is {dim}",
                    w0.len()
                )));
            }
            if w0.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("w0 has non-finite entries"));
            }
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::config("divergence threshold must be positive"));
        }
        if self.thin == Some(0) {
            return Err(Error::config("thin must be at least 1"));
        }
        Ok(())
    }

    pub fn initial(&self, dim: usize) -> Vec<f64> {
        self.w0.clone().unwrap_or_else(|| vec![0.0; dim])
    }

    pub fn thin_every(&self) -> usize {
        self.thin.unwrap_or((self.num_iters / 1000).max(1))
    }
}
