//! Finite-sample mean-square error bounds for the critic.
//!
//! Both evaluators refuse to produce a number when their hypotheses fail:
//! the horizon must satisfy `γ^n ≤ γ_c√κ_min` and the stepsizes must pass the
//! mixing-adjusted smallness conditions.

use serde::{Deserialize, Serialize};

use super::{f_factor, min_horizon};
use crate::error::{Error, Result};

/// Denominator constant in the constant-stepsize condition
/// `α(t_α+n+1) ≤ (1−γ_c)/(456 f(γζ_π)²)`.
pub const CONSTANT_STEP_GATE: f64 = 456.0;

/// Constant in `c₂ = 114 f(γζ_π)²(‖w_π‖₂+1)²` and in the diminishing-stepsize
/// window condition.
pub const VARIANCE_CONSTANT: f64 = 114.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub k: usize,
    /// Initial-condition (bias) term.
    pub e1: f64,
    /// Noise (variance) term.
    pub e2: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.e1 + self.e2
    }
}

fn check_horizon(gamma: f64, gamma_c: f64, kappa_min: f64, n: usize) -> Result<()> {
    let n_min = min_horizon(gamma, gamma_c, kappa_min)?;
    if n < n_min {
        return Err(Error::inapplicable(format!(
            "horizon n = {n} is below the minimum {n_min} needed for gamma^n <= gamma_c * sqrt(kappa_min)"
        )));
    }
    Ok(())
}

/// Everything the constant-stepsize bound depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantStepInputs {
    pub gamma: f64,
    pub gamma_c: f64,
    pub n: usize,
    pub kappa_min: f64,
    pub alpha: f64,
    pub t_alpha: usize,
    /// ζ_π = max π/π_b.
    pub zeta: f64,
    pub lambda_min: f64,
    /// `‖w₀‖₂`.
    pub w0_norm: f64,
    /// `‖w₀ − w_π‖₂`.
    pub w0_gap: f64,
    /// `‖w_π‖₂`.
    pub w_pi_norm: f64,
}

/// `E‖w_k − w_π‖² ≤ c₁(1−(1−γ_c)λ_min α)^{k−τ} + c₂ ατ/((1−γ_c)λ_min)` for
/// `k ≥ τ = t_α+n+1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantStepBound {
    pub inputs: ConstantStepInputs,
    pub c1: f64,
    pub c2: f64,
    pub tau: usize,
    /// `f(γζ_π)`.
    pub lipschitz: f64,
    /// Per-step contraction factor `1 − (1−γ_c)λ_min α`.
    pub rate: f64,
    pub e2: f64,
}

impl ConstantStepBound {
    pub fn new(inputs: ConstantStepInputs) -> Result<Self> {
        let i = inputs;
        if !(i.alpha > 0.0) || !(i.lambda_min > 0.0) {
            return Err(Error::inapplicable("stepsize and lambda_min must be positive"));
        }
        check_horizon(i.gamma, i.gamma_c, i.kappa_min, i.n)?;
        let lipschitz = f_factor(i.gamma * i.zeta, i.n);
        let tau = i.t_alpha + i.n + 1;
        let gate = (1.0 - i.gamma_c) / (CONSTANT_STEP_GATE * lipschitz * lipschitz);
        if i.alpha * tau as f64 > gate {
            return Err(Error::inapplicable(format!(
                "stepsize condition alpha*(t_alpha+n+1) = {:e} exceeds (1-gamma_c)/(456 f^2) = {gate:e}",
                i.alpha * tau as f64
            )));
        }
        let ell = (1.0 - i.gamma_c) * i.lambda_min;
        let c1 = (i.w0_norm + i.w0_gap + 1.0).powi(2);
        let c2 = VARIANCE_CONSTANT * lipschitz * lipschitz * (i.w_pi_norm + 1.0).powi(2);
        Ok(ConstantStepBound {
            inputs,
            c1,
            c2,
            tau,
            lipschitz,
            rate: 1.0 - ell * i.alpha,
            e2: c2 * i.alpha * tau as f64 / ell,
        })
    }

    pub fn at(&self, k: usize) -> Result<BoundTerms> {
        if k < self.tau {
            return Err(Error::inapplicable(format!(
                "iteration {k} precedes t_alpha+n+1 = {}",
                self.tau
            )));
        }
        Ok(BoundTerms {
            k,
            e1: self.c1 * self.rate.powf((k - self.tau) as f64),
            e2: self.e2,
        })
    }
}

/// Largest stepsize on the fixed-point sequence `α ← G/(t_α+n+1)` that
/// satisfies the constant-stepsize condition `α(t_α+n+1) ≤ G`, with
/// `G = (1−γ_c)/(456 f²)`.
pub fn largest_compliant_step(
    gamma_c: f64,
    lipschitz: f64,
    n: usize,
    t_alpha: impl Fn(f64) -> Result<usize>,
) -> Result<f64> {
    let gate = (1.0 - gamma_c) / (CONSTANT_STEP_GATE * lipschitz * lipschitz);
    let mut alpha = gate / (n + 1) as f64;
    loop {
        let tau = (t_alpha(alpha)? + n + 1) as f64;
        let next = gate / tau;
        if next >= alpha {
            // G/τ can round up by an ulp, which the gate check would reject
            while alpha * tau > gate {
                alpha = alpha.next_down();
            }
            return Ok(alpha);
        }
        alpha = next;
    }
}

/// Everything the diminishing-stepsize bound depends on, besides the mixing
/// times `t_{α_k}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiminishingStepInputs {
    pub gamma: f64,
    pub gamma_c: f64,
    pub n: usize,
    pub kappa_min: f64,
    pub alpha: f64,
    pub eta: f64,
    pub h: f64,
    pub zeta: f64,
    pub lambda_min: f64,
    pub w0_norm: f64,
    pub w0_gap: f64,
    pub w_pi_norm: f64,
    /// Geometric mixing envelope `max_s TV(P^k(s,·), μ_b) ≤ C σ^k`.
    pub geo_c: f64,
    pub geo_sigma: f64,
}

/// Bound for `α_k = α/(k+h)^η`, valid for `k̂ ≤ k ≤ k_max` where
/// `k̂ = min{k : k ≥ t_{α_k}+n+1}`.
///
/// The offset `h` must keep every mixing window small:
/// `Σ_{i=k−τ_k}^{k−1} α_i ≤ (1−γ_c)/(114 f(γζ_π)²)` with `τ_k = t_{α_k}+n+1`,
/// checked for every `k` in `[k̂, k_max]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiminishingStepBound {
    pub inputs: DiminishingStepInputs,
    pub c1: f64,
    pub c2: f64,
    pub k_hat: usize,
    pub k_max: usize,
    /// `ℓ = (1−γ_c)λ_min`.
    pub ell: f64,
    /// `L₁ = (1 + log(C/σ))/log(1/σ)`.
    pub l1: f64,
    pub lipschitz: f64,
}

impl DiminishingStepBound {
    pub fn new(
        inputs: DiminishingStepInputs,
        t_alpha: impl Fn(f64) -> Result<usize>,
        k_max: usize,
    ) -> Result<Self> {
        let i = inputs;
        if !(i.alpha > 0.0 && i.h > 0.0 && i.eta > 0.0 && i.eta <= 1.0) || !(i.lambda_min > 0.0) {
            return Err(Error::inapplicable("schedule parameters out of range"));
        }
        if !(i.geo_sigma > 0.0 && i.geo_sigma < 1.0 && i.geo_c > 0.0) {
            return Err(Error::inapplicable("mixing envelope must have C > 0 and sigma in (0, 1)"));
        }
        check_horizon(i.gamma, i.gamma_c, i.kappa_min, i.n)?;
        let lipschitz = f_factor(i.gamma * i.zeta, i.n);
        let step = |k: usize| i.alpha / (k as f64 + i.h).powf(i.eta);

        let mut taus = Vec::with_capacity(k_max + 1);
        let mut k_hat = None;
        for k in 0..=k_max {
            let tau = t_alpha(step(k))? + i.n + 1;
            taus.push(tau);
            if k_hat.is_none() && k >= tau {
                k_hat = Some(k);
            }
        }
        let k_hat = k_hat.ok_or_else(|| {
            Error::inapplicable(format!("no k <= {k_max} satisfies k >= t_k + n + 1"))
        })?;

        let limit = (1.0 - i.gamma_c) / (VARIANCE_CONSTANT * lipschitz * lipschitz);
        let mut prefix = Vec::with_capacity(k_max + 1);
        let mut acc = 0.0;
        prefix.push(0.0);
        for k in 0..k_max {
            acc += step(k);
            prefix.push(acc);
        }
        for k in k_hat..=k_max {
            let window = prefix[k] - prefix[k - taus[k]];
            if window > limit {
                return Err(Error::inapplicable(format!(
                    "offset h = {} too small: stepsizes over the mixing window ending at k = {k} sum to {window:e} > {limit:e}",
                    i.h
                )));
            }
        }

        let ell = (1.0 - i.gamma_c) * i.lambda_min;
        if i.eta < 1.0 {
            let need = (2.0 * i.eta / (ell * i.alpha)).powf(1.0 / (1.0 - i.eta));
            if (k_hat as f64 + i.h) < need {
                return Err(Error::inapplicable(format!(
                    "k_hat + h = {} is below [2 eta/(ell alpha)]^(1/(1-eta)) = {need}",
                    k_hat as f64 + i.h
                )));
            }
        }
        let l1 = (1.0 + (i.geo_c / i.geo_sigma).ln()) / (1.0 / i.geo_sigma).ln();
        if !(l1 > 0.0) {
            return Err(Error::inapplicable(format!("mixing constant L1 = {l1} is not positive")));
        }
        Ok(DiminishingStepBound {
            inputs,
            c1: (i.w0_norm + i.w0_gap + 1.0).powi(2),
            c2: VARIANCE_CONSTANT * lipschitz * lipschitz * (i.w_pi_norm + 1.0).powi(2),
            k_hat,
            k_max,
            ell,
            l1,
            lipschitz,
        })
    }

    pub fn at(&self, k: usize) -> Result<BoundTerms> {
        if k < self.k_hat || k > self.k_max {
            return Err(Error::inapplicable(format!(
                "iteration {k} outside the validated range [{}, {}]",
                self.k_hat, self.k_max
            )));
        }
        let i = &self.inputs;
        let (c1, c2, l1) = (self.c1, self.c2, self.l1);
        let a = i.alpha;
        let kh = k as f64 + i.h;
        let k0 = self.k_hat as f64 + i.h;
        let log_term = (kh / a).ln() + 1.0;
        let la = self.ell * a;
        let (e1, e2) = if i.eta == 1.0 {
            if (la - 1.0).abs() <= 1e-12 {
                (
                    c1 * (k0 / kh),
                    8.0 * c2 * a * a * l1 * (kh / k0).ln() * log_term / kh,
                )
            } else if la < 1.0 {
                (
                    c1 * (k0 / kh).powf(la),
                    8.0 * c2 * a * a * l1 / (1.0 - la) * log_term / kh.powf(la),
                )
            } else {
                (
                    c1 * (k0 / kh).powf(la),
                    8.0 * std::f64::consts::E * c2 * a * a * l1 / (la - 1.0) * log_term / kh,
                )
            }
        } else {
            let p = 1.0 - i.eta;
            (
                c1 * (-(la / p) * (kh.powf(p) - k0.powf(p))).exp(),
                4.0 * c2 * a * a * l1 / la * log_term / kh.powf(i.eta),
            )
        };
        Ok(BoundTerms { k, e1, e2 })
    }
}
