//! Sample-complexity sweep: for each target accuracy, the cheapest
//! `(T, K)` on doubling grids whose seed-averaged gap reaches it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::actor::{run_nac, ActorConfig, EvalRule, Problem};
use crate::critic::{CriticConfig, StepSchedule};
use crate::error::{Error, Result};

use super::output::mean_stderr;
use super::setup::par_map;

fn default_t_grid() -> Vec<usize> {
    (0..11).map(|i| 1 << i).collect()
}

fn default_k_grid() -> Vec<usize> {
    (4..17).map(|i| 1 << i).collect()
}

/// Sweep settings. The critic stepsize follows `α(ε) = α_ref (ε/ε_ref)²`,
/// the scaling under which the critic's variance floor shrinks with ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub eps: Vec<f64>,
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<usize>,
    #[serde(default = "default_k_grid")]
    pub k_grid: Vec<usize>,
    pub alpha_ref: f64,
    pub eps_ref: f64,
    /// Critic horizon; defaults to the instance's minimum horizon.
    #[serde(default)]
    pub n: Option<usize>,
    pub gamma_c: f64,
    #[serde(default)]
    pub start_state: usize,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps.is_empty() || self.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::config("sweep needs a nonempty list of positive accuracies"));
        }
        for (name, g) in [("t_grid", &self.t_grid), ("k_grid", &self.k_grid)] {
            if g.is_empty() || g.contains(&0) || g.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config(format!("{name} must be a nonempty increasing list of positive sizes")));
            }
        }
        if !(self.alpha_ref > 0.0 && self.eps_ref > 0.0) {
            return Err(Error::config("alpha_ref and eps_ref must be positive"));
        }
        if !(self.gamma_c > 0.0 && self.gamma_c < 1.0) {
            return Err(Error::config("gamma_c must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn alpha_for(&self, eps: f64) -> f64 {
        self.alpha_ref * (eps / self.eps_ref).powi(2)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub alpha: f64,
    pub reachable: bool,
    pub t: usize,
    pub k: usize,
    /// `T·(K+n)`.
    pub total_samples: usize,
    pub mean_gap: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub n: usize,
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `ln(total samples)` against `ln(1/ε)` over
    /// reachable rows; absent with fewer than two.
    pub slope: Option<f64>,
    /// Largest visited `‖Q^π − Φw_π‖_∞`; a proxy for the approximation error.
    pub xi_proxy: f64,
    /// `4ξ/(1−γ)²` with the proxy; added to each target when nonzero.
    pub a2: f64,
}

impl SweepResult {
    /// Successive total-sample ratios between reachable rows.
    pub fn growth_factors(&self) -> Vec<f64> {
        self.rows
            .windows(2)
            .filter(|w| w[0].reachable && w[1].reachable)
            .map(|w| w[1].total_samples as f64 / w[0].total_samples as f64)
            .collect()
    }
}

/// Values of `ξ` below this count as zero (tabular round-off).
const XI_ZERO: f64 = 1e-9;

/// Per-seed gap traces of the longest run made so far for a given `(α, K)`.
struct Cached {
    t: usize,
    gaps: Vec<Vec<f64>>,
    xi: f64,
}

pub fn sample_complexity_sweep(
    problem: &Problem,
    config: &SweepConfig,
    seeds: &[u64],
    workers: usize,
) -> Result<SweepResult> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("seed list is empty"));
    }
    let gamma = problem.mdp.gamma();
    let n = match config.n {
        Some(n) => n,
        None => crate::critic::min_horizon(gamma, config.gamma_c, problem.stationary.kappa_min)?,
    };
    let mut candidates: Vec<(usize, usize)> = config
        .t_grid
        .iter()
        .flat_map(|&t| config.k_grid.iter().map(move |&k| (t, k)))
        .collect();
    candidates.sort_by_key(|&(t, k)| (t * (k + n), t));

    let mut xi_proxy: f64 = 0.0;
    let mut rows = Vec::with_capacity(config.eps.len());
    let mut floor = 0;
    for &eps in &config.eps {
        let alpha = config.alpha_for(eps);
        let mut cache: HashMap<usize, Cached> = HashMap::new();
        let mut found = None;
        for &(t, k) in candidates.iter().filter(|&&(t, k)| t * (k + n) >= floor) {
            let hit = cache.get(&k).is_some_and(|c| c.t >= t);
            if !hit {
                let mut actor = ActorConfig::new(t, CriticConfig::new(n, StepSchedule::Constant { alpha }, k, config.gamma_c));
                actor.eval_rule = EvalRule::UniformSample;
                actor.start_state = config.start_state;
                let runs = par_map(seeds, workers, |s| run_nac(problem, &actor, s))?;
                let xi = runs.iter().flat_map(|r| r.xi_trace.iter().copied()).fold(0.0, f64::max);
                cache.insert(
                    k,
                    Cached {
                        t,
                        gaps: runs.into_iter().map(|r| r.gaps).collect(),
                        xi,
                    },
                );
            }
            let c = &cache[&k];
            xi_proxy = xi_proxy.max(c.xi);
            // exact expectation over a uniform output index in {0, …, T−1}
            let avg: Vec<f64> = c.gaps.iter().map(|g| g[..t].iter().sum::<f64>() / t as f64).collect();
            let (mean, se) = mean_stderr(&avg);
            let a2 = a2_term(xi_proxy, gamma);
            if mean <= eps + a2 {
                found = Some((t, k, mean, se));
                break;
            }
        }
        rows.push(match found {
            Some((t, k, mean_gap, stderr)) => {
                floor = t * (k + n);
                SweepRow {
                    eps,
                    alpha,
                    reachable: true,
                    t,
                    k,
                    total_samples: t * (k + n),
                    mean_gap,
                    stderr,
                }
            }
            None => SweepRow {
                eps,
                alpha,
                reachable: false,
                t: 0,
                k: 0,
                total_samples: 0,
                mean_gap: f64::NAN,
                stderr: f64::NAN,
            },
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.reachable)
        .map(|r| ((1.0 / r.eps).ln(), (r.total_samples as f64).ln()))
        .collect();
    Ok(SweepResult {
        n,
        slope: slope(&pts),
        a2: a2_term(xi_proxy, gamma),
        xi_proxy,
        rows,
    })
}

fn a2_term(xi: f64, gamma: f64) -> f64 {
    if xi < XI_ZERO {
        0.0
    } else {
        4.0 * xi / (1.0 - gamma).powi(2)
    }
}

/// Least-squares slope of `y` on `x`.
pub fn slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}
