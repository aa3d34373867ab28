//! Policy updates: the sampled off-policy natural actor-critic, its
//! multiplicative form, exact NPG on the projected-Bellman critic, QNPG on a
//! weighted least-squares critic, and the gap bound for the sampled loop.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{
    f_factor, fixed_point_from_model, fixed_point_norm_bound, min_horizon, CriticConfig, NStepModel, TdEngine,
    CONSTANT_STEP_GATE,
};
use crate::error::{Error, Result};
use crate::mdp::{
    discounted_visitation, exact_q, optimal_values, softmax_eval, softmax_rows, state_values, stationary_info,
    BehaviorPolicy, FeatureMap, Mdp, OptimalValues, PolicyTable, StationaryInfo,
};
use crate::sampler::{derive_seed, mixing_time, SegmentStream};

/// Stream index reserved for drawing the uniform output iterate.
const OUTPUT_INDEX_STREAM: u64 = u64::MAX;

/// Gaps this close below zero are value-solve round-off and are reported as 0.
const GAP_ROUNDOFF: f64 = 1e-9;

/// `θ + βw`.
pub fn natural_update(theta: &DVector<f64>, w: &DVector<f64>, beta: f64) -> Result<DVector<f64>> {
    if theta.len() != w.len() {
        return Err(Error::config(format!(
            "theta has length {}, w has length {}",
            theta.len(),
            w.len()
        )));
    }
    Ok(theta + w * beta)
}

/// `π'(a|s) ∝ π(a|s) exp(β wᵀφ(s,a))`, the policy-space form of the natural
/// update under softmax parametrization.
pub fn multiplicative_update(
    policy: &PolicyTable,
    features: &FeatureMap,
    w: &DVector<f64>,
    beta: f64,
) -> Result<PolicyTable> {
    let na = policy.num_actions();
    if features.num_pairs() != policy.num_states() * na || w.len() != features.dim() {
        return Err(Error::config("policy, features and w have inconsistent dimensions"));
    }
    let scores = features.matrix() * w * beta;
    let mut table = DMatrix::zeros(policy.num_states(), na);
    for s in 0..policy.num_states() {
        let row = &scores.as_slice()[s * na..(s + 1) * na];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for a in 0..na {
            let v = policy.prob(s, a) * (row[a] - max).exp();
            table[(s, a)] = v;
            z += v;
        }
        for a in 0..na {
            table[(s, a)] /= z;
        }
    }
    PolicyTable::new(table)
}

/// How the returned policy index is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalRule {
    /// `θ_T`.
    #[default]
    FinalIterate,
    /// `θ_{T̂}` with `T̂` uniform on `{0, …, T−1}`, drawn from the run seed.
    UniformSample,
    /// Every iterate is kept; summaries average over `t = 0..T−1`.
    AllIterates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorConfig {
    /// Outer iterations `T`.
    pub num_outer: usize,
    /// Actor stepsize; defaults to `ln |A|`.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    pub critic: CriticConfig,
    #[serde(default)]
    pub eval_rule: EvalRule,
    /// Trajectory start state.
    #[serde(default)]
    pub start_state: usize,
}

impl ActorConfig {
    pub fn new(num_outer: usize, critic: CriticConfig) -> Self {
        ActorConfig {
            num_outer,
            beta: None,
            theta0: None,
            critic,
            eval_rule: EvalRule::FinalIterate,
            start_state: 0,
        }
    }

    pub fn beta_for(&self, num_actions: usize) -> f64 {
        self.beta.unwrap_or((num_actions as f64).ln())
    }

    pub fn validate(&self, num_actions: usize, dim: usize) -> Result<()> {
        if self.num_outer == 0 {
            return Err(Error::config("T must be at least 1"));
        }
        let beta = self.beta_for(num_actions);
        // β = 0 is allowed: it freezes the policy, which is a useful baseline
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::config(format!("beta = {beta} must be nonnegative and finite")));
        }
        if let Some(t) = &self.theta0 {
            if t.len() != dim || t.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("theta0 must be a finite vector of the feature dimension"));
            }
        }
        self.critic.validate(dim)
    }

    /// True when `β` is below the `ln |A|` that the gap bounds assume.
    pub fn beta_below_log_actions(&self, num_actions: usize) -> bool {
        self.beta_for(num_actions) < (num_actions as f64).ln()
    }

    pub fn initial_theta(&self, dim: usize) -> DVector<f64> {
        self.theta0
            .as_ref()
            .map(|t| DVector::from_column_slice(t))
            .unwrap_or_else(|| DVector::zeros(dim))
    }
}

/// An MDP with features and behavior policy plus the exact quantities every
/// diagnostic needs.
#[derive(Debug, Clone)]
pub struct Problem {
    pub mdp: Mdp,
    pub features: FeatureMap,
    pub behavior: BehaviorPolicy,
    pub stationary: StationaryInfo,
    /// Start distribution μ for `V(μ)`; uniform by default.
    pub start: DVector<f64>,
    pub optimal: OptimalValues,
    pub v_star: f64,
}

impl Problem {
    pub fn new(mdp: Mdp, features: FeatureMap, behavior: BehaviorPolicy) -> Result<Self> {
        features.check_against(&mdp)?;
        behavior.policy().check_against(&mdp)?;
        let stationary = stationary_info(&mdp, &behavior)?;
        let ns = mdp.num_states();
        let start = DVector::from_element(ns, 1.0 / ns as f64);
        let optimal = optimal_values(&mdp, 1e-13)?;
        let v_star = optimal.value_at(&start);
        Ok(Problem {
            mdp,
            features,
            behavior,
            stationary,
            start,
            optimal,
            v_star,
        })
    }

    pub fn with_start(mut self, start: DVector<f64>) -> Result<Self> {
        if start.len() != self.mdp.num_states()
            || start.iter().any(|p| *p < 0.0)
            || (start.sum() - 1.0).abs() > 1e-10
        {
            return Err(Error::config("start distribution is not a probability vector over states"));
        }
        self.v_star = self.optimal.value_at(&start);
        self.start = start;
        Ok(self)
    }

    pub fn policy(&self, theta: &DVector<f64>) -> Result<PolicyTable> {
        softmax_eval(&self.features, theta, self.mdp.num_actions())
    }

    /// `V^*(μ) − V^π(μ)` and the exact `Q^π`.
    pub fn gap(&self, policy: &PolicyTable) -> Result<(f64, DVector<f64>)> {
        let q = exact_q(&self.mdp, policy)?;
        let v = state_values(&q, policy).dot(&self.start);
        let mut gap = self.v_star - v;
        if gap < 0.0 && gap > -GAP_ROUNDOFF {
            gap = 0.0;
        }
        Ok((gap, q))
    }

    pub fn n_step_model(&self, policy: &PolicyTable, n: usize) -> Result<NStepModel> {
        NStepModel::new(&self.mdp, &self.features, policy, &self.stationary, n)
    }
}

/// Trace of an actor run. Index `t` refers to `θ_t`; all per-policy traces
/// have `T+1` entries, critic traces have `T`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NacRun {
    pub thetas: Vec<Vec<f64>>,
    /// `w_t` used for the update out of `θ_t`.
    pub critic_outputs: Vec<Vec<f64>>,
    /// `V^*(μ) − V^{π_t}(μ)`.
    pub gaps: Vec<f64>,
    /// `‖Q^{π_t} − Φw_{π_t}‖_∞` with `w_{π_t}` the projected-Bellman solution.
    pub xi_trace: Vec<f64>,
    /// `‖w_{π_t}‖₂`.
    pub w_pi_norms: Vec<f64>,
    /// `‖w_t − w_{π_t}‖₂` for the sampled critic.
    pub critic_errors: Vec<f64>,
    /// Index of the returned policy.
    pub output_index: usize,
}

impl NacRun {
    fn with_capacity(t: usize) -> Self {
        NacRun {
            thetas: Vec::with_capacity(t + 1),
            critic_outputs: Vec::with_capacity(t),
            gaps: Vec::with_capacity(t + 1),
            xi_trace: Vec::with_capacity(t + 1),
            w_pi_norms: Vec::with_capacity(t + 1),
            critic_errors: Vec::with_capacity(t),
            output_index: t,
        }
    }

    /// `(1/T) Σ_{t<T} gap_t`, the exact expectation over a uniform output index.
    pub fn averaged_gap(&self) -> f64 {
        let t = self.critic_outputs.len().max(1);
        self.gaps[..t].iter().sum::<f64>() / t as f64
    }

    pub fn final_gap(&self) -> f64 {
        *self.gaps.last().expect("at least θ_0 is recorded")
    }

    pub fn output_gap(&self) -> f64 {
        self.gaps[self.output_index]
    }
}

/// Maximum of the run's `‖Q^{π_t} − Φw_{π_t}‖_∞` trace. It only sees visited
/// policies, so it lower-bounds the supremum over all policies.
pub fn xi_proxy(run: &NacRun) -> Result<f64> {
    if run.xi_trace.is_empty() {
        return Err(Error::Input("run has no approximation-error trace".into()));
    }
    Ok(run.xi_trace.iter().cloned().fold(0.0, f64::max))
}

fn record_policy(
    problem: &Problem,
    run: &mut NacRun,
    theta: &DVector<f64>,
    policy: &PolicyTable,
    w_pi: &DVector<f64>,
) -> Result<()> {
    let (gap, q) = problem.gap(policy)?;
    let approx = problem.features.matrix() * w_pi;
    run.thetas.push(theta.iter().copied().collect());
    run.gaps.push(gap);
    run.xi_trace.push((q - approx).amax());
    run.w_pi_norms.push(w_pi.norm());
    Ok(())
}

/// Checks the horizon and stepsize conditions of the critic bound against the
/// worst-case mismatch `ζ_max`, which covers every policy the actor can visit.
pub fn check_critic_conditions(problem: &Problem, critic: &CriticConfig) -> Result<()> {
    let gamma = problem.mdp.gamma();
    let n_min = min_horizon(gamma, critic.gamma_c, problem.stationary.kappa_min)?;
    if critic.n < n_min {
        return Err(Error::inapplicable(format!(
            "critic horizon n = {} is below the minimum {n_min}",
            critic.n
        )));
    }
    let alpha = match critic.schedule {
        crate::critic::StepSchedule::Constant { alpha } => alpha,
        _ => return Err(Error::inapplicable("the actor bound needs a constant critic stepsize")),
    };
    let t_alpha = mixing_time(&problem.mdp, &problem.behavior, &problem.stationary.mu_b, alpha.min(0.999))?;
    let f = f_factor(gamma * problem.behavior.zeta_max(), critic.n);
    let gate = (1.0 - critic.gamma_c) / (CONSTANT_STEP_GATE * f * f);
    let tau = t_alpha + critic.n + 1;
    if alpha * tau as f64 > gate {
        return Err(Error::inapplicable(format!(
            "critic stepsize condition alpha*(t_alpha+n+1) = {:e} exceeds {gate:e}",
            alpha * tau as f64
        )));
    }
    if critic.num_iters < tau {
        return Err(Error::inapplicable(format!(
            "K = {} is below t_alpha+n+1 = {tau}",
            critic.num_iters
        )));
    }
    Ok(())
}

/// Off-policy natural actor-critic on one behavior trajectory.
///
/// Outer iteration `t` runs the critic from `w = 0` on trajectory indices
/// `[t(K+n), (t+1)(K+n)]` for the current softmax policy and then sets
/// `θ_{t+1} = θ_t + β w_t`.
pub fn run_nac(problem: &Problem, config: &ActorConfig, seed: u64) -> Result<NacRun> {
    let (na, dim) = (problem.mdp.num_actions(), problem.features.dim());
    config.validate(na, dim)?;
    if config.critic.enforce_bound_conditions {
        check_critic_conditions(problem, &config.critic)?;
    }
    let beta = config.beta_for(na);
    let n = config.critic.n;
    let k = config.critic.num_iters;
    let mut critic = config.critic.clone();
    critic.w0 = None;
    critic.thin = Some(k.max(1));
    critic.checkpoints.clear();

    let mut stream = SegmentStream::new(&problem.mdp, &problem.behavior, config.start_state, seed)?;
    let mut theta = config.initial_theta(dim);
    let mut run = NacRun::with_capacity(config.num_outer);
    for t in 0..=config.num_outer {
        let policy = problem.policy(&theta)?;
        let model = problem.n_step_model(&policy, n)?;
        let fixed = fixed_point_from_model(&model, problem.mdp.gamma(), critic.gamma_c)?;
        let w_pi = fixed.w();
        record_policy(problem, &mut run, &theta, &policy, &w_pi)?;
        if t == config.num_outer {
            break;
        }
        let segment = stream.next_segment(k + n + 1);
        let engine = TdEngine::new(&problem.mdp, &problem.features, &policy, &problem.behavior, n)?;
        let out = engine.run(segment.pairs(), &critic, Some(&w_pi))?;
        if let Some(div) = out.divergence {
            return Err(Error::CriticDivergence {
                iteration: t,
                step: div.step,
                norm: div.norm,
            });
        }
        run.critic_errors.push((&out.final_w - &w_pi).norm());
        run.critic_outputs.push(out.final_w.iter().copied().collect());
        theta = natural_update(&theta, &out.final_w, beta)?;
    }
    run.output_index = match config.eval_rule {
        EvalRule::FinalIterate | EvalRule::AllIterates => config.num_outer,
        EvalRule::UniformSample => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, OUTPUT_INDEX_STREAM));
            rng.random_range(0..config.num_outer)
        }
    };
    Ok(run)
}

/// Exact NPG: `θ_{t+1} = θ_t + β w_{π_t}` with `w_{π_t}` the projected-Bellman
/// solution at horizon `config.critic.n`. Every visited policy must certify
/// contraction at most `γ_c`.
pub fn run_exact_npg(problem: &Problem, config: &ActorConfig) -> Result<NacRun> {
    let (na, dim) = (problem.mdp.num_actions(), problem.features.dim());
    config.validate(na, dim)?;
    let beta = config.beta_for(na);
    let gamma_c = config.critic.gamma_c;
    let mut theta = config.initial_theta(dim);
    let mut run = NacRun::with_capacity(config.num_outer);
    for t in 0..=config.num_outer {
        let policy = problem.policy(&theta)?;
        let model = problem.n_step_model(&policy, config.critic.n)?;
        let fixed = fixed_point_from_model(&model, problem.mdp.gamma(), gamma_c)?;
        if fixed.contraction_estimate > gamma_c {
            return Err(Error::CertificationFailed {
                iterate: t,
                norm: fixed.contraction_estimate,
                gamma_c,
            });
        }
        let w_pi = fixed.w();
        record_policy(problem, &mut run, &theta, &policy, &w_pi)?;
        if t == config.num_outer {
            break;
        }
        run.critic_errors.push(0.0);
        run.critic_outputs.push(fixed.w_pi.clone());
        theta = natural_update(&theta, &w_pi, beta)?;
    }
    Ok(run)
}

/// State distribution weighting the QNPG least-squares fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NuChoice {
    /// `d^π_μ`, the discounted visitation of the current policy from μ.
    #[default]
    DiscountedVisitation,
    /// The behavior stationary distribution `μ_b`.
    Stationary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QnpgRun {
    pub run: NacRun,
    /// Per iterate `E_{s∼ν, a∼π}[(Q^π − φᵀw^π)²]`.
    pub eps_bias: Vec<f64>,
    /// Per iterate `min_{s,a} ν(s)π(a|s)`.
    pub lambda: Vec<f64>,
    /// Per iterate `‖Q^π − Φw^π‖_∞`.
    pub fit_error: Vec<f64>,
}

impl QnpgRun {
    /// `2/((1−γ)²T) + 4 ξ/(1−γ)²` with ξ the largest visited fit error.
    pub fn gap_bound(&self, gamma: f64) -> f64 {
        let t = self.run.critic_outputs.len() as f64;
        let xi = self.fit_error.iter().cloned().fold(0.0, f64::max);
        let h = (1.0 - gamma).powi(2);
        2.0 / (h * t) + 4.0 * xi / h
    }

    /// `2/((1−γ)²T) + 4/(1−γ)² √(ε_bias/λ)` using the visited maximum of
    /// `ε_bias` and minimum of `λ`.
    pub fn bias_bound(&self, gamma: f64) -> f64 {
        let t = self.run.critic_outputs.len() as f64;
        let eps = self.eps_bias.iter().cloned().fold(0.0, f64::max);
        let lambda = self.lambda.iter().cloned().fold(f64::INFINITY, f64::min);
        let h = (1.0 - gamma).powi(2);
        2.0 / (h * t) + 4.0 / h * (eps / lambda).sqrt()
    }
}

/// Weighted least-squares fit `argmin_w Σ ω(s,a)(Q(s,a) − φ(s,a)ᵀw)²` with
/// `ln ω(s,a) = ln ν(s) + ln π(a|s)` given in log form.
///
/// The normal equations are scaled symmetrically by the column norms and
/// assembled in log space, so weights far below the smallest positive `f64`
/// still determine the solution. A numerically singular scaled Gram matrix is
/// an error.
pub fn weighted_q_fit(features: &FeatureMap, q: &DVector<f64>, log_weights: &[f64]) -> Result<DVector<f64>> {
    let phi = features.matrix();
    let (rows, d) = phi.shape();
    if q.len() != rows || log_weights.len() != rows {
        return Err(Error::config("fit inputs have inconsistent lengths"));
    }
    // ln c_j = ½ ln Σ_i ω_i φ_ij²
    let mut log_c = vec![f64::NEG_INFINITY; d];
    for (j, lc) in log_c.iter_mut().enumerate() {
        let terms: Vec<f64> = (0..rows)
            .filter(|&i| phi[(i, j)] != 0.0)
            .map(|i| log_weights[i] + 2.0 * phi[(i, j)].abs().ln())
            .collect();
        *lc = 0.5 * log_sum_exp(&terms);
        if !lc.is_finite() {
            return Err(Error::LeastSquaresDegenerate(format!(
                "feature column {j} has no weighted support"
            )));
        }
    }
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for i in 0..rows {
        for j in 0..d {
            let pj = phi[(i, j)];
            if pj == 0.0 {
                continue;
            }
            let scale_j = (log_weights[i] - log_c[j]).exp();
            rhs[j] += pj * q[i] * scale_j;
            for k in 0..d {
                let pk = phi[(i, k)];
                if pk != 0.0 {
                    gram[(j, k)] += pj * pk * (log_weights[i] - log_c[j] - log_c[k]).exp();
                }
            }
        }
    }
    let eig = gram.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 1e-12 * hi) {
        return Err(Error::LeastSquaresDegenerate(format!(
            "scaled weighted Gram matrix has eigenvalue ratio {:e}",
            lo / hi
        )));
    }
    let u = gram
        .cholesky()
        .ok_or_else(|| Error::LeastSquaresDegenerate("Cholesky factorization failed".into()))?
        .solve(&rhs);
    Ok(DVector::from_fn(d, |j, _| u[j] * (-log_c[j]).exp()))
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Log-probabilities of the softmax policy, exact even where the
/// probabilities themselves underflow.
fn softmax_log_probs(features: &FeatureMap, theta: &DVector<f64>, na: usize) -> Vec<f64> {
    let logits = features.matrix() * theta;
    let mut out = vec![0.0; logits.len()];
    for s in 0..logits.len() / na {
        let row = &logits.as_slice()[s * na..(s + 1) * na];
        let lse = log_sum_exp(row);
        for a in 0..na {
            out[s * na + a] = row[a] - lse;
        }
    }
    out
}

/// QNPG: `θ_{t+1} = θ_t + β w^{π_t}` with `w^{π_t}` the `ν × π`-weighted
/// least-squares fit of the exact `Q^{π_t}`.
pub fn run_qnpg(problem: &Problem, config: &ActorConfig, nu: NuChoice) -> Result<QnpgRun> {
    let (na, dim) = (problem.mdp.num_actions(), problem.features.dim());
    config.validate(na, dim)?;
    let beta = config.beta_for(na);
    let mut theta = config.initial_theta(dim);
    let mut out = QnpgRun {
        run: NacRun::with_capacity(config.num_outer),
        eps_bias: Vec::new(),
        lambda: Vec::new(),
        fit_error: Vec::new(),
    };
    for t in 0..=config.num_outer {
        let policy = problem.policy(&theta)?;
        let nu_s = match nu {
            NuChoice::DiscountedVisitation => discounted_visitation(&problem.mdp, &policy, &problem.start)?,
            NuChoice::Stationary => problem.stationary.mu_b.clone(),
        };
        if nu_s.iter().any(|p| *p <= 0.0) {
            return Err(Error::LeastSquaresDegenerate(format!(
                "state weighting is not positive at iterate {t}"
            )));
        }
        let log_pi = softmax_log_probs(&problem.features, &theta, na);
        let log_w: Vec<f64> = (0..log_pi.len()).map(|i| nu_s[i / na].ln() + log_pi[i]).collect();
        let q = exact_q(&problem.mdp, &policy)?;
        let w = weighted_q_fit(&problem.features, &q, &log_w)?;
        let resid = &q - problem.features.matrix() * &w;
        out.eps_bias
            .push(resid.iter().zip(&log_w).map(|(r, lw)| lw.exp() * r * r).sum());
        out.lambda.push(log_w.iter().cloned().fold(f64::INFINITY, f64::min).exp());
        out.fit_error.push(resid.amax());

        let (gap, _) = problem.gap(&policy)?;
        let run = &mut out.run;
        run.thetas.push(theta.iter().copied().collect());
        run.gaps.push(gap);
        run.xi_trace.push(resid.amax());
        run.w_pi_norms.push(w.norm());
        if t == config.num_outer {
            break;
        }
        run.critic_errors.push(0.0);
        run.critic_outputs.push(w.iter().copied().collect());
        theta = natural_update(&theta, &w, beta)?;
    }
    Ok(out)
}

/// `log|A|/((1−γ)β(T+1)) + 1/((1−γ)²(T+1))`, the exact-NPG gap bound after
/// `T` iterations from `θ₀ = 0` when every visited Q-function is linear in
/// the features.
pub fn exact_npg_gap_bound(gamma: f64, beta: f64, num_actions: usize, t: usize) -> f64 {
    let t1 = (t + 1) as f64;
    (num_actions as f64).ln() / ((1.0 - gamma) * beta * t1) + 1.0 / ((1.0 - gamma).powi(2) * t1)
}

/// Inputs to the sampled actor-critic gap bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NacBoundInputs {
    pub num_outer: usize,
    pub num_iters: usize,
    pub alpha: f64,
    pub n: usize,
    pub lambda_min: f64,
    pub gamma: f64,
    pub gamma_c: f64,
    pub zeta_max: f64,
    pub t_alpha: usize,
    pub kappa_min: f64,
    /// Approximation-error proxy; a visited maximum.
    pub xi: f64,
    /// Largest visited `‖w_π‖₂`, if known.
    pub max_visited_w_pi: Option<f64>,
}

/// The four terms of the sampled actor-critic gap bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    /// Actor convergence bias `2/((1−γ)²T)`.
    pub a1: f64,
    /// Approximation bias `4ξ/(1−γ)²`.
    pub a2: f64,
    /// Critic convergence bias.
    pub a3: f64,
    /// Critic variance.
    pub a4: f64,
    /// `1 + 2/((1−γ_c)^{1/2}(1−γ)√λ_min)`, used in the terms.
    pub c3: f64,
    /// `1 + max visited ‖w_π‖₂`, reported only.
    pub c3_visited: Option<f64>,
    pub xi_label: String,
    pub inputs: NacBoundInputs,
}

impl BoundReport {
    pub fn total(&self) -> f64 {
        self.a1 + self.a2 + self.a3 + self.a4
    }
}

pub const XI_LABEL: &str = "proxy (lower bounds the supremum over all policies)";

pub fn nac_gap_bound(inputs: NacBoundInputs) -> Result<BoundReport> {
    let i = inputs;
    if i.num_outer == 0 {
        return Err(Error::inapplicable("T must be at least 1"));
    }
    if !(i.alpha > 0.0 && i.lambda_min > 0.0) {
        return Err(Error::inapplicable("stepsize and lambda_min must be positive"));
    }
    let n_min = min_horizon(i.gamma, i.gamma_c, i.kappa_min)?;
    if i.n < n_min {
        return Err(Error::inapplicable(format!("horizon n = {} is below the minimum {n_min}", i.n)));
    }
    let tau = i.t_alpha + i.n + 1;
    if i.num_iters < tau {
        return Err(Error::inapplicable(format!(
            "K = {} is below t_alpha+n+1 = {tau}",
            i.num_iters
        )));
    }
    let f = f_factor(i.gamma * i.zeta_max, i.n);
    let gate = (1.0 - i.gamma_c) / (CONSTANT_STEP_GATE * f * f);
    if i.alpha * tau as f64 > gate {
        return Err(Error::inapplicable(format!(
            "stepsize condition alpha*(t_alpha+n+1) = {:e} exceeds {gate:e}",
            i.alpha * tau as f64
        )));
    }
    let h = (1.0 - i.gamma).powi(2);
    let c3 = 1.0 + fixed_point_norm_bound(i.gamma, i.gamma_c, i.lambda_min);
    let rate = 1.0 - (1.0 - i.gamma_c) * i.lambda_min * i.alpha;
    Ok(BoundReport {
        a1: 2.0 / (h * i.num_outer as f64),
        a2: 4.0 * i.xi / h,
        a3: 4.0 / h * c3 * rate.powf((i.num_iters - tau) as f64 / 2.0),
        a4: 44.0 * c3 * f * (i.alpha * tau as f64).sqrt()
            / (h * (1.0 - i.gamma_c).sqrt() * i.lambda_min.sqrt()),
        c3,
        c3_visited: i.max_visited_w_pi.map(|m| 1.0 + m),
        xi_label: XI_LABEL.to_string(),
        inputs,
    })
}

/// Bound inputs for a configured actor run on `problem`.
pub fn nac_bound_inputs(problem: &Problem, config: &ActorConfig, run: Option<&NacRun>) -> Result<NacBoundInputs> {
    let alpha = match config.critic.schedule {
        crate::critic::StepSchedule::Constant { alpha } => alpha,
        _ => return Err(Error::inapplicable("the actor bound needs a constant critic stepsize")),
    };
    let t_alpha = mixing_time(&problem.mdp, &problem.behavior, &problem.stationary.mu_b, alpha.min(0.999))?;
    let gram = problem.features.matrix().transpose() * &problem.stationary.weight_matrix * problem.features.matrix();
    let (xi, max_w) = match run {
        Some(r) => (xi_proxy(r)?, Some(r.w_pi_norms.iter().cloned().fold(0.0, f64::max))),
        None => (0.0, None),
    };
    Ok(NacBoundInputs {
        num_outer: config.num_outer,
        num_iters: config.critic.num_iters,
        alpha,
        n: config.critic.n,
        lambda_min: gram.symmetric_eigen().eigenvalues.min(),
        gamma: problem.mdp.gamma(),
        gamma_c: config.critic.gamma_c,
        zeta_max: problem.behavior.zeta_max(),
        t_alpha,
        kappa_min: problem.stationary.kappa_min,
        xi,
        max_visited_w_pi: max_w,
    })
}

/// Largest entrywise deviation of any row sum from one.
pub fn normalization_error(policy: &PolicyTable) -> f64 {
    let t = policy.table();
    (0..t.nrows())
        .map(|s| (t.row(s).sum() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[doc(hidden)]
pub fn softmax_table(logits: &DVector<f64>, num_actions: usize) -> DMatrix<f64> {
    softmax_rows(logits, num_actions)
}
