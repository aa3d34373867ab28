//! Finite MDP model, policy representations and exact (sampling-free) solvers.
//!
//! State-action vectors and matrices use the row index `s * |A| + a`
//! throughout the crate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for row sums of stochastic matrices and policy tables.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Name used in errors raised when the behavior chain is not ergodic or the
/// behavior policy lacks full support.
pub const ASSUMPTION_EXPLORATION: &str =
    "exploration: behavior policy has full support and its state chain is irreducible and aperiodic";

fn check_stochastic_row(row: &[f64], what: &str) -> Result<()> {
    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::config(format!("{what}: entry {p} is negative or not finite")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::config(format!("{what}: row sums to {sum}, expected 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    num_states: usize,
    num_actions: usize,
    transitions: Vec<DMatrix<f64>>,
    rewards: DMatrix<f64>,
    gamma: f64,
}

impl Mdp {
    /// Builds an MDP from one `|S|×|S|` matrix per action, an `|S|×|A|`
    /// reward table and a discount in `(0, 1)`. Rewards must satisfy `|R| ≤ 1`.
    pub fn new(transitions: Vec<DMatrix<f64>>, rewards: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let num_actions = transitions.len();
        if num_actions == 0 {
            return Err(Error::config("at least one action is required"));
        }
        let num_states = transitions[0].nrows();
        if num_states == 0 {
            return Err(Error::config("at least one state is required"));
        }
        for (a, p) in transitions.iter().enumerate() {
            if p.nrows() != num_states || p.ncols() != num_states {
                return Err(Error::config(format!(
                    "transition matrix for action {a} is {}x{}, expected {num_states}x{num_states}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            for s in 0..num_states {
                let row: Vec<f64> = p.row(s).iter().copied().collect();
                check_stochastic_row(&row, &format!("transitions[{a}][{s}]"))?;
            }
        }
        if rewards.nrows() != num_states || rewards.ncols() != num_actions {
            return Err(Error::config(format!(
                "reward table is {}x{}, expected {num_states}x{num_actions}",
                rewards.nrows(),
                rewards.ncols()
            )));
        }
        if let Some(r) = rewards.iter().find(|r| !r.is_finite() || r.abs() > 1.0) {
            return Err(Error::config(format!("reward {r} violates |R(s,a)| <= 1")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::config(format!("discount {gamma} must lie in (0, 1)")));
        }
        Ok(Mdp {
            num_states,
            num_actions,
            transitions,
            rewards,
            gamma,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// `|S|·|A|`.
    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    #[inline]
    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, a: usize) -> &DMatrix<f64> {
        &self.transitions[a]
    }

    pub fn transitions(&self) -> &[DMatrix<f64>] {
        &self.transitions
    }

    pub fn rewards(&self) -> &DMatrix<f64> {
        &self.rewards
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[(s, a)]
    }

    /// Rewards flattened in state-action order.
    pub fn reward_vector(&self) -> DVector<f64> {
        DVector::from_fn(self.num_pairs(), |i, _| {
            self.rewards[(i / self.num_actions, i % self.num_actions)]
        })
    }

    /// Same model with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Mdp::new(self.transitions.clone(), self.rewards.clone(), gamma)
    }
}

/// Feature matrix Φ with one row per state-action pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    matrix: DMatrix<f64>,
    // Row-major copy for the TD inner loop.
    rows: Vec<f64>,
}

impl FeatureMap {
    /// Validates full column rank and `‖φ(s,a)‖₁ ≤ 1`.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (rows, dim) = matrix.shape();
        if dim == 0 || rows == 0 {
            return Err(Error::config("feature matrix must be non-empty"));
        }
        if dim > rows {
            return Err(Error::config(format!(
                "feature dimension {dim} exceeds the number of state-action pairs {rows}"
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("feature matrix has non-finite entries"));
        }
        for i in 0..rows {
            let l1: f64 = matrix.row(i).iter().map(|v| v.abs()).sum();
            if l1 > 1.0 + 1e-12 {
                return Err(Error::config(format!(
                    "feature row {i} has L1 norm {l1} > 1"
                )));
            }
        }
        let sv = matrix.clone().svd(false, false).singular_values;
        let max_sv = sv.iter().cloned().fold(0.0, f64::max);
        let rank = sv.iter().filter(|&&v| v > 1e-10 * max_sv.max(1e-300)).count();
        if rank < dim || max_sv == 0.0 {
            return Err(Error::config(format!(
                "feature columns are linearly dependent (numerical rank {rank} < {dim})"
            )));
        }
        let mut flat = Vec::with_capacity(rows * dim);
        for i in 0..rows {
            flat.extend(matrix.row(i).iter());
        }
        Ok(FeatureMap { matrix, rows: flat })
    }

    /// Φ = I over `|S|·|A|` pairs.
    pub fn tabular(num_states: usize, num_actions: usize) -> Self {
        let n = num_states * num_actions;
        FeatureMap::new(DMatrix::identity(n, n)).expect("identity features are valid")
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn num_pairs(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// φ(s,a) for flattened pair index `i`.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.rows[i * d..(i + 1) * d]
    }

    pub fn is_identity(&self) -> bool {
        self.matrix.is_square() && self.matrix == DMatrix::identity(self.dim(), self.dim())
    }

    pub(crate) fn check_against(&self, mdp: &Mdp) -> Result<()> {
        if self.num_pairs() != mdp.num_pairs() {
            return Err(Error::config(format!(
                "feature matrix has {} rows, MDP has {} state-action pairs",
                self.num_pairs(),
                mdp.num_pairs()
            )));
        }
        Ok(())
    }
}

/// Row-stochastic `|S|×|A|` table π(a|s).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    table: DMatrix<f64>,
}

impl PolicyTable {
    pub fn new(table: DMatrix<f64>) -> Result<Self> {
        if table.nrows() == 0 || table.ncols() == 0 {
            return Err(Error::config("policy table must be non-empty"));
        }
        for s in 0..table.nrows() {
            let row: Vec<f64> = table.row(s).iter().copied().collect();
            check_stochastic_row(&row, &format!("policy row {s}"))?;
        }
        Ok(PolicyTable { table })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        PolicyTable {
            table: DMatrix::from_element(num_states, num_actions, 1.0 / num_actions as f64),
        }
    }

    /// One action per state with probability one.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self> {
        let mut table = DMatrix::zeros(actions.len(), num_actions);
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::Index { index: a, len: num_actions });
            }
            table[(s, a)] = 1.0;
        }
        PolicyTable::new(table)
    }

    pub fn num_states(&self) -> usize {
        self.table.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.table.ncols()
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.table[(s, a)]
    }

    pub fn table(&self) -> &DMatrix<f64> {
        &self.table
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &PolicyTable) -> f64 {
        (&self.table - &other.table).abs().max()
    }

    pub(crate) fn check_against(&self, mdp: &Mdp) -> Result<()> {
        if self.num_states() != mdp.num_states() || self.num_actions() != mdp.num_actions() {
            return Err(Error::config(format!(
                "policy is {}x{}, MDP has {} states and {} actions",
                self.num_states(),
                self.num_actions(),
                mdp.num_states(),
                mdp.num_actions()
            )));
        }
        Ok(())
    }
}

/// The fixed exploratory policy π_b; every entry strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPolicy {
    policy: PolicyTable,
}

impl BehaviorPolicy {
    pub fn new(table: DMatrix<f64>) -> Result<Self> {
        let policy = PolicyTable::new(table)?;
        if let Some(p) = policy.table.iter().find(|p| **p <= 0.0) {
            return Err(Error::assumption(
                ASSUMPTION_EXPLORATION,
                format!("behavior policy has a non-positive entry {p}"),
            ));
        }
        Ok(BehaviorPolicy { policy })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        BehaviorPolicy {
            policy: PolicyTable::uniform(num_states, num_actions),
        }
    }

    pub fn policy(&self) -> &PolicyTable {
        &self.policy
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.policy.prob(s, a)
    }

    /// ζ_max = max over (s,a) of 1/π_b(a|s).
    pub fn zeta_max(&self) -> f64 {
        self.policy.table.iter().map(|p| 1.0 / p).fold(0.0, f64::max)
    }
}

/// Softmax-parametrized target policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub theta: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(theta: DVector<f64>) -> Self {
        SoftmaxPolicy {
            theta: theta.iter().copied().collect(),
        }
    }

    pub fn table(&self, features: &FeatureMap, num_actions: usize) -> Result<PolicyTable> {
        softmax_eval(features, &DVector::from_column_slice(&self.theta), num_actions)
    }
}

/// Stationary quantities of the behavior chain.
#[derive(Debug, Clone)]
pub struct StationaryInfo {
    pub mu_b: DVector<f64>,
    pub kappa_b: DVector<f64>,
    pub kappa_min: f64,
    pub weight_matrix: DMatrix<f64>,
    /// Second-largest eigenvalue modulus of the behavior state chain.
    pub slem: f64,
}

/// `|S|·|A|×|S|·|A|` transition matrix of the state-action chain under `policy`:
/// `P_π[(s,a),(s',a')] = P_a(s,s')·π(a'|s')`.
pub fn policy_transition_matrix(mdp: &Mdp, policy: &PolicyTable) -> Result<DMatrix<f64>> {
    policy.check_against(mdp)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut p = DMatrix::zeros(ns * na, ns * na);
    for s in 0..ns {
        for a in 0..na {
            let row = mdp.pair_index(s, a);
            let pa = mdp.transition(a);
            for s2 in 0..ns {
                let t = pa[(s, s2)];
                if t == 0.0 {
                    continue;
                }
                for a2 in 0..na {
                    p[(row, mdp.pair_index(s2, a2))] = t * policy.prob(s2, a2);
                }
            }
        }
    }
    Ok(p)
}

/// State chain `P_π(s,s') = Σ_a π(a|s) P_a(s,s')`.
pub fn state_transition_matrix(mdp: &Mdp, policy: &PolicyTable) -> Result<DMatrix<f64>> {
    policy.check_against(mdp)?;
    let ns = mdp.num_states();
    let mut p = DMatrix::zeros(ns, ns);
    for a in 0..mdp.num_actions() {
        let pa = mdp.transition(a);
        for s in 0..ns {
            let w = policy.prob(s, a);
            for s2 in 0..ns {
                p[(s, s2)] += w * pa[(s, s2)];
            }
        }
    }
    Ok(p)
}

/// Q^π as the solution of `(I − γP_π)Q = R`.
pub fn exact_q(mdp: &Mdp, policy: &PolicyTable) -> Result<DVector<f64>> {
    let p = policy_transition_matrix(mdp, policy)?;
    let n = p.nrows();
    let a = DMatrix::identity(n, n) - p * mdp.gamma();
    a.lu()
        .solve(&mdp.reward_vector())
        .ok_or_else(|| Error::config("I - gamma P_pi is singular"))
}

/// `V(s) = Σ_a π(a|s) Q(s,a)`.
pub fn state_values(q: &DVector<f64>, policy: &PolicyTable) -> DVector<f64> {
    let (ns, na) = (policy.num_states(), policy.num_actions());
    DVector::from_fn(ns, |s, _| (0..na).map(|a| policy.prob(s, a) * q[s * na + a]).sum())
}

/// `V^π(μ)`.
pub fn policy_value(mdp: &Mdp, policy: &PolicyTable, start: &DVector<f64>) -> Result<f64> {
    let q = exact_q(mdp, policy)?;
    Ok(state_values(&q, policy).dot(start))
}

#[derive(Debug, Clone)]
pub struct OptimalValues {
    pub values: DVector<f64>,
    pub greedy: Vec<usize>,
}

impl OptimalValues {
    pub fn value_at(&self, start: &DVector<f64>) -> f64 {
        self.values.dot(start)
    }
}

fn greedy_actions(mdp: &Mdp, v: &DVector<f64>) -> Vec<usize> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    (0..ns)
        .map(|s| {
            let qs: Vec<f64> = (0..na).map(|a| bellman_q(mdp, v, s, a)).collect();
            let best = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let tie = 1e-12 * (1.0 + best.abs());
            qs.iter().position(|&q| q >= best - tie).unwrap_or(0)
        })
        .collect()
}

#[inline]
fn bellman_q(mdp: &Mdp, v: &DVector<f64>, s: usize, a: usize) -> f64 {
    let pa = mdp.transition(a);
    let next: f64 = (0..mdp.num_states()).map(|s2| pa[(s, s2)] * v[s2]).sum();
    mdp.reward(s, a) + mdp.gamma() * next
}

/// Optimal state values and a deterministic greedy policy (lowest action
/// index among ties).
///
/// Value iteration runs until the Bellman residual is below `tol`; the
/// greedy policy is then polished by exact policy evaluation and
/// improvement, and the returned values are those of the final greedy
/// policy, so they are optimal up to linear-solve round-off.
pub fn optimal_values(mdp: &Mdp, tol: f64) -> Result<OptimalValues> {
    if !(tol > 0.0) {
        return Err(Error::config(format!("tolerance {tol} must be positive")));
    }
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut v = DVector::zeros(ns);
    loop {
        let next = DVector::from_fn(ns, |s, _| {
            (0..na)
                .map(|a| bellman_q(mdp, &v, s, a))
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let residual = (&next - &v).amax();
        v = next;
        if residual <= tol {
            break;
        }
    }
    let mut greedy = greedy_actions(mdp, &v);
    for _ in 0..1000 {
        let policy = PolicyTable::deterministic(&greedy, na)?;
        let q = exact_q(mdp, &policy)?;
        v = state_values(&q, &policy);
        let improved = greedy_actions(mdp, &v);
        // only switch when strictly better, so ties keep the lowest index
        let changed: Vec<usize> = (0..ns)
            .map(|s| {
                let cur = bellman_q(mdp, &v, s, greedy[s]);
                let cand = bellman_q(mdp, &v, s, improved[s]);
                if cand > cur + 1e-12 * (1.0 + cur.abs()) {
                    improved[s]
                } else {
                    greedy[s]
                }
            })
            .collect();
        if changed == greedy {
            break;
        }
        greedy = changed;
    }
    // prefer the lowest optimal action index
    greedy = greedy_actions(mdp, &v);
    Ok(OptimalValues { values: v, greedy })
}

fn second_eigen_modulus(p: &DMatrix<f64>) -> f64 {
    if p.nrows() < 2 {
        return 0.0;
    }
    let mut moduli: Vec<f64> = p
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .collect();
    moduli.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    moduli[1]
}

/// Stationary distribution μ_b of the behavior state chain, solved directly
/// from `(P_bᵀ − I)μ = 0` with a normalization row.
///
/// Fails with an assumption violation when the second-largest eigenvalue
/// modulus of `P_b` is at least `1 − 1e−10` (reducible or periodic chain).
pub fn stationary_info(mdp: &Mdp, behavior: &BehaviorPolicy) -> Result<StationaryInfo> {
    let pb = state_transition_matrix(mdp, behavior.policy())?;
    let ns = mdp.num_states();
    let slem = second_eigen_modulus(&pb);
    if slem >= 1.0 - 1e-10 {
        return Err(Error::assumption(
            ASSUMPTION_EXPLORATION,
            format!("behavior state chain has second eigenvalue modulus {slem}; it is reducible or periodic"),
        ));
    }
    let mut a = pb.transpose() - DMatrix::identity(ns, ns);
    for j in 0..ns {
        a[(ns - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(ns);
    rhs[ns - 1] = 1.0;
    let mut mu = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::assumption(ASSUMPTION_EXPLORATION, "stationary system is singular"))?;
    for v in mu.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-10 {
                return Err(Error::assumption(
                    ASSUMPTION_EXPLORATION,
                    format!("stationary solve produced negative mass {v}"),
                ));
            }
            *v = 0.0;
        }
    }
    let total = mu.sum();
    mu /= total;
    let na = mdp.num_actions();
    let kappa = DVector::from_fn(ns * na, |i, _| mu[i / na] * behavior.prob(i / na, i % na));
    let kappa_min = kappa.min();
    let weight_matrix = DMatrix::from_diagonal(&kappa);
    Ok(StationaryInfo {
        mu_b: mu,
        kappa_b: kappa,
        kappa_min,
        weight_matrix,
        slem,
    })
}

/// `d^π_μ = (1−γ) μᵀ (I − γP_π)⁻¹` over states.
pub fn discounted_visitation(
    mdp: &Mdp,
    policy: &PolicyTable,
    start: &DVector<f64>,
) -> Result<DVector<f64>> {
    if start.len() != mdp.num_states() {
        return Err(Error::config("start distribution has wrong length"));
    }
    if start.iter().any(|p| *p < 0.0) || (start.sum() - 1.0).abs() > 1e-10 {
        return Err(Error::config("start distribution is not a probability vector"));
    }
    let p = state_transition_matrix(mdp, policy)?;
    let ns = p.nrows();
    let a = (DMatrix::identity(ns, ns) - p * mdp.gamma()).transpose();
    a.lu()
        .solve(&(start * (1.0 - mdp.gamma())))
        .ok_or_else(|| Error::config("I - gamma P is singular"))
}

/// Softmax policy `π_θ(a|s) ∝ exp(φ(s,a)ᵀθ)`, evaluated with per-state max
/// subtraction.
pub fn softmax_eval(
    features: &FeatureMap,
    theta: &DVector<f64>,
    num_actions: usize,
) -> Result<PolicyTable> {
    if theta.len() != features.dim() {
        return Err(Error::config(format!(
            "theta has length {}, feature dimension is {}",
            theta.len(),
            features.dim()
        )));
    }
    if num_actions == 0 || !features.num_pairs().is_multiple_of(num_actions) {
        return Err(Error::config("feature rows are not a multiple of the action count"));
    }
    let logits = features.matrix() * theta;
    Ok(PolicyTable {
        table: softmax_rows(&logits, num_actions),
    })
}

/// Row-wise softmax of flattened state-action logits.
pub(crate) fn softmax_rows(logits: &DVector<f64>, num_actions: usize) -> DMatrix<f64> {
    let ns = logits.len() / num_actions;
    let mut table = DMatrix::zeros(ns, num_actions);
    for s in 0..ns {
        let row = &logits.as_slice()[s * num_actions..(s + 1) * num_actions];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (a, &l) in row.iter().enumerate() {
            let e = (l - max).exp();
            table[(s, a)] = e;
            z += e;
        }
        for a in 0..num_actions {
            table[(s, a)] /= z;
        }
    }
    table
}

/// What [`max_ratio`] measures.
#[derive(Debug, Clone, Copy)]
pub enum MismatchQuery<'a> {
    /// ζ_π for a given target policy.
    Target(&'a PolicyTable),
    /// ζ_max, the bound over every possible target policy.
    AllMass,
}

/// `max_{s,a} π(a|s)/π_b(a|s)`.
pub fn max_ratio(query: MismatchQuery<'_>, behavior: &BehaviorPolicy) -> f64 {
    match query {
        MismatchQuery::AllMass => behavior.zeta_max(),
        MismatchQuery::Target(target) => target
            .table()
            .iter()
            .zip(behavior.policy().table().iter())
            .map(|(p, b)| p / b)
            .fold(0.0, f64::max),
    }
}
