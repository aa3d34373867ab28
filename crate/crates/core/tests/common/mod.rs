//! Random instances and independently coded oracles shared by the
//! integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use naclab::mdp::{BehaviorPolicy, FeatureMap, Mdp, PolicyTable};

pub struct RandomInstance {
    pub mdp: Mdp,
    pub features: FeatureMap,
    pub behavior: BehaviorPolicy,
    pub target: PolicyTable,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-stochastic matrix with entries bounded below by `floor` before
/// normalization.
pub fn stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize, floor: f64) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| floor + rng.random::<f64>());
    for i in 0..rows {
        let z: f64 = m.row(i).sum();
        for j in 0..cols {
            m[(i, j)] /= z;
        }
    }
    m
}

pub fn random_mdp(rng: &mut ChaCha8Rng, ns: usize, na: usize, gamma: f64) -> Mdp {
    let transitions = (0..na).map(|_| stochastic(rng, ns, ns, 0.0)).collect();
    let rewards = DMatrix::from_fn(ns, na, |_, _| rng.random::<f64>());
    Mdp::new(transitions, rewards, gamma).unwrap()
}

/// Nonnegative features with unit L1 rows; redrawn until full column rank.
pub fn random_features(rng: &mut ChaCha8Rng, pairs: usize, d: usize) -> FeatureMap {
    loop {
        let m = stochastic(rng, pairs, d, 0.0);
        if let Ok(f) = FeatureMap::new(m) {
            return f;
        }
    }
}

pub fn random_instance(seed: u64, max_states: usize, max_actions: usize, max_dim: usize, gamma: f64) -> RandomInstance {
    let mut r = rng(seed);
    let ns = r.random_range(2..=max_states);
    let na = r.random_range(2..=max_actions);
    let d = r.random_range(1..=max_dim.min(ns * na));
    let mdp = random_mdp(&mut r, ns, na, gamma);
    let features = random_features(&mut r, ns * na, d);
    let behavior = BehaviorPolicy::new(stochastic(&mut r, ns, na, 0.2)).unwrap();
    let target = PolicyTable::new(stochastic(&mut r, ns, na, 0.0)).unwrap();
    RandomInstance {
        mdp,
        features,
        behavior,
        target,
    }
}

/// State-action transition matrix `P[(s,a),(s',a')] = P_a(s,s') π(a'|s')`.
pub fn pair_transition(mdp: &Mdp, pi: &DMatrix<f64>) -> DMatrix<f64> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut p = DMatrix::zeros(ns * na, ns * na);
    for s in 0..ns {
        for a in 0..na {
            for t in 0..ns {
                for b in 0..na {
                    p[(s * na + a, t * na + b)] = mdp.transition(a)[(s, t)] * pi[(t, b)];
                }
            }
        }
    }
    p
}

/// Stationary state-action distribution of the behavior chain by power
/// iteration on the pair chain.
pub fn kappa_by_power_iteration(mdp: &Mdp, behavior: &BehaviorPolicy) -> DVector<f64> {
    let p = pair_transition(mdp, behavior.policy().table());
    let pairs = p.nrows();
    let pt = p.transpose();
    let mut x = DVector::from_element(pairs, 1.0 / pairs as f64);
    for _ in 0..100_000 {
        let next = &pt * &x;
        let diff = (&next - &x).amax();
        x = next;
        if diff < 1e-17 {
            break;
        }
    }
    let total = x.sum();
    x / total
}

/// `T^n(q)` by applying the one-step Bellman operator of `pi` `n` times.
pub fn bellman_power(mdp: &Mdp, pi: &DMatrix<f64>, q: &DVector<f64>, n: usize) -> DVector<f64> {
    let p = pair_transition(mdp, pi);
    let r = mdp.reward_vector();
    let mut x = q.clone();
    for _ in 0..n {
        x = &r + (&p * &x) * mdp.gamma();
    }
    x
}

/// `Q^π` by fixed-point iteration to round-off.
pub fn q_by_iteration(mdp: &Mdp, pi: &DMatrix<f64>) -> DVector<f64> {
    let p = pair_transition(mdp, pi);
    let r = mdp.reward_vector();
    let mut q = DVector::zeros(r.len());
    loop {
        let next = &r + (&p * &q) * mdp.gamma();
        let diff = (&next - &q).amax();
        q = next;
        if diff < 1e-14 {
            return q;
        }
    }
}

/// `max_π V^π` per state by value iteration.
pub fn optimal_state_values(mdp: &Mdp) -> DVector<f64> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut v = DVector::zeros(ns);
    loop {
        let next = DVector::from_fn(ns, |s, _| {
            (0..na)
                .map(|a| mdp.reward(s, a) + mdp.gamma() * (0..ns).map(|t| mdp.transition(a)[(s, t)] * v[t]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let diff = (&next - &v).amax();
        v = next;
        if diff < 1e-15 {
            return v;
        }
    }
}

pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    (mean, (var / m).sqrt())
}
