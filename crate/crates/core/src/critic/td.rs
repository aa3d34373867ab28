//! The sampled n-step TD recursion.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::CriticConfig;
use crate::error::{Error, Result};
use crate::mdp::{BehaviorPolicy, FeatureMap, Mdp, PolicyTable};
use crate::sampler::PairSlice;

/// Precomputed per-pair data for fast TD updates: rewards, importance ratios
/// and sparse feature rows, all indexed by `s * |A| + a`.
#[derive(Debug, Clone)]
pub struct TdEngine {
    num_actions: usize,
    dim: usize,
    gamma: f64,
    n: usize,
    rewards: Vec<f64>,
    ratios: Vec<f64>,
    // sparse rows: (column, value) for nonzero entries, in column order
    rows: Vec<Vec<(usize, f64)>>,
}

impl TdEngine {
    pub fn new(
        mdp: &Mdp,
        features: &FeatureMap,
        target: &PolicyTable,
        behavior: &BehaviorPolicy,
        n: usize,
    ) -> Result<Self> {
        features.check_against(mdp)?;
        target.check_against(mdp)?;
        behavior.policy().check_against(mdp)?;
        if n == 0 {
            return Err(Error::config("horizon n must be at least 1"));
        }
        let na = mdp.num_actions();
        let pairs = mdp.num_pairs();
        let rewards = (0..pairs).map(|i| mdp.reward(i / na, i % na)).collect();
        let ratios = (0..pairs)
            .map(|i| target.prob(i / na, i % na) / behavior.prob(i / na, i % na))
            .collect();
        let rows = (0..pairs)
            .map(|i| {
                features
                    .row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, v)| (j, *v))
                    .collect()
            })
            .collect();
        Ok(TdEngine {
            num_actions: na,
            dim: features.dim(),
            gamma: mdp.gamma(),
            n,
            rewards,
            ratios,
            rows,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn dot(&self, pair: usize, w: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &(j, v) in &self.rows[pair] {
            acc += v * w[j];
        }
        acc
    }

    /// `Δ = Σ_{i=0}^{n−1} γ^i ρ_{1,i} δ_i` over one window, where `ρ_{1,i}` is the product of the ratios at window positions
    /// `1..=i` (one when empty) and
    /// `δ_i = R_i + γ ρ_{i+1} φ_{i+1}ᵀw − φ_iᵀw`.
    #[inline]
    fn delta(&self, w: &[f64], states: &[usize], actions: &[usize]) -> f64 {
        let na = self.num_actions;
        let gamma = self.gamma;
        let mut cur = states[0] * na + actions[0];
        let mut v_cur = self.dot(cur, w);
        let mut acc = 0.0;
        let mut disc = 1.0;
        let mut prod = 1.0;
        for i in 0..self.n {
            if i > 0 {
                prod *= self.ratios[cur];
                if prod == 0.0 {
                    // every later term carries this factor
                    break;
                }
            }
            let next = states[i + 1] * na + actions[i + 1];
            let v_next = self.dot(next, w);
            let delta = self.rewards[cur] + gamma * self.ratios[next] * v_next - v_cur;
            acc += disc * prod * delta;
            disc *= gamma;
            cur = next;
            v_cur = v_next;
        }
        acc
    }

    /// Update direction `F(w, X_k) = φ(S_k,A_k) Δ_{k,n}` for a window of at
    /// least `n+1` pairs.
    pub fn direction(&self, w: &[f64], window: PairSlice<'_>) -> Result<DVector<f64>> {
        if window.len() < self.n + 1 {
            return Err(Error::Input(format!(
                "window has {} pairs, horizon {} needs {}",
                window.len(),
                self.n,
                self.n + 1
            )));
        }
        if w.len() != self.dim {
            return Err(Error::config("iterate has the wrong dimension"));
        }
        let delta = self.delta(w, window.states, window.actions);
        let first = window.states[0] * self.num_actions + window.actions[0];
        let mut out = DVector::zeros(self.dim);
        for &(j, v) in &self.rows[first] {
            out[j] = v * delta;
        }
        Ok(out)
    }

    /// Runs `K` updates `w_{k+1} = w_k + α_k F(w_k, X_k)` over `segment`.
    ///
    /// With `target` set, `‖w_k − target‖₂` is recorded at every checkpoint.
    pub fn run(
        &self,
        segment: PairSlice<'_>,
        config: &CriticConfig,
        target: Option<&DVector<f64>>,
    ) -> Result<CriticRun> {
        config.validate(self.dim)?;
        if config.n != self.n {
            return Err(Error::config("config horizon differs from the engine horizon"));
        }
        let k_total = config.num_iters;
        if k_total > 0 && segment.len() < k_total + self.n {
            return Err(Error::Input(format!(
                "segment has {} pairs, {} updates with horizon {} need {}",
                segment.len(),
                k_total,
                self.n,
                k_total + self.n
            )));
        }
        if let Some(t) = target {
            if t.len() != self.dim {
                return Err(Error::config("reference vector has the wrong dimension"));
            }
        }
        let mut w = config.initial(self.dim);
        let thin = config.thin_every();
        let mut extra: Vec<usize> = config.checkpoints.iter().copied().filter(|&k| k <= k_total).collect();
        extra.sort_unstable();
        extra.dedup();
        let mut next_extra = 0;

        let mut run = CriticRun {
            iterates: Vec::new(),
            final_w: DVector::zeros(0),
            diagnostics: Vec::new(),
            divergence: None,
        };
        let record = |k: usize, w: &[f64], run: &mut CriticRun| {
            run.iterates.push((k, w.to_vec()));
            if let Some(t) = target {
                let err = w.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                run.diagnostics.push(ErrorCheckpoint { k, error: err });
            }
        };

        let threshold = config.divergence_threshold;
        let na = self.num_actions;
        for k in 0..=k_total {
            let mut keep = k % thin == 0 || k == k_total;
            while next_extra < extra.len() && extra[next_extra] <= k {
                keep |= extra[next_extra] == k;
                next_extra += 1;
            }
            if keep {
                record(k, &w, &mut run);
            }
            if k == k_total {
                break;
            }
            let alpha = config.schedule.alpha_at(k);
            let states = &segment.states[k..k + self.n + 1];
            let actions = &segment.actions[k..k + self.n + 1];
            let delta = self.delta(&w, states, actions);
            let first = states[0] * na + actions[0];
            let mut blown = None;
            for &(j, v) in &self.rows[first] {
                w[j] += alpha * (v * delta);
                if !(w[j].abs() <= threshold) {
                    blown = Some(w[j].abs());
                }
            }
            if let Some(norm) = blown {
                let step = k + 1;
                record(step, &w, &mut run);
                run.divergence = Some(Divergence { step, norm });
                break;
            }
        }
        run.final_w = DVector::from_column_slice(&run.iterates.last().expect("at least w0 is recorded").1);
        Ok(run)
    }
}

/// Update direction for a single window; builds a throwaway engine.
pub fn td_step(
    w: &DVector<f64>,
    window: PairSlice<'_>,
    mdp: &Mdp,
    features: &FeatureMap,
    target: &PolicyTable,
    behavior: &BehaviorPolicy,
    n: usize,
) -> Result<DVector<f64>> {
    TdEngine::new(mdp, features, target, behavior, n)?.direction(w.as_slice(), window)
}

/// Runs the critic over `segment`; see [`TdEngine::run`].
pub fn run_critic(
    segment: PairSlice<'_>,
    config: &CriticConfig,
    mdp: &Mdp,
    features: &FeatureMap,
    target: &PolicyTable,
    behavior: &BehaviorPolicy,
    reference: Option<&DVector<f64>>,
) -> Result<CriticRun> {
    TdEngine::new(mdp, features, target, behavior, config.n)?.run(segment, config, reference)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorCheckpoint {
    pub k: usize,
    /// `‖w_k − w_π‖₂`.
    pub error: f64,
}

/// The iterate left the divergence threshold (or became non-finite) right
/// after update `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub struct CriticRun {
    /// `(k, w_k)` at thinned and requested checkpoints; the last entry is the
    /// final iterate.
    pub iterates: Vec<(usize, Vec<f64>)>,
    pub final_w: DVector<f64>,
    pub diagnostics: Vec<ErrorCheckpoint>,
    pub divergence: Option<Divergence>,
}

impl CriticRun {
    /// Error at checkpoint `k`, if recorded.
    pub fn error_at(&self, k: usize) -> Option<f64> {
        self.diagnostics.iter().find(|c| c.k == k).map(|c| c.error)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::{f_factor, StepSchedule};
    use crate::sampler::{generate, Trajectory};
    use nalgebra::dmatrix;

    fn two_by_two() -> (Mdp, BehaviorPolicy, PolicyTable) {
        let p0 = dmatrix![0.3, 0.7; 0.6, 0.4];
        let p1 = dmatrix![0.9, 0.1; 0.2, 0.8];
        let mdp = Mdp::new(vec![p0, p1], dmatrix![1.0, -0.5; 0.25, 0.0], 0.8).unwrap();
        let b = BehaviorPolicy::new(dmatrix![0.4, 0.6; 0.7, 0.3]).unwrap();
        let t = PolicyTable::new(dmatrix![0.9, 0.1; 0.2, 0.8]).unwrap();
        (mdp, b, t)
    }

    fn slice(t: &Trajectory) -> PairSlice<'_> {
        t.pairs()
    }

    #[test]
    fn one_step_tabular_form() {
        let (mdp, b, t) = two_by_two();
        let f = FeatureMap::tabular(2, 2);
        let w = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
        let traj = Trajectory { states: vec![0, 1], actions: vec![1, 0], seed: 0, start_state: 0 };
        let dir = td_step(&w, slice(&traj), &mdp, &f, &t, &b, 1).unwrap();
        let rho = t.prob(1, 0) / b.prob(1, 0);
        let expected = mdp.reward(0, 1) + 0.8 * rho * w[2] - w[1];
        let mut want = DVector::zeros(4);
        want[1] = expected;
        assert!((dir - want).amax() < 1e-15);
    }

    #[test]
    fn zero_direction_at_single_state_fixed_point() {
        let mdp = Mdp::new(vec![dmatrix![1.0]], dmatrix![0.5], 0.75).unwrap();
        let b = BehaviorPolicy::uniform(1, 1);
        let f = FeatureMap::new(dmatrix![1.0]).unwrap();
        let w = DVector::from_vec(vec![2.0]);
        let traj = Trajectory { states: vec![0; 5], actions: vec![0; 5], seed: 0, start_state: 0 };
        let dir = td_step(&w, slice(&traj), &mdp, &f, b.policy(), &b, 4).unwrap();
        assert_eq!(dir[0], 0.0);
    }

    #[test]
    fn short_window_rejected() {
        let (mdp, b, t) = two_by_two();
        let f = FeatureMap::tabular(2, 2);
        let traj = Trajectory { states: vec![0, 1], actions: vec![1, 0], seed: 0, start_state: 0 };
        let err = td_step(&DVector::zeros(4), slice(&traj), &mdp, &f, &t, &b, 2).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    // Literal expansion of Σ_i γ^i (Π_{j=1}^{i} ρ_j)(R_i + γρ_{i+1}φ_{i+1}ᵀw − φ_iᵀw).
    fn literal_delta(mdp: &Mdp, f: &FeatureMap, t: &PolicyTable, b: &BehaviorPolicy, w: &DVector<f64>, s: &[usize], a: &[usize], n: usize) -> f64 {
        let phi = |i: usize| f.matrix().row(s[i] * mdp.num_actions() + a[i]).transpose();
        let rho = |i: usize| t.prob(s[i], a[i]) / b.prob(s[i], a[i]);
        let mut total = 0.0;
        for i in 0..n {
            let mut prod = 1.0;
            for j in 1..=i {
                prod *= rho(j);
            }
            let td = mdp.reward(s[i], a[i]) + mdp.gamma() * rho(i + 1) * phi(i + 1).dot(w) - phi(i).dot(w);
            total += mdp.gamma().powi(i as i32) * prod * td;
        }
        total
    }

    #[test]
    fn matches_literal_summation() {
        let (mdp, b, t) = two_by_two();
        let f = FeatureMap::new(dmatrix![0.5, 0.2; 0.0, 1.0; 0.3, -0.3; 1.0, 0.0]).unwrap();
        let traj = generate(&mdp, &b, 0, 200, 9).unwrap();
        let w = DVector::from_vec(vec![0.7, -1.3]);
        for k in 0..150 {
            for n in [1, 3, 7] {
                let win = traj.pairs().range(k, k + n + 1);
                let dir = td_step(&w, win, &mdp, &f, &t, &b, n).unwrap();
                let d = literal_delta(&mdp, &f, &t, &b, &w, win.states, win.actions, n);
                let phi0 = f.matrix().row(win.states[0] * 2 + win.actions[0]).transpose();
                assert!((dir - phi0 * d).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn lipschitz_and_growth() {
        let (mdp, b, t) = two_by_two();
        let f = FeatureMap::new(dmatrix![0.5, 0.2; 0.0, 1.0; 0.3, -0.3; 1.0, 0.0]).unwrap();
        let zeta = crate::mdp::max_ratio(crate::mdp::MismatchQuery::Target(&t), &b);
        let traj = generate(&mdp, &b, 1, 300, 4).unwrap();
        let n = 4;
        let lf = f_factor(mdp.gamma() * zeta, n);
        let engine = TdEngine::new(&mdp, &f, &t, &b, n).unwrap();
        for k in 0..290 {
            let win = traj.pairs().range(k, k + n + 1);
            let w1 = [k as f64 * 0.01 - 1.0, 2.0];
            let w2 = [0.3, -0.1 * k as f64];
            let d = engine.direction(&w1, win).unwrap() - engine.direction(&w2, win).unwrap();
            let dw = ((w1[0] - w2[0]).powi(2) + (w1[1] - w2[1]).powi(2)).sqrt();
            assert!(d.norm() <= 2.0 * lf * dw + 1e-12);
            assert!(engine.direction(&[0.0, 0.0], win).unwrap().norm() <= lf + 1e-12);
        }
    }

    #[test]
    fn zero_iterations_return_w0() {
        let (mdp, b, t) = two_by_two();
        let f = FeatureMap::tabular(2, 2);
        let traj = generate(&mdp, &b, 0, 3, 1).unwrap();
        let mut cfg = CriticConfig::new(2, StepSchedule::Constant { alpha: 0.1 }, 0, 0.5);
        cfg.w0 = Some(vec![1.0, 2.0, 3.0, 4.0]);
        let run = run_critic(traj.pairs(), &cfg, &mdp, &f, &t, &b, None).unwrap();
        assert_eq!(run.final_w.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(run.iterates.len(), 1);
    }

    #[test]
    fn on_policy_scalar_recursion() {
        // one state, one action: every window is identical, so the iterate
        // follows w ← w + α(Σ_{i<n} γ^i R + γ^n w − w) exactly
        let mdp = Mdp::new(vec![dmatrix![1.0]], dmatrix![0.6], 0.9).unwrap();
        let b = BehaviorPolicy::uniform(1, 1);
        let f = FeatureMap::new(dmatrix![1.0]).unwrap();
        let n = 3;
        let k = 400;
        let traj = generate(&mdp, &b, 0, k + n, 0).unwrap();
        let alpha = 0.05;
        let cfg = CriticConfig::new(n, StepSchedule::Constant { alpha }, k, 0.5);
        let run = run_critic(traj.pairs(), &cfg, &mdp, &f, b.policy(), &b, None).unwrap();
        let ret: f64 = (0..n).map(|i| 0.9f64.powi(i as i32) * 0.6).sum();
        let mut w: f64 = 0.0;
        for _ in 0..k {
            w += alpha * (ret + 0.9f64.powi(n as i32) * w - w);
        }
        assert!((run.final_w[0] - w).abs() < 1e-12);
        let q = 0.6 / 0.1;
        let rate: f64 = 1.0 - alpha * (1.0 - 0.9f64.powi(n as i32));
        assert!(((run.final_w[0] - q) / (0.0 - q) - rate.powi(k as i32)).abs() < 1e-9);
    }

    #[test]
    fn checkpoints_and_thinning() {
        let (mdp, b, t) = two_by_two();
        let f = FeatureMap::tabular(2, 2);
        let traj = generate(&mdp, &b, 0, 2000 + 2, 3).unwrap();
        let mut cfg = CriticConfig::new(2, StepSchedule::Constant { alpha: 0.01 }, 2000, 0.5);
        cfg.checkpoints = vec![7, 1999];
        let wpi = DVector::zeros(4);
        let run = run_critic(traj.pairs(), &cfg, &mdp, &f, &t, &b, Some(&wpi)).unwrap();
        let ks: Vec<usize> = run.iterates.iter().map(|(k, _)| *k).collect();
        assert_eq!(ks.len(), 1001 + 2);
        assert!(ks.contains(&7) && ks.contains(&1999) && ks.contains(&2000));
        assert_eq!(run.diagnostics.len(), ks.len());
        assert_eq!(run.final_w.as_slice(), run.iterates.last().unwrap().1.as_slice());
    }

    #[test]
    fn divergence_is_reported() {
        let (mdp, b, t) = two_by_two();
        let f = FeatureMap::tabular(2, 2);
        let traj = generate(&mdp, &b, 0, 1000 + 1, 3).unwrap();
        let mut cfg = CriticConfig::new(1, StepSchedule::Constant { alpha: 50.0 }, 1000, 0.5);
        cfg.divergence_threshold = 1e3;
        let run = run_critic(traj.pairs(), &cfg, &mdp, &f, &t, &b, None).unwrap();
        let div = run.divergence.expect("huge steps blow up");
        assert!(div.norm > 1e3 && div.step <= 1000);
        assert_eq!(run.iterates.last().unwrap().0, div.step);
    }
}
