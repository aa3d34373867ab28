//! Seeded trajectory generation under the behavior policy, n-step windows and
//! exact mixing-time computation.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)`. Every step of
//! a trajectory draws the next state (except at the first pair) and then the
//! action, each from one uniform `f64` inverted against a cumulative table.
//! Consecutive segments produced by [`SegmentStream`] are therefore identical
//! to slices of one long [`generate`] call with the same seed.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{state_transition_matrix, BehaviorPolicy, Mdp};

/// Cap on `k` for [`mixing_time`].
pub const DEFAULT_MIXING_CAP: usize = 1_000_000;

/// SplitMix64 finalizer, used to decorrelate derived seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th stream derived from `base`: `base ^ splitmix64(index)`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    base ^ splitmix64(index)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub seed: u64,
    pub start_state: usize,
}

/// Borrowed run of consecutive state-action pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSlice<'a> {
    pub states: &'a [usize],
    pub actions: &'a [usize],
}

impl<'a> PairSlice<'a> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Sub-slice of pairs `start..end`.
    pub fn range(&self, start: usize, end: usize) -> PairSlice<'a> {
        PairSlice {
            states: &self.states[start..end],
            actions: &self.actions[start..end],
        }
    }
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn pairs(&self) -> PairSlice<'_> {
        PairSlice {
            states: &self.states,
            actions: &self.actions,
        }
    }

    /// Pairs with indices in the closed range `[start, end]`.
    pub fn segment(&self, start: usize, end: usize) -> Result<PairSlice<'_>> {
        if start > end || end >= self.len() {
            return Err(Error::Index {
                index: end,
                len: self.len(),
            });
        }
        Ok(self.pairs().range(start, end + 1))
    }

    /// Checks that every recorded step has positive probability.
    pub fn validate(&self, mdp: &Mdp, behavior: &BehaviorPolicy) -> Result<()> {
        if self.states.len() != self.actions.len() {
            return Err(Error::Input("states and actions differ in length".into()));
        }
        for k in 0..self.len() {
            let (s, a) = (self.states[k], self.actions[k]);
            if s >= mdp.num_states() || a >= mdp.num_actions() {
                return Err(Error::Input(format!("step {k}: pair ({s}, {a}) out of range")));
            }
            if behavior.prob(s, a) <= 0.0 {
                return Err(Error::Input(format!("step {k}: action {a} impossible in state {s}")));
            }
            if k + 1 < self.len() && mdp.transition(a)[(s, self.states[k + 1])] <= 0.0 {
                return Err(Error::Input(format!(
                    "step {k}: transition {s} -> {} impossible under action {a}",
                    self.states[k + 1]
                )));
            }
        }
        Ok(())
    }

    /// Text dump: a `# seed <seed> start <state>` header followed by one
    /// `state action` line per pair.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = String::with_capacity(16 * self.len() + 64);
        writeln!(buf, "# seed {} start {}", self.seed, self.start_state).unwrap();
        for (s, a) in self.states.iter().zip(&self.actions) {
            writeln!(buf, "{s} {a}").unwrap();
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut header = None;
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: lineno, message };
            if let Some(rest) = trimmed.strip_prefix('#') {
                if header.is_some() || !states.is_empty() {
                    return Err(parse_err("header must be the first line".into()));
                }
                let fields: Vec<&str> = rest.split_whitespace().collect();
                match fields.as_slice() {
                    ["seed", seed, "start", start] => {
                        let seed = seed.parse::<u64>().map_err(|e| parse_err(format!("bad seed: {e}")))?;
                        let start = start
                            .parse::<usize>()
                            .map_err(|e| parse_err(format!("bad start state: {e}")))?;
                        header = Some((seed, start));
                    }
                    _ => return Err(parse_err("expected `# seed <u64> start <state>`".into())),
                }
                continue;
            }
            if header.is_none() {
                return Err(parse_err("missing `# seed ... start ...` header".into()));
            }
            let mut fields = trimmed.split_whitespace();
            let (Some(s), Some(a), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(parse_err("expected `state action`".into()));
            };
            states.push(s.parse().map_err(|e| parse_err(format!("bad state: {e}")))?);
            actions.push(a.parse().map_err(|e| parse_err(format!("bad action: {e}")))?);
        }
        let (seed, start_state) = header.ok_or_else(|| Error::Parse {
            line: 1,
            message: "empty trajectory file".into(),
        })?;
        if states.first().is_some_and(|&s| s != start_state) {
            return Err(Error::Parse {
                line: 2,
                message: format!("first state {} differs from header start {start_state}", states[0]),
            });
        }
        Ok(Trajectory {
            states,
            actions,
            seed,
            start_state,
        })
    }
}

/// The window `X_k = (S_k, A_k, …, S_{k+n}, A_{k+n})` as a view of `n+1` pairs.
pub fn window(traj: &Trajectory, k: usize, n: usize) -> Result<PairSlice<'_>> {
    let end = k.checked_add(n).ok_or(Error::Index {
        index: usize::MAX,
        len: traj.len(),
    })?;
    if end >= traj.len() {
        return Err(Error::Index {
            index: end,
            len: traj.len(),
        });
    }
    Ok(traj.pairs().range(k, end + 1))
}

// Cumulative distribution tables for inverse-CDF sampling.
#[derive(Debug, Clone)]
struct CdfTables {
    num_states: usize,
    num_actions: usize,
    // [s * A + a]
    behavior: Vec<f64>,
    // [(a * S + s) * S + s']
    transitions: Vec<f64>,
}

impl CdfTables {
    fn new(mdp: &Mdp, behavior: &BehaviorPolicy) -> Self {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let mut b = Vec::with_capacity(ns * na);
        for s in 0..ns {
            let mut acc = 0.0;
            for a in 0..na {
                acc += behavior.prob(s, a);
                b.push(acc);
            }
        }
        let mut t = Vec::with_capacity(na * ns * ns);
        for a in 0..na {
            let p = mdp.transition(a);
            for s in 0..ns {
                let mut acc = 0.0;
                for s2 in 0..ns {
                    acc += p[(s, s2)];
                    t.push(acc);
                }
            }
        }
        CdfTables {
            num_states: ns,
            num_actions: na,
            behavior: b,
            transitions: t,
        }
    }

    // Smallest index whose cumulative mass exceeds u, skipping zero-mass
    // entries so that round-off never selects an impossible outcome.
    #[inline]
    fn invert(cdf: &[f64], u: f64) -> usize {
        let mut prev = 0.0;
        let mut last_positive = 0;
        for (i, &c) in cdf.iter().enumerate() {
            if c > prev {
                if u < c {
                    return i;
                }
                last_positive = i;
            }
            prev = c;
        }
        last_positive
    }

    #[inline]
    fn action(&self, s: usize, u: f64) -> usize {
        let na = self.num_actions;
        Self::invert(&self.behavior[s * na..(s + 1) * na], u)
    }

    #[inline]
    fn next_state(&self, s: usize, a: usize, u: f64) -> usize {
        let ns = self.num_states;
        let base = (a * ns + s) * ns;
        Self::invert(&self.transitions[base..base + ns], u)
    }
}

/// Incremental generator of one trajectory, emitted in consecutive segments.
#[derive(Debug, Clone)]
pub struct SegmentStream {
    tables: CdfTables,
    rng: ChaCha8Rng,
    seed: u64,
    start_state: usize,
    last: Option<(usize, usize)>,
    produced: usize,
}

impl SegmentStream {
    pub fn new(mdp: &Mdp, behavior: &BehaviorPolicy, start: usize, seed: u64) -> Result<Self> {
        behavior.policy().check_against(mdp)?;
        if start >= mdp.num_states() {
            return Err(Error::Index {
                index: start,
                len: mdp.num_states(),
            });
        }
        Ok(SegmentStream {
            tables: CdfTables::new(mdp, behavior),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            start_state: start,
            last: None,
            produced: 0,
        })
    }

    /// Number of pairs generated so far.
    pub fn produced(&self) -> usize {
        self.produced
    }

    fn next_pair(&mut self) -> (usize, usize) {
        let s = match self.last {
            None => self.start_state,
            Some((s, a)) => {
                let u: f64 = self.rng.random();
                self.tables.next_state(s, a, u)
            }
        };
        let u: f64 = self.rng.random();
        let a = self.tables.action(s, u);
        self.last = Some((s, a));
        self.produced += 1;
        (s, a)
    }

    /// Appends `count` freshly generated pairs.
    pub fn extend(&mut self, states: &mut Vec<usize>, actions: &mut Vec<usize>, count: usize) {
        states.reserve(count);
        actions.reserve(count);
        for _ in 0..count {
            let (s, a) = self.next_pair();
            states.push(s);
            actions.push(a);
        }
    }

    /// Next segment of `len` pairs that starts with the last pair of the
    /// previous segment (for the first call, with the start state). Segment
    /// `t` of length `m + 1` therefore covers indices `[t·m, (t+1)·m]`.
    pub fn next_segment(&mut self, len: usize) -> Trajectory {
        let mut states = Vec::with_capacity(len);
        let mut actions = Vec::with_capacity(len);
        let fresh = match self.last {
            Some((s, a)) if len > 0 => {
                states.push(s);
                actions.push(a);
                len - 1
            }
            _ => len,
        };
        self.extend(&mut states, &mut actions, fresh);
        let start_state = states.first().copied().unwrap_or(self.start_state);
        Trajectory {
            states,
            actions,
            seed: self.seed,
            start_state,
        }
    }
}

/// Samples `A_k ~ π_b(·|S_k)`, `S_{k+1} ~ P_{A_k}(S_k, ·)` for `length` pairs.
pub fn generate(
    mdp: &Mdp,
    behavior: &BehaviorPolicy,
    start: usize,
    length: usize,
    seed: u64,
) -> Result<Trajectory> {
    if length == 0 {
        return Err(Error::config("trajectory length must be at least 1"));
    }
    let mut stream = SegmentStream::new(mdp, behavior, start, seed)?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    stream.extend(&mut states, &mut actions, length);
    Ok(Trajectory {
        states,
        actions,
        seed,
        start_state: start,
    })
}

fn max_tv(dist: &DMatrix<f64>, mu: &DVector<f64>) -> f64 {
    (0..dist.nrows())
        .map(|s| 0.5 * (0..dist.ncols()).map(|j| (dist[(s, j)] - mu[j]).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Worst-case distance to stationarity `d_k = max_s TV(P_b^k(s,·), μ_b)` for
/// `k = 0, 1, …`, computed by exact matrix powering.
#[derive(Debug, Clone)]
pub struct MixingProfile {
    pub distances: Vec<f64>,
}

impl MixingProfile {
    /// Extends the profile until `d_k ≤ alpha_floor`, or fails after `cap` steps.
    pub fn compute(
        mdp: &Mdp,
        behavior: &BehaviorPolicy,
        mu_b: &DVector<f64>,
        alpha_floor: f64,
        cap: usize,
    ) -> Result<Self> {
        let p = state_transition_matrix(mdp, behavior.policy())?;
        let ns = p.nrows();
        let mut power = DMatrix::identity(ns, ns);
        let mut distances = vec![max_tv(&power, mu_b)];
        while *distances.last().unwrap() > alpha_floor {
            if distances.len() > cap {
                return Err(Error::NonMixing {
                    alpha: alpha_floor,
                    cap,
                });
            }
            power = &power * &p;
            distances.push(max_tv(&power, mu_b));
        }
        Ok(MixingProfile { distances })
    }

    /// `t_α`, provided `alpha` is not below the floor the profile was built for.
    pub fn t_alpha(&self, alpha: f64) -> Result<usize> {
        self.distances
            .iter()
            .position(|&d| d <= alpha)
            .ok_or(Error::NonMixing {
                alpha,
                cap: self.distances.len() - 1,
            })
    }

    /// Geometric envelope `d_k ≤ C σ^k` over the profile horizon, with σ the
    /// second eigenvalue modulus of the chain (floored at 0.01).
    pub fn fit(&self, slem: f64) -> MixingInfo {
        let sigma = slem.clamp(0.01, 1.0 - 1e-12);
        let geo_c = self
            .distances
            .iter()
            .enumerate()
            .map(|(k, d)| d / sigma.powi(k as i32))
            .fold(1e-300, f64::max);
        MixingInfo {
            t_alpha: Vec::new(),
            geo_c,
            geo_sigma: sigma,
        }
    }
}

/// Mixing summary: `t_α` at requested levels and a geometric envelope `(C, σ)`.
#[derive(Debug, Clone)]
pub struct MixingInfo {
    /// `(α, t_α)` pairs in the order requested.
    pub t_alpha: Vec<(f64, usize)>,
    pub geo_c: f64,
    pub geo_sigma: f64,
}

/// Mixing summary for the behavior chain at the given levels.
pub fn mixing_info(
    mdp: &Mdp,
    behavior: &BehaviorPolicy,
    mu_b: &DVector<f64>,
    slem: f64,
    alphas: &[f64],
) -> Result<MixingInfo> {
    let floor = alphas.iter().cloned().fold(0.01, f64::min);
    let profile = MixingProfile::compute(mdp, behavior, mu_b, floor, DEFAULT_MIXING_CAP)?;
    let mut info = profile.fit(slem);
    for &a in alphas {
        info.t_alpha.push((a, profile.t_alpha(a)?));
    }
    Ok(info)
}

/// `t_α = min{k ≥ 0 : max_s TV(P_b^k(s,·), μ_b) ≤ α}` with the default cap.
pub fn mixing_time(mdp: &Mdp, behavior: &BehaviorPolicy, mu_b: &DVector<f64>, alpha: f64) -> Result<usize> {
    mixing_time_capped(mdp, behavior, mu_b, alpha, DEFAULT_MIXING_CAP)
}

pub fn mixing_time_capped(
    mdp: &Mdp,
    behavior: &BehaviorPolicy,
    mu_b: &DVector<f64>,
    alpha: f64,
    cap: usize,
) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("mixing level {alpha} must lie in (0, 1)")));
    }
    MixingProfile::compute(mdp, behavior, mu_b, alpha, cap)?.t_alpha(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::stationary_info;
    use nalgebra::dmatrix;

    fn chain(p: DMatrix<f64>) -> (Mdp, BehaviorPolicy) {
        let ns = p.nrows();
        (
            Mdp::new(vec![p], DMatrix::zeros(ns, 1), 0.9).unwrap(),
            BehaviorPolicy::uniform(ns, 1),
        )
    }

    #[test]
    fn deterministic_chain_ignores_seed() {
        let (mdp, b) = chain(dmatrix![0.0, 1.0, 0.0; 0.0, 0.0, 1.0; 1.0, 0.0, 0.0]);
        let t1 = generate(&mdp, &b, 0, 7, 1).unwrap();
        let t2 = generate(&mdp, &b, 0, 7, 99).unwrap();
        assert_eq!(t1.states, vec![0, 1, 2, 0, 1, 2, 0]);
        assert_eq!(t1.states, t2.states);
    }

    #[test]
    fn single_pair() {
        let (mdp, b) = chain(dmatrix![0.5, 0.5; 0.5, 0.5]);
        let t = generate(&mdp, &b, 1, 1, 3).unwrap();
        assert_eq!(t.states, vec![1]);
        assert_eq!(t.actions, vec![0]);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let p = dmatrix![0.3, 0.7; 0.6, 0.4];
        let mdp = Mdp::new(vec![p.clone(), p], DMatrix::zeros(2, 2), 0.9).unwrap();
        let b = BehaviorPolicy::uniform(2, 2);
        assert_eq!(generate(&mdp, &b, 0, 500, 5).unwrap(), generate(&mdp, &b, 0, 500, 5).unwrap());
        assert_ne!(generate(&mdp, &b, 0, 500, 5).unwrap().states, generate(&mdp, &b, 0, 500, 6).unwrap().states);
    }

    #[test]
    fn segments_match_slices() {
        let p = dmatrix![0.3, 0.7; 0.6, 0.4];
        let mdp = Mdp::new(vec![p.clone(), p], DMatrix::zeros(2, 2), 0.9).unwrap();
        let b = BehaviorPolicy::new(dmatrix![0.2, 0.8; 0.5, 0.5]).unwrap();
        let m = 13;
        let full = generate(&mdp, &b, 1, 4 * m + 1, 42).unwrap();
        let mut stream = SegmentStream::new(&mdp, &b, 1, 42).unwrap();
        for t in 0..4 {
            let seg = stream.next_segment(m + 1);
            let slice = full.segment(t * m, (t + 1) * m).unwrap();
            assert_eq!(seg.states, slice.states);
            assert_eq!(seg.actions, slice.actions);
        }
    }

    #[test]
    fn windows() {
        let t = Trajectory {
            states: vec![0, 1, 2, 3, 4, 5],
            actions: vec![5, 4, 3, 2, 1, 0],
            seed: 0,
            start_state: 0,
        };
        let w = window(&t, 3, 0).unwrap();
        assert_eq!((w.states, w.actions), (&[3][..], &[2][..]));
        let w = window(&t, 0, 2).unwrap();
        assert_eq!(w.states, &[0, 1, 2]);
        assert_eq!(w.actions, &[5, 4, 3]);
        assert!(window(&t, 4, 2).is_err());
        for k in 0..3 {
            let a = window(&t, k, 2).unwrap();
            let b = window(&t, k + 1, 2).unwrap();
            assert_eq!(a.states[1..], b.states[..2]);
            assert_eq!(a.actions[1..], b.actions[..2]);
        }
    }

    #[test]
    fn text_roundtrip() {
        let p = dmatrix![0.3, 0.7; 0.6, 0.4];
        let mdp = Mdp::new(vec![p.clone(), p], DMatrix::zeros(2, 2), 0.9).unwrap();
        let b = BehaviorPolicy::uniform(2, 2);
        let t = generate(&mdp, &b, 1, 50, 11).unwrap();
        let mut buf = Vec::new();
        t.write_text(&mut buf).unwrap();
        let back = Trajectory::read_text(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        back.validate(&mdp, &b).unwrap();
    }

    #[test]
    fn text_errors_carry_line() {
        let err = Trajectory::read_text("# seed 1 start 0\n0 1\n1 x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let err = Trajectory::read_text("0 1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn rank_one_chain_mixes_in_one_step() {
        let (mdp, b) = chain(dmatrix![0.2, 0.8; 0.2, 0.8]);
        let info = stationary_info(&mdp, &b).unwrap();
        assert_eq!(mixing_time(&mdp, &b, &info.mu_b, 0.1).unwrap(), 1);
    }

    #[test]
    fn already_mixed_at_zero() {
        let (mdp, b) = chain(dmatrix![0.5, 0.5; 0.5, 0.5]);
        let info = stationary_info(&mdp, &b).unwrap();
        assert_eq!(mixing_time(&mdp, &b, &info.mu_b, 0.6).unwrap(), 0);
    }

    #[test]
    fn slow_chain_hits_cap() {
        let (mdp, b) = chain(dmatrix![0.999, 0.001; 0.001, 0.999]);
        let info = stationary_info(&mdp, &b).unwrap();
        let err = mixing_time_capped(&mdp, &b, &info.mu_b, 1e-3, 100).unwrap_err();
        assert!(matches!(err, Error::NonMixing { cap: 100, .. }));
    }

    #[test]
    fn envelope_covers_profile() {
        let (mdp, b) = chain(dmatrix![0.1, 0.6, 0.3; 0.5, 0.2, 0.3; 0.3, 0.3, 0.4]);
        let info = stationary_info(&mdp, &b).unwrap();
        let profile = MixingProfile::compute(&mdp, &b, &info.mu_b, 1e-9, 1000).unwrap();
        let fit = profile.fit(info.slem);
        for (k, d) in profile.distances.iter().enumerate() {
            assert!(*d <= fit.geo_c * fit.geo_sigma.powi(k as i32) * (1.0 + 1e-12));
        }
    }
}
