//! Canonical instances with stored certification records.

use nalgebra::{dmatrix, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{min_horizon, NStepModel};
use crate::error::{Error, Result};
use crate::mdp::{stationary_info, BehaviorPolicy, FeatureMap, Mdp, PolicyTable};

/// A named instance: MDP, features, behavior policy, the policy the critic
/// evaluates by default and the contraction level the instance is certified at.
#[derive(Debug, Clone)]
pub struct CanonicalInstance {
    pub name: &'static str,
    pub mdp: Mdp,
    pub features: FeatureMap,
    pub behavior: BehaviorPolicy,
    pub target: PolicyTable,
    pub gamma_c: f64,
    pub notes: &'static str,
}

/// Horizon and contraction facts for an instance's default target policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificationRecord {
    pub gamma_c: f64,
    pub kappa_min: f64,
    pub lambda_min: f64,
    pub n_min: usize,
    pub contraction_n1: f64,
    pub contraction_nmin: f64,
}

impl CertificationRecord {
    /// Field-wise agreement to relative tolerance `tol`; `n_min` must match.
    pub fn matches(&self, other: &CertificationRecord, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300);
        self.n_min == other.n_min
            && close(self.gamma_c, other.gamma_c)
            && close(self.kappa_min, other.kappa_min)
            && close(self.lambda_min, other.lambda_min)
            && close(self.contraction_n1, other.contraction_n1)
            && close(self.contraction_nmin, other.contraction_nmin)
    }
}

impl CanonicalInstance {
    pub fn certify(&self) -> Result<CertificationRecord> {
        certify_policy(&self.mdp, &self.features, &self.target, &self.behavior, self.gamma_c)
    }
}

pub fn certify_policy(
    mdp: &Mdp,
    features: &FeatureMap,
    target: &PolicyTable,
    behavior: &BehaviorPolicy,
    gamma_c: f64,
) -> Result<CertificationRecord> {
    let st = stationary_info(mdp, behavior)?;
    let n_min = min_horizon(mdp.gamma(), gamma_c, st.kappa_min)?;
    let one = NStepModel::new(mdp, features, target, &st, 1)?;
    let contraction_nmin = NStepModel::new(mdp, features, target, &st, n_min)?.contraction()?;
    Ok(CertificationRecord {
        gamma_c,
        kappa_min: st.kappa_min,
        lambda_min: one.lambda_min(),
        n_min,
        contraction_n1: one.contraction()?,
        contraction_nmin,
    })
}

pub const GALLERY_NAMES: [&str; 4] = ["tabular-4x2", "linear-5x2", "averaging-2x2", "deadly-triad"];

pub fn gallery() -> Vec<CanonicalInstance> {
    GALLERY_NAMES.iter().map(|n| instance(n).expect("gallery names resolve")).collect()
}

pub fn instance(name: &str) -> Result<CanonicalInstance> {
    match name {
        "tabular-4x2" => Ok(tabular_4x2()),
        "linear-5x2" => Ok(linear_5x2()),
        "averaging-2x2" => Ok(averaging_2x2()),
        "deadly-triad" => Ok(deadly_triad()),
        _ => Err(Error::config(format!(
            "unknown gallery instance '{name}' (known: {})",
            GALLERY_NAMES.join(", ")
        ))),
    }
}

/// The stored record for a gallery instance.
pub fn stored_certification(name: &str) -> Result<CertificationRecord> {
    let r = |gamma_c, kappa_min, lambda_min, n_min, contraction_n1, contraction_nmin| CertificationRecord {
        gamma_c,
        kappa_min,
        lambda_min,
        n_min,
        contraction_n1,
        contraction_nmin,
    };
    match name {
        "tabular-4x2" => Ok(r(0.5, 0.08620689655172414, 0.08620689655172414, 4, 0.6814790316601034, 0.1492926784889427)),
        "linear-5x2" => Ok(r(0.7, 0.06898186559203508, 0.052623418391529966, 8, 0.9263774671301528, 0.19583035253522588)),
        "averaging-2x2" => Ok(r(0.02, 0.25, 1.0, 4, 0.31464265445104544, 0.008495351670178227)),
        "deadly-triad" => Ok(r(0.9, 0.035387149917627675, 0.09884678747940691, 8, 1.9441656800884535, 0.4359357203916004)),
        _ => Err(Error::config(format!("unknown gallery instance '{name}'"))),
    }
}

fn behavior(m: DMatrix<f64>) -> BehaviorPolicy {
    BehaviorPolicy::new(m).expect("literal behavior policy is valid")
}

fn policy(m: DMatrix<f64>) -> PolicyTable {
    PolicyTable::new(m).expect("literal policy is valid")
}

/// Four states, two actions, tabular features.
fn tabular_4x2() -> CanonicalInstance {
    let p0 = dmatrix![
        0.1, 0.6, 0.2, 0.1;
        0.3, 0.1, 0.5, 0.1;
        0.2, 0.2, 0.2, 0.4;
        0.5, 0.1, 0.1, 0.3
    ];
    let p1 = dmatrix![
        0.7, 0.1, 0.1, 0.1;
        0.1, 0.2, 0.1, 0.6;
        0.4, 0.4, 0.1, 0.1;
        0.1, 0.3, 0.5, 0.1
    ];
    let r = dmatrix![1.0, 0.0; 0.2, 0.8; 0.0, 0.5; 0.6, 0.3];
    CanonicalInstance {
        name: "tabular-4x2",
        mdp: Mdp::new(vec![p0, p1], r, 0.6).expect("literal MDP is valid"),
        features: FeatureMap::tabular(4, 2),
        behavior: behavior(dmatrix![0.5, 0.5; 0.4, 0.6; 0.6, 0.4; 0.5, 0.5]),
        target: policy(dmatrix![0.8, 0.2; 0.3, 0.7; 0.5, 0.5; 0.9, 0.1]),
        gamma_c: 0.5,
        notes: "tabular features, Q-functions exactly representable, off-policy target",
    }
}

/// Five states, two actions, three features; Q-functions are not representable.
fn linear_5x2() -> CanonicalInstance {
    let p0 = dmatrix![
        0.2, 0.5, 0.1, 0.1, 0.1;
        0.1, 0.2, 0.5, 0.1, 0.1;
        0.1, 0.1, 0.2, 0.5, 0.1;
        0.1, 0.1, 0.1, 0.2, 0.5;
        0.5, 0.1, 0.1, 0.1, 0.2
    ];
    let p1 = dmatrix![
        0.6, 0.1, 0.1, 0.1, 0.1;
        0.3, 0.3, 0.2, 0.1, 0.1;
        0.2, 0.2, 0.2, 0.2, 0.2;
        0.1, 0.1, 0.2, 0.3, 0.3;
        0.1, 0.1, 0.1, 0.1, 0.6
    ];
    let r = dmatrix![0.0, 0.3; 0.1, 0.0; 0.5, 0.2; 0.0, 0.9; 1.0, 0.4];
    let phi = dmatrix![
        0.6, 0.2, 0.0;
        0.0, 0.5, 0.5;
        0.5, 0.3, 0.1;
        0.1, 0.3, 0.6;
        0.4, 0.4, 0.2;
        0.2, 0.1, 0.7;
        0.3, 0.5, 0.0;
        0.0, 0.2, 0.8;
        0.2, 0.6, 0.2;
        0.7, 0.0, 0.3
    ];
    CanonicalInstance {
        name: "linear-5x2",
        mdp: Mdp::new(vec![p0, p1], r, 0.8).expect("literal MDP is valid"),
        features: FeatureMap::new(phi).expect("literal features are valid"),
        behavior: behavior(dmatrix![0.5, 0.5; 0.6, 0.4; 0.5, 0.5; 0.4, 0.6; 0.5, 0.5]),
        target: policy(dmatrix![0.7, 0.3; 0.2, 0.8; 0.5, 0.5; 0.9, 0.1; 0.4, 0.6]),
        gamma_c: 0.7,
        notes: "three nonnegative features with unit L1 rows, nonzero approximation error",
    }
}

/// One constant feature on a two-state chain. The projected operator is
/// exactly a `γ^n` contraction, so the drift rate used by the bounds is
/// nearly the true one.
fn averaging_2x2() -> CanonicalInstance {
    let half = dmatrix![0.5, 0.5; 0.5, 0.5];
    let r = dmatrix![0.0, 0.4; 0.2, 0.1];
    CanonicalInstance {
        name: "averaging-2x2",
        mdp: Mdp::new(vec![half.clone(), half], r, 0.3).expect("literal MDP is valid"),
        features: FeatureMap::new(DMatrix::from_element(4, 1, 1.0)).expect("constant feature is valid"),
        behavior: BehaviorPolicy::uniform(2, 2),
        target: policy(dmatrix![0.3, 0.7; 0.6, 0.4]),
        gamma_c: 0.02,
        notes: "constant feature, projected operator contracts by exactly gamma^n",
    }
}

/// Seed of the deadly-triad search.
pub const DEADLY_TRIAD_SEED: u64 = 0xdead_7a1d;
/// Candidates tried before the search gives up.
pub const DEADLY_TRIAD_BUDGET: usize = 10_000;
/// Certificate level the search must exceed at `n = 1`.
pub const DEADLY_TRIAD_THRESHOLD: f64 = 1.05;

const TRIAD_GAMMA: f64 = 0.8;
const TRIAD_GAMMA_C: f64 = 0.9;

/// One feature taking 0.5 on `(s0, a0)` and 1.0 on `(s1, a0)` (the 1 → 2
/// geometry scaled to unit L1 norm), zero on `a1`. Zero rewards, so `w_π = 0`.
pub fn triad_features() -> FeatureMap {
    FeatureMap::new(dmatrix![0.5; 0.0; 1.0; 0.0]).expect("literal features are valid")
}

/// Parameters of a triad candidate in percent:
/// `[P_a0(s0→s1), P_a0(s1→s1), P_a1(s0→s0), P_a1(s1→s0), π_b(a0|s0), π_b(a0|s1), π(a0|s0), π(a0|s1)]`.
pub type TriadParams = [u32; 8];

pub fn triad_from_params(p: &TriadParams, gamma: f64) -> Result<(Mdp, BehaviorPolicy, PolicyTable)> {
    let c = |v: u32| v as f64 / 100.0;
    let pr = |v: u32| (c(v), 1.0 - c(v));
    let (a, b) = pr(p[0]);
    let (cc, d) = pr(p[1]);
    let p0 = DMatrix::from_row_slice(2, 2, &[b, a, d, cc]);
    let (e, f) = pr(p[2]);
    let (g, h) = pr(p[3]);
    let p1 = DMatrix::from_row_slice(2, 2, &[e, f, g, h]);
    let mdp = Mdp::new(vec![p0, p1], DMatrix::zeros(2, 2), gamma)?;
    let two = |x: u32, y: u32| DMatrix::from_row_slice(2, 2, &[c(x), 1.0 - c(x), c(y), 1.0 - c(y)]);
    Ok((mdp, BehaviorPolicy::new(two(p[4], p[5]))?, PolicyTable::new(two(p[6], p[7]))?))
}

/// Mean drift of the one-dimensional critic at `w = 1`; positive means the
/// expected iteration grows.
pub fn scalar_drift(
    mdp: &Mdp,
    features: &FeatureMap,
    target: &PolicyTable,
    behavior: &BehaviorPolicy,
    n: usize,
) -> Result<f64> {
    let st = stationary_info(mdp, behavior)?;
    let model = NStepModel::new(mdp, features, target, &st, n)?;
    Ok(model.expected_update(&nalgebra::DVector::from_element(features.dim(), 1.0))[0])
}

/// Lower limit on the one-step log-growth rate `A²/(2M)` a candidate must
/// reach, so that sampled runs blow up within `10⁵` steps rather than
/// merely drifting.
pub const DEADLY_TRIAD_GROWTH: f64 = 5e-4;

/// `A²/(2M)` for the scalar one-step critic with zero rewards, where `A` is
/// the mean drift and `M` the stationary second moment of the update factor
/// `φ(x)(γρ(x')φ(x') − φ(x))`. It is the best log-growth rate per step of
/// `w ↦ w(1 + αa)` to second order in `α`; zero when the drift is not positive.
pub fn one_step_growth(
    mdp: &Mdp,
    features: &FeatureMap,
    target: &PolicyTable,
    behavior: &BehaviorPolicy,
) -> Result<f64> {
    let drift = scalar_drift(mdp, features, target, behavior, 1)?;
    if drift <= 0.0 {
        return Ok(0.0);
    }
    let st = stationary_info(mdp, behavior)?;
    let (ns, na, g) = (mdp.num_states(), mdp.num_actions(), mdp.gamma());
    let mut second = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let phi = features.row(s * na + a)[0];
            for s2 in 0..ns {
                for a2 in 0..na {
                    let p = mdp.transition(a)[(s, s2)] * behavior.prob(s2, a2);
                    let rho = target.prob(s2, a2) / behavior.prob(s2, a2);
                    let x = phi * (g * rho * features.row(s2 * na + a2)[0] - phi);
                    second += st.kappa_b[s * na + a] * p * x * x;
                }
            }
        }
    }
    Ok(drift * drift / (2.0 * second))
}

/// Seeded search for a two-state off-policy instance whose one-step projected
/// operator expands: sample candidates until the `n = 1` certificate exceeds
/// the threshold, the one-step growth rate clears its limit and the `n_min`
/// certificate is at most `γ_c`.
pub fn search_deadly_triad(seed: u64, budget: usize) -> Result<(TriadParams, usize)> {
    let features = triad_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..budget {
        let params: TriadParams = [
            rng.random_range(50..=99),
            rng.random_range(50..=99),
            rng.random_range(50..=99),
            rng.random_range(50..=99),
            rng.random_range(30..=95),
            rng.random_range(5..=50),
            rng.random_range(50..=99),
            rng.random_range(50..=99),
        ];
        let (mdp, b, pi) = triad_from_params(&params, TRIAD_GAMMA)?;
        let rec = certify_policy(&mdp, &features, &pi, &b, TRIAD_GAMMA_C)?;
        if rec.contraction_n1 > DEADLY_TRIAD_THRESHOLD
            && rec.contraction_nmin <= TRIAD_GAMMA_C
            && one_step_growth(&mdp, &features, &pi, &b)? > DEADLY_TRIAD_GROWTH
        {
            return Ok((params, attempt));
        }
    }
    Err(Error::Construction(format!(
        "no candidate with certificate above {DEADLY_TRIAD_THRESHOLD} in {budget} draws"
    )))
}

/// Frozen result of `search_deadly_triad(DEADLY_TRIAD_SEED, DEADLY_TRIAD_BUDGET)`.
const FROZEN_TRIAD: TriadParams = [87, 98, 93, 97, 36, 12, 72, 99];

/// Runs the search and returns the instance it finds.
pub fn build_deadly_triad_instance() -> Result<CanonicalInstance> {
    let (params, _) = search_deadly_triad(DEADLY_TRIAD_SEED, DEADLY_TRIAD_BUDGET)?;
    triad_instance(&params)
}

fn triad_instance(params: &TriadParams) -> Result<CanonicalInstance> {
    let (mdp, behavior, target) = triad_from_params(params, TRIAD_GAMMA)?;
    Ok(CanonicalInstance {
        name: "deadly-triad",
        mdp,
        features: triad_features(),
        behavior,
        target,
        gamma_c: TRIAD_GAMMA_C,
        notes: "off-policy one-step TD diverges; the n-step critic at the minimum horizon converges",
    })
}

fn deadly_triad() -> CanonicalInstance {
    triad_instance(&FROZEN_TRIAD).expect("frozen triad parameters are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::certify_contraction;

    #[test]
    fn stored_records_match_recomputation() {
        for inst in gallery() {
            let live = inst.certify().unwrap();
            let stored = stored_certification(inst.name).unwrap();
            assert!(live.matches(&stored, 1e-9), "{}: live {live:?} stored {stored:?}", inst.name);
            assert!(live.contraction_nmin <= inst.gamma_c + 1e-12, "{}", inst.name);
        }
    }

    #[test]
    fn search_reproduces_frozen_triad() {
        let (params, _) = search_deadly_triad(DEADLY_TRIAD_SEED, DEADLY_TRIAD_BUDGET).unwrap();
        assert_eq!(params, FROZEN_TRIAD);
    }

    #[test]
    fn triad_certificates() {
        let t = deadly_triad();
        let rec = t.certify().unwrap();
        assert!(rec.contraction_n1 > DEADLY_TRIAD_THRESHOLD);
        assert!(rec.contraction_nmin <= t.gamma_c);
        let on_policy = certify_contraction(&t.mdp, &t.features, t.behavior.policy(), &t.behavior, 1).unwrap();
        assert!(on_policy <= t.mdp.gamma() + 1e-12);
    }

    #[test]
    fn exhausted_budget_is_construction_error() {
        assert!(matches!(search_deadly_triad(1, 0), Err(Error::Construction(_))));
    }

    #[test]
    fn unknown_name() {
        assert!(instance("nope").is_err());
    }
}
