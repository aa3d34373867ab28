//! Exact expected update, projected-Bellman fixed point and contraction
//! certificate, all computed from the model by dense linear algebra.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    policy_transition_matrix, stationary_info, BehaviorPolicy, FeatureMap, Mdp, PolicyTable, StationaryInfo,
};

/// The n-step model of a target policy: `(γP_π)^n`, the truncated return
/// `Σ_{i<n}(γP_π)^i R`, features and the behavior weights `κ_b`.
#[derive(Debug, Clone)]
pub struct NStepModel {
    pub n: usize,
    pub power: DMatrix<f64>,
    pub returns: DVector<f64>,
    pub phi: DMatrix<f64>,
    pub kappa: DVector<f64>,
    // ΦᵀK
    phi_t_k: DMatrix<f64>,
}

impl NStepModel {
    pub fn new(
        mdp: &Mdp,
        features: &FeatureMap,
        target: &PolicyTable,
        stationary: &StationaryInfo,
        n: usize,
    ) -> Result<Self> {
        features.check_against(mdp)?;
        if n == 0 {
            return Err(Error::config("horizon n must be at least 1"));
        }
        if stationary.kappa_b.len() != mdp.num_pairs() {
            return Err(Error::config("stationary weights do not match the MDP"));
        }
        let gp = policy_transition_matrix(mdp, target)? * mdp.gamma();
        let mut returns = DVector::zeros(mdp.num_pairs());
        let mut term = mdp.reward_vector();
        for _ in 0..n {
            returns += &term;
            term = &gp * term;
        }
        let power = matrix_power(&gp, n);
        let phi = features.matrix().clone();
        let mut phi_t_k = phi.transpose();
        for (j, mut col) in phi_t_k.column_iter_mut().enumerate() {
            col *= stationary.kappa_b[j];
        }
        Ok(NStepModel {
            n,
            power,
            returns,
            phi,
            kappa: stationary.kappa_b.clone(),
            phi_t_k,
        })
    }

    /// `F̄(w) = ΦᵀK[Σ_{i<n}(γP_π)^i R + (γP_π)^n Φw − Φw]`.
    pub fn expected_update(&self, w: &DVector<f64>) -> DVector<f64> {
        let q = &self.phi * w;
        &self.phi_t_k * (&self.returns + &self.power * &q - q)
    }

    /// `ΦᵀKΦ`.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.phi_t_k * &self.phi
    }

    pub fn lambda_min(&self) -> f64 {
        self.gram().symmetric_eigen().eigenvalues.min()
    }

    /// κ_b-weighted operator norm of `Φ(ΦᵀKΦ)⁻¹ΦᵀK(γP_π)^n`, the linear part
    /// of the projected n-step Bellman operator.
    pub fn contraction(&self) -> Result<f64> {
        let gram_inv = self
            .gram()
            .try_inverse()
            .ok_or_else(|| Error::config("feature Gram matrix is singular"))?;
        let m = &self.phi * gram_inv * &self.phi_t_k * &self.power;
        let sqrt_k = self.kappa.map(f64::sqrt);
        // N = K^{1/2} M K^{-1/2}
        let nmat = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| sqrt_k[i] * m[(i, j)] / sqrt_k[j]);
        let gram_form = nmat.transpose() * &nmat;
        let top = gram_form.symmetric_eigen().eigenvalues.max();
        Ok(top.max(0.0).sqrt())
    }

    /// Solves `ΦᵀK(I − (γP_π)^n)Φ w = ΦᵀK Σ_{i<n}(γP_π)^i R`; returns the
    /// solution and its residual `‖F̄(w)‖_∞`.
    pub fn solve(&self) -> Result<(DVector<f64>, f64)> {
        let lhs = &self.phi_t_k * (&self.phi - &self.power * &self.phi);
        let rhs = &self.phi_t_k * &self.returns;
        let sv = lhs.clone().svd(false, false).singular_values;
        let (lo, hi) = (sv.min(), sv.max());
        if !(hi > 0.0) || lo <= 1e-13 * hi {
            return Err(Error::NoUniqueSolution(format!(
                "the d x d system has condition number {:e}; the projected n-step operator is not a contraction",
                if lo > 0.0 { hi / lo } else { f64::INFINITY }
            )));
        }
        let w = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NoUniqueSolution("LU factorization failed".into()))?;
        let residual = self.expected_update(&w).amax();
        Ok((w, residual))
    }
}

fn matrix_power(m: &DMatrix<f64>, mut e: usize) -> DMatrix<f64> {
    let mut result = DMatrix::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    result
}

/// `γ^n/√κ_min`, the upper bound on the certified norm from the chain
/// `‖Π‖_κ = 1`, `‖·‖_κ ≤ ‖·‖_∞ ≤ ‖·‖_κ/√κ_min`.
pub fn chain_bound(gamma: f64, n: usize, kappa_min: f64) -> f64 {
    gamma.powi(n as i32) / kappa_min.sqrt()
}

/// `2/((1−γ)√(1−γ_c)√λ_min)`, an upper bound on `‖w_π‖₂` that holds whenever
/// the projected operator contracts with factor `γ_c`.
pub fn fixed_point_norm_bound(gamma: f64, gamma_c: f64, lambda_min: f64) -> f64 {
    2.0 / ((1.0 - gamma) * (1.0 - gamma_c).sqrt() * lambda_min.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectedFixedPoint {
    pub w_pi: Vec<f64>,
    /// `‖ΦᵀK(T^n(Φw_π) − Φw_π)‖_∞`.
    pub residual: f64,
    /// Smallest eigenvalue of `ΦᵀKΦ`.
    pub lambda_min: f64,
    pub contraction_estimate: f64,
    /// The norm bound, present when `contraction_estimate ≤ γ_c`.
    pub norm_bound: Option<f64>,
}

impl ProjectedFixedPoint {
    pub fn w(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.w_pi)
    }

    pub fn w_norm(&self) -> f64 {
        self.w_pi.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Fixed point from an already built model.
pub fn fixed_point_from_model(model: &NStepModel, gamma: f64, gamma_c: f64) -> Result<ProjectedFixedPoint> {
    let (w, residual) = model.solve()?;
    let lambda_min = model.lambda_min();
    let contraction_estimate = model.contraction()?;
    let norm_bound = (contraction_estimate <= gamma_c).then(|| fixed_point_norm_bound(gamma, gamma_c, lambda_min));
    Ok(ProjectedFixedPoint {
        w_pi: w.iter().copied().collect(),
        residual,
        lambda_min,
        contraction_estimate,
        norm_bound,
    })
}

pub fn solve_projected_bellman(
    mdp: &Mdp,
    features: &FeatureMap,
    target: &PolicyTable,
    behavior: &BehaviorPolicy,
    n: usize,
    gamma_c: f64,
) -> Result<ProjectedFixedPoint> {
    let stationary = stationary_info(mdp, behavior)?;
    let model = NStepModel::new(mdp, features, target, &stationary, n)?;
    fixed_point_from_model(&model, mdp.gamma(), gamma_c)
}

pub fn expected_update(
    w: &DVector<f64>,
    mdp: &Mdp,
    features: &FeatureMap,
    target: &PolicyTable,
    behavior: &BehaviorPolicy,
    n: usize,
) -> Result<DVector<f64>> {
    if w.len() != features.dim() {
        return Err(Error::config("iterate has the wrong dimension"));
    }
    let stationary = stationary_info(mdp, behavior)?;
    Ok(NStepModel::new(mdp, features, target, &stationary, n)?.expected_update(w))
}

pub fn certify_contraction(
    mdp: &Mdp,
    features: &FeatureMap,
    target: &PolicyTable,
    behavior: &BehaviorPolicy,
    n: usize,
) -> Result<f64> {
    let stationary = stationary_info(mdp, behavior)?;
    NStepModel::new(mdp, features, target, &stationary, n)?.contraction()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::exact_q;
    use nalgebra::dmatrix;

    fn instance() -> (Mdp, BehaviorPolicy, PolicyTable) {
        let p0 = dmatrix![0.1, 0.6, 0.3; 0.5, 0.2, 0.3; 0.3, 0.3, 0.4];
        let p1 = dmatrix![0.8, 0.1, 0.1; 0.0, 0.5, 0.5; 0.6, 0.0, 0.4];
        let r = dmatrix![1.0, 0.0; -0.5, 0.3; 0.2, 0.9];
        let mdp = Mdp::new(vec![p0, p1], r, 0.9).unwrap();
        let b = BehaviorPolicy::new(dmatrix![0.5, 0.5; 0.3, 0.7; 0.6, 0.4]).unwrap();
        let t = PolicyTable::new(dmatrix![0.9, 0.1; 0.2, 0.8; 0.5, 0.5]).unwrap();
        (mdp, b, t)
    }

    #[test]
    fn tabular_fixed_point_is_q() {
        let (mdp, b, t) = instance();
        let f = FeatureMap::tabular(3, 2);
        let q = exact_q(&mdp, &t).unwrap();
        for n in [1, 2, 5, 40] {
            let fp = solve_projected_bellman(&mdp, &f, &t, &b, n, 0.5).unwrap();
            assert!((fp.w() - &q).amax() < 1e-9, "n = {n}");
            assert!(fp.residual < 1e-10);
        }
    }

    #[test]
    fn zero_reward_fixed_point_is_zero() {
        let (mdp, b, t) = instance();
        let mdp = Mdp::new(mdp.transitions().to_vec(), DMatrix::zeros(3, 2), 0.9).unwrap();
        let f = FeatureMap::new(dmatrix![0.5, 0.5; 1.0, 0.0; 0.0, 1.0; 0.3, 0.3; 0.2, 0.1; 0.9, 0.0]).unwrap();
        let fp = solve_projected_bellman(&mdp, &f, &t, &b, 30, 0.5).unwrap();
        assert!(fp.w_norm() < 1e-14);
    }

    #[test]
    fn expected_update_vanishes_at_fixed_point() {
        let (mdp, b, t) = instance();
        let f = FeatureMap::new(dmatrix![0.5, 0.5; 1.0, 0.0; 0.0, 1.0; 0.3, 0.3; 0.2, 0.1; 0.9, 0.0]).unwrap();
        let fp = solve_projected_bellman(&mdp, &f, &t, &b, 30, 0.5).unwrap();
        let g = expected_update(&fp.w(), &mdp, &f, &t, &b, 30).unwrap();
        assert!(g.amax() < 1e-10);
    }

    #[test]
    fn tabular_expected_update_is_weighted_residual() {
        let (mdp, b, t) = instance();
        let f = FeatureMap::tabular(3, 2);
        let info = stationary_info(&mdp, &b).unwrap();
        let w = DVector::from_vec(vec![0.3, -0.2, 1.0, 0.0, 0.5, 2.0]);
        let n = 3;
        let g = expected_update(&w, &mdp, &f, &t, &b, n).unwrap();
        // T^n applied by n successive one-step Bellman backups
        let p = policy_transition_matrix(&mdp, &t).unwrap();
        let mut q = w.clone();
        for _ in 0..n {
            q = mdp.reward_vector() + &p * q * mdp.gamma();
        }
        let want = (q - &w).component_mul(&info.kappa_b);
        assert!((g - want).amax() < 1e-12);
    }

    #[test]
    fn contraction_vanishes_for_long_horizon() {
        let (mdp, b, t) = instance();
        let f = FeatureMap::tabular(3, 2);
        assert!(certify_contraction(&mdp, &f, &t, &b, 300).unwrap() < 1e-10);
    }

    #[test]
    fn on_policy_one_step_contracts() {
        let (mdp, b, _) = instance();
        let f = FeatureMap::new(dmatrix![0.5, 0.5; 1.0, 0.0; 0.0, 1.0; 0.3, 0.3; 0.2, 0.1; 0.9, 0.0]).unwrap();
        let c = certify_contraction(&mdp, &f, b.policy(), &b, 1).unwrap();
        assert!(c <= mdp.gamma() + 1e-12, "{c}");
    }

    #[test]
    fn contraction_matches_power_iteration() {
        let (mdp, b, t) = instance();
        let f = FeatureMap::new(dmatrix![0.5, 0.5; 1.0, 0.0; 0.0, 1.0; 0.3, 0.3; 0.2, 0.1; 0.9, 0.0]).unwrap();
        let info = stationary_info(&mdp, &b).unwrap();
        let model = NStepModel::new(&mdp, &f, &t, &info, 2).unwrap();
        let c = model.contraction().unwrap();
        // power iteration on MᵀKM against K in the generalized sense
        let k = DMatrix::from_diagonal(&info.kappa_b);
        let gram_inv = model.gram().try_inverse().unwrap();
        let m = &model.phi * gram_inv * model.phi.transpose() * &k * &model.power;
        let kinv = DMatrix::from_diagonal(&info.kappa_b.map(|v| 1.0 / v));
        let op = &kinv * m.transpose() * &k * &m;
        let mut x = DVector::from_element(6, 1.0);
        let mut est = 0.0;
        for _ in 0..2000 {
            let y = &op * &x;
            est = (x.transpose() * &k * &y)[0] / (x.transpose() * &k * &x)[0];
            x = &y / y.norm();
        }
        assert!((est.sqrt() - c).abs() < 1e-8, "{} vs {c}", est.sqrt());
    }

    #[test]
    fn singular_system_reported() {
        // a feature orthogonal to the only reachable dynamics: T^n has a
        // fixed direction through (γP)^n Φ = Φ
        let mdp = Mdp::new(vec![dmatrix![1.0]], dmatrix![0.0], 0.5).unwrap();
        let b = BehaviorPolicy::uniform(1, 1);
        let f = FeatureMap::new(dmatrix![1.0]).unwrap();
        let info = stationary_info(&mdp, &b).unwrap();
        let mut model = NStepModel::new(&mdp, &f, b.policy(), &info, 1).unwrap();
        model.power = dmatrix![1.0];
        assert!(matches!(model.solve().unwrap_err(), Error::NoUniqueSolution(_)));
    }

    #[test]
    fn matrix_power_small() {
        let m = dmatrix![0.5, 0.5; 0.2, 0.8];
        let mut direct = DMatrix::identity(2, 2);
        for _ in 0..13 {
            direct = &direct * &m;
        }
        assert!((matrix_power(&m, 13) - direct).amax() < 1e-15);
    }
}
