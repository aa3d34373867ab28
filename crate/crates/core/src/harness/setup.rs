//! A critic problem prepared for repeated seeded runs.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::critic::{
    fixed_point_from_model, min_horizon, ConstantStepBound, ConstantStepInputs, CriticConfig, CriticRun,
    DiminishingStepBound, DiminishingStepInputs, NStepModel, ProjectedFixedPoint, StepSchedule, TdEngine,
};
use crate::error::{Error, Result};
use crate::mdp::{max_ratio, stationary_info, BehaviorPolicy, FeatureMap, Mdp, MismatchQuery, PolicyTable, StationaryInfo};
use crate::sampler::{generate, MixingProfile, DEFAULT_MIXING_CAP};

use super::gallery::CanonicalInstance;

/// Everything that stays fixed across the seeds of a critic experiment.
#[derive(Debug, Clone)]
pub struct CriticSetup {
    pub mdp: Mdp,
    pub features: FeatureMap,
    pub behavior: BehaviorPolicy,
    pub target: PolicyTable,
    pub n: usize,
    pub gamma_c: f64,
    pub stationary: StationaryInfo,
    pub fixed: ProjectedFixedPoint,
    pub w_pi: DVector<f64>,
    /// `ζ_π = max ρ`.
    pub zeta: f64,
    pub n_min: usize,
    /// Step cap for mixing-time searches.
    pub mixing_cap: usize,
    engine: TdEngine,
}

impl CriticSetup {
    pub fn new(
        mdp: &Mdp,
        features: &FeatureMap,
        behavior: &BehaviorPolicy,
        target: &PolicyTable,
        n: usize,
        gamma_c: f64,
    ) -> Result<Self> {
        let stationary = stationary_info(mdp, behavior)?;
        let model = NStepModel::new(mdp, features, target, &stationary, n)?;
        let fixed = fixed_point_from_model(&model, mdp.gamma(), gamma_c)?;
        let n_min = min_horizon(mdp.gamma(), gamma_c, stationary.kappa_min)?;
        Ok(CriticSetup {
            mdp: mdp.clone(),
            features: features.clone(),
            behavior: behavior.clone(),
            target: target.clone(),
            n,
            gamma_c,
            w_pi: fixed.w(),
            fixed,
            zeta: max_ratio(MismatchQuery::Target(target), behavior),
            n_min,
            mixing_cap: DEFAULT_MIXING_CAP,
            engine: TdEngine::new(mdp, features, target, behavior, n)?,
            stationary,
        })
    }

    pub fn from_instance(inst: &CanonicalInstance, n: usize) -> Result<Self> {
        Self::new(&inst.mdp, &inst.features, &inst.behavior, &inst.target, n, inst.gamma_c)
    }

    pub fn lambda_min(&self) -> f64 {
        self.fixed.lambda_min
    }

    /// `t_α`; zero for `α ≥ 1` since every distance is at most one.
    pub fn t_alpha(&self, alpha: f64) -> Result<usize> {
        if alpha >= 1.0 {
            return Ok(0);
        }
        MixingProfile::compute(&self.mdp, &self.behavior, &self.stationary.mu_b, alpha, self.mixing_cap)?
            .t_alpha(alpha)
    }

    /// The constant-stepsize bound for `config`, or why it does not apply.
    pub fn constant_bound(&self, config: &CriticConfig) -> Result<ConstantStepBound> {
        let StepSchedule::Constant { alpha } = config.schedule else {
            return Err(Error::inapplicable("schedule is not constant"));
        };
        self.check_config(config)?;
        let w0 = DVector::from_vec(config.initial(self.features.dim()));
        ConstantStepBound::new(ConstantStepInputs {
            gamma: self.mdp.gamma(),
            gamma_c: self.gamma_c,
            n: self.n,
            kappa_min: self.stationary.kappa_min,
            alpha,
            t_alpha: self.t_alpha(alpha)?,
            zeta: self.zeta,
            lambda_min: self.lambda_min(),
            w0_norm: w0.norm(),
            w0_gap: (&w0 - &self.w_pi).norm(),
            w_pi_norm: self.w_pi.norm(),
        })
    }

    /// The diminishing-stepsize bound for `config`, validated on `[k̂, k_max]`.
    pub fn diminishing_bound(&self, config: &CriticConfig, k_max: usize) -> Result<DiminishingStepBound> {
        let StepSchedule::Diminishing { alpha, eta, h } = config.schedule else {
            return Err(Error::inapplicable("schedule is not diminishing"));
        };
        self.check_config(config)?;
        let floor = config.schedule.alpha_at(k_max).min(0.5);
        let profile = MixingProfile::compute(&self.mdp, &self.behavior, &self.stationary.mu_b, floor, self.mixing_cap)?;
        let env = profile.fit(self.stationary.slem);
        let w0 = DVector::from_vec(config.initial(self.features.dim()));
        DiminishingStepBound::new(
            DiminishingStepInputs {
                gamma: self.mdp.gamma(),
                gamma_c: self.gamma_c,
                n: self.n,
                kappa_min: self.stationary.kappa_min,
                alpha,
                eta,
                h,
                zeta: self.zeta,
                lambda_min: self.lambda_min(),
                w0_norm: w0.norm(),
                w0_gap: (&w0 - &self.w_pi).norm(),
                w_pi_norm: self.w_pi.norm(),
                geo_c: env.geo_c,
                geo_sigma: env.geo_sigma,
            },
            |a| profile.t_alpha(a),
            k_max,
        )
    }

    /// Largest constant stepsize meeting the bound's stepsize condition.
    pub fn compliant_alpha(&self) -> Result<f64> {
        let f = crate::critic::f_factor(self.mdp.gamma() * self.zeta, self.n);
        crate::critic::largest_compliant_step(self.gamma_c, f, self.n, |a| self.t_alpha(a))
    }

    fn check_config(&self, config: &CriticConfig) -> Result<()> {
        if config.n != self.n {
            return Err(Error::config(format!(
                "critic horizon {} differs from the prepared horizon {}",
                config.n, self.n
            )));
        }
        if (config.gamma_c - self.gamma_c).abs() > 0.0 {
            return Err(Error::config("critic gamma_c differs from the prepared gamma_c"));
        }
        Ok(())
    }

    /// One seeded run: a fresh behavior trajectory of `K+n+1` pairs from
    /// `start_state`, then `K` critic updates with errors against `w_π`.
    pub fn run_seed(&self, config: &CriticConfig, seed: u64, start_state: usize) -> Result<CriticRun> {
        self.check_config(config)?;
        if config.enforce_bound_conditions {
            match config.schedule {
                StepSchedule::Constant { .. } => {
                    self.constant_bound(config)?;
                }
                StepSchedule::Diminishing { .. } => {
                    self.diminishing_bound(config, config.num_iters)?;
                }
            }
        }
        let traj = generate(&self.mdp, &self.behavior, start_state, config.num_iters + self.n + 1, seed)?;
        self.engine.run(traj.pairs(), config, Some(&self.w_pi))
    }

    pub fn run_seeds(
        &self,
        config: &CriticConfig,
        seeds: &[u64],
        start_state: usize,
        workers: usize,
    ) -> Result<Vec<CriticRun>> {
        par_map(seeds, workers, |s| self.run_seed(config, s, start_state))
    }
}

/// Maps `f` over `items` on a pool of `workers` threads; results keep the
/// input order.
pub fn par_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Copy + Send + Sync,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    if workers <= 1 {
        return items.iter().map(|&x| f(x)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(|&x| f(x)).collect())
}

/// Default worker count: available parallelism.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
