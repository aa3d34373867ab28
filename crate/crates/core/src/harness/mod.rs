//! Declarative experiments: a JSON spec names an instance, seeds and
//! sub-configs; a run writes per-seed CSVs, an aggregate CSV and a manifest
//! of derived constants under `$NACLAB_OUT/<output_dir>`.
//!
//! Bound columns appear only when the bound's hypotheses hold; otherwise the
//! column is left out and the manifest notes the reason. Rows before the
//! first iteration a bound covers leave its cells empty.

pub mod gallery;
pub mod output;
pub mod setup;
pub mod sweep;

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::actor::{
    exact_npg_gap_bound, nac_bound_inputs, nac_gap_bound, run_exact_npg, run_nac, run_qnpg, ActorConfig,
    NacRun, NuChoice, Problem,
};
use crate::critic::{CriticConfig, CriticRun, StepSchedule};
use crate::error::{Error, Result};
use crate::mdp::{BehaviorPolicy, FeatureMap, Mdp, PolicyTable};
use crate::model_io::{load_model, Model, ModelFile};

use gallery::{certify_policy, CertificationRecord};
use output::{int, mean_stderr, num, Emitter, Manifest, Table};
pub use setup::{default_workers, par_map, CriticSetup};
pub use sweep::{sample_complexity_sweep, SweepConfig, SweepResult, SweepRow};

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "NACLAB_OUT";
pub const DEFAULT_OUT_ROOT: &str = "naclab-out";

/// Exit status of a deadly-triad run whose one-step critic diverged as intended.
pub const EXPECTED_DIVERGENCE_STATUS: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    CriticConvergence,
    StepsizeSweep,
    DeadlyTriad,
    NacGap,
    NpgExact,
    Qnpg,
    BoundTable,
    /// Only through the `sweep` command.
    SampleComplexity,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::CriticConvergence => "critic-convergence",
            ExperimentKind::StepsizeSweep => "stepsize-sweep",
            ExperimentKind::DeadlyTriad => "deadly-triad",
            ExperimentKind::NacGap => "nac-gap",
            ExperimentKind::NpgExact => "npg-exact",
            ExperimentKind::Qnpg => "qnpg",
            ExperimentKind::BoundTable => "bound-table",
            ExperimentKind::SampleComplexity => "sample-complexity",
        }
    }
}

/// Where the instance comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceRef {
    Gallery(String),
    /// Model file, relative to the spec file's directory.
    Path(PathBuf),
    Inline(ModelFile),
}

fn default_mixing_cap() -> usize {
    crate::sampler::DEFAULT_MIXING_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub instance: InstanceRef,
    pub seeds: Vec<u64>,
    /// Policy the critic evaluates, `[s][a]`; defaults to the gallery
    /// instance's target or to uniform.
    #[serde(default)]
    pub target_policy: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub critic: Option<CriticConfig>,
    #[serde(default)]
    pub actor: Option<ActorConfig>,
    /// Constant stepsizes compared by `stepsize-sweep`.
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    /// State weighting of the QNPG fit.
    #[serde(default)]
    pub nu: Option<NuChoice>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    /// Start distribution for `V(μ)`; uniform when absent.
    #[serde(default)]
    pub start_distribution: Option<Vec<f64>>,
    /// Trajectory start state for critic runs.
    #[serde(default)]
    pub start_state: usize,
    /// Step cap for mixing-time searches.
    #[serde(default = "default_mixing_cap")]
    pub mixing_cap: usize,
    pub output_dir: String,
    #[serde(default)]
    pub workers: Option<usize>,
}

/// Instance data after resolving the reference.
#[derive(Debug, Clone)]
pub struct ResolvedInstance {
    pub name: String,
    pub mdp: Mdp,
    pub features: FeatureMap,
    pub behavior: BehaviorPolicy,
    pub target: PolicyTable,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(Error::config(format!("{what} must be a nonempty rectangular table")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Reads a spec; relative model paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec = Self::parse(&std::fs::read_to_string(path)?)?;
        if let InstanceRef::Path(p) = &mut spec.instance {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(spec)
    }

    pub fn resolve_instance(&self) -> Result<ResolvedInstance> {
        let (name, model, default_target) = match &self.instance {
            InstanceRef::Gallery(name) => {
                let g = gallery::instance(name)?;
                (
                    name.clone(),
                    Model {
                        mdp: g.mdp,
                        features: g.features,
                        behavior: g.behavior,
                    },
                    Some(g.target),
                )
            }
            InstanceRef::Path(p) => (p.display().to_string(), load_model(p)?, None),
            InstanceRef::Inline(file) => (
                "inline".to_string(),
                crate::model_io::parse_model(&serde_json::to_string(file)?)?,
                None,
            ),
        };
        let target = match &self.target_policy {
            Some(rows) => PolicyTable::new(matrix_from_rows(rows, "target_policy")?)?,
            None => default_target
                .unwrap_or_else(|| PolicyTable::uniform(model.mdp.num_states(), model.mdp.num_actions())),
        };
        target.check_against(&model.mdp)?;
        Ok(ResolvedInstance {
            name,
            mdp: model.mdp,
            features: model.features,
            behavior: model.behavior,
            target,
        })
    }

    fn require_critic(&self) -> Result<&CriticConfig> {
        self.critic
            .as_ref()
            .ok_or_else(|| Error::config(format!("kind {} needs a critic config", self.kind.name())))
    }

    fn require_actor(&self) -> Result<&ActorConfig> {
        self.actor
            .as_ref()
            .ok_or_else(|| Error::config(format!("kind {} needs an actor config", self.kind.name())))
    }

    /// Checks everything that can be checked before sampling starts.
    pub fn validate(&self) -> Result<ResolvedInstance> {
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("seed list has duplicates"));
        }
        if self.output_dir.is_empty() || Path::new(&self.output_dir).is_absolute() {
            return Err(Error::config("output_dir must be a nonempty relative path"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers must be at least 1"));
        }
        let inst = self.resolve_instance()?;
        let (ns, na, d) = (inst.mdp.num_states(), inst.mdp.num_actions(), inst.features.dim());
        if self.start_state >= ns {
            return Err(Error::Index { index: self.start_state, len: ns });
        }
        if let Some(mu) = &self.start_distribution {
            if mu.len() != ns || mu.iter().any(|p| *p < 0.0) || (mu.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
                return Err(Error::config("start_distribution is not a probability vector over states"));
            }
        }
        match self.kind {
            ExperimentKind::CriticConvergence | ExperimentKind::DeadlyTriad | ExperimentKind::BoundTable => {
                self.require_critic()?.validate(d)?;
                if let Some(a) = &self.actor {
                    a.validate(na, d)?;
                }
            }
            ExperimentKind::StepsizeSweep => {
                self.require_critic()?.validate(d)?;
                let alphas = self
                    .alphas
                    .as_ref()
                    .ok_or_else(|| Error::config("stepsize-sweep needs a list of alphas"))?;
                if alphas.is_empty() {
                    return Err(Error::config("stepsize-sweep needs at least one alpha"));
                }
                for &a in alphas {
                    StepSchedule::Constant { alpha: a }.validate()?;
                }
            }
            ExperimentKind::NacGap | ExperimentKind::NpgExact | ExperimentKind::Qnpg => {
                let a = self.require_actor()?;
                a.validate(na, d)?;
                if a.start_state >= ns {
                    return Err(Error::Index { index: a.start_state, len: ns });
                }
            }
            ExperimentKind::SampleComplexity => {
                self.sweep
                    .as_ref()
                    .ok_or_else(|| Error::config("sample-complexity needs a sweep config"))?
                    .validate()?;
            }
        }
        Ok(inst)
    }

    fn problem(&self, inst: &ResolvedInstance) -> Result<Problem> {
        let p = Problem::new(inst.mdp.clone(), inst.features.clone(), inst.behavior.clone())?;
        match &self.start_distribution {
            Some(mu) => p.with_start(DVector::from_column_slice(mu)),
            None => Ok(p),
        }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_root: Option<PathBuf>,
    pub workers: Option<usize>,
    pub thin: Option<usize>,
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: i32,
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub manifest: Manifest,
}

pub fn out_root(opts: &RunOptions) -> PathBuf {
    opts.out_root
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

/// Applies overrides, validates, then runs. Nothing is written when
/// validation fails.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunOutcome> {
    let mut spec = spec.clone();
    if let Some(s) = &opts.seeds {
        spec.seeds = s.clone();
    }
    if let Some(t) = opts.thin {
        if let Some(c) = spec.critic.as_mut() {
            c.thin = Some(t);
        }
    }
    if opts.workers.is_some() {
        spec.workers = opts.workers;
    }
    let inst = spec.validate()?;
    let workers = spec.workers.unwrap_or_else(default_workers);
    let dir = out_root(opts).join(&spec.output_dir);
    let mut manifest = Manifest::new(
        spec.kind.name(),
        &inst.name,
        serde_json::to_value(&spec)?,
        spec.seeds.clone(),
    );
    let mut emit = Emitter::new(dir.clone());
    let status = match spec.kind {
        ExperimentKind::CriticConvergence => critic_convergence(&spec, &inst, workers, &mut emit, &mut manifest)?,
        ExperimentKind::StepsizeSweep => stepsize_sweep(&spec, &inst, workers, &mut emit, &mut manifest)?,
        ExperimentKind::DeadlyTriad => deadly_triad(&spec, &inst, workers, &mut emit, &mut manifest)?,
        ExperimentKind::NacGap => nac_gap(&spec, &inst, workers, &mut emit, &mut manifest)?,
        ExperimentKind::NpgExact => npg_exact(&spec, &inst, &mut emit, &mut manifest)?,
        ExperimentKind::Qnpg => qnpg(&spec, &inst, &mut emit, &mut manifest)?,
        ExperimentKind::BoundTable => bound_table(&spec, &inst, &mut emit, &mut manifest)?,
        ExperimentKind::SampleComplexity => sample_complexity(&spec, &inst, workers, &mut emit, &mut manifest)?,
    };
    manifest.exit_status = status;
    let files = emit.finish(&manifest)?;
    Ok(RunOutcome {
        status,
        dir,
        files,
        manifest,
    })
}

fn certification(inst: &ResolvedInstance, gamma_c: f64) -> Result<CertificationRecord> {
    certify_policy(&inst.mdp, &inst.features, &inst.target, &inst.behavior, gamma_c)
}

fn setup_for(spec: &ExperimentSpec, inst: &ResolvedInstance, critic: &CriticConfig) -> Result<CriticSetup> {
    let mut s = CriticSetup::new(&inst.mdp, &inst.features, &inst.behavior, &inst.target, critic.n, critic.gamma_c)?;
    s.mixing_cap = spec.mixing_cap;
    Ok(s)
}

fn record_setup(manifest: &mut Manifest, s: &CriticSetup) {
    manifest.derive("n", s.n);
    manifest.derive("n_min", s.n_min);
    manifest.derive("gamma_c", s.gamma_c);
    manifest.derive("kappa_min", s.stationary.kappa_min);
    manifest.derive("lambda_min", s.lambda_min());
    manifest.derive("zeta_pi", s.zeta);
    manifest.derive("zeta_max", s.behavior.zeta_max());
    manifest.derive("contraction", s.fixed.contraction_estimate);
    manifest.derive("w_pi", &s.fixed.w_pi);
    manifest.derive("w_pi_norm", s.w_pi.norm());
    manifest.derive("fixed_point_residual", s.fixed.residual);
    manifest.derive("second_eigenvalue_modulus", s.stationary.slem);
}

/// `(k, ‖w_k − w_π‖²)` for every recorded iterate after the start.
fn mse_trace(run: &CriticRun, w_pi: &DVector<f64>) -> Vec<(usize, f64)> {
    run.iterates
        .iter()
        .filter(|(k, _)| *k > 0)
        .map(|(k, w)| (*k, w.iter().zip(w_pi.iter()).map(|(a, b)| (a - b) * (a - b)).sum()))
        .collect()
}

/// Per-`k` bound terms, or `None` when the bound does not apply.
type BoundFn<'a> = Box<dyn Fn(usize) -> Option<(f64, f64)> + 'a>;

fn critic_bound<'a>(s: &'a CriticSetup, critic: &CriticConfig, manifest: &mut Manifest) -> Option<BoundFn<'a>> {
    match critic.schedule {
        StepSchedule::Constant { alpha } => match s.constant_bound(critic) {
            Ok(b) => {
                manifest.derive("t_alpha", b.tau - s.n - 1);
                manifest.derive("bound_c1", b.c1);
                manifest.derive("bound_c2", b.c2);
                manifest.derive("bound_tau", b.tau);
                manifest.derive("bound_rate", b.rate);
                manifest.derive("lipschitz_f", b.lipschitz);
                Some(Box::new(move |k| b.at(k).ok().map(|t| (t.e1, t.e2))))
            }
            Err(e) => {
                if let Ok(t) = s.t_alpha(alpha.min(0.999)) {
                    manifest.derive("t_alpha", t);
                }
                manifest.note(format!("bound columns omitted: {e}"));
                None
            }
        },
        StepSchedule::Diminishing { .. } => match s.diminishing_bound(critic, critic.num_iters) {
            Ok(b) => {
                manifest.derive("bound_c1", b.c1);
                manifest.derive("bound_c2", b.c2);
                manifest.derive("bound_k_hat", b.k_hat);
                manifest.derive("bound_l1", b.l1);
                manifest.derive("lipschitz_f", b.lipschitz);
                Some(Box::new(move |k| b.at(k).ok().map(|t| (t.e1, t.e2))))
            }
            Err(e) => {
                manifest.note(format!("bound columns omitted: {e}"));
                None
            }
        },
    }
}

fn bound_cells(bound: &Option<BoundFn<'_>>, k: usize) -> Vec<String> {
    match bound {
        None => Vec::new(),
        Some(f) => match f(k) {
            Some((e1, e2)) => vec![num(e1), num(e2)],
            None => vec![String::new(), String::new()],
        },
    }
}

fn with_bound_header(mut base: Vec<&'static str>, bound: bool) -> Vec<&'static str> {
    if bound {
        base.extend(["bound_E1", "bound_E2"]);
    }
    base
}

fn critic_convergence(
    spec: &ExperimentSpec,
    inst: &ResolvedInstance,
    workers: usize,
    emit: &mut Emitter,
    manifest: &mut Manifest,
) -> Result<i32> {
    let critic = spec.require_critic()?;
    let s = setup_for(spec, inst, critic)?;
    record_setup(manifest, &s);
    let bound = critic_bound(&s, critic, manifest);
    let runs = s.run_seeds(critic, &spec.seeds, spec.start_state, workers)?;
    let traces: Vec<Vec<(usize, f64)>> = runs.iter().map(|r| mse_trace(r, &s.w_pi)).collect();
    for (seed, (run, trace)) in spec.seeds.iter().zip(runs.iter().zip(&traces)) {
        let mut t = Table::new(&with_bound_header(vec!["k", "mse"], bound.is_some()));
        for &(k, mse) in trace {
            let mut row = vec![int(k), num(mse)];
            row.extend(bound_cells(&bound, k));
            t.push(row);
        }
        emit.table(&format!("seed_{seed}.csv"), &t, manifest)?;
        if let Some(d) = &run.divergence {
            manifest.note(format!("seed {seed} diverged at step {} (|w|_inf = {:e})", d.step, d.norm));
        }
    }
    emit.table("aggregate.csv", &aggregate_traces(&traces, &bound), manifest)?;
    Ok(0)
}

/// Mean and standard error per `k` over the seeds that reached it.
fn aggregate_traces(traces: &[Vec<(usize, f64)>], bound: &Option<BoundFn<'_>>) -> Table {
    let mut t = Table::new(&with_bound_header(vec!["k", "mse_mean", "mse_stderr", "seeds"], bound.is_some()));
    let longest = traces.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..longest {
        let Some(k) = traces.iter().find_map(|tr| tr.get(i).map(|p| p.0)) else {
            continue;
        };
        let vals: Vec<f64> = traces
            .iter()
            .filter_map(|tr| tr.get(i).filter(|p| p.0 == k).map(|p| p.1))
            .collect();
        let (m, se) = mean_stderr(&vals);
        let mut row = vec![int(k), num(m), num(se), int(vals.len())];
        row.extend(bound_cells(bound, k));
        t.push(row);
    }
    t
}

/// Mean MSE over recorded iterates in the second half of the run.
pub fn plateau(trace: &[(usize, f64)], num_iters: usize) -> f64 {
    let tail: Vec<f64> = trace.iter().filter(|(k, _)| 2 * k >= num_iters).map(|p| p.1).collect();
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

fn stepsize_sweep(
    spec: &ExperimentSpec,
    inst: &ResolvedInstance,
    workers: usize,
    emit: &mut Emitter,
    manifest: &mut Manifest,
) -> Result<i32> {
    let base = spec.require_critic()?;
    let s = setup_for(spec, inst, base)?;
    record_setup(manifest, &s);
    let alphas = spec.alphas.clone().unwrap_or_default();
    let mut agg = Table::new(&[
        "alpha",
        "t_alpha",
        "plateau_mean",
        "plateau_stderr",
        "final_mse_mean",
        "final_mse_stderr",
    ]);
    for (i, &alpha) in alphas.iter().enumerate() {
        let mut critic = base.clone();
        critic.schedule = StepSchedule::Constant { alpha };
        let t_alpha = s.t_alpha(alpha)?;
        let runs = s.run_seeds(&critic, &spec.seeds, spec.start_state, workers)?;
        let mut plateaus = Vec::new();
        let mut finals = Vec::new();
        for (seed, run) in spec.seeds.iter().zip(&runs) {
            let trace = mse_trace(run, &s.w_pi);
            let mut t = Table::new(&["k", "mse"]);
            for &(k, mse) in &trace {
                t.push(vec![int(k), num(mse)]);
            }
            emit.table(&format!("alpha_{i}/seed_{seed}.csv"), &t, manifest)?;
            plateaus.push(plateau(&trace, critic.num_iters));
            finals.push(trace.last().map_or(f64::NAN, |p| p.1));
        }
        let (pm, ps) = mean_stderr(&plateaus);
        let (fm, fs) = mean_stderr(&finals);
        agg.push(vec![num(alpha), int(t_alpha), num(pm), num(ps), num(fm), num(fs)]);
    }
    emit.table("aggregate.csv", &agg, manifest)?;
    Ok(0)
}

fn deadly_triad(
    spec: &ExperimentSpec,
    inst: &ResolvedInstance,
    workers: usize,
    emit: &mut Emitter,
    manifest: &mut Manifest,
) -> Result<i32> {
    let base = spec.require_critic()?;
    let rec = certification(inst, base.gamma_c)?;
    manifest.derive("certification", rec);
    let mut summary = Table::new(&["n", "seed", "diverged", "divergence_step", "final_error"]);
    let mut n1_diverged = 0;
    for (label, n) in [("n1", 1), ("nmin", rec.n_min)] {
        let mut critic = base.clone();
        critic.n = n;
        if critic.w0.is_none() {
            // w_π is often 0 here, so start away from it
            critic.w0 = Some(vec![1.0; inst.features.dim()]);
        }
        let s = setup_for(spec, inst, &critic)?;
        manifest.derive(&format!("{label}_w_pi"), &s.fixed.w_pi);
        let runs = s.run_seeds(&critic, &spec.seeds, spec.start_state, workers)?;
        for (seed, run) in spec.seeds.iter().zip(&runs) {
            let mut t = Table::new(&["k", "w_norm", "error"]);
            for (k, w) in &run.iterates {
                let wv = DVector::from_column_slice(w);
                t.push(vec![int(*k), num(wv.norm()), num((&wv - &s.w_pi).norm())]);
            }
            emit.table(&format!("{label}/seed_{seed}.csv"), &t, manifest)?;
            let err = (&run.final_w - &s.w_pi).norm();
            let (div, step) = match &run.divergence {
                Some(d) => (true, int(d.step)),
                None => (false, String::new()),
            };
            if n == 1 && div {
                n1_diverged += 1;
            }
            summary.push(vec![int(n), seed.to_string(), div.to_string(), step, num(err)]);
        }
    }
    emit.table("summary.csv", &summary, manifest)?;
    manifest.derive("n1_diverged_seeds", n1_diverged);
    Ok(if n1_diverged > 0 {
        EXPECTED_DIVERGENCE_STATUS
    } else {
        manifest.note("one-step critic did not diverge on any seed");
        0
    })
}

/// True when the gap bounds' actor assumptions hold: `β = ln|A|` and a
/// uniform initial policy.
fn actor_bound_preconditions(problem: &Problem, actor: &ActorConfig) -> Result<()> {
    let na = problem.mdp.num_actions();
    let beta = actor.beta_for(na);
    if (beta - (na as f64).ln()).abs() > 1e-12 {
        return Err(Error::inapplicable(format!("actor stepsize {beta} differs from ln|A|")));
    }
    let pi0 = problem.policy(&actor.initial_theta(problem.features.dim()))?;
    let uniform = PolicyTable::uniform(problem.mdp.num_states(), na);
    if pi0.max_abs_diff(&uniform) > 1e-12 {
        return Err(Error::inapplicable("initial policy is not uniform"));
    }
    Ok(())
}

fn nac_gap(
    spec: &ExperimentSpec,
    inst: &ResolvedInstance,
    workers: usize,
    emit: &mut Emitter,
    manifest: &mut Manifest,
) -> Result<i32> {
    let actor = spec.require_actor()?;
    let problem = spec.problem(inst)?;
    manifest.derive("v_star", problem.v_star);
    manifest.derive("kappa_min", problem.stationary.kappa_min);
    manifest.derive("zeta_max", problem.behavior.zeta_max());
    let runs: Vec<NacRun> = par_map(&spec.seeds, workers, |s| run_nac(&problem, actor, s))?;
    let xi = runs
        .iter()
        .flat_map(|r| r.xi_trace.iter().copied())
        .fold(0.0, f64::max);
    let max_w = runs
        .iter()
        .flat_map(|r| r.w_pi_norms.iter().copied())
        .fold(0.0, f64::max);
    manifest.derive("xi_proxy", xi);
    manifest.derive("max_visited_w_pi_norm", max_w);

    // bound for an actor run of length t+1, evaluated per row
    let bound = actor_bound_preconditions(&problem, actor).and_then(|_| {
        let mut inputs = nac_bound_inputs(&problem, actor, None)?;
        inputs.xi = xi;
        inputs.max_visited_w_pi = Some(max_w);
        let report = nac_gap_bound(inputs)?;
        manifest.derive("bound_report", &report);
        manifest.derive("t_alpha", inputs.t_alpha);
        manifest.derive("lambda_min", inputs.lambda_min);
        Ok(inputs)
    });
    let bound = match bound {
        Ok(b) => Some(b),
        Err(e) => {
            manifest.note(format!("bound columns omitted: {e}"));
            None
        }
    };
    let terms = |t: usize| -> Option<[f64; 4]> {
        let mut i = bound?;
        i.num_outer = t + 1;
        nac_gap_bound(i).ok().map(|r| [r.a1, r.a2, r.a3, r.a4])
    };
    let mut header = vec!["t", "gap", "avg_gap", "xi_t", "wnorm_t"];
    if bound.is_some() {
        header.extend(["A1", "A2", "A3", "A4"]);
    }
    for (seed, run) in spec.seeds.iter().zip(&runs) {
        let mut t = Table::new(&header);
        let mut acc = 0.0;
        for i in 0..run.gaps.len() {
            acc += run.gaps[i];
            let mut row = vec![int(i), num(run.gaps[i]), num(acc / (i + 1) as f64), num(run.xi_trace[i]), num(run.w_pi_norms[i])];
            if let Some(a) = terms(i) {
                row.extend(a.iter().map(|v| num(*v)));
            }
            t.push(row);
        }
        emit.table(&format!("seed_{seed}.csv"), &t, manifest)?;
    }
    let mut agg_header = vec!["t", "gap_mean", "gap_stderr", "avg_gap_mean", "avg_gap_stderr"];
    if bound.is_some() {
        agg_header.extend(["A1", "A2", "A3", "A4", "bound_total"]);
    }
    let mut agg = Table::new(&agg_header);
    for i in 0..=actor.num_outer {
        let gaps: Vec<f64> = runs.iter().map(|r| r.gaps[i]).collect();
        let avgs: Vec<f64> = runs
            .iter()
            .map(|r| r.gaps[..=i].iter().sum::<f64>() / (i + 1) as f64)
            .collect();
        let (gm, gs) = mean_stderr(&gaps);
        let (am, as_) = mean_stderr(&avgs);
        let mut row = vec![int(i), num(gm), num(gs), num(am), num(as_)];
        if let Some(a) = terms(i) {
            row.extend(a.iter().map(|v| num(*v)));
            row.push(num(a.iter().sum()));
        }
        agg.push(row);
    }
    emit.table("aggregate.csv", &agg, manifest)?;
    let outputs: Vec<f64> = runs.iter().map(NacRun::output_gap).collect();
    let (om, os) = mean_stderr(&outputs);
    manifest.derive("output_gap_mean", om);
    manifest.derive("output_gap_stderr", os);
    Ok(0)
}

fn npg_exact(spec: &ExperimentSpec, inst: &ResolvedInstance, emit: &mut Emitter, manifest: &mut Manifest) -> Result<i32> {
    let actor = spec.require_actor()?;
    let problem = spec.problem(inst)?;
    let run = run_exact_npg(&problem, actor)?;
    manifest.derive("v_star", problem.v_star);
    let xi = crate::actor::xi_proxy(&run)?;
    manifest.derive("xi_proxy", xi);
    let na = problem.mdp.num_actions();
    let beta = actor.beta_for(na);
    let bound_ok = if xi > 1e-9 {
        manifest.note(format!("bound column omitted: visited Q-functions are not linear in the features (xi = {xi:e})"));
        false
    } else if !(beta > 0.0) {
        manifest.note("bound column omitted: actor stepsize is zero");
        false
    } else if problem
        .policy(&actor.initial_theta(problem.features.dim()))?
        .max_abs_diff(&PolicyTable::uniform(problem.mdp.num_states(), na))
        > 1e-12
    {
        manifest.note("bound column omitted: initial policy is not uniform");
        false
    } else {
        true
    };
    let mut t = Table::new(&if bound_ok { vec!["t", "gap", "bound"] } else { vec!["t", "gap"] });
    for (i, g) in run.gaps.iter().enumerate() {
        let mut row = vec![int(i), num(*g)];
        if bound_ok {
            row.push(num(exact_npg_gap_bound(problem.mdp.gamma(), beta, na, i)));
        }
        t.push(row);
    }
    emit.table("npg.csv", &t, manifest)?;
    Ok(0)
}

fn qnpg(spec: &ExperimentSpec, inst: &ResolvedInstance, emit: &mut Emitter, manifest: &mut Manifest) -> Result<i32> {
    let actor = spec.require_actor()?;
    let problem = spec.problem(inst)?;
    let out = run_qnpg(&problem, actor, spec.nu.unwrap_or_default())?;
    let gamma = problem.mdp.gamma();
    let mut t = Table::new(&["t", "gap", "eps_bias", "lambda", "fit_error"]);
    for i in 0..out.run.gaps.len() {
        t.push(vec![
            int(i),
            num(out.run.gaps[i]),
            num(out.eps_bias[i]),
            num(out.lambda[i]),
            num(out.fit_error[i]),
        ]);
    }
    emit.table("qnpg.csv", &t, manifest)?;
    manifest.derive("v_star", problem.v_star);
    manifest.derive("averaged_gap", out.run.averaged_gap());
    match actor_bound_preconditions(&problem, actor) {
        Ok(()) => {
            manifest.derive("gap_bound", out.gap_bound(gamma));
            let b = out.bias_bound(gamma);
            if b.is_finite() {
                manifest.derive("bias_bound", b);
            } else {
                manifest.note("bias bound omitted: smallest fit weight underflows");
            }
        }
        Err(e) => manifest.note(format!("bounds omitted: {e}")),
    }
    Ok(0)
}

fn bound_table(spec: &ExperimentSpec, inst: &ResolvedInstance, emit: &mut Emitter, manifest: &mut Manifest) -> Result<i32> {
    let critic = spec.require_critic()?;
    let s = setup_for(spec, inst, critic)?;
    record_setup(manifest, &s);
    match critic_bound(&s, critic, manifest) {
        Some(b) => {
            let mut t = Table::new(&["k", "bound_E1", "bound_E2"]);
            let mut k = 1usize;
            while k <= critic.num_iters.max(1) {
                if let Some((e1, e2)) = b(k) {
                    t.push(vec![int(k), num(e1), num(e2)]);
                }
                k *= 2;
            }
            if let Some((e1, e2)) = b(critic.num_iters) {
                if !critic.num_iters.is_power_of_two() {
                    t.push(vec![int(critic.num_iters), num(e1), num(e2)]);
                }
            }
            emit.table("critic_bound.csv", &t, manifest)?;
        }
        None => manifest.note("critic bound table omitted"),
    }
    if let Some(actor) = &spec.actor {
        let problem = spec.problem(inst)?;
        let run = run_exact_npg(&problem, &ActorConfig {
            critic: actor.critic.clone(),
            ..actor.clone()
        });
        let xi = match run.as_ref().map(crate::actor::xi_proxy) {
            Ok(Ok(x)) => x,
            _ => {
                manifest.note("xi proxy unavailable (exact NPG path failed certification); using 0");
                0.0
            }
        };
        let table = actor_bound_preconditions(&problem, actor).and_then(|_| {
            let mut inputs = nac_bound_inputs(&problem, actor, None)?;
            inputs.xi = xi;
            let mut t = Table::new(&["T", "A1", "A2", "A3", "A4", "total"]);
            let mut tt = 1usize;
            while tt <= actor.num_outer {
                inputs.num_outer = tt;
                let r = nac_gap_bound(inputs)?;
                t.push(vec![int(tt), num(r.a1), num(r.a2), num(r.a3), num(r.a4), num(r.total())]);
                tt *= 2;
            }
            Ok(t)
        });
        match table {
            Ok(t) => emit.table("nac_bound.csv", &t, manifest)?,
            Err(e) => manifest.note(format!("actor bound table omitted: {e}")),
        }
    }
    Ok(0)
}

fn sample_complexity(
    spec: &ExperimentSpec,
    inst: &ResolvedInstance,
    workers: usize,
    emit: &mut Emitter,
    manifest: &mut Manifest,
) -> Result<i32> {
    let cfg = spec
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sample-complexity needs a sweep config"))?;
    let problem = spec.problem(inst)?;
    let res = sample_complexity_sweep(&problem, cfg, &spec.seeds, workers)?;
    let mut t = Table::new(&["eps", "alpha", "reachable", "T", "K", "total_samples", "mean_gap", "stderr"]);
    for r in &res.rows {
        let cells = if r.reachable {
            vec![int(r.t), int(r.k), int(r.total_samples), num(r.mean_gap), num(r.stderr)]
        } else {
            vec![String::new(); 5]
        };
        let mut row = vec![num(r.eps), num(r.alpha), r.reachable.to_string()];
        row.extend(cells);
        t.push(row);
    }
    emit.table("sweep.csv", &t, manifest)?;
    manifest.derive("n", res.n);
    manifest.derive("slope_log_samples_vs_log_inv_eps", res.slope);
    manifest.derive("growth_factors", res.growth_factors());
    manifest.derive("xi_proxy", res.xi_proxy);
    manifest.derive("a2", res.a2);
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: &str, extra: &str) -> ExperimentSpec {
        ExperimentSpec::parse(&format!(
            r#"{{"kind": "{kind}", "instance": {{"gallery": "tabular-4x2"}}, "seeds": [1],
                "output_dir": "t", {extra}}}"#
        ))
        .unwrap()
    }

    fn opts(dir: &Path) -> RunOptions {
        RunOptions {
            out_root: Some(dir.to_path_buf()),
            workers: Some(1),
            ..Default::default()
        }
    }

    const CRITIC: &str = r#""critic": {"n": 4, "schedule": {"kind": "constant", "alpha": 0.05}, "num_iters": 1000, "gamma_c": 0.5}"#;

    #[test]
    fn empty_seeds_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec("critic-convergence", CRITIC);
        s.seeds.clear();
        let err = run_experiment(&s, &opts(dir.path())).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(!dir.path().join("t").exists());
    }

    #[test]
    fn critic_convergence_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&spec("critic-convergence", CRITIC), &opts(dir.path())).unwrap();
        assert_eq!(out.status, 0);
        let text = std::fs::read_to_string(out.dir.join("seed_1.csv")).unwrap();
        let mut lines = text.lines();
        // alpha = 0.05 fails the stepsize condition, so no bound columns
        assert_eq!(lines.next().unwrap(), "k,mse");
        let mse: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(mse.len(), 1000);
        assert!(mse.iter().all(|m| m.is_finite()));
        let head: f64 = mse[..100].iter().sum::<f64>() / 100.0;
        let tail: f64 = mse[900..].iter().sum::<f64>() / 100.0;
        assert!(tail < head);
        assert!(!out.manifest.notes.is_empty());
    }

    #[test]
    fn csv_bodies_are_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let s = spec("critic-convergence", CRITIC);
        let ra = run_experiment(&s, &opts(a.path())).unwrap();
        let rb = run_experiment(&s, &opts(b.path())).unwrap();
        for name in ["seed_1.csv", "aggregate.csv"] {
            assert_eq!(
                std::fs::read(ra.dir.join(name)).unwrap(),
                std::fs::read(rb.dir.join(name)).unwrap()
            );
        }
        assert_eq!(ra.manifest.spec_sha256, rb.manifest.spec_sha256);
    }

    #[test]
    fn missing_subconfig_is_validation_error() {
        let s = spec("nac-gap", CRITIC);
        assert_eq!(s.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(ExperimentSpec::parse(r#"{"kind": "qnpg", "bogus": 1}"#).is_err());
    }
}
