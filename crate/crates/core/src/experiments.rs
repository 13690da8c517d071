//! Experiment protocols built from the simulators: SGD and SDE ensembles,
//! measured-vs-formula exit-time tables, and the second-layer comparison.
//!
//! Member `i` of an ensemble keyed by `seed` draws its data from stream
//! `seed + i`. Every reduction runs in member order, so sequential and
//! parallel runs produce identical summaries.

use serde::{Deserialize, Serialize};

use crate::ensemble::{mean_and_se, pointwise_mean_se, std_dev, Parallelism};
use crate::error::{Error, Result};
use crate::exit_time::{
    exit_time_general_p, exit_time_numeric, max_correlation_crossing, Averaging, ExitTimeQuery, Method,
};
use crate::ode::{integrate_with, population_risk, InitMode, IntegrateOptions, OdeScheme};
use crate::sde::{SdeIntegrator, SdeOptions};
use crate::sgd::{run_sgd, run_sgd_until, SecondLayerInit, StudentNetwork, TeacherModel};
use crate::state::{OverlapState, TaskParams, Trajectory};

pub use crate::exit_time::max_correlation as max_correlation_diagnostic;

/// Pointwise ensemble statistics on a shared time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCurve {
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

impl MeanCurve {
    /// Statistics of `series` (one per member), truncated to the shortest.
    pub fn from_series(t: &[f64], series: &[Vec<f64>]) -> Self {
        let stats = pointwise_mean_se(series);
        let n = stats.len().min(t.len());
        MeanCurve {
            t: t[..n].to_vec(),
            mean: stats[..n].iter().map(|s| s.0).collect(),
            se: stats[..n].iter().map(|s| s.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// A member that failed, kept so partial results can be flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberFailure {
    pub index: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    /// Successful members in member order.
    pub members: Vec<Trajectory>,
    pub failures: Vec<MemberFailure>,
    pub risk: MeanCurve,
}

fn collect(results: Vec<Result<Trajectory>>, seed: u64) -> Ensemble {
    let mut members = Vec::new();
    let mut failures = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => members.push(t),
            Err(e) => failures.push(MemberFailure {
                index,
                seed: seed.wrapping_add(index as u64),
                error: e.to_string(),
            }),
        }
    }
    let risk = match members.first() {
        Some(first) => {
            let series: Vec<Vec<f64>> = members.iter().map(Trajectory::risks).collect();
            MeanCurve::from_series(&first.times(), &series)
        }
        None => MeanCurve {
            t: Vec::new(),
            mean: Vec::new(),
            se: Vec::new(),
        },
    };
    Ensemble {
        members,
        failures,
        risk,
    }
}

/// How ensemble members obtain their initial network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    /// Every member starts from the network drawn with the base seed.
    Shared,
    /// Member `i` draws its own network with seed `seed + i`.
    PerMember,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdEnsembleConfig {
    pub params: TaskParams,
    pub members: usize,
    pub seed: u64,
    pub init: InitMode,
    pub init_policy: InitPolicy,
    pub second_layer: SecondLayerInit,
    pub n_steps: u64,
    pub stride: u64,
}

impl SgdEnsembleConfig {
    fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.members == 0 || self.stride == 0 {
            return Err(Error::InvalidParameter("members and stride must be positive".into()));
        }
        Ok(())
    }

    /// The teacher shared by every member.
    pub fn teacher(&self) -> TeacherModel {
        TeacherModel::random(self.params.d, self.params.delta, self.seed)
    }

    pub fn initial_network(&self, teacher: &TeacherModel, member: usize) -> Result<StudentNetwork> {
        let s = match self.init_policy {
            InitPolicy::Shared => self.seed,
            InitPolicy::PerMember => self.seed.wrapping_add(member as u64),
        };
        StudentNetwork::init_with(teacher, self.params.p, self.init, self.second_layer, s)
    }
}

/// Runs every member for the full `n_steps`, recording on a common grid.
pub fn sgd_ensemble(cfg: &SgdEnsembleConfig, par: Parallelism) -> Result<Ensemble> {
    cfg.validate()?;
    let teacher = cfg.teacher();
    let results = par.map(cfg.members, |i| {
        let net = cfg.initial_network(&teacher, i)?;
        run_sgd(&teacher, &net, &cfg.params, cfg.n_steps, Some(cfg.stride), cfg.seed.wrapping_add(i as u64))
    });
    Ok(collect(results, cfg.seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeEnsembleConfig {
    pub params: TaskParams,
    pub paths: usize,
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    pub stride: Option<usize>,
}

/// `paths` SDE paths from a common initial state; path `i` uses stream `i`.
pub fn sde_ensemble(initial: &OverlapState, cfg: &SdeEnsembleConfig, par: Parallelism) -> Result<Ensemble> {
    if cfg.paths == 0 {
        return Err(Error::InvalidParameter("need at least one path".into()));
    }
    let integrator = SdeIntegrator::new(&cfg.params)?;
    let opts = SdeOptions {
        dt: cfg.dt,
        stride: cfg.stride,
    };
    let results = par.map(cfg.paths, |i| integrator.run(initial, cfg.horizon, &opts, cfg.seed, i as u64));
    let mut ens = collect(results, cfg.seed);
    // paths share one seed; failures are identified by path index
    ens.failures.iter_mut().for_each(|f| f.seed = cfg.seed);
    Ok(ens)
}

/// RK4 reference trajectory for an ensemble, recorded every `stride` steps.
pub fn ode_reference(initial: &OverlapState, params: &TaskParams, dt: f64, horizon: f64, stride: usize) -> Result<Trajectory> {
    integrate_with(
        initial,
        params,
        horizon,
        &IntegrateOptions {
            dt,
            scheme: OdeScheme::Rk4,
            stride: Some(stride),
        },
    )
}

/// Measured SGD exit time for one member, stopping shortly after the crossing.
///
/// Records every `stride` steps; the crossing is interpolated between records.
pub fn sgd_exit_time(
    teacher: &TeacherModel,
    net0: &StudentNetwork,
    params: &TaskParams,
    threshold: f64,
    horizon: f64,
    stride: u64,
    seed: u64,
) -> Result<f64> {
    let s0 = net0.measure_overlaps(teacher);
    let half = params.delta / 2.0;
    let level = (1.0 - threshold) * (population_risk(&s0, params.delta) - half);
    let n_steps = (horizon / params.sgd_time_step()).ceil() as u64;
    let traj = run_sgd_until(teacher, net0, params, n_steps, Some(stride), seed, |s| {
        population_risk(s, params.delta) - half <= level
    })?;
    exit_time_numeric(&traj, threshold, params.delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitTableConfig {
    pub widths: Vec<usize>,
    pub d: usize,
    /// Learning rate per unit width, held fixed across widths.
    pub gamma_over_p: f64,
    pub delta: f64,
    pub threshold: f64,
    pub members: usize,
    pub seed: u64,
    pub mc_samples: usize,
    /// Horizon in rescaled time, as a multiple of the annealed exit time.
    pub horizon_factor: f64,
    pub stride: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitTableRow {
    pub p: usize,
    pub gamma: f64,
    pub measured_mean: f64,
    pub measured_se: f64,
    pub measured_sd: f64,
    pub annealed: f64,
    pub quenched: f64,
    pub quenched_se: f64,
    pub ratio_annealed: f64,
    pub ratio_quenched: f64,
    /// `(quenched − annealed) / annealed`.
    pub relative_gap: f64,
    pub samples: usize,
    pub failures: Vec<MemberFailure>,
}

/// Measured SGD exit times against the annealed and quenched formulas, one
/// row per width. Each member gets its own spherical random initialization.
pub fn exit_table(cfg: &ExitTableConfig, par: Parallelism) -> Result<Vec<ExitTableRow>> {
    if cfg.widths.is_empty() || cfg.members == 0 || cfg.stride == 0 {
        return Err(Error::InvalidParameter("need widths, members and a positive stride".into()));
    }
    cfg.widths.iter().map(|&p| exit_row(cfg, p, par)).collect()
}

fn exit_row(cfg: &ExitTableConfig, p: usize, par: Parallelism) -> Result<ExitTableRow> {
    let params = TaskParams::spherical(cfg.d, p, cfg.gamma_over_p * p as f64, cfg.delta);
    params.validate()?;
    let query = |mode| ExitTimeQuery {
        threshold: cfg.threshold,
        params,
        mode,
        method: Method::Formula,
        mc_samples: cfg.mc_samples,
        seed: cfg.seed,
    };
    let annealed = exit_time_general_p(&query(Averaging::Annealed), par)?.value;
    let quenched = exit_time_general_p(&query(Averaging::Quenched), par)?;
    let horizon = cfg.horizon_factor * annealed;

    let teacher = TeacherModel::random(cfg.d, cfg.delta, cfg.seed);
    let results = par.map(cfg.members, |i| {
        let s = cfg.seed.wrapping_add(i as u64);
        let net = StudentNetwork::init(&teacher, p, InitMode::SphericalUniform, s)?;
        sgd_exit_time(&teacher, &net, &params, cfg.threshold, horizon, cfg.stride, s)
    });
    let mut times = Vec::new();
    let mut failures = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => times.push(t),
            Err(e) => failures.push(MemberFailure {
                index,
                seed: cfg.seed.wrapping_add(index as u64),
                error: e.to_string(),
            }),
        }
    }
    if times.is_empty() {
        return Err(failures
            .first()
            .map(|f| Error::InvalidState(format!("every member failed, first: {}", f.error)))
            .unwrap_or_else(|| Error::InvalidState("no members".into())));
    }
    let (measured_mean, measured_se) = mean_and_se(&times);
    Ok(ExitTableRow {
        p,
        gamma: params.gamma,
        measured_mean,
        measured_se,
        measured_sd: std_dev(&times),
        annealed,
        quenched: quenched.value,
        quenched_se: quenched.se.unwrap_or(0.0),
        ratio_annealed: measured_mean / annealed,
        ratio_quenched: measured_mean / quenched.value,
        relative_gap: (quenched.value - annealed) / annealed,
        samples: times.len(),
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondLayerConfig {
    pub d: usize,
    pub p: usize,
    pub gamma: f64,
    pub delta: f64,
    pub members: usize,
    pub seed: u64,
    /// Crossing level for `max_j |m_j|`.
    pub level: f64,
    pub horizon: f64,
    pub stride: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingSummary {
    pub times: Vec<f64>,
    pub mean: f64,
    pub se: f64,
    pub failures: Vec<MemberFailure>,
}

impl CrossingSummary {
    fn from_results(results: Vec<Result<f64>>, seed: u64) -> Self {
        let mut times = Vec::new();
        let mut failures = Vec::new();
        for (index, r) in results.into_iter().enumerate() {
            match r {
                Ok(t) => times.push(t),
                Err(e) => failures.push(MemberFailure {
                    index,
                    seed: seed.wrapping_add(index as u64),
                    error: e.to_string(),
                }),
            }
        }
        let (mean, se) = mean_and_se(&times);
        CrossingSummary {
            times,
            mean,
            se,
            failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondLayerComparison {
    pub fixed: CrossingSummary,
    pub trained: CrossingSummary,
    pub fixed_curve: MeanCurve,
    pub trained_curve: MeanCurve,
}

impl SecondLayerComparison {
    /// Crossing-time difference in units of its combined standard error.
    pub fn z_score(&self) -> f64 {
        let se = (self.fixed.se.powi(2) + self.trained.se.powi(2)).sqrt();
        (self.fixed.mean - self.trained.mean) / se
    }
}

/// Growth of `max_j |m_j|` with the second layer fixed and trained.
///
/// Both variants of member `i` share the initial network and the data stream,
/// so the comparison isolates the effect of training `a`.
pub fn second_layer_compare(cfg: &SecondLayerConfig, par: Parallelism) -> Result<SecondLayerComparison> {
    if cfg.members == 0 || cfg.stride == 0 || !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidParameter(
            "need members > 0, stride > 0 and a crossing level in (0, 1)".into(),
        ));
    }
    let fixed = TaskParams::spherical(cfg.d, cfg.p, cfg.gamma, cfg.delta);
    let trained = TaskParams { train_a: true, ..fixed };
    fixed.validate()?;
    let teacher = TeacherModel::random(cfg.d, cfg.delta, cfg.seed);
    let n_steps = (cfg.horizon / fixed.sgd_time_step()).ceil() as u64;
    let run = |params: &TaskParams, i: usize| -> Result<Trajectory> {
        let s = cfg.seed.wrapping_add(i as u64);
        let net = StudentNetwork::init(&teacher, cfg.p, InitMode::SphericalUniform, s)?;
        run_sgd(&teacher, &net, params, n_steps, Some(cfg.stride), s)
    };
    let pairs = par.map(cfg.members, |i| (run(&fixed, i), run(&trained, i)));
    let mut curves = (Vec::new(), Vec::new());
    let mut crossings = (Vec::new(), Vec::new());
    let mut grid = Vec::new();
    for (f, t) in pairs {
        for (traj, curve, cross) in [(f, &mut curves.0, &mut crossings.0), (t, &mut curves.1, &mut crossings.1)] {
            match traj {
                Ok(traj) => {
                    if grid.is_empty() {
                        grid = traj.times();
                    }
                    curve.push(max_correlation_diagnostic(&traj));
                    cross.push(max_correlation_crossing(&traj, cfg.level));
                }
                Err(e) => cross.push(Err(e)),
            }
        }
    }
    Ok(SecondLayerComparison {
        fixed: CrossingSummary::from_results(crossings.0, cfg.seed),
        trained: CrossingSummary::from_results(crossings.1, cfg.seed),
        fixed_curve: MeanCurve::from_series(&grid, &curves.0),
        trained_curve: MeanCurve::from_series(&grid, &curves.1),
    })
}
