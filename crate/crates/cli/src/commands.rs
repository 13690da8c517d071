//! One function per subcommand. Each declares its configuration keys, runs
//! the experiment and writes its artifacts.

use medlab::ensemble::{mean_and_se, std_dev, Parallelism};
use medlab::exit_time::{
    annealed_steps, exit_time_general_p, exit_time_numeric, gamma_opt, sde_exit_time_p1, Averaging, ExitTimeQuery,
    ExitTimeRecord, Method,
};
use medlab::experiments::{
    exit_table, ode_reference, sde_ensemble, second_layer_compare, sgd_ensemble, Ensemble, ExitTableConfig,
    InitPolicy, MeanCurve, SdeEnsembleConfig, SecondLayerConfig, SgdEnsembleConfig,
};
use medlab::ode::{init_overlaps, integrate_with, InitMode, IntegrateOptions, OdeScheme};
use medlab::sde::default_sde_dt;
use medlab::{OverlapState, TaskParams, Trajectory};
use serde::Serialize;
use serde_json::json;

use crate::config::{Config, ConfigError};
use crate::output::Artifacts;
use crate::CliError;

/// What a finished command reports back to `main`.
pub struct Report {
    pub partial: bool,
    pub notes: Vec<String>,
}

impl Report {
    fn complete() -> Self {
        Report {
            partial: false,
            notes: Vec::new(),
        }
    }
}

const TASK: &[(&str, &str)] = &[
    ("d", "1000"),
    ("p", "1"),
    ("gamma", "0.1"),
    ("delta", "0.1"),
    ("spherical", "true"),
    ("train_a", "false"),
    ("seed", "1"),
];

fn keys(extra: &[(&'static str, &'static str)]) -> Vec<(&'static str, &'static str)> {
    let mut all: Vec<_> = TASK.to_vec();
    for (k, v) in extra {
        match all.iter_mut().find(|(a, _)| a == k) {
            Some(slot) => slot.1 = v,
            None => all.push((k, v)),
        }
    }
    all
}

/// Declared keys and defaults per subcommand.
pub fn defaults(command: &str) -> Vec<(&'static str, &'static str)> {
    match command {
        "sgd" => keys(&[
            ("members", "10"),
            ("horizon", "5"),
            ("stride", "auto"),
            ("init", "spherical-uniform"),
            ("init_policy", "shared"),
            ("second_layer", "ones"),
            ("threshold", "0.5"),
        ]),
        "ode" => keys(&[
            ("dt", "0.001"),
            ("horizon", "10"),
            ("stride", "10"),
            ("scheme", "rk4"),
            ("init", "spherical-uniform"),
            ("m0", "auto"),
            ("threshold", "0.5"),
        ]),
        "sde" => keys(&[
            ("paths", "20"),
            ("dt", "auto"),
            ("horizon", "5"),
            ("stride", "auto"),
            ("init", "spherical-uniform"),
            ("m0", "auto"),
            ("threshold", "0.5"),
        ]),
        "exit-time" => keys(&[("threshold", "0.5"), ("mc_samples", "100000"), ("method", "formula")]),
        "width-sweep" => vec![
            ("d", "2000"),
            ("widths", "1,2,4,8"),
            ("gamma_over_p", "0.05"),
            ("delta", "0"),
            ("threshold", "0.5"),
            ("members", "50"),
            ("seed", "1"),
            ("mc_samples", "100000"),
            ("horizon_factor", "6"),
            ("stride", "10"),
        ],
        "second-layer" => vec![
            ("d", "1000"),
            ("p", "20"),
            ("gamma", "1"),
            ("delta", "0"),
            ("members", "30"),
            ("seed", "1"),
            ("level", "0.5"),
            ("horizon", "3"),
            ("stride", "20"),
        ],
        "landscape" => vec![("rho", "1"), ("delta", "0"), ("seed", "0")],
        "selftest" => vec![("seed", "1")],
        _ => Vec::new(),
    }
}

fn task(cfg: &Config) -> Result<TaskParams, CliError> {
    let params = TaskParams {
        d: cfg.get("d")?,
        p: cfg.get("p")?,
        gamma: cfg.get("gamma")?,
        delta: cfg.get("delta")?,
        spherical: cfg.get("spherical")?,
        train_a: cfg.get("train_a")?,
    };
    params.validate()?;
    Ok(params)
}

fn positive(cfg: &Config, key: &str) -> Result<f64, CliError> {
    let v: f64 = cfg.get(key)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::invalid(key, v, "must be positive").into())
    }
}

fn count(cfg: &Config, key: &str) -> Result<usize, CliError> {
    match cfg.get::<usize>(key)? {
        0 => Err(ConfigError::invalid(key, 0, "must be positive").into()),
        n => Ok(n),
    }
}

fn threshold(cfg: &Config, key: &str) -> Result<f64, CliError> {
    let t: f64 = cfg.get(key)?;
    if t > 0.0 && t < 1.0 {
        Ok(t)
    } else {
        Err(ConfigError::invalid(key, t, "must lie in (0, 1)").into())
    }
}

/// Record stride giving roughly one record per 0.01 time units.
fn auto_stride(dt: f64) -> u64 {
    ((0.01 / dt).round() as u64).max(1)
}

fn initial_state(cfg: &Config, params: &TaskParams) -> Result<OverlapState, CliError> {
    match cfg.get_opt::<f64>("m0")? {
        Some(m0) => {
            if params.p != 1 || !params.spherical {
                return Err(ConfigError::invalid("m0", m0, "only for spherical p = 1").into());
            }
            if m0.abs() > 1.0 {
                return Err(ConfigError::invalid("m0", m0, "must lie in [-1, 1]").into());
            }
            Ok(OverlapState::spherical_p1(m0))
        }
        None => Ok(init_overlaps(params.d, params.p, cfg.get_enum::<InitMode>("init")?, cfg.get("seed")?)?),
    }
}

#[derive(Serialize)]
struct ExitStats {
    threshold: f64,
    crossed: usize,
    mean: Option<f64>,
    se: Option<f64>,
    sd: Option<f64>,
}

fn exit_stats(members: &[Trajectory], threshold: f64, delta: f64) -> ExitStats {
    let times: Vec<f64> = members.iter().filter_map(|t| exit_time_numeric(t, threshold, delta).ok()).collect();
    let (mean, se) = mean_and_se(&times);
    let some = |v: f64| v.is_finite().then_some(v);
    ExitStats {
        threshold,
        crossed: times.len(),
        mean: some(mean),
        se: some(se),
        sd: (times.len() > 1).then(|| std_dev(&times)),
    }
}

fn final_point(curve: &MeanCurve) -> serde_json::Value {
    match curve.len() {
        0 => serde_json::Value::Null,
        n => json!({ "t": curve.t[n - 1], "mean": curve.mean[n - 1], "se": curve.se[n - 1] }),
    }
}

/// Writes members plus the mean curve; fails only if every member failed.
fn write_ensemble(out: &mut Artifacts, ens: &Ensemble, prefix: &str, sidecar: bool) -> Result<Report, CliError> {
    if ens.members.is_empty() {
        let first = ens.failures.first().map(|f| f.error.clone()).unwrap_or_default();
        return Err(CliError::Divergence(format!("every member failed, first: {first}")));
    }
    for (k, traj) in ens.members.iter().enumerate() {
        let name = format!("members/{prefix}_{k:03}");
        out.trajectory(&format!("{name}.csv"), traj)?;
        if sidecar {
            out.json(&format!("{name}.meta.json"), &traj.meta)?;
        }
    }
    out.series("risk.csv", ["t", "risk", "risk_se"], &ens.risk.t, &ens.risk.mean, &ens.risk.se)?;
    let notes = ens
        .failures
        .iter()
        .map(|f| format!("member {} (seed {}) failed: {}", f.index, f.seed, f.error))
        .collect::<Vec<_>>();
    Ok(Report {
        partial: !notes.is_empty(),
        notes,
    })
}

pub fn sgd(cfg: &Config, out: &mut Artifacts, par: Parallelism) -> Result<Report, CliError> {
    let params = task(cfg)?;
    let dt = params.sgd_time_step();
    let horizon = positive(cfg, "horizon")?;
    let stride = cfg.get_opt::<u64>("stride")?.unwrap_or_else(|| auto_stride(dt));
    let ens_cfg = SgdEnsembleConfig {
        params,
        members: count(cfg, "members")?,
        seed: cfg.get("seed")?,
        init: cfg.get_enum("init")?,
        init_policy: cfg.get_enum::<InitPolicy>("init_policy")?,
        second_layer: cfg.get_enum("second_layer")?,
        n_steps: (horizon / dt).ceil() as u64,
        stride: stride.max(1),
    };
    let ens = sgd_ensemble(&ens_cfg, par)?;
    let report = write_ensemble(out, &ens, "sgd", false)?;
    let t = threshold(cfg, "threshold")?;
    out.json(
        "summary.json",
        &json!({
            "kind": "sgd",
            "members": ens.members.len(),
            "failures": ens.failures,
            "final_risk": final_point(&ens.risk),
            "t_ext": exit_stats(&ens.members, t, params.delta),
        }),
    )?;
    Ok(report)
}

pub fn ode(cfg: &Config, out: &mut Artifacts, _par: Parallelism) -> Result<Report, CliError> {
    let params = task(cfg)?;
    let initial = initial_state(cfg, &params)?;
    let opts = IntegrateOptions {
        dt: positive(cfg, "dt")?,
        scheme: cfg.get_enum::<OdeScheme>("scheme")?,
        stride: Some(count(cfg, "stride")?),
    };
    let traj = integrate_with(&initial, &params, positive(cfg, "horizon")?, &opts)?;
    out.trajectory("ode.csv", &traj)?;
    let zeros = vec![0.0; traj.len()];
    out.series("risk.csv", ["t", "risk", "risk_se"], &traj.times(), &traj.risks(), &zeros)?;
    let t = threshold(cfg, "threshold")?;
    let last = traj.last().map(|r| r.risk).unwrap_or(f64::NAN);
    let plateau = (params.p == 1 && params.spherical && !params.train_a && params.gamma < 1.0 / 6.0)
        .then(|| params.gamma * params.delta / (1.0 - 6.0 * params.gamma));
    out.json(
        "summary.json",
        &json!({
            "kind": "ode",
            "final_risk": last,
            "final_excess_risk": last - params.delta / 2.0,
            "plateau_excess_prediction": plateau,
            "t_ext": exit_time_numeric(&traj, t, params.delta).ok(),
            "threshold": t,
        }),
    )?;
    Ok(Report::complete())
}

pub fn sde(cfg: &Config, out: &mut Artifacts, par: Parallelism) -> Result<Report, CliError> {
    let params = task(cfg)?;
    let initial = initial_state(cfg, &params)?;
    let dt = match cfg.get_opt::<f64>("dt")? {
        Some(dt) if dt > 0.0 => dt,
        Some(dt) => return Err(ConfigError::invalid("dt", dt, "must be positive").into()),
        None => default_sde_dt(&params),
    };
    let stride = cfg.get_opt::<usize>("stride")?.unwrap_or_else(|| auto_stride(dt) as usize);
    let ens_cfg = SdeEnsembleConfig {
        params,
        paths: count(cfg, "paths")?,
        seed: cfg.get("seed")?,
        dt,
        horizon: positive(cfg, "horizon")?,
        stride: Some(stride.max(1)),
    };
    let ens = sde_ensemble(&initial, &ens_cfg, par)?;
    let report = write_ensemble(out, &ens, "sde", true)?;
    let t = threshold(cfg, "threshold")?;
    out.json(
        "summary.json",
        &json!({
            "kind": "sde",
            "dt": dt,
            "paths": ens.members.len(),
            "failures": ens.failures,
            "final_risk": final_point(&ens.risk),
            "t_ext": exit_stats(&ens.members, t, params.delta),
        }),
    )?;
    Ok(report)
}

pub fn exit_time(cfg: &Config, out: &mut Artifacts, par: Parallelism) -> Result<Report, CliError> {
    let params = task(cfg)?;
    let t = threshold(cfg, "threshold")?;
    let method: Method = cfg.get_enum("method")?;
    let mut records = Vec::new();
    let mut notes = Vec::new();
    for mode in [Averaging::Annealed, Averaging::Quenched] {
        let est = exit_time_general_p(
            &ExitTimeQuery {
                threshold: t,
                params,
                mode,
                method,
                mc_samples: count(cfg, "mc_samples")?,
                seed: cfg.get("seed")?,
            },
            par,
        )?;
        records.push(ExitTimeRecord {
            mode: serde_json::to_value(mode).unwrap().as_str().unwrap_or("").to_string(),
            p: params.p,
            d: params.d,
            gamma: params.gamma,
            delta: params.delta,
            threshold: t,
            t_ext: est.value,
            se: est.se,
            method: serde_json::to_value(method).unwrap().as_str().unwrap_or("").to_string(),
            warnings: est.warnings,
        });
    }
    if params.p == 1 {
        match sde_exit_time_p1(t, params.d, params.gamma, params.delta) {
            Ok(v) => records.push(ExitTimeRecord {
                mode: "sde".into(),
                p: 1,
                d: params.d,
                gamma: params.gamma,
                delta: params.delta,
                threshold: t,
                t_ext: v,
                se: None,
                method: "formula".into(),
                warnings: Vec::new(),
            }),
            Err(e) => notes.push(format!("sde exit time unavailable: {e}")),
        }
    }
    for r in &records {
        println!("{:<9} t_ext = {:.6}{}", r.mode, r.t_ext, r.se.map(|s| format!(" ± {s:.6}")).unwrap_or_default());
    }
    let opt = gamma_opt(params.p, params.delta);
    let steps = annealed_steps(t, &params).ok();
    out.json(
        "summary.json",
        &json!({
            "kind": "exit-time",
            "records": records,
            "gamma_opt": opt,
            "annealed_steps": steps,
            "notes": notes,
        }),
    )?;
    Ok(Report { partial: false, notes })
}

pub fn width_sweep(cfg: &Config, out: &mut Artifacts, par: Parallelism) -> Result<Report, CliError> {
    let widths: Vec<usize> = cfg.get_list("widths")?;
    if widths.is_empty() || widths.contains(&0) {
        return Err(ConfigError::invalid("widths", cfg.get_raw("widths").unwrap_or(""), "need positive widths").into());
    }
    let table_cfg = ExitTableConfig {
        widths,
        d: cfg.get("d")?,
        gamma_over_p: positive(cfg, "gamma_over_p")?,
        delta: cfg.get("delta")?,
        threshold: threshold(cfg, "threshold")?,
        members: count(cfg, "members")?,
        seed: cfg.get("seed")?,
        mc_samples: count(cfg, "mc_samples")?,
        horizon_factor: positive(cfg, "horizon_factor")?,
        stride: count(cfg, "stride")? as u64,
    };
    let rows = exit_table(&table_cfg, par)?;
    let p: Vec<f64> = rows.iter().map(|r| r.p as f64).collect();
    let ratio: Vec<f64> = rows.iter().map(|r| r.ratio_annealed).collect();
    let ratio_err: Vec<f64> = rows.iter().map(|r| r.measured_se / r.annealed).collect();
    out.series("ratio_annealed.csv", ["p", "ratio", "ratio_se"], &p, &ratio, &ratio_err)?;
    let ratio: Vec<f64> = rows.iter().map(|r| r.ratio_quenched).collect();
    let ratio_err: Vec<f64> = rows.iter().map(|r| r.measured_se / r.quenched).collect();
    out.series("ratio_quenched.csv", ["p", "ratio", "ratio_se"], &p, &ratio, &ratio_err)?;
    for r in &rows {
        println!(
            "p = {:>3}  measured {:.4} ± {:.4}  annealed {:.4}  quenched {:.4}  ratios {:.3} / {:.3}",
            r.p, r.measured_mean, r.measured_se, r.annealed, r.quenched, r.ratio_annealed, r.ratio_quenched
        );
    }
    out.json("summary.json", &json!({ "kind": "width-sweep", "rows": rows }))?;
    let notes: Vec<String> = rows
        .iter()
        .flat_map(|r| r.failures.iter().map(move |f| format!("p = {}: member {} failed: {}", r.p, f.index, f.error)))
        .collect();
    Ok(Report {
        partial: !notes.is_empty(),
        notes,
    })
}

pub fn second_layer(cfg: &Config, out: &mut Artifacts, par: Parallelism) -> Result<Report, CliError> {
    let sl = SecondLayerConfig {
        d: cfg.get("d")?,
        p: cfg.get("p")?,
        gamma: positive(cfg, "gamma")?,
        delta: cfg.get("delta")?,
        members: count(cfg, "members")?,
        seed: cfg.get("seed")?,
        level: threshold(cfg, "level")?,
        horizon: positive(cfg, "horizon")?,
        stride: count(cfg, "stride")? as u64,
    };
    let cmp = second_layer_compare(&sl, par)?;
    let c = &cmp.fixed_curve;
    out.series("max_m_fixed.csv", ["t", "max_abs_m", "se"], &c.t, &c.mean, &c.se)?;
    let c = &cmp.trained_curve;
    out.series("max_m_trained.csv", ["t", "max_abs_m", "se"], &c.t, &c.mean, &c.se)?;
    out.json(
        "summary.json",
        &json!({
            "kind": "second-layer",
            "level": sl.level,
            "fixed": cmp.fixed,
            "trained": cmp.trained,
            "z_score": cmp.z_score(),
        }),
    )?;
    println!(
        "crossing of max|m| = {}: fixed {:.4} ± {:.4}, trained {:.4} ± {:.4}",
        sl.level, cmp.fixed.mean, cmp.fixed.se, cmp.trained.mean, cmp.trained.se
    );
    if cmp.fixed.times.is_empty() && cmp.trained.times.is_empty() {
        return Err(CliError::NoCrossing(format!("no member reached max|m| = {} within the horizon", sl.level)));
    }
    let notes: Vec<String> = [("fixed", &cmp.fixed), ("trained", &cmp.trained)]
        .iter()
        .flat_map(|(name, s)| s.failures.iter().map(move |f| format!("{name}: member {}: {}", f.index, f.error)))
        .collect();
    Ok(Report {
        partial: !notes.is_empty(),
        notes,
    })
}

pub fn landscape(cfg: &Config, out: &mut Artifacts, _par: Parallelism) -> Result<Report, CliError> {
    let report = medlab::landscape::classify_critical_points(positive(cfg, "rho")?, cfg.get("delta")?)?;
    for c in report.euclidean.iter().chain(&report.spherical) {
        println!("m = {:+.4} q = {:.4}: {:?}, risk {:.6}", c.location.m, c.location.q, c.kind, c.risk);
    }
    out.json("landscape.json", &report)?;
    Ok(Report::complete())
}

/// Quick internal consistency checks; a failing one makes the command fail.
pub fn selftest(cfg: &Config, out: &mut Artifacts, par: Parallelism) -> Result<Report, CliError> {
    let seed: u64 = cfg.get("seed")?;
    let mut checks: Vec<(String, bool, String)> = Vec::new();

    let om = medlab::OmegaMatrix::new(2, vec![1.0, 0.3, 0.3, 0.8])?;
    let idx = medlab::MonomialIndex::new([0usize, 0, 1, 1])?;
    let got = medlab::moments::wick_moment(&idx, &om)?;
    let want = 0.8 + 2.0 * 0.09;
    checks.push(("fourth moment".into(), (got - want).abs() < 1e-12, format!("{got} vs {want}")));

    let params = TaskParams::spherical(1000, 1, 0.1, 0.5);
    let traj = integrate_with(
        &OverlapState::spherical_p1(0.2),
        &params,
        40.0,
        &IntegrateOptions {
            dt: 1e-3,
            scheme: OdeScheme::Rk4,
            stride: Some(1000),
        },
    )?;
    let excess = traj.last().map(|r| r.risk).unwrap_or(f64::NAN) - 0.25;
    let want = 0.05 / 0.4;
    checks.push((
        "plateau excess".into(),
        ((excess - want) / want).abs() < 1e-6,
        format!("{excess} vs {want}"),
    ));

    let h = medlab::hypergeometric::hyp2f2(0.0, 1e-15)?;
    checks.push(("hyp2f2(0)".into(), h == 1.0, format!("{h}")));

    let land = medlab::landscape::classify_critical_points(1.0, 0.0);
    checks.push((
        "landscape classification".into(),
        land.is_ok(),
        land.map(|r| format!("{} + {} points", r.euclidean.len(), r.spherical.len()))
            .unwrap_or_else(|e| e.to_string()),
    ));

    let small = SgdEnsembleConfig {
        params: TaskParams::spherical(200, 2, 0.2, 0.1),
        members: 4,
        seed,
        init: InitMode::SphericalUniform,
        init_policy: InitPolicy::PerMember,
        second_layer: Default::default(),
        n_steps: 2000,
        stride: 100,
    };
    let a = sgd_ensemble(&small, Parallelism::Sequential)?;
    let b = sgd_ensemble(&small, par)?;
    checks.push((
        "parallel equals sequential".into(),
        a.risk == b.risk,
        format!("{} records", a.risk.len()),
    ));

    let init = init_overlaps(200, 2, InitMode::SphericalUniform, seed)?;
    let r = ode_reference(&init, &small.params, 1e-3, 1.0, 100)?;
    checks.push(("ode reference".into(), r.len() > 1, format!("{} records", r.len())));

    let mut ok = true;
    for (name, pass, detail) in &checks {
        println!("{} {name}: {detail}", if *pass { "PASS" } else { "FAIL" });
        ok &= *pass;
    }
    let rows: Vec<_> = checks
        .iter()
        .map(|(name, pass, detail)| json!({ "check": name, "pass": pass, "detail": detail }))
        .collect();
    out.json("summary.json", &json!({ "kind": "selftest", "checks": rows }))?;
    if ok {
        Ok(Report::complete())
    } else {
        Err(CliError::SelfTest(
            checks.iter().filter(|c| !c.1).map(|c| c.0.clone()).collect::<Vec<_>>().join(", "),
        ))
    }
}
