//! Exit times from the initial plateau.
//!
//! `t_ext` is the first time at which the excess risk `R − Δ/2` has dropped by
//! a relative fraction `T` from its initial value.

use nalgebra::{DMatrix, DVector};
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::{mean_and_se, Parallelism};
use crate::error::{Error, Result};
use crate::hypergeometric::hyp2f2;
use crate::ode::population_risk;
use crate::rng::{stream, Purpose, StreamRng};
use crate::state::{OverlapState, Scheme, TaskParams, Trajectory, TrajectoryMeta};

/// Monte Carlo samples per RNG chunk.
const CHUNK: usize = 10_000;

/// Default quenched sample count.
pub const DEFAULT_MC_SAMPLES: usize = 100_000;

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("threshold T must lie in (0, 1), got {t}")))
    }
}

/// First time the series `values` reaches `level`, by linear interpolation
/// between neighbouring records. `falling` selects the crossing direction.
pub fn first_crossing(times: &[f64], values: &[f64], level: f64, falling: bool) -> Option<f64> {
    let reached = |v: f64| if falling { v <= level } else { v >= level };
    let first = values.iter().position(|&v| reached(v))?;
    if first == 0 {
        return Some(times[0]);
    }
    let (t0, t1) = (times[first - 1], times[first]);
    let (v0, v1) = (values[first - 1], values[first]);
    Some(t0 + (t1 - t0) * (level - v0) / (v1 - v0))
}

/// Numeric exit time of a recorded trajectory.
pub fn exit_time_numeric(traj: &Trajectory, threshold: f64, delta: f64) -> Result<f64> {
    check_threshold(threshold)?;
    let first = traj
        .records()
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty trajectory".into()))?;
    let excess0 = first.risk - delta / 2.0;
    if !(excess0 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "initial excess risk must be positive, got {excess0}"
        )));
    }
    let excess: Vec<f64> = traj.records().iter().map(|r| r.risk - delta / 2.0).collect();
    first_crossing(&traj.times(), &excess, (1.0 - threshold) * excess0, true).ok_or_else(|| {
        Error::NoCrossing {
            final_ratio: excess.last().copied().unwrap_or(f64::NAN) / excess0,
        }
    })
}

/// `max_j |m_j(t)|` along a trajectory.
pub fn max_correlation(traj: &Trajectory) -> Vec<f64> {
    traj.records().iter().map(|r| r.state.max_abs_overlap()).collect()
}

/// First time `max_j |m_j|` reaches `level`.
pub fn max_correlation_crossing(traj: &Trajectory, level: f64) -> Result<f64> {
    let series = max_correlation(traj);
    first_crossing(&traj.times(), &series, level, false).ok_or_else(|| Error::NoCrossing {
        final_ratio: series.last().copied().unwrap_or(f64::NAN) / level,
    })
}

/// Growth and decay rates of the dynamics linearized at the saddle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearizedRates {
    /// `dm_j/dt = ω_M m_j`.
    pub omega_m: f64,
    /// `dQ_jl/dt = −ω_Q Q_jl` for `j ≠ l`.
    pub omega_q: f64,
    /// `p = 1` OU drift coefficient.
    pub mu: f64,
    /// `p = 1` OU variance per unit time at `m = 0`.
    pub sigma2: f64,
}

impl LinearizedRates {
    pub fn new(params: &TaskParams) -> Self {
        let p = params.p as f64;
        let (g, delta) = (params.gamma, params.delta);
        LinearizedRates {
            omega_m: 4.0 * (1.0 - g / p * (1.0 + 1.0 / p + 4.0 / (p * p) + delta / 2.0)),
            omega_q: 8.0 / p * (1.0 - 8.0 * g / (p * p)),
            mu: 4.0 * (1.0 - 6.0 * g) - 2.0 * g * delta,
            sigma2: params.sgd_time_step() * (48.0 + 4.0 * delta),
        }
    }
}

fn p1_rate(gamma: f64, delta: f64) -> Result<f64> {
    let rate = 8.0 * (1.0 - 6.0 * gamma) - 4.0 * gamma * delta;
    if rate > 0.0 {
        Ok(rate)
    } else {
        Err(Error::UnstableRate { rate })
    }
}

/// `log[T d + (1 − T)] / (8(1 − 6γ) − 4γΔ)`.
pub fn annealed_exit_time_p1(threshold: f64, d: f64, gamma: f64, delta: f64) -> Result<f64> {
    check_threshold(threshold)?;
    Ok((threshold * d + 1.0 - threshold).ln() / p1_rate(gamma, delta)?)
}

/// Monte Carlo mean with its standard error and sample accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub samples: usize,
    pub rejected: usize,
}

fn chunked_mc<F>(n: usize, seed: u64, par: Parallelism, draw: F) -> McEstimate
where
    F: Fn(&mut StreamRng) -> Option<f64> + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    let parts = par.map(chunks, |c| {
        let mut rng = stream(seed, Purpose::MonteCarlo, c as u64);
        let len = CHUNK.min(n - c * CHUNK);
        let mut vals = Vec::with_capacity(len);
        let mut rejected = 0;
        for _ in 0..len {
            match draw(&mut rng) {
                Some(v) => vals.push(v),
                None => rejected += 1,
            }
        }
        (vals, rejected)
    });
    let rejected = parts.iter().map(|p| p.1).sum();
    let all: Vec<f64> = parts.into_iter().flat_map(|p| p.0).collect();
    let (mean, se) = mean_and_se(&all);
    McEstimate {
        mean,
        se,
        samples: all.len(),
        rejected,
    }
}

/// `E[log(T d/μ₀ + 1 − T)] / (8(1 − 6γ) − 4γΔ)` with `μ₀ ∼ χ²(1)`.
pub fn quenched_exit_time_p1(
    threshold: f64,
    d: f64,
    gamma: f64,
    delta: f64,
    mc_samples: usize,
    seed: u64,
    par: Parallelism,
) -> Result<McEstimate> {
    check_threshold(threshold)?;
    let rate = p1_rate(gamma, delta)?;
    if mc_samples < 1000 {
        return Err(Error::InvalidParameter(format!("need at least 1000 samples, got {mc_samples}")));
    }
    Ok(chunked_mc(mc_samples, seed, par, |rng| {
        let g: f64 = StandardNormal.sample(rng);
        let mu0 = g * g;
        if mu0 == 0.0 {
            return None;
        }
        Some((threshold * d / mu0 + 1.0 - threshold).ln() / rate)
    }))
}

/// One draw of `(μ₀, τ₀)`.
///
/// The Gram matrix of `p + 1` standard Gaussian vectors in `ℝᵈ` is sampled
/// directly through the Bartlett decomposition of `Wishart(d, I)`; its
/// normalized entries are the inner products of independent uniform unit
/// vectors `v = u_0, u_1..u_p`. Cost is `O(p²)`, independent of `d`.
pub fn sample_pdp_with(d: usize, p: usize, rng: &mut StreamRng) -> (f64, f64) {
    let n = p + 1;
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let chi = ChiSquared::new((d - i) as f64).expect("positive degrees of freedom");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let g = &a * a.transpose();
    let c = |i: usize, j: usize| g[(i, j)] / (g[(i, i)] * g[(j, j)]).sqrt();
    let df = d as f64;
    let mu0 = df * (1..n).map(|j| c(0, j).powi(2)).sum::<f64>();
    let mut tau0 = 0.0;
    for j in 1..n {
        for l in (j + 1)..n {
            tau0 += c(j, l).powi(2);
        }
    }
    (mu0, 2.0 * df * tau0)
}

pub fn sample_pdp(d: usize, p: usize, seed: u64) -> Result<(f64, f64)> {
    if d <= p {
        return Err(Error::IllConditionedInit { d, p });
    }
    Ok(sample_pdp_with(d, p, &mut stream(seed, Purpose::MonteCarlo, 0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    Annealed,
    Quenched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Closed-form logarithm.
    Formula,
    /// Root of the linearized excess risk, found by bisection.
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitTimeQuery {
    pub threshold: f64,
    pub params: TaskParams,
    pub mode: Averaging,
    pub method: Method,
    pub mc_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitTimeEstimate {
    pub value: f64,
    pub se: Option<f64>,
    pub samples: usize,
    pub rejected: usize,
    pub warnings: Vec<String>,
}

/// Exit time at fixed `(μ₀, τ₀)` from the closed form.
pub fn quenched_integrand(threshold: f64, d: f64, p: usize, omega_m: f64, mu0: f64, tau0: f64) -> Option<f64> {
    let p = p as f64;
    let arg = (threshold * p * (p + 1.0) * d + (2.0 * mu0 * p - tau0) * (1.0 - threshold)) / (2.0 * mu0 * p);
    (arg > 0.0 && mu0 > 0.0).then(|| arg.ln() / (2.0 * omega_m))
}

/// Excess risk of the linearized dynamics.
pub fn linearized_excess_risk(t: f64, d: f64, p: usize, rates: &LinearizedRates, mu0: f64, tau0: f64) -> f64 {
    let p = p as f64;
    1.0 + 1.0 / p + tau0 / (d * p * p) * (-2.0 * rates.omega_q * t).exp()
        - 2.0 * mu0 / (d * p) * (2.0 * rates.omega_m * t).exp()
}

/// Root of the linearized crossing equation at fixed `(μ₀, τ₀)`.
pub fn linearized_root(threshold: f64, d: f64, p: usize, rates: &LinearizedRates, mu0: f64, tau0: f64) -> Option<f64> {
    let f = |t: f64| linearized_excess_risk(t, d, p, rates, mu0, tau0);
    let target = (1.0 - threshold) * f(0.0);
    let mut hi = 1.0 / rates.omega_m;
    let mut guard = 0;
    while f(hi) > target {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Annealed or quenched exit time for general width.
pub fn exit_time_general_p(query: &ExitTimeQuery, par: Parallelism) -> Result<ExitTimeEstimate> {
    check_threshold(query.threshold)?;
    let params = query.params;
    params.validate()?;
    let rates = LinearizedRates::new(&params);
    if rates.omega_m <= 0.0 {
        return Err(Error::UnstableRate { rate: rates.omega_m });
    }
    let mut warnings = Vec::new();
    if params.p > 1 && rates.omega_q <= 0.0 {
        let w = format!("omega_Q = {} <= 0: off-diagonal overlaps grow and the formula is unreliable", rates.omega_q);
        log::warn!("{w}");
        warnings.push(w);
    }
    let (t, d, p) = (query.threshold, params.d as f64, params.p);
    let pf = p as f64;
    let point = |mu0: f64, tau0: f64| match query.method {
        Method::Formula => quenched_integrand(t, d, p, rates.omega_m, mu0, tau0),
        Method::Numeric => linearized_root(t, d, p, &rates, mu0, tau0),
    };
    match query.mode {
        Averaging::Annealed => {
            let value = point(pf, pf * (pf - 1.0)).ok_or(Error::UnstableRate { rate: rates.omega_m })?;
            Ok(ExitTimeEstimate {
                value,
                se: None,
                samples: 0,
                rejected: 0,
                warnings,
            })
        }
        Averaging::Quenched => {
            if params.d <= p {
                return Err(Error::IllConditionedInit { d: params.d, p });
            }
            let est = chunked_mc(query.mc_samples, query.seed, par, |rng| {
                let (mu0, tau0) = sample_pdp_with(params.d, p, rng);
                point(mu0, tau0)
            });
            if est.rejected > 0 {
                let w = format!("{} of {} draws had a non-positive log argument and were rejected", est.rejected, query.mc_samples);
                log::warn!("{w}");
                warnings.push(w);
            }
            Ok(ExitTimeEstimate {
                value: est.mean,
                se: Some(est.se),
                samples: est.samples,
                rejected: est.rejected,
                warnings,
            })
        }
    }
}

/// Annealed formula, `log[(T(p+1)d + (p+1)(1−T))/(2p)] / (2ω_M)`.
pub fn annealed_exit_time(threshold: f64, params: &TaskParams) -> Result<f64> {
    check_threshold(threshold)?;
    let rates = LinearizedRates::new(params);
    if rates.omega_m <= 0.0 {
        return Err(Error::UnstableRate { rate: rates.omega_m });
    }
    let (p, d) = (params.p as f64, params.d as f64);
    Ok(((threshold * (p + 1.0) * d + (p + 1.0) * (1.0 - threshold)) / (2.0 * p)).ln() / (2.0 * rates.omega_m))
}

/// Linearized trajectory `m_j(t) = m_j(0) e^{ω_M t}`, `Q_jl(t) = Q_jl(0) e^{−ω_Q t}`,
/// sampled every `dt` up to `horizon`.
pub fn linearized_trajectory(params: &TaskParams, initial: &OverlapState, dt: f64, horizon: f64) -> Result<Trajectory> {
    if !(dt > 0.0 && horizon > 0.0) {
        return Err(Error::InvalidParameter("dt and horizon must be positive".into()));
    }
    let rates = LinearizedRates::new(params);
    let p = params.p;
    let n = (horizon / dt).ceil() as usize;
    let mut traj = Trajectory::new(TrajectoryMeta {
        params: *params,
        dt,
        scheme: Scheme::Euler,
        seed: None,
        stride: 1,
    });
    for k in 0..=n {
        let t = k as f64 * dt;
        let grow = (rates.omega_m * t).exp();
        let decay = (-rates.omega_q * t).exp();
        let state = OverlapState {
            a: initial.a.clone(),
            m: &initial.m * grow,
            q: DMatrix::from_fn(p, p, |j, l| if j == l { initial.q[(j, j)] } else { initial.q[(j, l)] * decay }),
            rho: initial.rho,
        };
        let risk = population_risk(&state, params.delta);
        traj.push(t, state, risk);
    }
    Ok(traj)
}

/// `m_j(0) = Q_jl(0) = 1/√d`: the point whose `(μ₀, τ₀)` equal their means.
pub fn annealed_initial_state(p: usize, d: f64) -> OverlapState {
    let s = 1.0 / d.sqrt();
    OverlapState {
        a: DVector::from_element(p, 1.0),
        m: DVector::from_element(p, s),
        q: DMatrix::from_fn(p, p, |j, l| if j == l { 1.0 } else { s }),
        rho: 1.0,
    }
}

/// `γ_opt = p³ / (8 + 2p + (2 + Δ)p²)`.
pub fn gamma_opt(p: usize, delta: f64) -> f64 {
    let p = p as f64;
    p.powi(3) / (8.0 + 2.0 * p + (2.0 + delta) * p * p)
}

/// Annealed number of SGD steps to exit, `(pd/γ) t_ext`.
pub fn annealed_steps(threshold: f64, params: &TaskParams) -> Result<f64> {
    Ok(params.p as f64 * params.d as f64 / params.gamma * annealed_exit_time(threshold, params)?)
}

/// `(s_min, gain_limit)`: annealed steps at `γ_opt`, and `(12 + Δ)/(2 + Δ)`.
pub fn min_steps_and_gain(p: usize, d: f64, delta: f64, threshold: f64) -> (f64, f64) {
    let pf = p as f64;
    let log = ((threshold * (pf + 1.0) * d + (pf + 1.0) * (1.0 - threshold)) / (2.0 * pf)).ln();
    let s_min = d * (8.0 + 2.0 * pf + (2.0 + delta) * pf * pf) * log / (4.0 * pf * pf);
    (s_min, (12.0 + delta) / (2.0 + delta))
}

/// Mean first exit of the linearized OU process from `(−√T, √T)`, starting at 0.
pub fn sde_exit_time_p1(threshold: f64, d: usize, gamma: f64, delta: f64) -> Result<f64> {
    check_threshold(threshold)?;
    if threshold > 0.1 {
        log::warn!("T = {threshold} > 0.1: the OU linearization is unreliable this far from the saddle");
    }
    let rates = LinearizedRates::new(&TaskParams::spherical(d, 1, gamma, delta));
    if !(rates.sigma2 > 0.0) {
        return Err(Error::DegenerateDiffusion);
    }
    let z = -rates.mu / rates.sigma2 * threshold;
    Ok(threshold / rates.sigma2 * hyp2f2(z, 1e-14)?)
}

/// JSON record for one exit-time evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitTimeRecord {
    pub mode: String,
    pub p: usize,
    pub d: usize,
    pub gamma: f64,
    pub delta: f64,
    #[serde(rename = "T")]
    pub threshold: f64,
    pub t_ext: f64,
    pub se: Option<f64>,
    pub method: String,
    pub warnings: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::Trajectory;
    use rand::Rng;
    use proptest::prelude::*;

    fn synthetic(delta: f64) -> Trajectory {
        let mut traj = Trajectory::new(TrajectoryMeta {
            params: TaskParams::spherical(10, 1, 0.1, delta),
            dt: 1e-3,
            scheme: Scheme::Euler,
            seed: None,
            stride: 1,
        });
        for k in 0..=3000 {
            let t = k as f64 * 1e-3;
            traj.push(t, OverlapState::saddle(1), delta / 2.0 + (-t).exp());
        }
        traj
    }

    #[test]
    fn synthetic_exponential_decay() {
        let traj = synthetic(0.4);
        let t = exit_time_numeric(&traj, 1.0 - (-1.0f64).exp(), 0.4).unwrap();
        assert!((t - 1.0).abs() < 1e-6);
        let small = exit_time_numeric(&traj, 1e-9, 0.4).unwrap();
        assert!(small < 1e-6);
    }

    #[test]
    fn never_crossing_reports_ratio() {
        let traj = synthetic(0.0);
        match exit_time_numeric(&traj, 0.999, 0.0) {
            Err(Error::NoCrossing { final_ratio }) => assert!((final_ratio - (-3.0f64).exp()).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn annealed_p1_known_values() {
        let v = annealed_exit_time_p1(0.5, 1000.0, 0.05, 0.0).unwrap();
        assert!((v - 500.5f64.ln() / 5.6).abs() < 1e-12);
        assert!((v - 1.1099).abs() < 1e-4);
        assert!(matches!(annealed_exit_time_p1(0.5, 1000.0, 0.2, 0.0), Err(Error::UnstableRate { .. })));
        let d = 1e12;
        let ratio = annealed_exit_time_p1(0.5, d, 0.0, 0.0).unwrap() / (0.5 * d).ln();
        assert!((ratio - 1.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn general_p_reduces_to_p1() {
        let mut rng = stream(1, Purpose::MonteCarlo, 0);
        for _ in 0..20 {
            let g: f64 = rng.random_range(0.0..0.15);
            let delta: f64 = rng.random_range(0.0..2.0);
            let params = TaskParams::spherical(5000, 1, g, delta);
            let a = annealed_exit_time(0.3, &params).unwrap();
            let b = annealed_exit_time_p1(0.3, 5000.0, g, delta).unwrap();
            assert!((a - b).abs() < 1e-12 * b);
        }
    }

    #[test]
    fn general_p_known_value() {
        let params = TaskParams::spherical(1000, 4, 0.0, 0.0);
        let v = annealed_exit_time(0.5, &params).unwrap();
        assert!((v - 312.8125f64.ln() / 8.0).abs() < 1e-12);
        assert!((v - 0.7182).abs() < 1e-4);
    }

    #[test]
    fn query_annealed_matches_direct() {
        let params = TaskParams::spherical(2000, 3, 0.1, 0.5);
        let q = ExitTimeQuery {
            threshold: 0.4,
            params,
            mode: Averaging::Annealed,
            method: Method::Formula,
            mc_samples: 0,
            seed: 0,
        };
        let v = exit_time_general_p(&q, Parallelism::Sequential).unwrap();
        assert!((v.value - annealed_exit_time(0.4, &params).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pdp_moments() {
        for p in [1usize, 3] {
            let d = 50;
            let n = 100_000;
            let mut rng = stream(2, Purpose::MonteCarlo, p as u64);
            let draws: Vec<(f64, f64)> = (0..n).map(|_| sample_pdp_with(d, p, &mut rng)).collect();
            let (mu, se_mu) = mean_and_se(&draws.iter().map(|x| x.0).collect::<Vec<_>>());
            let (tau, se_tau) = mean_and_se(&draws.iter().map(|x| x.1).collect::<Vec<_>>());
            assert!((mu - p as f64).abs() < 4.0 * se_mu, "p={p} mu={mu}");
            if p == 1 {
                assert!(draws.iter().all(|x| x.1 == 0.0));
            } else {
                assert!((tau - (p * (p - 1)) as f64).abs() < 4.0 * se_tau, "p={p} tau={tau}");
            }
        }
    }

    #[test]
    fn pdp_matches_explicit_vectors() {
        // Distributional check of the Bartlett shortcut against explicit
        // sphere samples: compare the mean of μ₀² (a fourth moment).
        let (d, p, n) = (12, 2, 40_000);
        let mut rng = stream(3, Purpose::MonteCarlo, 0);
        let fast: Vec<f64> = (0..n).map(|_| sample_pdp_with(d, p, &mut rng).0.powi(2)).collect();
        let mut rng = stream(3, Purpose::MonteCarlo, 1);
        let slow: Vec<f64> = (0..n)
            .map(|_| {
                let mut unit = || {
                    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
                };
                let v = unit();
                let mut mu = 0.0;
                for _ in 0..p {
                    let u = unit();
                    mu += u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().powi(2);
                }
                (d as f64 * mu).powi(2)
            })
            .collect();
        let (a, sa) = mean_and_se(&fast);
        let (b, sb) = mean_and_se(&slow);
        assert!((a - b).abs() < 4.0 * (sa * sa + sb * sb).sqrt(), "{a} vs {b}");
    }

    #[test]
    fn quenched_above_annealed_and_gap_is_d_independent() {
        let q3 = quenched_exit_time_p1(0.5, 1e3, 0.05, 0.0, 100_000, 1, Parallelism::Sequential).unwrap();
        let a3 = annealed_exit_time_p1(0.5, 1e3, 0.05, 0.0).unwrap();
        assert!(q3.mean - a3 > 3.0 * q3.se);
        let q6 = quenched_exit_time_p1(0.5, 1e6, 0.05, 0.0, 100_000, 2, Parallelism::Sequential).unwrap();
        let a6 = annealed_exit_time_p1(0.5, 1e6, 0.05, 0.0).unwrap();
        let diff = (q6.mean - a6) - (q3.mean - a3);
        assert!(diff.abs() < 3.0 * (q3.se.powi(2) + q6.se.powi(2)).sqrt() + 0.01, "gap moved by {diff}");
    }

    #[test]
    fn monte_carlo_is_worker_independent() {
        let a = quenched_exit_time_p1(0.3, 1e4, 0.05, 0.1, 35_000, 9, Parallelism::Sequential).unwrap();
        let b = quenched_exit_time_p1(0.3, 1e4, 0.05, 0.1, 35_000, 9, Parallelism::Workers(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn se_shrinks_with_samples() {
        let a = quenched_exit_time_p1(0.3, 1e4, 0.05, 0.0, 10_000, 4, Parallelism::Sequential).unwrap();
        let b = quenched_exit_time_p1(0.3, 1e4, 0.05, 0.0, 160_000, 4, Parallelism::Sequential).unwrap();
        let r = a.se / b.se;
        assert!(r > 3.0 && r < 5.3, "ratio {r}");
    }

    #[test]
    fn gamma_opt_limits() {
        assert!((gamma_opt(1, 0.0) - 1.0 / 12.0).abs() < 1e-15);
        assert!((gamma_opt(1, 3.0) - 1.0 / 15.0).abs() < 1e-15);
        assert!((gamma_opt(1_000_000, 0.0) / 1e6 - 0.5).abs() < 1e-5);
    }

    #[test]
    fn gamma_opt_minimizes_steps() {
        for p in [1usize, 2, 5] {
            let g = gamma_opt(p, 0.0);
            let steps = |gamma| annealed_steps(0.5, &TaskParams::spherical(10_000, p, gamma, 0.0)).unwrap();
            assert!(steps(g * 1.01) >= steps(g));
            assert!(steps(g * 0.99) >= steps(g));
        }
    }

    #[test]
    fn gain_limits() {
        assert_eq!(min_steps_and_gain(3, 1e4, 0.0, 0.5).1, 6.0);
        assert!((min_steps_and_gain(3, 1e4, 1e9, 0.5).1 - 1.0).abs() < 1e-8);
        let (s1, _) = min_steps_and_gain(1, 1e8, 0.0, 0.5);
        let (sp, _) = min_steps_and_gain(10_000, 1e8, 0.0, 0.5);
        assert!((s1 / sp / 6.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn ou_exit_limits() {
        assert!(matches!(sde_exit_time_p1(0.05, 1000, 0.0, 0.0), Err(Error::DegenerateDiffusion)));
        // μ T/σ² → 0: pure Brownian exit T/σ².
        let g = 1.0 / 6.0 - 1e-12;
        let rates = LinearizedRates::new(&TaskParams::spherical(1000, 1, g, 0.0));
        let t = sde_exit_time_p1(0.05, 1000, g, 0.0).unwrap();
        assert!((t - 0.05 / rates.sigma2).abs() < 1e-6 * t);
        let mut prev = 0.0;
        for d in [100, 1000, 10_000, 100_000] {
            let t = sde_exit_time_p1(0.05, d, 0.05, 0.0).unwrap();
            assert!(t > prev);
            prev = t;
        }
    }

    #[test]
    fn linearized_root_matches_formula() {
        let params = TaskParams::spherical(1_000_000, 3, 0.1, 0.3);
        let rates = LinearizedRates::new(&params);
        let (mu0, tau0) = (2.5, 4.0);
        let root = linearized_root(0.3, 1e6, 3, &rates, mu0, tau0).unwrap();
        let formula = quenched_integrand(0.3, 1e6, 3, rates.omega_m, mu0, tau0).unwrap();
        assert!((root / formula - 1.0).abs() < 1e-3);
    }

    #[test]
    fn max_correlation_upcrossing() {
        let mut traj = Trajectory::new(TrajectoryMeta {
            params: TaskParams::spherical(10, 2, 0.1, 0.0),
            dt: 1.0,
            scheme: Scheme::Sgd,
            seed: None,
            stride: 1,
        });
        for k in 0..5 {
            let mut s = OverlapState::saddle(2);
            s.m[1] = -0.2 * k as f64;
            traj.push(k as f64, s, 0.0);
        }
        assert_eq!(max_correlation(&traj)[2], 0.4);
        assert!((max_correlation_crossing(&traj, 0.5).unwrap() - 2.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn monotone_in_gamma_and_delta(g in 0.0f64..0.12, dg in 0.001f64..0.02, delta in 0.0f64..2.0, dd in 0.01f64..1.0) {
            let a = annealed_exit_time_p1(0.3, 1e5, g, delta).unwrap();
            prop_assert!(annealed_exit_time_p1(0.3, 1e5, g + dg, delta).unwrap() > a);
            prop_assert!(annealed_exit_time_p1(0.3, 1e5, g, delta + dd).unwrap() > a);
        }

        #[test]
        fn log_d_scaling(g in 0.0f64..0.1, delta in 0.0f64..1.0) {
            let r6 = annealed_exit_time_p1(0.5, 1e6, g, delta).unwrap() / 1e6f64.ln();
            let r9 = annealed_exit_time_p1(0.5, 1e9, g, delta).unwrap() / 1e9f64.ln();
            prop_assert!((r6 / r9 - 1.0).abs() < 0.02);
        }
    }
}
