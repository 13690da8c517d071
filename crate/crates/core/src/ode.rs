//! Deterministic high-dimensional limit of the overlap process.
//!
//! With `r = λ⋆² + √Δ z − (1/p) Σ_s a_s λ_s²` the residual of one sample
//! (label minus prediction), one SGD step moves the overlaps by `γ/(pd)`
//! times
//!
//! ```text
//! a_j  : r λ_j²
//! m_j  : 𝓜_j  = 2 a_j r λ_j λ⋆
//! Q_jl : 𝓠_jl = 2 (a_j + a_l) r λ_j λ_l + (4γ/p) a_j a_l r² λ_j λ_l
//! ```
//!
//! and the ODE drift is the Gaussian expectation of these quantities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{MomentPlan, MonomialIndex};
use crate::sgd::{StudentNetwork, TeacherModel};
use crate::state::{OverlapState, Scheme, TaskParams, Trajectory, TrajectoryMeta};

/// Records kept by default before striding kicks in.
pub const DEFAULT_MAX_RECORDS: usize = 100_000;

/// Default step in rescaled time.
pub const DEFAULT_DT: f64 = 1e-3;

/// Population risk `E[r²]/2` as a function of the overlaps.
///
/// For `ρ = 1` this is
/// `(Δ+3)/2 − (1/p)Σ a_j(Q_jj + 2m_j²) + (1/2p²)Σ a_j a_l(Q_jj Q_ll + 2Q_jl²)`.
pub fn population_risk(state: &OverlapState, delta: f64) -> f64 {
    let p = state.width();
    let pf = p as f64;
    let rho = state.rho;
    let mut linear = 0.0;
    let mut quadratic = 0.0;
    for j in 0..p {
        linear += state.a[j] * (rho * state.q[(j, j)] + 2.0 * state.m[j].powi(2));
        for l in 0..p {
            quadratic += state.a[j]
                * state.a[l]
                * (state.q[(j, j)] * state.q[(l, l)] + 2.0 * state.q[(j, l)].powi(2));
        }
    }
    (delta + 3.0 * rho * rho) / 2.0 - linear / pf + quadratic / (2.0 * pf * pf)
}

/// Expected per-step displacements (in units of `γ/(pd)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    /// `E[r λ_j²]`, the second-layer drift.
    pub da: DVector<f64>,
    /// `Ψ_j = E[𝓜_j]`.
    pub psi: DVector<f64>,
    /// `Φ_jl = E[𝓠_jl]`.
    pub phi: DMatrix<f64>,
}

/// Time derivative of a full overlap state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub da: DVector<f64>,
    pub dm: DVector<f64>,
    pub dq: DMatrix<f64>,
}

/// Compiled moment tables for a fixed width.
///
/// All moments required by the drift are compiled into one [`MomentPlan`];
/// the tables below hold each moment's slot in the evaluated vector.
#[derive(Debug, Clone)]
pub struct DriftEngine {
    p: usize,
    plan: MomentPlan,
    // E[λ_s² λ_j²]
    ss_jj: Vec<usize>,
    // E[λ⋆² λ_j²]
    tt_jj: Vec<usize>,
    // E[λ⋆³ λ_j]
    ttt_j: Vec<usize>,
    // E[λ_s² λ_j λ⋆]
    ss_jt: Vec<usize>,
    // E[λ⋆² λ_j λ_l]
    tt_jl: Vec<usize>,
    // E[λ_s² λ_j λ_l]
    ss_jl: Vec<usize>,
    // E[λ⋆⁴ λ_j λ_l]
    tttt_jl: Vec<usize>,
    // E[λ⋆² λ_s² λ_j λ_l]
    ttss_jl: Vec<usize>,
    // E[λ_s² λ_u² λ_j λ_l] over s ≤ u, j ≤ l
    ssuu_jl: Vec<usize>,
}

struct Interner {
    monomials: Vec<MonomialIndex>,
    lookup: std::collections::HashMap<MonomialIndex, usize>,
}

impl Interner {
    fn id(&mut self, powers: &[(usize, usize)]) -> usize {
        let m = MonomialIndex::from_powers(powers).expect("drift monomials have degree <= 6");
        if let Some(&i) = self.lookup.get(&m) {
            return i;
        }
        self.monomials.push(m.clone());
        self.lookup.insert(m, self.monomials.len() - 1);
        self.monomials.len() - 1
    }
}

fn pair_index(p: usize, j: usize, l: usize) -> usize {
    let (j, l) = if j <= l { (j, l) } else { (l, j) };
    j * p - j * (j + 1) / 2 + l
}

impl DriftEngine {
    pub fn new(p: usize) -> Self {
        assert!(p > 0);
        let t = p;
        let pairs = p * (p + 1) / 2;
        let mut it = Interner {
            monomials: Vec::new(),
            lookup: Default::default(),
        };
        let mut ss_jj = Vec::with_capacity(p * p);
        let mut ss_jt = Vec::with_capacity(p * p);
        for s in 0..p {
            for j in 0..p {
                ss_jj.push(it.id(&[(s, 2), (j, 2)]));
                ss_jt.push(it.id(&[(s, 2), (j, 1), (t, 1)]));
            }
        }
        let tt_jj = (0..p).map(|j| it.id(&[(t, 2), (j, 2)])).collect();
        let ttt_j = (0..p).map(|j| it.id(&[(t, 3), (j, 1)])).collect();
        let mut tt_jl = vec![0; pairs];
        let mut tttt_jl = vec![0; pairs];
        let mut ss_jl = vec![0; p * pairs];
        let mut ttss_jl = vec![0; p * pairs];
        let mut ssuu_jl = vec![0; pairs * pairs];
        for j in 0..p {
            for l in j..p {
                let jl = pair_index(p, j, l);
                tt_jl[jl] = it.id(&[(t, 2), (j, 1), (l, 1)]);
                tttt_jl[jl] = it.id(&[(t, 4), (j, 1), (l, 1)]);
                for s in 0..p {
                    ss_jl[s * pairs + jl] = it.id(&[(s, 2), (j, 1), (l, 1)]);
                    ttss_jl[s * pairs + jl] = it.id(&[(t, 2), (s, 2), (j, 1), (l, 1)]);
                    for u in s..p {
                        let su = pair_index(p, s, u);
                        ssuu_jl[su * pairs + jl] = it.id(&[(s, 2), (u, 2), (j, 1), (l, 1)]);
                    }
                }
            }
        }
        let plan = MomentPlan::new(p + 1, &it.monomials).expect("valid drift monomials");
        DriftEngine {
            p,
            plan,
            ss_jj,
            tt_jj,
            ttt_j,
            ss_jt,
            tt_jl,
            ss_jl,
            tttt_jl,
            ttss_jl,
            ssuu_jl,
        }
    }

    pub fn width(&self) -> usize {
        self.p
    }

    /// `(E[r λ_j²], Ψ, Φ)` at `state`.
    pub fn drift(&self, state: &OverlapState, params: &TaskParams) -> Result<Drift> {
        let p = self.p;
        if state.width() != p {
            return Err(Error::InvalidState(format!(
                "state width {} does not match engine width {p}",
                state.width()
            )));
        }
        let omega = state.omega()?;
        let mom = self.plan.evaluate(&omega);
        let pf = p as f64;
        let pairs = p * (p + 1) / 2;
        let a = &state.a;

        let mut da = DVector::zeros(p);
        let mut psi = DVector::zeros(p);
        for j in 0..p {
            let mut sa = 0.0;
            let mut sd = 0.0;
            for s in 0..p {
                sa += a[s] * mom[self.ss_jj[s * p + j]];
                sd += a[s] * mom[self.ss_jt[s * p + j]];
            }
            da[j] = mom[self.tt_jj[j]] - sa / pf;
            psi[j] = 2.0 * a[j] * (mom[self.ttt_j[j]] - sd / pf);
        }

        let mut phi = DMatrix::zeros(p, p);
        for j in 0..p {
            for l in j..p {
                let jl = pair_index(p, j, l);
                let mut r1 = mom[self.tt_jl[jl]];
                let mut r2_lin = 0.0;
                for s in 0..p {
                    r1 -= a[s] * mom[self.ss_jl[s * pairs + jl]] / pf;
                    r2_lin += a[s] * mom[self.ttss_jl[s * pairs + jl]];
                }
                let mut r2_quad = 0.0;
                for s in 0..p {
                    for u in s..p {
                        let w = if s == u { 1.0 } else { 2.0 };
                        r2_quad += w * a[s] * a[u] * mom[self.ssuu_jl[pair_index(p, s, u) * pairs + jl]];
                    }
                }
                let r2 = mom[self.tttt_jl[jl]] - 2.0 * r2_lin / pf
                    + r2_quad / (pf * pf)
                    + params.delta * state.q[(j, l)];
                let v = 2.0 * (a[j] + a[l]) * r1 + 4.0 * params.gamma / pf * a[j] * a[l] * r2;
                phi[(j, l)] = v;
                phi[(l, j)] = v;
            }
        }
        Ok(Drift { da, psi, phi })
    }

    /// Full right-hand side, projected onto the sphere when requested.
    pub fn derivative(&self, state: &OverlapState, params: &TaskParams) -> Result<StateDerivative> {
        let drift = self.drift(state, params)?;
        let (dm, dq) = if params.spherical {
            spherical_project(&drift.psi, &drift.phi, state)
        } else {
            (drift.psi, drift.phi)
        };
        let da = if params.train_a {
            drift.da
        } else {
            DVector::zeros(self.p)
        };
        Ok(StateDerivative { da, dm, dq })
    }
}

/// One-shot drift evaluation. Prefer a cached [`DriftEngine`] in loops.
pub fn drift(state: &OverlapState, params: &TaskParams) -> Result<Drift> {
    DriftEngine::new(state.width()).drift(state, params)
}

/// Unconstrained `(dm/dt, dQ/dt)` from the closed matrix form valid for `a = 1`.
pub fn matrix_drift_a1(
    state: &OverlapState,
    params: &TaskParams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if state.a.iter().any(|&a| a != 1.0) {
        return Err(Error::UnsupportedConfiguration(
            "matrix-form drift requires a_j = 1 for every neuron".into(),
        ));
    }
    let p = state.width() as f64;
    let rho = state.rho;
    let m = &state.m;
    let q = &state.q;
    let tr = q.trace();
    let q2 = q * q;
    let q3 = &q2 * q;
    let mm = m * m.transpose();
    let qm = q * m;
    let mtm = m.dot(m);

    let dm = m * (2.0 * (rho - tr / p)) + (m * rho - &qm / p) * 4.0;

    let base = q * (4.0 * (rho - tr / p)) + (&mm - &q2 / p) * 8.0;
    let teacher = q * (3.0 * rho * rho) + &mm * (12.0 * rho);
    let student = (q * (tr * tr + 2.0 * q2.trace()) + &q2 * (4.0 * tr) + &q3 * 8.0) / (p * p);
    let mixed = (q * (rho * tr + 2.0 * mtm)
        + &mm * (2.0 * tr)
        + &q2 * (2.0 * rho)
        + (&mm * q + q * &mm) * 4.0)
        * (2.0 / p);
    let noise = q * params.delta;
    let dq = base + (teacher + student - mixed + noise) * (4.0 * params.gamma / p);
    Ok((dm, dq))
}

/// Projects unconstrained drifts onto the product of spheres.
///
/// `dm_j = Ψ_j − (m_j/2) Φ_jj`, `dQ_jl = Φ_jl − (Q_jl/2)(Φ_jj + Φ_ll)`; the
/// diagonal of `dQ` is set to exactly zero.
pub fn spherical_project(
    psi: &DVector<f64>,
    phi: &DMatrix<f64>,
    state: &OverlapState,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = state.width();
    let dm = DVector::from_fn(p, |j, _| psi[j] - 0.5 * state.m[j] * phi[(j, j)]);
    let dq = DMatrix::from_fn(p, p, |j, l| {
        if j == l {
            0.0
        } else {
            phi[(j, l)] - 0.5 * state.q[(j, l)] * (phi[(j, j)] + phi[(l, l)])
        }
    });
    (dm, dq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OdeScheme {
    Euler,
    Rk4,
}

impl From<OdeScheme> for Scheme {
    fn from(s: OdeScheme) -> Scheme {
        match s {
            OdeScheme::Euler => Scheme::Euler,
            OdeScheme::Rk4 => Scheme::Rk4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrateOptions {
    pub dt: f64,
    pub scheme: OdeScheme,
    /// Record every `stride`-th step; `None` keeps at most
    /// [`DEFAULT_MAX_RECORDS`] records.
    pub stride: Option<usize>,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            dt: DEFAULT_DT,
            scheme: OdeScheme::Rk4,
            stride: None,
        }
    }
}

pub(crate) fn default_stride(n_steps: usize) -> usize {
    n_steps.div_ceil(DEFAULT_MAX_RECORDS).max(1)
}

pub(crate) fn advance(state: &OverlapState, k: &StateDerivative, h: f64) -> OverlapState {
    OverlapState {
        a: &state.a + &k.da * h,
        m: &state.m + &k.dm * h,
        q: &state.q + &k.dq * h,
        rho: state.rho,
    }
}

/// Post-step normalization and invariant checks shared by the ODE and SDE.
pub(crate) fn check_step(state: &mut OverlapState, spherical: bool) -> std::result::Result<(), String> {
    state.normalize(spherical);
    if !state.is_finite() {
        return Err("non-finite state".into());
    }
    for j in 0..state.width() {
        let bound = (state.q[(j, j)].max(0.0) * state.rho).sqrt() + 1e-8;
        if state.m[j].abs() > bound {
            return Err(format!("|m_{}| = {} exceeds {}", j + 1, state.m[j].abs(), bound));
        }
    }
    Ok(())
}

/// Integrates the ODE from `initial` up to `horizon`.
pub fn integrate(
    initial: &OverlapState,
    params: &TaskParams,
    dt: f64,
    horizon: f64,
    scheme: OdeScheme,
) -> Result<Trajectory> {
    integrate_with(
        initial,
        params,
        horizon,
        &IntegrateOptions {
            dt,
            scheme,
            stride: None,
        },
    )
}

pub fn integrate_with(
    initial: &OverlapState,
    params: &TaskParams,
    horizon: f64,
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    params.validate()?;
    if !(opts.dt > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "dt and horizon must be positive (dt = {}, horizon = {horizon})",
            opts.dt
        )));
    }
    if initial.width() != params.p {
        return Err(Error::InvalidState(format!(
            "state width {} but p = {}",
            initial.width(),
            params.p
        )));
    }
    initial.validate(params.spherical)?;
    let engine = DriftEngine::new(params.p);
    let n_steps = (horizon / opts.dt - 1e-9).ceil().max(1.0) as usize;
    let stride = opts.stride.unwrap_or_else(|| default_stride(n_steps)).max(1);
    let mut traj = Trajectory::new(TrajectoryMeta {
        params: *params,
        dt: opts.dt,
        scheme: opts.scheme.into(),
        seed: None,
        stride,
    });
    let mut state = initial.clone();
    traj.push(0.0, state.clone(), population_risk(&state, params.delta));
    let h = opts.dt;
    for step in 1..=n_steps {
        let fail = |e: Error| match e {
            Error::InvalidState(reason) | Error::InvalidOmega(reason) => {
                Error::IntegrationBlowup { step, reason }
            }
            Error::NotPositiveSemidefinite { min_eigenvalue } => Error::IntegrationBlowup {
                step,
                reason: format!("covariance lost positivity ({min_eigenvalue:e})"),
            },
            other => other,
        };
        let mut next = match opts.scheme {
            OdeScheme::Euler => {
                let k1 = engine.derivative(&state, params).map_err(fail)?;
                advance(&state, &k1, h)
            }
            OdeScheme::Rk4 => {
                let k1 = engine.derivative(&state, params).map_err(fail)?;
                let k2 = engine.derivative(&advance(&state, &k1, h / 2.0), params).map_err(fail)?;
                let k3 = engine.derivative(&advance(&state, &k2, h / 2.0), params).map_err(fail)?;
                let k4 = engine.derivative(&advance(&state, &k3, h), params).map_err(fail)?;
                OverlapState {
                    a: &state.a + (&k1.da + &k2.da * 2.0 + &k3.da * 2.0 + &k4.da) * (h / 6.0),
                    m: &state.m + (&k1.dm + &k2.dm * 2.0 + &k3.dm * 2.0 + &k4.dm) * (h / 6.0),
                    q: &state.q + (&k1.dq + &k2.dq * 2.0 + &k3.dq * 2.0 + &k4.dq) * (h / 6.0),
                    rho: state.rho,
                }
            }
        };
        check_step(&mut next, params.spherical)
            .map_err(|reason| Error::IntegrationBlowup { step, reason })?;
        state = next;
        if step % stride == 0 || step == n_steps {
            traj.push(step as f64 * h, state.clone(), population_risk(&state, params.delta));
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// `w_j ∼ 𝒩(0, I_d)`.
    GaussianUnconstrained,
    /// `w_j` uniform on the sphere of radius `√d`.
    SphericalUniform,
    /// `m = 0`, `Q = I` exactly.
    OrthogonalExact,
}

/// Samples explicit weights in dimension `d` and measures their overlaps.
pub fn init_overlaps(d: usize, p: usize, mode: InitMode, seed: u64) -> Result<OverlapState> {
    if d <= p {
        return Err(Error::IllConditionedInit { d, p });
    }
    if mode == InitMode::OrthogonalExact {
        return Ok(OverlapState::saddle(p));
    }
    let teacher = TeacherModel::random(d, 0.0, seed);
    let net = StudentNetwork::init(&teacher, p, mode, seed)?;
    Ok(net.measure_overlaps(&teacher))
}
