//! First-order stochastic correction to the overlap ODE.
//!
//! Over a rescaled time `dt` the overlaps receive `dt/δt` independent kicks of
//! size `δt = γ/(pd)`, so to first order
//!
//! ```text
//! dX = drift · dt + √(γ/(pd)) σ dB,     σσ = Cov[𝓜_1..𝓜_p, 𝓠_11..𝓠_pp]
//! ```
//!
//! The second-order Itô corrections of the projected process are dropped:
//! with zero noise, one step is exactly one Euler step of the ODE.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::moments::{MomentPlan, MonomialIndex, Polynomial};
use crate::ode::{check_step, default_stride, population_risk, spherical_project, DriftEngine, StateDerivative};
use crate::rng::{stream, Purpose, StreamRng};
use crate::state::{OverlapState, Scheme, TaskParams, Trajectory, TrajectoryMeta};

/// Largest width for which the covariance is assembled.
pub const MAX_SDE_WIDTH: usize = 8;

/// Consecutive `dt` halvings tried before a step is rejected for good.
const MAX_HALVINGS: u32 = 3;

/// Covariance of the stacked displacements and its symmetric square root.
///
/// Rows are ordered `𝓜_1..𝓜_p, 𝓠_11, 𝓠_12, .., 𝓠_pp` (all `p²` entries,
/// row-major), so `𝓠_jl` and `𝓠_lj` have identical rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionCoeffs {
    pub cov: DMatrix<f64>,
    pub sqrt: DMatrix<f64>,
}

impl DiffusionCoeffs {
    /// Square root by eigendecomposition, clamping negative eigenvalues at 0.
    pub fn from_covariance(cov: DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        if n == 0 || cov.ncols() != n {
            return Err(Error::InvalidParameter("covariance must be square and non-empty".into()));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let trace = sym.trace().max(0.0);
        let eig = SymmetricEigen::new(sym);
        let min = eig.eigenvalues.min();
        if min < -1e-9 * trace.max(1.0) {
            return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min });
        }
        let clamped: f64 = eig.eigenvalues.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
        if clamped > 1e-6 * trace {
            log::warn!("diffusion covariance: clamped negative eigenvalue mass {clamped:e} (trace {trace:e})");
        }
        let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let v = &eig.eigenvectors;
        let sqrt = v * DMatrix::from_diagonal(&roots) * v.transpose();
        Ok(DiffusionCoeffs { cov, sqrt })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }
}

/// Displacement polynomials for one `(p, γ, Δ)`, with all second moments
/// compiled into a single [`MomentPlan`].
#[derive(Debug, Clone)]
pub struct SdeModel {
    p: usize,
    gamma: f64,
    delta: f64,
    plan: MomentPlan,
    // Unique variables: M_j, then Q_jl for j <= l.
    means: Vec<Vec<(f64, usize)>>,
    // Upper triangle of E[X_a X_b] over unique variables, row-major.
    products: Vec<Vec<(f64, usize)>>,
}

impl SdeModel {
    pub fn new(params: &TaskParams) -> Result<Self> {
        let p = params.p;
        if p > MAX_SDE_WIDTH {
            return Err(Error::SizeCap { p, cap: MAX_SDE_WIDTH });
        }
        let pf = p as f64;
        let teacher = Polynomial::field(p);
        let student: Vec<Polynomial> = (0..p).map(Polynomial::field).collect();
        let mut r = &(&teacher * &teacher) + &Polynomial::noise().scale(params.delta.sqrt());
        for s in &student {
            r = &r - &(s * s).scale(1.0 / pf);
        }
        let r2 = &r * &r;
        let mut vars = Vec::with_capacity(p + p * (p + 1) / 2);
        for s in &student {
            vars.push((&(&r * s) * &teacher).scale(2.0));
        }
        for j in 0..p {
            for l in j..p {
                let ll = &student[j] * &student[l];
                let first = (&r * &ll).scale(4.0);
                let second = (&r2 * &ll).scale(4.0 * params.gamma / pf);
                vars.push(&first + &second);
            }
        }

        let mut monomials: Vec<MonomialIndex> = Vec::new();
        let mut lookup = std::collections::HashMap::new();
        let mut compile = |poly: &Polynomial| -> Result<Vec<(f64, usize)>> {
            poly.noise_averaged()?
                .into_iter()
                .map(|(c, m)| {
                    let id = *lookup.entry(m.clone()).or_insert_with(|| {
                        monomials.push(m);
                        monomials.len() - 1
                    });
                    Ok((c, id))
                })
                .collect()
        };
        let means = vars.iter().map(&mut compile).collect::<Result<Vec<_>>>()?;
        let mut products = Vec::with_capacity(vars.len() * (vars.len() + 1) / 2);
        for a in 0..vars.len() {
            for b in a..vars.len() {
                products.push(compile(&(&vars[a] * &vars[b]))?);
            }
        }
        let plan = MomentPlan::new(p + 1, &monomials)?;
        Ok(SdeModel {
            p,
            gamma: params.gamma,
            delta: params.delta,
            plan,
            means,
            products,
        })
    }

    pub fn width(&self) -> usize {
        self.p
    }

    fn matches(&self, params: &TaskParams) -> bool {
        self.p == params.p && self.gamma == params.gamma && self.delta == params.delta
    }

    /// Covariance of the `p + p²` stacked displacements at `state`.
    pub fn covariance(&self, state: &OverlapState) -> Result<DMatrix<f64>> {
        let p = self.p;
        if state.width() != p {
            return Err(Error::InvalidState(format!("state width {} but model width {p}", state.width())));
        }
        if state.a.iter().any(|&a| a != 1.0) {
            return Err(Error::UnsupportedConfiguration(
                "the diffusion is only defined for a fixed second layer a = 1".into(),
            ));
        }
        let mom = self.plan.evaluate(&state.omega()?);
        let eval = |terms: &[(f64, usize)]| terms.iter().map(|(c, i)| c * mom[*i]).sum::<f64>();
        let mean: Vec<f64> = self.means.iter().map(|t| eval(t)).collect();
        let nu = mean.len();
        let mut unique = DMatrix::zeros(nu, nu);
        let mut k = 0;
        for a in 0..nu {
            for b in a..nu {
                let v = eval(&self.products[k]) - mean[a] * mean[b];
                unique[(a, b)] = v;
                unique[(b, a)] = v;
                k += 1;
            }
        }
        // Expand to the full stacking, one row per ordered pair (j, l).
        let slot = |row: usize| -> usize {
            if row < p {
                row
            } else {
                let (j, l) = ((row - p) / p, (row - p) % p);
                let (j, l) = if j <= l { (j, l) } else { (l, j) };
                p + j * p - j * (j + 1) / 2 + l
            }
        };
        let n = p + p * p;
        Ok(DMatrix::from_fn(n, n, |i, j| unique[(slot(i), slot(j))]))
    }

    pub fn coeffs(&self, state: &OverlapState) -> Result<DiffusionCoeffs> {
        DiffusionCoeffs::from_covariance(self.covariance(state)?)
    }
}

/// One-shot diffusion coefficients. Prefer a cached [`SdeModel`] in loops.
pub fn diffusion_covariance(state: &OverlapState, params: &TaskParams) -> Result<DiffusionCoeffs> {
    SdeModel::new(params)?.coeffs(state)
}

/// One Euler–Maruyama step.
///
/// `drift` is the (already projected, in spherical mode) ODE right-hand side;
/// `noise` holds `p + p²` standard normals. In spherical mode the noise is
/// projected with the same map as the drift and `Q_jj` is re-pinned to 1.
pub fn em_step(
    state: &OverlapState,
    coeffs: &DiffusionCoeffs,
    drift: &StateDerivative,
    dt: f64,
    noise: &[f64],
    params: &TaskParams,
) -> Result<OverlapState> {
    let p = state.width();
    let n = p + p * p;
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if noise.len() != n || coeffs.dim() != n {
        return Err(Error::InvalidParameter(format!(
            "noise length {} and diffusion size {} must both be p + p² = {n}",
            noise.len(),
            coeffs.dim()
        )));
    }
    let scale = (params.sgd_time_step() * dt).sqrt();
    let kick = &coeffs.sqrt * DVector::from_column_slice(noise) * scale;
    let km = DVector::from_fn(p, |j, _| kick[j]);
    let kq = DMatrix::from_fn(p, p, |j, l| 0.5 * (kick[p + j * p + l] + kick[p + l * p + j]));
    let (km, kq) = if params.spherical {
        spherical_project(&km, &kq, state)
    } else {
        (km, kq)
    };
    let mut next = OverlapState {
        a: &state.a + &drift.da * dt,
        m: &state.m + &drift.dm * dt + km,
        q: &state.q + &drift.dq * dt + kq,
        rho: state.rho,
    };
    check_step(&mut next, params.spherical).map_err(|reason| Error::StepRejected { reason })?;
    next.validate(false).map_err(|e| Error::StepRejected { reason: e.to_string() })?;
    Ok(next)
}

/// Default SDE step: one SGD sample per step, `γ/(pd)`.
pub fn default_sde_dt(params: &TaskParams) -> f64 {
    params.sgd_time_step()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeOptions {
    pub dt: f64,
    /// Record every `stride`-th step; `None` keeps at most 10⁵ records.
    pub stride: Option<usize>,
}

/// Reusable per-width machinery for many paths.
#[derive(Debug, Clone)]
pub struct SdeIntegrator {
    params: TaskParams,
    engine: DriftEngine,
    model: SdeModel,
}

impl SdeIntegrator {
    pub fn new(params: &TaskParams) -> Result<Self> {
        params.validate()?;
        Ok(SdeIntegrator {
            params: *params,
            engine: DriftEngine::new(params.p),
            model: SdeModel::new(params)?,
        })
    }

    fn try_step(&self, state: &OverlapState, h: f64, rng: &mut StreamRng) -> Result<OverlapState> {
        let drift = self
            .engine
            .derivative(state, &self.params)
            .map_err(|e| Error::StepRejected { reason: e.to_string() })?;
        let coeffs = self
            .model
            .coeffs(state)
            .map_err(|e| Error::StepRejected { reason: e.to_string() })?;
        let n = coeffs.dim();
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        em_step(state, &coeffs, &drift, h, &noise, &self.params)
    }

    fn step_adaptive(&self, state: &OverlapState, h: f64, depth: u32, rng: &mut StreamRng) -> Result<OverlapState> {
        match self.try_step(state, h, rng) {
            Ok(s) => Ok(s),
            Err(Error::StepRejected { reason }) => {
                if depth >= MAX_HALVINGS {
                    return Err(Error::StepRejected {
                        reason: format!("{reason} (after {MAX_HALVINGS} halvings of dt)"),
                    });
                }
                let mid = self.step_adaptive(state, h / 2.0, depth + 1, rng)?;
                self.step_adaptive(&mid, h / 2.0, depth + 1, rng)
            }
            Err(e) => Err(e),
        }
    }

    /// Path number `path` of the ensemble keyed by `seed`.
    pub fn run(
        &self,
        initial: &OverlapState,
        horizon: f64,
        opts: &SdeOptions,
        seed: u64,
        path: u64,
    ) -> Result<Trajectory> {
        if !self.model.matches(&self.params) || initial.width() != self.params.p {
            return Err(Error::InvalidState("initial state does not match the configured width".into()));
        }
        if !(opts.dt > 0.0) || !(horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "dt and horizon must be positive (dt = {}, horizon = {horizon})",
                opts.dt
            )));
        }
        initial.validate(self.params.spherical)?;
        let n_steps = (horizon / opts.dt - 1e-9).ceil().max(1.0) as usize;
        let stride = opts.stride.unwrap_or_else(|| default_stride(n_steps)).max(1);
        let mut traj = Trajectory::new(TrajectoryMeta {
            params: self.params,
            dt: opts.dt,
            scheme: Scheme::EulerMaruyama,
            seed: Some(seed),
            stride,
        });
        let mut rng = stream(seed, Purpose::Diffusion, path);
        let mut state = initial.clone();
        traj.push(0.0, state.clone(), population_risk(&state, self.params.delta));
        for step in 1..=n_steps {
            state = self.step_adaptive(&state, opts.dt, 0, &mut rng)?;
            if step % stride == 0 || step == n_steps {
                traj.push(step as f64 * opts.dt, state.clone(), population_risk(&state, self.params.delta));
            }
        }
        Ok(traj)
    }
}

/// Integrates one SDE path; deterministic given `seed`.
pub fn integrate_sde(
    initial: &OverlapState,
    params: &TaskParams,
    dt: f64,
    horizon: f64,
    seed: u64,
) -> Result<Trajectory> {
    SdeIntegrator::new(params)?.run(initial, horizon, &SdeOptions { dt, stride: None }, seed, 0)
}
