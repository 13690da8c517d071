//! Sufficient statistics, problem parameters and recorded trajectories.

use std::fmt;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{OmegaMatrix, PSD_TOLERANCE};

/// Tolerance on `|m_j| ≤ √(Q_jj ρ)`.
const OVERLAP_TOLERANCE: f64 = 1e-10;
/// Tolerance on `Q_jj = 1`, `ρ = 1` in spherical mode.
const SPHERE_TOLERANCE: f64 = 1e-12;

/// `(a, m, Q, ρ)`: second-layer weights, teacher overlaps, student overlaps
/// and squared teacher norm per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapState {
    pub a: DVector<f64>,
    pub m: DVector<f64>,
    pub q: DMatrix<f64>,
    pub rho: f64,
}

impl OverlapState {
    /// Builds a state and checks the invariants that hold in every mode.
    pub fn new(a: DVector<f64>, m: DVector<f64>, q: DMatrix<f64>, rho: f64) -> Result<Self> {
        let p = a.len();
        if p == 0 || m.len() != p || q.nrows() != p || q.ncols() != p {
            return Err(Error::InvalidState(format!(
                "inconsistent shapes: a {}, m {}, Q {}x{}",
                a.len(),
                m.len(),
                q.nrows(),
                q.ncols()
            )));
        }
        let s = OverlapState { a, m, q, rho };
        s.check_general()?;
        Ok(s)
    }

    /// `a = 1`, `m = 0`, `Q = I`, `ρ = 1`: the orthogonal saddle.
    pub fn saddle(p: usize) -> Self {
        OverlapState {
            a: DVector::from_element(p, 1.0),
            m: DVector::zeros(p),
            q: DMatrix::identity(p, p),
            rho: 1.0,
        }
    }

    /// `p = 1`, `a = 1`, `Q = 1`, `ρ = 1` with teacher overlap `m`.
    pub fn spherical_p1(m: f64) -> Self {
        let mut s = Self::saddle(1);
        s.m[0] = m;
        s
    }

    pub fn width(&self) -> usize {
        self.a.len()
    }

    /// The joint covariance of `(λ_1..λ_p, λ⋆)`.
    pub fn omega(&self) -> Result<OmegaMatrix> {
        let p = self.width();
        let n = p + 1;
        let mut e = vec![0.0; n * n];
        for i in 0..p {
            for j in 0..p {
                e[i * n + j] = self.q[(i, j)];
            }
            e[i * n + p] = self.m[i];
            e[p * n + i] = self.m[i];
        }
        e[p * n + p] = self.rho;
        OmegaMatrix::new(n, e)
    }

    fn check_general(&self) -> Result<()> {
        let p = self.width();
        let finite = self.a.iter().chain(self.m.iter()).chain(self.q.iter()).all(|v| v.is_finite());
        if !finite || !self.rho.is_finite() {
            return Err(Error::InvalidState("non-finite entry".into()));
        }
        for i in 0..p {
            for j in (i + 1)..p {
                let (x, y) = (self.q[(i, j)], self.q[(j, i)]);
                if (x - y).abs() > 1e-12 * x.abs().max(y.abs()).max(1.0) {
                    return Err(Error::InvalidState(format!("Q asymmetric at ({i}, {j})")));
                }
            }
        }
        for j in 0..p {
            let bound = (self.q[(j, j)].max(0.0) * self.rho.max(0.0)).sqrt() + OVERLAP_TOLERANCE;
            if self.m[j].abs() > bound {
                return Err(Error::InvalidState(format!(
                    "|m_{}| = {} exceeds sqrt(Q_jj rho) = {}",
                    j + 1,
                    self.m[j].abs(),
                    bound
                )));
            }
        }
        let min_eig = nalgebra::SymmetricEigen::new(self.q.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -PSD_TOLERANCE {
            return Err(Error::InvalidState(format!(
                "Q not positive semi-definite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(())
    }

    /// Checks every invariant, including the spherical ones when requested.
    pub fn validate(&self, spherical: bool) -> Result<()> {
        self.check_general()?;
        if spherical {
            if (self.rho - 1.0).abs() > SPHERE_TOLERANCE {
                return Err(Error::InvalidState(format!("spherical mode needs rho = 1, got {}", self.rho)));
            }
            for j in 0..self.width() {
                if (self.q[(j, j)] - 1.0).abs() > SPHERE_TOLERANCE {
                    return Err(Error::InvalidState(format!(
                        "spherical mode needs Q_jj = 1, got Q_{0}{0} = {1}",
                        j + 1,
                        self.q[(j, j)]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Symmetrizes `Q` and, in spherical mode, pins its diagonal to 1.
    pub fn normalize(&mut self, spherical: bool) {
        let p = self.width();
        for i in 0..p {
            for j in (i + 1)..p {
                let v = 0.5 * (self.q[(i, j)] + self.q[(j, i)]);
                self.q[(i, j)] = v;
                self.q[(j, i)] = v;
            }
            if spherical {
                self.q[(i, i)] = 1.0;
            }
        }
    }

    /// `max_j |m_j|`.
    pub fn max_abs_overlap(&self) -> f64 {
        self.m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.a.iter().chain(self.m.iter()).chain(self.q.iter()).all(|v| v.is_finite())
    }
}

/// Problem configuration shared by every dynamics tier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub d: usize,
    pub p: usize,
    pub gamma: f64,
    pub delta: f64,
    pub spherical: bool,
    pub train_a: bool,
}

impl TaskParams {
    /// Spherical, fixed second layer: the setting of every exit-time formula.
    pub fn spherical(d: usize, p: usize, gamma: f64, delta: f64) -> Self {
        TaskParams {
            d,
            p,
            gamma,
            delta,
            spherical: true,
            train_a: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.p == 0 {
            return Err(Error::InvalidParameter("d and p must be positive".into()));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::InvalidParameter(format!("delta must be >= 0, got {}", self.delta)));
        }
        if self.p == 1 && self.gamma >= 1.0 / 6.0 {
            log::warn!(
                "gamma = {} is above the p = 1 learning bound 1/6; the overlap will not converge",
                self.gamma
            );
        }
        Ok(())
    }

    /// One SGD step in rescaled time, `γ/(pd)`.
    pub fn sgd_time_step(&self) -> f64 {
        self.gamma / (self.p as f64 * self.d as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Euler,
    Rk4,
    EulerMaruyama,
    Sgd,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Euler => "euler",
            Scheme::Rk4 => "rk4",
            Scheme::EulerMaruyama => "euler-maruyama",
            Scheme::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub params: TaskParams,
    pub dt: f64,
    pub scheme: Scheme,
    pub seed: Option<u64>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub t: f64,
    pub state: OverlapState,
    pub risk: f64,
}

/// Time-indexed record of states and population risk.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    records: Vec<Record>,
}

impl Trajectory {
    pub fn new(meta: TrajectoryMeta) -> Self {
        Trajectory {
            meta,
            records: Vec::new(),
        }
    }

    /// Appends a record; times must start at 0 and strictly increase.
    pub fn push(&mut self, t: f64, state: OverlapState, risk: f64) {
        match self.records.last() {
            None => assert!(t == 0.0, "trajectory must start at t = 0, got {t}"),
            Some(last) => assert!(t > last.t, "time must increase: {} then {t}", last.t),
        }
        self.records.push(Record { t, state, risk });
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&Record> {
        self.records.last()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn risks(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.risk).collect()
    }

    /// Column names: `t, risk, m_*, Q_* (upper triangle, row-major), a_*`.
    pub fn csv_header(p: usize) -> Vec<String> {
        let mut h = vec!["t".to_string(), "risk".to_string()];
        h.extend((1..=p).map(|j| format!("m_{j}")));
        for j in 1..=p {
            for l in j..=p {
                h.push(format!("Q_{j}_{l}"));
            }
        }
        h.extend((1..=p).map(|j| format!("a_{j}")));
        h
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let p = self.meta.params.p;
        writeln!(w, "{}", Self::csv_header(p).join(","))?;
        for r in &self.records {
            let mut row = Vec::with_capacity(2 + 2 * p + p * (p + 1) / 2);
            row.push(r.t);
            row.push(r.risk);
            row.extend(r.state.m.iter());
            for j in 0..p {
                for l in j..p {
                    row.push(r.state.q[(j, l)]);
                }
            }
            row.extend(r.state.a.iter());
            let line: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Parses a trajectory CSV back into `(header, rows)`.
    pub fn read_csv<R: BufRead>(r: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
        let mut lines = r.lines();
        let header = loop {
            match lines.next() {
                Some(line) => {
                    let line = line?;
                    if line.starts_with('#') || line.trim().is_empty() {
                        continue;
                    }
                    break line.split(',').map(str::to_string).collect::<Vec<_>>();
                }
                None => return Err(Error::InvalidParameter("empty CSV".into())),
            }
        };
        let mut rows = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidParameter(format!("bad CSV value: {e}")))?;
            if row.len() != header.len() {
                return Err(Error::InvalidParameter("ragged CSV row".into()));
            }
            rows.push(row);
        }
        Ok((header, rows))
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}
