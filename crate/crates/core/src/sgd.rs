//! Explicit one-pass SGD in dimension `d`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{default_stride, population_risk, InitMode};
use crate::rng::{stream, Purpose, StreamRng};
use crate::state::{OverlapState, Scheme, TaskParams, Trajectory, TrajectoryMeta};

fn dot(x: &[f64], y: &[f64]) -> f64 {
    // Four accumulators keep the compiler free to vectorize.
    let mut acc = [0.0; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += x[i] * y[i];
        acc[1] += x[i + 1] * y[i + 1];
        acc[2] += x[i + 2] * y[i + 2];
        acc[3] += x[i + 3] * y[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..x.len() {
        s += x[i] * y[i];
    }
    s
}

fn fill_standard_normal(rng: &mut StreamRng, out: &mut [f64], scale: f64) {
    for v in out.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v = g * scale;
    }
}

/// Target direction `w⋆` with `‖w⋆‖² = d`, and label noise variance `Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    w: Vec<f64>,
    delta: f64,
}

impl TeacherModel {
    pub fn new(w: Vec<f64>, delta: f64) -> Result<Self> {
        let d = w.len() as f64;
        let norm2 = dot(&w, &w);
        if w.is_empty() || ((norm2 - d) / d).abs() > 1e-8 {
            return Err(Error::InvalidParameter(format!(
                "teacher must have squared norm d = {d}, got {norm2}"
            )));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise variance must be >= 0, got {delta}")));
        }
        Ok(TeacherModel { w, delta })
    }

    /// Uniform on the sphere of radius `√d`.
    pub fn random(d: usize, delta: f64, seed: u64) -> Self {
        let mut rng = stream(seed, Purpose::Teacher, 0);
        let mut w = vec![0.0; d];
        fill_standard_normal(&mut rng, &mut w, 1.0);
        let s = (d as f64 / dot(&w, &w)).sqrt();
        w.iter_mut().for_each(|v| *v *= s);
        TeacherModel { w, delta }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `y = (w⋆ᵀx)² + √Δ z`.
    pub fn label(&self, x: &[f64], z: f64) -> f64 {
        dot(&self.w, x).powi(2) + self.delta.sqrt() * z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecondLayerInit {
    /// `a_j = 1`.
    #[default]
    Ones,
    /// `a_j ∼ Bernoulli(1/2)` on `{0, 1}`.
    Bernoulli,
}

/// First-layer weights `W` (`p × d`, stored row-major) and second layer `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentNetwork {
    d: usize,
    p: usize,
    w: Vec<f64>,
    pub a: Vec<f64>,
    /// `‖w_j‖²`, updated alongside `w`.
    norm2: Vec<f64>,
}

fn row_norms(w: &[f64], d: usize) -> Vec<f64> {
    w.chunks(d).map(|r| dot(r, r)).collect()
}

impl StudentNetwork {
    fn assemble(d: usize, p: usize, w: Vec<f64>, a: Vec<f64>) -> Self {
        let norm2 = row_norms(&w, d);
        StudentNetwork { d, p, w, a, norm2 }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, a: Vec<f64>) -> Result<Self> {
        let p = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if p == 0 || d == 0 || a.len() != p || rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidParameter("ragged or empty network weights".into()));
        }
        Ok(Self::assemble(d, p, rows.concat(), a))
    }

    /// Random first layer with `a = 1`.
    pub fn init(teacher: &TeacherModel, p: usize, mode: InitMode, seed: u64) -> Result<Self> {
        Self::init_with(teacher, p, mode, SecondLayerInit::Ones, seed)
    }

    pub fn init_with(
        teacher: &TeacherModel,
        p: usize,
        mode: InitMode,
        second: SecondLayerInit,
        seed: u64,
    ) -> Result<Self> {
        let d = teacher.dim();
        if d <= p {
            return Err(Error::IllConditionedInit { d, p });
        }
        let mut rng = stream(seed, Purpose::Init, 0);
        let mut w = vec![0.0; p * d];
        fill_standard_normal(&mut rng, &mut w, 1.0);
        let sqrt_d = (d as f64).sqrt();
        match mode {
            InitMode::GaussianUnconstrained => {}
            InitMode::SphericalUniform => {
                for row in w.chunks_mut(d) {
                    let s = sqrt_d / dot(row, row).sqrt();
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
            InitMode::OrthogonalExact => {
                // Gram-Schmidt against the teacher and earlier rows, twice for stability.
                let t_norm = sqrt_d;
                for j in 0..p {
                    let (done, rest) = w.split_at_mut(j * d);
                    let row = &mut rest[..d];
                    for _ in 0..2 {
                        let c = dot(row, &teacher.w) / (t_norm * t_norm);
                        row.iter_mut().zip(&teacher.w).for_each(|(v, t)| *v -= c * t);
                        for prev in done.chunks(d) {
                            let c = dot(row, prev) / d as f64;
                            row.iter_mut().zip(prev).for_each(|(v, u)| *v -= c * u);
                        }
                    }
                    let s = sqrt_d / dot(row, row).sqrt();
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let a = match second {
            SecondLayerInit::Ones => vec![1.0; p],
            SecondLayerInit::Bernoulli => (0..p).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect(),
        };
        Ok(Self::assemble(d, p, w, a))
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn width(&self) -> usize {
        self.p
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.w[j * self.d..(j + 1) * self.d]
    }

    pub fn weights(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.p, self.d, &self.w)
    }

    /// `ŷ = (1/p) Σ a_j (w_jᵀx)²`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let s: f64 = (0..self.p).map(|j| self.a[j] * dot(self.row(j), x).powi(2)).sum();
        s / self.p as f64
    }

    /// `m = Ww⋆/d`, `Q = WWᵀ/d`, `ρ = ‖w⋆‖²/d`.
    pub fn measure_overlaps(&self, teacher: &TeacherModel) -> OverlapState {
        let d = self.d as f64;
        let p = self.p;
        let m = DVector::from_fn(p, |j, _| dot(self.row(j), &teacher.w) / d);
        let mut q = DMatrix::zeros(p, p);
        for j in 0..p {
            for l in j..p {
                let v = dot(self.row(j), self.row(l)) / d;
                q[(j, l)] = v;
                q[(l, j)] = v;
            }
        }
        OverlapState {
            a: DVector::from_vec(self.a.clone()),
            m,
            q,
            rho: dot(&teacher.w, &teacher.w) / d,
        }
    }

    /// One SGD step on `(x, y)`, in place. Returns the residual `y − ŷ`.
    ///
    /// All neurons (and `a`, when trained) are updated from the same
    /// pre-step preactivations.
    pub fn step(&mut self, x: &[f64], y: f64, params: &TaskParams, lambda: &mut Vec<f64>) -> f64 {
        let p = self.p;
        let pf = p as f64;
        lambda.clear();
        lambda.extend((0..p).map(|j| dot(self.row(j), x)));
        let y_hat: f64 = (0..p).map(|j| self.a[j] * lambda[j] * lambda[j]).sum::<f64>() / pf;
        let r = y - y_hat;
        let d = self.d;
        let df = d as f64;
        // ‖w + c x‖² = ‖w‖² + 2cλ + c²‖x‖², so the projection fuses into the update.
        let xx = dot(x, x);
        for j in 0..p {
            let c = params.gamma / pf * 2.0 * self.a[j] * r * lambda[j];
            let row = &mut self.w[j * d..(j + 1) * d];
            let n2 = self.norm2[j] + 2.0 * c * lambda[j] + c * c * xx;
            if params.spherical {
                let s = (df / n2).sqrt();
                if c != 0.0 || s != 1.0 {
                    row.iter_mut().zip(x).for_each(|(w, xi)| *w = s * (*w + c * xi));
                }
                self.norm2[j] = df;
            } else if c != 0.0 {
                row.iter_mut().zip(x).for_each(|(w, xi)| *w += c * xi);
                self.norm2[j] = n2;
            }
        }
        if params.train_a {
            let eta = params.sgd_time_step();
            for j in 0..p {
                self.a[j] += eta * r * lambda[j] * lambda[j];
            }
        }
        r
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.a).all(|v| v.is_finite())
    }

    /// Writes the binary checkpoint:
    ///
    /// ```text
    /// magic   8 bytes  "MEDLABW1"
    /// d       u64 LE
    /// p       u64 LE
    /// flags   u32 LE   bit 0 spherical, bit 1 train_a
    /// W       p*d f64 LE, row-major
    /// a       p   f64 LE
    /// ```
    pub fn write_checkpoint<W: Write>(&self, mut out: W, spherical: bool, train_a: bool) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.d as u64).to_le_bytes())?;
        out.write_all(&(self.p as u64).to_le_bytes())?;
        let flags = u32::from(spherical) | (u32::from(train_a) << 1);
        out.write_all(&flags.to_le_bytes())?;
        for v in self.w.iter().chain(&self.a) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a checkpoint; returns the network and `(spherical, train_a)`.
    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(Self, bool, bool)> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b8)?;
        let d = u64::from_le_bytes(b8) as usize;
        input.read_exact(&mut b8)?;
        let p = u64::from_le_bytes(b8) as usize;
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        let flags = u32::from_le_bytes(b4);
        if d == 0 || p == 0 || flags > 3 {
            return Err(Error::Checkpoint(format!("bad header d={d} p={p} flags={flags}")));
        }
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| {
                    input.read_exact(&mut b8)?;
                    Ok(f64::from_le_bytes(b8))
                })
                .collect()
        };
        let w = read_f64s(p * d)?;
        let a = read_f64s(p)?;
        Ok((Self::assemble(d, p, w, a), flags & 1 != 0, flags & 2 != 0))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MEDLABW1";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

/// Fresh samples `x ∼ 𝒩(0, I/d)`, `y = (w⋆ᵀx)² + √Δ z`, from the data stream
/// `(seed, index)`.
pub struct DataStream<'a> {
    teacher: &'a TeacherModel,
    rng: StreamRng,
    scale: f64,
}

impl<'a> DataStream<'a> {
    pub fn new(teacher: &'a TeacherModel, seed: u64, index: u64) -> Self {
        DataStream {
            teacher,
            rng: stream(seed, Purpose::Data, index),
            scale: 1.0 / (teacher.dim() as f64).sqrt(),
        }
    }

    /// Overwrites `x` with a fresh input and returns its label.
    pub fn next_into(&mut self, x: &mut [f64]) -> f64 {
        fill_standard_normal(&mut self.rng, x, self.scale);
        let z: f64 = if self.teacher.delta > 0.0 {
            self.rng.sample(StandardNormal)
        } else {
            0.0
        };
        self.teacher.label(x, z)
    }
}

impl Iterator for DataStream<'_> {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        let mut x = vec![0.0; self.teacher.dim()];
        let y = self.next_into(&mut x);
        Some(Sample { x, y })
    }
}

pub fn sample_batch(teacher: &TeacherModel, n: usize, seed: u64) -> impl Iterator<Item = Sample> + '_ {
    DataStream::new(teacher, seed, 0).take(n)
}

/// Pure form of [`StudentNetwork::step`].
pub fn sgd_step(net: &StudentNetwork, sample: &Sample, params: &TaskParams) -> StudentNetwork {
    let mut next = net.clone();
    next.step(&sample.x, sample.y, params, &mut Vec::with_capacity(net.p));
    next
}

/// Runs `n_steps` steps of SGD; records every `record_stride` steps and the last.
///
/// `record_stride = None` keeps at most 10⁵ records. Time is `ν γ/(pd)`.
pub fn run_sgd(
    teacher: &TeacherModel,
    net0: &StudentNetwork,
    params: &TaskParams,
    n_steps: u64,
    record_stride: Option<u64>,
    seed: u64,
) -> Result<Trajectory> {
    run_sgd_until(teacher, net0, params, n_steps, record_stride, seed, |_| false)
}

/// As [`run_sgd`], stopping after the first record for which `stop` holds.
pub fn run_sgd_until<F: Fn(&OverlapState) -> bool>(
    teacher: &TeacherModel,
    net0: &StudentNetwork,
    params: &TaskParams,
    n_steps: u64,
    record_stride: Option<u64>,
    seed: u64,
    stop: F,
) -> Result<Trajectory> {
    params.validate()?;
    if net0.d != teacher.dim() || net0.p != params.p || params.d != teacher.dim() {
        return Err(Error::InvalidParameter(format!(
            "dimension mismatch: teacher d={}, network {}x{}, params d={} p={}",
            teacher.dim(),
            net0.p,
            net0.d,
            params.d,
            params.p
        )));
    }
    let stride = record_stride.unwrap_or_else(|| default_stride(n_steps as usize) as u64).max(1);
    let dt = params.sgd_time_step();
    let mut traj = Trajectory::new(TrajectoryMeta {
        params: *params,
        dt,
        scheme: Scheme::Sgd,
        seed: Some(seed),
        stride: stride as usize,
    });
    let record = |traj: &mut Trajectory, net: &StudentNetwork, step: u64| -> OverlapState {
        let s = net.measure_overlaps(teacher);
        let risk = population_risk(&s, params.delta);
        traj.push(step as f64 * dt, s.clone(), risk);
        s
    };
    let mut net = net0.clone();
    let s0 = record(&mut traj, &net, 0);
    if stop(&s0) {
        return Ok(traj);
    }
    let mut data = DataStream::new(teacher, seed, 0);
    let mut x = vec![0.0; teacher.dim()];
    let mut lambda = Vec::with_capacity(params.p);
    for step in 1..=n_steps {
        let y = data.next_into(&mut x);
        let r = net.step(&x, y, params, &mut lambda);
        if !r.is_finite() || r.abs() > 1e150 {
            return Err(Error::Divergence { step });
        }
        if step % stride == 0 || step == n_steps {
            if !net.is_finite() {
                return Err(Error::Divergence { step });
            }
            let s = record(&mut traj, &net, step);
            if stop(&s) {
                break;
            }
        }
    }
    Ok(traj)
}
