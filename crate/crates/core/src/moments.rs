//! Mixed moments of centered Gaussian pre-activations.
//!
//! The fields `(λ_1, …, λ_p, λ⋆)` are jointly Gaussian with covariance
//! [`OmegaMatrix`]; the teacher field is always the last index. Every
//! expectation in the drift and diffusion coefficients reduces to a linear
//! combination of monomial moments, which are evaluated here by summing over
//! perfect matchings of the index multiset (Isserlis/Wick).
//!
//! Two evaluation paths exist: [`wick_moment`] for one-off evaluations, and
//! [`MomentPlan`], which compiles the pairing recursion for a fixed set of
//! monomials once so that repeated evaluation at a changing covariance is a
//! single pass over a precomputed DAG.

use std::collections::{BTreeMap, HashMap};
use std::ops::{Add, Mul, Sub};

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Highest monomial degree any caller needs (twelfth moments appear in the
/// diffusion covariance).
pub const MAX_DEGREE: usize = 12;

/// Smallest eigenvalue tolerated before a covariance is rejected.
pub const PSD_TOLERANCE: f64 = 1e-10;

const SYMMETRY_TOLERANCE: f64 = 1e-12;

type FieldList = SmallVec<[u8; MAX_DEGREE]>;

/// Covariance of the joint Gaussian fields, `(p+1)×(p+1)`, teacher last.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl OmegaMatrix {
    /// Builds and validates a covariance from row-major entries.
    ///
    /// Entries must be finite and symmetric. A smallest eigenvalue in
    /// `[-1e-10, 0)` is treated as zero (with a warning); anything more
    /// negative is an error.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 || entries.len() != dim * dim {
            return Err(Error::InvalidOmega(format!(
                "expected {} entries for dimension {dim}, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidOmega("non-finite entry".into()));
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let (a, b) = (entries[i * dim + j], entries[j * dim + i]);
                if (a - b).abs() > SYMMETRY_TOLERANCE * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidOmega(format!(
                        "asymmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        let omega = OmegaMatrix { dim, entries };
        let min_eig = omega.min_eigenvalue();
        if min_eig < -PSD_TOLERANCE {
            return Err(Error::NotPositiveSemidefinite {
                min_eigenvalue: min_eig,
            });
        }
        if min_eig < 0.0 {
            warn!("covariance has eigenvalue {min_eig:e}; treated as zero");
        }
        Ok(omega)
    }

    pub fn from_matrix(matrix: &DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::InvalidOmega("matrix is not square".into()));
        }
        let dim = matrix.nrows();
        let entries = (0..dim)
            .flat_map(|i| (0..dim).map(move |j| (i, j)))
            .map(|(i, j)| matrix[(i, j)])
            .collect();
        Self::new(dim, entries)
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        OmegaMatrix { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Index of the teacher field `λ⋆`.
    pub fn teacher_index(&self) -> usize {
        self.dim - 1
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.entries)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.dim, self.entries.iter().map(|v| v * c).collect())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let eig = SymmetricEigen::new(self.to_matrix());
        eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Multiset of field indices (0-based; teacher is `dim - 1`), kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MonomialIndex(FieldList);

impl MonomialIndex {
    pub fn new<I: IntoIterator<Item = usize>>(fields: I) -> Result<Self> {
        let mut list = FieldList::new();
        for f in fields {
            if list.len() == MAX_DEGREE {
                return Err(Error::UnsupportedOrder {
                    degree: MAX_DEGREE + 1,
                });
            }
            let f = u8::try_from(f)
                .map_err(|_| Error::InvalidParameter(format!("field index {f} too large")))?;
            list.push(f);
        }
        list.sort_unstable();
        Ok(MonomialIndex(list))
    }

    /// Builds `Π λ_i^{k_i}` from `(i, k_i)` pairs.
    pub fn from_powers(powers: &[(usize, usize)]) -> Result<Self> {
        let degree: usize = powers.iter().map(|&(_, k)| k).sum();
        if degree > MAX_DEGREE {
            return Err(Error::UnsupportedOrder { degree });
        }
        Self::new(
            powers
                .iter()
                .flat_map(|&(i, k)| std::iter::repeat_n(i, k)),
        )
    }

    pub fn degree(&self) -> usize {
        self.0.len()
    }

    pub fn fields(&self) -> &[u8] {
        &self.0
    }

    fn max_field(&self) -> Option<usize> {
        self.0.last().map(|&f| f as usize)
    }
}

fn check_fields(idx: &MonomialIndex, omega: &OmegaMatrix) -> Result<()> {
    match idx.max_field() {
        Some(f) if f >= omega.dim() => Err(Error::InvalidParameter(format!(
            "field index {f} out of range for covariance of dimension {}",
            omega.dim()
        ))),
        _ => Ok(()),
    }
}

/// `E[Π λ_i]` over `𝒩(0, Ω)` by summing over perfect matchings.
pub fn wick_moment(idx: &MonomialIndex, omega: &OmegaMatrix) -> Result<f64> {
    if idx.degree() > MAX_DEGREE {
        return Err(Error::UnsupportedOrder {
            degree: idx.degree(),
        });
    }
    check_fields(idx, omega)?;
    if idx.degree() % 2 == 1 {
        return Ok(0.0);
    }
    let mut memo = HashMap::new();
    Ok(pairings(idx.fields(), omega, &mut memo))
}

fn pairings(fields: &[u8], omega: &OmegaMatrix, memo: &mut HashMap<FieldList, f64>) -> f64 {
    if fields.is_empty() {
        return 1.0;
    }
    if fields.len() >= 4 {
        if let Some(&v) = memo.get(fields) {
            return v;
        }
    }
    let first = fields[0] as usize;
    let rest = &fields[1..];
    let mut total = 0.0;
    let mut k = 0;
    while k < rest.len() {
        let partner = rest[k];
        let mut count = 1;
        while k + count < rest.len() && rest[k + count] == partner {
            count += 1;
        }
        let mut residual = FieldList::with_capacity(rest.len() - 1);
        residual.extend_from_slice(&rest[..k]);
        residual.extend_from_slice(&rest[k + 1..]);
        let w = omega.get(first, partner as usize);
        if w != 0.0 {
            total += count as f64 * w * pairings(&residual, omega, memo);
        }
        k += count;
    }
    if fields.len() >= 4 {
        memo.insert(FieldList::from_slice(fields), total);
    }
    total
}

/// Closed form of `E[λα λβ λγ² λδ²]`.
pub fn sixth_moment_closed(
    alpha: usize,
    beta: usize,
    gamma: usize,
    delta: usize,
    omega: &OmegaMatrix,
) -> Result<f64> {
    let n = omega.dim();
    if [alpha, beta, gamma, delta].iter().any(|&i| i >= n) {
        return Err(Error::InvalidParameter(format!(
            "field index out of range for covariance of dimension {n}"
        )));
    }
    let w = |i: usize, j: usize| omega.get(i, j);
    let (a, b, g, d) = (alpha, beta, gamma, delta);
    Ok(w(a, b) * w(g, g) * w(d, d)
        + 2.0 * w(a, b) * w(g, d).powi(2)
        + 2.0 * w(a, g) * w(b, g) * w(d, d)
        + 4.0 * w(a, g) * w(b, d) * w(g, d)
        + 4.0 * w(a, d) * w(b, g) * w(g, d)
        + 2.0 * w(a, d) * w(b, d) * w(g, g))
}

/// Expectation of `Σ cᵢ · Πλ` under `𝒩(0, Ω)`.
///
/// Label-noise contributions are expected to be already integrated out by the
/// caller (see [`Polynomial::noise_averaged`]).
pub fn displacement_moment(poly: &[(f64, MonomialIndex)], omega: &OmegaMatrix) -> Result<f64> {
    let mut memo = HashMap::new();
    let mut total = 0.0;
    for (c, idx) in poly {
        if idx.degree() > MAX_DEGREE {
            return Err(Error::UnsupportedOrder {
                degree: idx.degree(),
            });
        }
        check_fields(idx, omega)?;
        if idx.degree() % 2 == 0 {
            total += c * pairings(idx.fields(), omega, &mut memo);
        }
    }
    Ok(total)
}

/// `E[z^k]` for a standard normal `z`.
pub fn standard_normal_moment(k: usize) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    (1..k).step_by(2).map(|j| j as f64).product()
}

#[derive(Debug, Clone)]
struct PlanNode {
    // (multiplicity, first field, partner field, child node)
    terms: Vec<(f64, u8, u8, usize)>,
}

/// Pairing recursion for a fixed set of monomials, compiled once.
///
/// Nodes are residual multisets, memoized by key at compile time and stored
/// children-first, so [`MomentPlan::evaluate`] is a single forward sweep.
#[derive(Debug, Clone)]
pub struct MomentPlan {
    dim: usize,
    nodes: Vec<PlanNode>,
    roots: Vec<Option<usize>>,
}

impl MomentPlan {
    pub fn new(dim: usize, monomials: &[MonomialIndex]) -> Result<Self> {
        let mut plan = MomentPlan {
            dim,
            nodes: vec![PlanNode { terms: Vec::new() }],
            roots: Vec::with_capacity(monomials.len()),
        };
        let mut index: HashMap<FieldList, usize> = HashMap::new();
        index.insert(FieldList::new(), 0);
        for m in monomials {
            if m.degree() > MAX_DEGREE {
                return Err(Error::UnsupportedOrder { degree: m.degree() });
            }
            if let Some(f) = m.max_field() {
                if f >= dim {
                    return Err(Error::InvalidParameter(format!(
                        "field index {f} out of range for dimension {dim}"
                    )));
                }
            }
            let root = if m.degree() % 2 == 1 {
                None
            } else {
                Some(plan.build(m.fields(), &mut index))
            };
            plan.roots.push(root);
        }
        Ok(plan)
    }

    fn build(&mut self, fields: &[u8], index: &mut HashMap<FieldList, usize>) -> usize {
        if let Some(&id) = index.get(fields) {
            return id;
        }
        let first = fields[0];
        let rest = &fields[1..];
        let mut terms = Vec::new();
        let mut k = 0;
        while k < rest.len() {
            let partner = rest[k];
            let mut count = 1;
            while k + count < rest.len() && rest[k + count] == partner {
                count += 1;
            }
            let mut residual = FieldList::with_capacity(rest.len() - 1);
            residual.extend_from_slice(&rest[..k]);
            residual.extend_from_slice(&rest[k + 1..]);
            let child = self.build(&residual, index);
            terms.push((count as f64, first, partner, child));
            k += count;
        }
        self.nodes.push(PlanNode { terms });
        let id = self.nodes.len() - 1;
        index.insert(FieldList::from_slice(fields), id);
        id
    }

    pub fn len(&self) -> usize {
        self.roots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Moments of every compiled monomial, in compile order.
    pub fn evaluate(&self, omega: &OmegaMatrix) -> Vec<f64> {
        let mut scratch = Vec::new();
        let mut out = vec![0.0; self.roots.len()];
        self.evaluate_into(omega, &mut scratch, &mut out);
        out
    }

    pub fn evaluate_into(&self, omega: &OmegaMatrix, scratch: &mut Vec<f64>, out: &mut [f64]) {
        assert_eq!(omega.dim(), self.dim, "covariance dimension mismatch");
        scratch.clear();
        scratch.resize(self.nodes.len(), 0.0);
        scratch[0] = 1.0;
        for (id, node) in self.nodes.iter().enumerate().skip(1) {
            let mut v = 0.0;
            for &(mult, i, k, child) in &node.terms {
                v += mult * omega.get(i as usize, k as usize) * scratch[child];
            }
            scratch[id] = v;
        }
        for (o, root) in out.iter_mut().zip(&self.roots) {
            *o = root.map_or(0.0, |r| scratch[r]);
        }
    }
}

/// Polynomial in the Gaussian fields and one independent standard-normal
/// noise variable `z`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Polynomial {
    terms: BTreeMap<(FieldList, u8), f64>,
}

impl Polynomial {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Self::zero();
        p.add_term(FieldList::new(), 0, c);
        p
    }

    pub fn field(i: usize) -> Self {
        let mut p = Self::zero();
        let mut f = FieldList::new();
        f.push(i as u8);
        p.add_term(f, 0, 1.0);
        p
    }

    /// The standard-normal noise variable `z`.
    pub fn noise() -> Self {
        let mut p = Self::zero();
        p.add_term(FieldList::new(), 1, 1.0);
        p
    }

    fn add_term(&mut self, fields: FieldList, noise_power: u8, c: f64) {
        if c == 0.0 {
            return;
        }
        let entry = self.terms.entry((fields, noise_power)).or_insert(0.0);
        *entry += c;
    }

    pub fn scale(mut self, c: f64) -> Self {
        for v in self.terms.values_mut() {
            *v *= c;
        }
        self
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    /// Total degree, counting the noise variable.
    pub fn degree(&self) -> usize {
        self.terms
            .keys()
            .map(|(f, z)| f.len() + *z as usize)
            .max()
            .unwrap_or(0)
    }

    /// Integrates out `z`, leaving a list of field monomials.
    pub fn noise_averaged(&self) -> Result<Vec<(f64, MonomialIndex)>> {
        let mut merged: BTreeMap<FieldList, f64> = BTreeMap::new();
        for ((fields, z), c) in &self.terms {
            let ez = standard_normal_moment(*z as usize);
            if ez == 0.0 {
                continue;
            }
            if fields.len() > MAX_DEGREE {
                return Err(Error::UnsupportedOrder {
                    degree: fields.len(),
                });
            }
            *merged.entry(fields.clone()).or_insert(0.0) += c * ez;
        }
        Ok(merged
            .into_iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|(f, c)| (c, MonomialIndex(f)))
            .collect())
    }

    pub fn expectation(&self, omega: &OmegaMatrix) -> Result<f64> {
        displacement_moment(&self.noise_averaged()?, omega)
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for ((f, z), c) in &rhs.terms {
            out.add_term(f.clone(), *z, *c);
        }
        out
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for ((f, z), c) in &rhs.terms {
            out.add_term(f.clone(), *z, -*c);
        }
        out
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        let mut out = Polynomial::zero();
        for ((fa, za), ca) in &self.terms {
            for ((fb, zb), cb) in &rhs.terms {
                let mut f = FieldList::with_capacity(fa.len() + fb.len());
                f.extend_from_slice(fa);
                f.extend_from_slice(fb);
                f.sort_unstable();
                out.add_term(f, za + zb, ca * cb);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_omega(dim: usize, rng: &mut impl Rng) -> OmegaMatrix {
        let a = DMatrix::from_fn(dim, dim + 2, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() / (dim as f64 + 2.0);
        let m = (&m + m.transpose()) * 0.5;
        OmegaMatrix::from_matrix(&m).unwrap()
    }

    #[test]
    fn second_moment_is_the_covariance_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let om = random_omega(4, &mut rng);
        for a in 0..4 {
            for b in 0..4 {
                let idx = MonomialIndex::new([a, b]).unwrap();
                assert_eq!(wick_moment(&idx, &om).unwrap(), om.get(a, b));
            }
        }
    }

    #[test]
    fn odd_degree_vanishes() {
        let om = OmegaMatrix::identity(3);
        let idx = MonomialIndex::new([1, 1, 1]).unwrap();
        assert_eq!(wick_moment(&idx, &om).unwrap(), 0.0);
    }

    #[test]
    fn unit_gaussian_fourth_and_sixth() {
        let om = OmegaMatrix::identity(1);
        let m4 = MonomialIndex::new([0; 4]).unwrap();
        let m6 = MonomialIndex::new([0; 6]).unwrap();
        assert_eq!(wick_moment(&m4, &om).unwrap(), 3.0);
        assert_eq!(wick_moment(&m6, &om).unwrap(), 15.0);
        assert_eq!(sixth_moment_closed(0, 0, 0, 0, &om).unwrap(), 15.0);
    }

    #[test]
    fn degree_above_cap_is_rejected() {
        assert!(matches!(
            MonomialIndex::new([0; 13]),
            Err(Error::UnsupportedOrder { degree: 13 })
        ));
        assert!(matches!(
            MonomialIndex::from_powers(&[(0, 7), (1, 7)]),
            Err(Error::UnsupportedOrder { degree: 14 })
        ));
    }

    #[test]
    fn diagonal_covariance_factorizes() {
        let om = OmegaMatrix::new(
            4,
            vec![
                2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        assert_eq!(sixth_moment_closed(0, 1, 2, 3, &om).unwrap(), 0.0);
        // E[λ0² λ2² λ3²] = ω00 ω22 ω33
        let v = sixth_moment_closed(0, 0, 2, 3, &om).unwrap();
        assert!((v - 2.0 * 0.5 * 1.0).abs() < 1e-15);
    }

    #[test]
    fn displacement_moment_basics() {
        let om = OmegaMatrix::new(2, vec![0.7, 0.2, 0.2, 1.0]).unwrap();
        assert_eq!(displacement_moment(&[], &om).unwrap(), 0.0);
        let idx = MonomialIndex::new([0, 0]).unwrap();
        let v = displacement_moment(&[(5.0, idx)], &om).unwrap();
        assert!((v - 5.0 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn noise_moments() {
        assert_eq!(standard_normal_moment(0), 1.0);
        assert_eq!(standard_normal_moment(2), 1.0);
        assert_eq!(standard_normal_moment(3), 0.0);
        assert_eq!(standard_normal_moment(4), 3.0);
        assert_eq!(standard_normal_moment(6), 15.0);
    }

    #[test]
    fn polynomial_square_of_noise_shifted_field() {
        // E[(λ0 + 2z)²] = ω00 + 4
        let om = OmegaMatrix::new(1, vec![0.3]).unwrap();
        let p = &Polynomial::field(0) + &Polynomial::noise().scale(2.0);
        let sq = &p * &p;
        assert!((sq.expectation(&om).unwrap() - 4.3).abs() < 1e-14);
        assert_eq!(sq.degree(), 2);
    }

    #[test]
    fn plan_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let om = random_omega(3, &mut rng);
        let monos: Vec<_> = (0..40)
            .map(|_| {
                let deg = rng.random_range(0..=MAX_DEGREE);
                MonomialIndex::new((0..deg).map(|_| rng.random_range(0..3))).unwrap()
            })
            .collect();
        let plan = MomentPlan::new(3, &monos).unwrap();
        let vals = plan.evaluate(&om);
        for (m, v) in monos.iter().zip(vals) {
            let w = wick_moment(m, &om).unwrap();
            assert!((v - w).abs() <= 1e-12 * w.abs().max(1.0), "{m:?}: {v} vs {w}");
        }
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        assert!(matches!(
            OmegaMatrix::new(2, vec![1.0, 2.0, 2.0, 1.0]),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
        assert!(OmegaMatrix::new(2, vec![1.0, 0.1, 0.2, 1.0]).is_err());
        assert!(OmegaMatrix::new(2, vec![1.0, 0.0, 0.0]).is_err());
    }
}
