//! Population-risk geometry of a single squared neuron, in overlap
//! coordinates `(m, q, ρ)`.
//!
//! The Euclidean risk `Δ/2 + 3ρ² + 3q² − 4m² − 2ρq` and the spherical excess
//! risk `2(1 − m²)` are kept in their own normalizations; on `q = ρ = 1` the
//! Euclidean excess is exactly twice the spherical one.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues closer to zero than this count as zero when classifying.
const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryPoint {
    pub m: f64,
    pub q: f64,
    pub rho: f64,
    pub delta: f64,
}

impl GeometryPoint {
    pub fn new(m: f64, q: f64, rho: f64, delta: f64) -> Result<Self> {
        if !(rho > 0.0) || q < 0.0 || delta < 0.0 || m * m > q * rho + 1e-10 {
            return Err(Error::InvalidState(format!(
                "need rho > 0, q >= 0, delta >= 0 and m^2 <= q rho (m = {m}, q = {q}, rho = {rho}, delta = {delta})"
            )));
        }
        Ok(GeometryPoint { m, q, rho, delta })
    }

    pub fn spherical(m: f64, delta: f64) -> Result<Self> {
        Self::new(m, 1.0, 1.0, delta)
    }

    fn collinear(&self) -> bool {
        (self.m * self.m - self.q * self.rho).abs() <= 1e-12 * (self.q * self.rho).max(1.0)
    }
}

/// Eigenvalue multiplicity, either a fixed count or `d − k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Multiplicity {
    Exact(usize),
    DMinus(usize),
}

impl Multiplicity {
    pub fn resolve(&self, d: usize) -> usize {
        match *self {
            Multiplicity::Exact(n) => n,
            Multiplicity::DMinus(k) => d.saturating_sub(k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EigenRole {
    /// Directions orthogonal to both `w` and `w⋆`.
    Bulk,
    /// Inside `span{w, w⋆}`.
    Span,
    /// Along `w⋆` when `w` and `w⋆` are collinear.
    Teacher,
    /// Tangent directions of the sphere orthogonal to `w⋆`.
    Tangent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub eigenvalue: f64,
    pub multiplicity: Multiplicity,
    pub role: EigenRole,
}

/// `Δ/2 + 3ρ² + 3q² − 4m² − 2ρq`.
pub fn risk_euclidean(pt: &GeometryPoint) -> f64 {
    let GeometryPoint { m, q, rho, delta } = *pt;
    delta / 2.0 + 3.0 * rho * rho + 3.0 * q * q - 4.0 * m * m - 2.0 * rho * q
}

/// `Δ/2 + 2(1 − m²)`.
pub fn risk_spherical(m: f64, delta: f64) -> f64 {
    delta / 2.0 + 2.0 * (1.0 - m * m)
}

/// `(c_w, c⋆)` with `∇R = (c_w w + c⋆ w⋆)/d`: `c_w = −2(ρ − 3q)`, `c⋆ = −4m`.
pub fn euclidean_gradient_coefficients(pt: &GeometryPoint) -> (f64, f64) {
    (-2.0 * (pt.rho - 3.0 * pt.q), -4.0 * pt.m)
}

/// `‖∇R‖²` in units of `1/d`.
pub fn euclidean_gradient_norm2(pt: &GeometryPoint) -> f64 {
    let (cw, cs) = euclidean_gradient_coefficients(pt);
    cw * cw * pt.q + cs * cs * pt.rho + 2.0 * cw * cs * pt.m
}

/// Hessian spectrum from the identity-plus-rank-two structure.
pub fn euclidean_hessian_spectrum(pt: &GeometryPoint) -> Vec<SpectrumEntry> {
    let bulk = -2.0 * (pt.rho - 3.0 * pt.q);
    if pt.collinear() {
        let alpha = pt.m / pt.rho;
        return vec![
            SpectrumEntry {
                eigenvalue: bulk,
                multiplicity: Multiplicity::DMinus(1),
                role: EigenRole::Bulk,
            },
            SpectrumEntry {
                eigenvalue: bulk + 2.0 * (3.0 * alpha * alpha - 1.0),
                multiplicity: Multiplicity::Exact(1),
                role: EigenRole::Teacher,
            },
        ];
    }
    // Rank-two part 3 w wᵀ − w⋆ w⋆ᵀ (teacher normalized to unit length) acts on
    // span{w, w⋆} through C G, with G the Gram matrix of the spanning pair.
    let g = Matrix2::new(pt.q / pt.rho, pt.m / pt.rho, pt.m / pt.rho, 1.0);
    let cg = Matrix2::new(3.0, 0.0, 0.0, -1.0) * g;
    let tr = cg.trace();
    let det = cg.determinant();
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let mut span = [tr / 2.0 - disc, tr / 2.0 + disc];
    span.sort_by(f64::total_cmp);
    let mut out = vec![SpectrumEntry {
        eigenvalue: bulk,
        multiplicity: Multiplicity::DMinus(2),
        role: EigenRole::Bulk,
    }];
    out.extend(span.iter().map(|e| SpectrumEntry {
        eigenvalue: bulk + 2.0 * e,
        multiplicity: Multiplicity::Exact(1),
        role: EigenRole::Span,
    }));
    out
}

pub fn euclidean_gradient_spectrum(pt: &GeometryPoint) -> (f64, Vec<SpectrumEntry>) {
    (euclidean_gradient_norm2(pt), euclidean_hessian_spectrum(pt))
}

/// Riemannian gradient coefficients `(4m², −4m)` on `(w, w⋆)` and the Hessian
/// spectrum `{4m² × (d−1), 4(2m² − 1) × 1}`.
pub fn spherical_gradient_hessian(m: f64, _delta: f64) -> Result<((f64, f64), Vec<SpectrumEntry>)> {
    if !(m.abs() <= 1.0) {
        return Err(Error::InvalidState(format!("spherical overlap must satisfy |m| <= 1, got {m}")));
    }
    let spectrum = vec![
        SpectrumEntry {
            eigenvalue: 4.0 * m * m,
            multiplicity: Multiplicity::DMinus(1),
            role: EigenRole::Tangent,
        },
        SpectrumEntry {
            eigenvalue: 4.0 * (2.0 * m * m - 1.0),
            multiplicity: Multiplicity::Exact(1),
            role: EigenRole::Teacher,
        },
    ];
    Ok(((4.0 * m * m, -4.0 * m), spectrum))
}

/// `‖grad R‖²` on the sphere in units of `1/d`.
pub fn spherical_gradient_norm2(m: f64) -> f64 {
    16.0 * m * m * (1.0 - m * m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticalKind {
    Maximum,
    StrictSaddle,
    Minimum,
}

/// Kind implied by the signs of a spectrum.
pub fn classify_spectrum(spectrum: &[SpectrumEntry]) -> Option<CriticalKind> {
    let neg = spectrum.iter().any(|e| e.eigenvalue < -ZERO_TOL);
    let all_neg = spectrum.iter().all(|e| e.eigenvalue < -ZERO_TOL);
    let all_pos = spectrum.iter().all(|e| e.eigenvalue > ZERO_TOL);
    if all_neg {
        Some(CriticalKind::Maximum)
    } else if all_pos {
        Some(CriticalKind::Minimum)
    } else if neg {
        Some(CriticalKind::StrictSaddle)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub location: GeometryPoint,
    pub kind: CriticalKind,
    pub risk: f64,
    pub gradient_norm2: f64,
    pub spectrum: Vec<SpectrumEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeReport {
    pub rho: f64,
    pub delta: f64,
    pub euclidean: Vec<CriticalPoint>,
    pub spherical: Vec<CriticalPoint>,
}

fn checked(location: GeometryPoint, declared: CriticalKind, risk: f64, grad: f64, spectrum: Vec<SpectrumEntry>) -> Result<CriticalPoint> {
    let kind = classify_spectrum(&spectrum)
        .ok_or_else(|| Error::Classification(format!("degenerate spectrum at {location:?}")))?;
    if kind != declared {
        return Err(Error::Classification(format!(
            "{location:?} expected {declared:?}, spectrum says {kind:?}"
        )));
    }
    Ok(CriticalPoint {
        location,
        kind,
        risk,
        gradient_norm2: grad,
        spectrum,
    })
}

/// The Euclidean and spherical critical sets, classified from their spectra.
pub fn classify_critical_points(rho: f64, delta: f64) -> Result<LandscapeReport> {
    let mut euclidean = Vec::new();
    for (m, q, kind) in [
        (0.0, 0.0, CriticalKind::Maximum),
        (0.0, rho / 3.0, CriticalKind::StrictSaddle),
        (rho, rho, CriticalKind::Minimum),
        (-rho, rho, CriticalKind::Minimum),
    ] {
        let pt = GeometryPoint::new(m, q, rho, delta)?;
        let (grad, spectrum) = euclidean_gradient_spectrum(&pt);
        euclidean.push(checked(pt, kind, risk_euclidean(&pt), grad, spectrum)?);
    }
    let mut spherical = Vec::new();
    for (m, kind) in [
        (0.0, CriticalKind::StrictSaddle),
        (1.0, CriticalKind::Minimum),
        (-1.0, CriticalKind::Minimum),
    ] {
        let pt = GeometryPoint::spherical(m, delta)?;
        let (_, spectrum) = spherical_gradient_hessian(m, delta)?;
        spherical.push(checked(pt, kind, risk_spherical(m, delta), spherical_gradient_norm2(m), spectrum)?);
    }
    Ok(LandscapeReport {
        rho,
        delta,
        euclidean,
        spherical,
    })
}

/// Unconstrained `p = 1` overlap flow at `Δ = 0`.
pub fn unconstrained_ode_field_p1(m: f64, q: f64, rho: f64, gamma: f64) -> (f64, f64) {
    let dm = 6.0 * m * (rho - q);
    let dq = 4.0 * (q * (rho - 3.0 * q) + 2.0 * m * m)
        + 12.0 * gamma * (q * (rho * rho + 5.0 * q * q - 2.0 * rho * q) + 4.0 * m * m * (rho - 2.0 * q));
    (dm, dq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::matrix_drift_a1;
    use crate::state::{OverlapState, TaskParams};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    #[test]
    fn risk_values() {
        let r = |m, q, rho| risk_euclidean(&GeometryPoint::new(m, q, rho, 0.6).unwrap());
        assert!((r(2.0, 2.0, 2.0) - 0.3).abs() < 1e-12);
        assert!((r(0.0, 0.0, 2.0) - (0.3 + 12.0)).abs() < 1e-12);
        assert!((r(0.0, 2.0 / 3.0, 2.0) - (0.3 + 32.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn euclidean_excess_is_twice_spherical_on_unit_sphere() {
        for m in [0.0, 0.3, -0.7, 1.0] {
            let e = risk_euclidean(&GeometryPoint::spherical(m, 0.2).unwrap()) - 0.1;
            let s = risk_spherical(m, 0.2) - 0.1;
            if m.abs() == 1.0 {
                assert!(e.abs() < 1e-12 && s.abs() < 1e-12);
            } else {
                assert!((e / s - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectra_at_paper_points() {
        let rho = 1.7;
        let s = euclidean_hessian_spectrum(&GeometryPoint::new(0.0, 0.0, rho, 0.0).unwrap());
        assert_eq!(s.len(), 2);
        assert!((s[0].eigenvalue + 2.0 * rho).abs() < 1e-12 && s[0].multiplicity == Multiplicity::DMinus(1));
        assert!((s[1].eigenvalue + 2.0 * (rho + 1.0)).abs() < 1e-12);

        let s = euclidean_hessian_spectrum(&GeometryPoint::new(0.0, rho / 3.0, rho, 0.0).unwrap());
        assert_eq!(s[0].multiplicity, Multiplicity::DMinus(2));
        assert!(s[0].eigenvalue.abs() < 1e-12);
        assert!(s[1].eigenvalue < 0.0 && s[2].eigenvalue > 0.0);

        let s = euclidean_hessian_spectrum(&GeometryPoint::new(rho, rho, rho, 0.0).unwrap());
        assert!((s[0].eigenvalue - 4.0 * rho).abs() < 1e-12);
        assert!((s[1].eigenvalue - 4.0 * (rho + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn spherical_examples() {
        let ((cw, cs), s) = spherical_gradient_hessian(0.0, 0.0).unwrap();
        assert_eq!((cw, cs), (0.0, 0.0));
        assert_eq!(s[0].eigenvalue, 0.0);
        assert_eq!(s[1].eigenvalue, -4.0);
        let (_, s) = spherical_gradient_hessian(1.0, 0.0).unwrap();
        assert!(s.iter().all(|e| e.eigenvalue == 4.0));
        assert_eq!(s.iter().map(|e| e.multiplicity.resolve(100)).sum::<usize>(), 100);
        assert_eq!(spherical_gradient_hessian(0.5, 0.0).unwrap().0, (1.0, -2.0));
    }

    #[test]
    fn critical_set() {
        let rep = classify_critical_points(1.0, 0.0).unwrap();
        let kinds: Vec<_> = rep.euclidean.iter().map(|c| c.kind).collect();
        assert_eq!(
            kinds,
            [CriticalKind::Maximum, CriticalKind::StrictSaddle, CriticalKind::Minimum, CriticalKind::Minimum]
        );
        let risks: Vec<_> = rep.euclidean.iter().map(|c| c.risk).collect();
        assert!((risks[0] - 3.0).abs() < 1e-12);
        assert!((risks[1] - 8.0 / 3.0).abs() < 1e-12);
        assert!(risks[2].abs() < 1e-12 && risks[3].abs() < 1e-12);
        assert!(risks[2] < risks[1] && risks[1] < risks[0]);
        assert_eq!(rep.spherical[0].kind, CriticalKind::StrictSaddle);
    }

    #[test]
    fn report_serializes() {
        let rep = classify_critical_points(1.0, 0.5).unwrap();
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("strict-saddle") && json.contains("d_minus"));
        let back: LandscapeReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn field_fixed_points_are_critical_points() {
        for rho in [0.5, 1.0, 2.0] {
            for c in classify_critical_points(rho, 0.0).unwrap().euclidean {
                let (dm, dq) = unconstrained_ode_field_p1(c.location.m, c.location.q, rho, 0.0);
                assert!(dm.abs() < 1e-12 && dq.abs() < 1e-12, "{:?}", c.location);
            }
        }
    }

    #[test]
    fn field_matches_matrix_form() {
        let mut rng = crate::rng::stream(1, crate::rng::Purpose::MonteCarlo, 0);
        use rand::Rng;
        for _ in 0..20 {
            let rho: f64 = rng.random_range(0.2..2.0);
            let q: f64 = rng.random_range(0.0..2.0);
            let m = rng.random_range(-1.0..1.0) * (q * rho).sqrt();
            let gamma: f64 = rng.random_range(0.0..0.3);
            let s = OverlapState {
                a: DVector::from_element(1, 1.0),
                m: DVector::from_element(1, m),
                q: DMatrix::from_element(1, 1, q),
                rho,
            };
            let mut params = TaskParams::spherical(100, 1, gamma, 0.0);
            params.spherical = false;
            let (dm, dq) = matrix_drift_a1(&s, &params).unwrap();
            let (fm, fq) = unconstrained_ode_field_p1(m, q, rho, gamma);
            assert!((dm[0] - fm).abs() < 1e-10 && (dq[(0, 0)] - fq).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn finite_difference_gradient(rho in 0.3f64..2.0, q in 0.05f64..2.0, t in -0.95f64..0.95) {
            let m = t * (q * rho).sqrt();
            let h = 1e-5;
            let half = |m: f64, q: f64| risk_euclidean(&GeometryPoint { m, q, rho, delta: 0.0 }) / 2.0;
            let dm = (half(m + h, q) - half(m - h, q)) / (2.0 * h);
            let dq = (half(m, q + h) - half(m, q - h)) / (2.0 * h);
            let (cw, cs) = euclidean_gradient_coefficients(&GeometryPoint { m, q, rho, delta: 0.0 });
            prop_assert!((dm - cs).abs() < 1e-6);
            prop_assert!((2.0 * dq - cw).abs() < 1e-6);
        }

        #[test]
        fn classification_matches_gradient_zero(rho in 0.1f64..5.0, delta in 0.0f64..3.0) {
            let rep = classify_critical_points(rho, delta).unwrap();
            for c in rep.euclidean.iter().chain(&rep.spherical) {
                prop_assert!(c.gradient_norm2.abs() < 1e-12);
            }
        }
    }
}
