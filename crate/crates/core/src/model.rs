//! Coefficients, boundary data, the Hamiltonian and its Lagrangian, and assumption checks.

use nalgebra::{Matrix2, SMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Domain, Point};

/// Sparse bivariate polynomial `sum c x^px y^py`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Polynomial2 {
    pub terms: Vec<(f64, u32, u32)>,
}

impl Polynomial2 {
    pub fn constant(c: f64) -> Self {
        Polynomial2 {
            terms: if c == 0.0 { vec![] } else { vec![(c, 0, 0)] },
        }
    }

    pub fn linear(cx: f64, cy: f64) -> Self {
        let mut terms = vec![];
        if cx != 0.0 {
            terms.push((cx, 1, 0));
        }
        if cy != 0.0 {
            terms.push((cy, 0, 1));
        }
        Polynomial2 { terms }
    }

    pub fn eval(&self, x: &Point) -> f64 {
        self.terms
            .iter()
            .map(|&(c, px, py)| c * x.x.powi(px as i32) * x.y.powi(py as i32))
            .sum()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|&(_, px, py)| px == 0 && py == 0)
    }
}

/// Diffusion matrix `a` and drift `b`, with the ellipticity constant `theta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub preset: String,
    pub a11: Polynomial2,
    pub a12: Polynomial2,
    pub a22: Polynomial2,
    pub b1: Polynomial2,
    pub b2: Polynomial2,
    pub theta: f64,
}

impl Coefficients {
    pub fn isotropic_quadratic() -> Self {
        Self::diagonal("isotropic_quadratic", 1.0, 1.0, -1.0, -1.0, 1.0)
    }

    pub fn anisotropic_quadratic() -> Self {
        Self::diagonal("anisotropic_quadratic", 1.0, 1.0, -1.0, -2.0, 1.0)
    }

    pub fn anisotropic_diffusion() -> Self {
        Self::diagonal("anisotropic_diffusion", 1.0, 0.5, -1.0, -1.0, 0.5)
    }

    /// `b(x) = +x`: violates inward drift and stability.
    pub fn outward_drift() -> Self {
        Self::diagonal("outward_drift", 1.0, 1.0, 1.0, 1.0, 1.0)
    }

    fn diagonal(name: &str, a11: f64, a22: f64, k1: f64, k2: f64, theta: f64) -> Self {
        Coefficients {
            preset: name.to_string(),
            a11: Polynomial2::constant(a11),
            a12: Polynomial2::constant(0.0),
            a22: Polynomial2::constant(a22),
            b1: Polynomial2::linear(k1, 0.0),
            b2: Polynomial2::linear(0.0, k2),
            theta,
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "isotropic_quadratic" => Ok(Self::isotropic_quadratic()),
            "anisotropic_quadratic" => Ok(Self::anisotropic_quadratic()),
            "anisotropic_diffusion" => Ok(Self::anisotropic_diffusion()),
            "outward_drift" => Ok(Self::outward_drift()),
            other => Err(Error::Config(format!(
                "unknown coefficients preset '{other}'"
            ))),
        }
    }

    pub fn a(&self, x: &Point) -> Matrix2<f64> {
        let off = self.a12.eval(x);
        Matrix2::new(self.a11.eval(x), off, off, self.a22.eval(x))
    }

    pub fn b(&self, x: &Point) -> Point {
        Point::new(self.b1.eval(x), self.b2.eval(x))
    }

    pub fn has_cross_diffusion(&self) -> bool {
        !self.a12.terms.iter().all(|t| t.0 == 0.0)
    }
}

/// `H(x, p) = a(x) p·p + b(x)·p`.
pub fn hamiltonian(c: &Coefficients, x: &Point, p: &Point) -> f64 {
    (c.a(x) * p).dot(p) + c.b(x).dot(p)
}

/// `L(x, ξ) = ¼ a(x)⁻¹ (ξ − b(x))·(ξ − b(x))`.
pub fn lagrangian(c: &Coefficients, x: &Point, xi: &Point) -> f64 {
    let a = c.a(x);
    let v = xi - c.b(x);
    let ainv = a.try_inverse().unwrap_or_else(Matrix2::zeros);
    0.25 * (ainv * v).dot(&v)
}

/// Symmetric positive-definite square root.
pub fn spd_sqrt<const N: usize>(a: &SMatrix<f64, N, N>) -> Result<SMatrix<f64, N, N>> {
    let asym = (a - a.transpose()).abs().max();
    if asym > 1e-12 * (1.0 + a.abs().max()) {
        return Err(Error::Model(format!(
            "matrix is not symmetric (asymmetry {asym:e})"
        )));
    }
    if N == 2 {
        let (p, q, r) = (a[(0, 0)], a[(0, 1)], a[(1, 1)]);
        let det = p * r - q * q;
        let tr = p + r;
        if !(det > 0.0 && tr > 0.0) {
            return Err(Error::Model(format!(
                "matrix is not positive definite (det {det:e}, trace {tr:e})"
            )));
        }
        let s = det.sqrt();
        let t = (tr + 2.0 * s).sqrt();
        let mut out = *a;
        out[(0, 0)] = (p + s) / t;
        out[(0, 1)] = q / t;
        out[(1, 0)] = q / t;
        out[(1, 1)] = (r + s) / t;
        return Ok(out);
    }
    let eig =
        nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_column_slice(N, N, a.as_slice()));
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Model("matrix is not positive definite".into()));
    }
    let d = nalgebra::DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let root = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok(SMatrix::<f64, N, N>::from_column_slice(root.as_slice()))
}

/// σ with σσᵗ = a(x).
pub fn noise_root(c: &Coefficients, x: &Point) -> Result<Matrix2<f64>> {
    spd_sqrt(&c.a(x))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BoundaryData {
    X1Squared,
    X2Squared,
    Constant(f64),
    Polynomial(Polynomial2),
}

impl BoundaryData {
    /// Parses `x1_squared`, `x2_squared` or `constant:c`.
    pub fn from_preset(spec: &str) -> Result<Self> {
        match spec.split_once(':') {
            Some(("constant", c)) => c
                .trim()
                .parse()
                .map(BoundaryData::Constant)
                .map_err(|_| Error::Config(format!("bad constant in boundary data '{spec}'"))),
            None if spec == "x1_squared" => Ok(BoundaryData::X1Squared),
            None if spec == "x2_squared" => Ok(BoundaryData::X2Squared),
            _ => Err(Error::Config(format!(
                "unknown boundary data preset '{spec}'"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            BoundaryData::X1Squared => "x1_squared".into(),
            BoundaryData::X2Squared => "x2_squared".into(),
            BoundaryData::Constant(c) => format!("constant:{c}"),
            BoundaryData::Polynomial(_) => "polynomial".into(),
        }
    }

    pub fn eval(&self, x: &Point) -> f64 {
        match self {
            BoundaryData::X1Squared => x.x * x.x,
            BoundaryData::X2Squared => x.y * x.y,
            BoundaryData::Constant(c) => *c,
            BoundaryData::Polynomial(p) => p.eval(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SemilinearKind {
    /// `f = -M(ε) |p| tanh(u)` with `M(ε) = scale ε`.
    Tanh,
    /// `f = -M |p| tanh(u)` with constant `M = scale`; violates `M(ε) → 0`.
    TanhConstant,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemilinearTerm {
    pub kind: SemilinearKind,
    pub m_scale: f64,
}

impl SemilinearTerm {
    pub fn tanh(m_scale: f64) -> Self {
        SemilinearTerm {
            kind: SemilinearKind::Tanh,
            m_scale,
        }
    }

    pub fn zero() -> Self {
        SemilinearTerm {
            kind: SemilinearKind::Zero,
            m_scale: 0.0,
        }
    }

    pub fn from_preset(name: &str, m_scale: f64) -> Result<Self> {
        let kind = match name {
            "tanh" => SemilinearKind::Tanh,
            "tanh_constant" => SemilinearKind::TanhConstant,
            "zero" => SemilinearKind::Zero,
            other => {
                return Err(Error::Config(format!(
                    "unknown semilinear preset '{other}'"
                )))
            }
        };
        Ok(SemilinearTerm { kind, m_scale })
    }

    pub fn m(&self, eps: f64) -> f64 {
        match self.kind {
            SemilinearKind::Tanh => self.m_scale * eps,
            SemilinearKind::TanhConstant => self.m_scale,
            SemilinearKind::Zero => 0.0,
        }
    }

    /// Coefficient `c` with `f = c |p|`; always in `[-M, M]`.
    pub fn gain(&self, eps: f64, u: f64) -> f64 {
        match self.kind {
            SemilinearKind::Zero => 0.0,
            _ => -self.m(eps) * u.tanh(),
        }
    }

    pub fn f(&self, eps: f64, _x: &Point, u: f64, p: &Point) -> f64 {
        self.gain(eps, u) * p.norm()
    }
}

/// A full problem instance.
#[derive(Clone, Debug)]
pub struct Problem {
    pub domain: Domain,
    pub coefficients: Coefficients,
    pub boundary: BoundaryData,
    pub semilinear: Option<SemilinearTerm>,
}

impl Problem {
    pub fn new(domain: Domain, coefficients: Coefficients, boundary: BoundaryData) -> Self {
        Problem {
            domain,
            coefficients,
            boundary,
            semilinear: None,
        }
    }

    pub fn with_semilinear(mut self, f: SemilinearTerm) -> Self {
        self.semilinear = Some(f);
        self
    }

    /// sup over boundary samples and a coarse interior net of |b|.
    pub fn drift_sup(&self) -> f64 {
        let mut m: f64 = 0.0;
        for y in self.domain.boundary_samples() {
            for s in 0..=16 {
                m = m.max(self.coefficients.b(&(y * (s as f64 / 16.0))).norm());
            }
        }
        m
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SemilinearCheck {
    pub max_bound_ratio: f64,
    pub monotone: bool,
    pub zero_at_zero_gradient: bool,
    pub m_vanishes: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub theta: f64,
    pub min_eig_over_theta: f64,
    pub max_eig_times_theta: f64,
    pub ellipticity_ok: bool,
    pub max_b_dot_nu: f64,
    pub inward_ok: bool,
    pub b_at_origin: f64,
    pub lip_a: f64,
    pub lip_b: f64,
    pub semilinear: Option<SemilinearCheck>,
    pub confinement_time: Option<f64>,
    pub stability_message: Option<String>,
    pub passed: bool,
}

/// Sampled checks of ellipticity, inward drift, `b(0)=0`, Lipschitz quotients, the semilinear
/// bounds and global stability.
pub fn validate_assumptions(p: &Problem, n_samples: usize, seed: u64) -> ValidationReport {
    let c = &p.coefficients;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = p.domain.bounding_box;
    let mut interior = Vec::with_capacity(n_samples);
    while interior.len() < n_samples.max(1) {
        let x = Point::new(
            rng.gen_range(bb.min.x..=bb.max.x),
            rng.gen_range(bb.min.y..=bb.max.y),
        );
        if p.domain.rho(&x) <= 0.0 {
            interior.push(x);
        }
    }
    let mut min_eig = f64::INFINITY;
    let mut max_eig: f64 = 0.0;
    for x in &interior {
        let e = nalgebra::SymmetricEigen::new(c.a(x)).eigenvalues;
        min_eig = min_eig.min(e.min());
        max_eig = max_eig.max(e.max());
    }
    let theta = c.theta;
    let min_ratio = min_eig / theta;
    let max_ratio = max_eig * theta;
    let ellipticity_ok =
        theta > 0.0 && theta <= 1.0 && min_ratio >= 1.0 - 1e-12 && max_ratio <= 1.0 + 1e-12;

    let mut max_bnu = f64::NEG_INFINITY;
    for y in p.domain.boundary_samples() {
        let nu = p.domain.grad_rho(&y).normalize();
        max_bnu = max_bnu.max(c.b(&y).dot(&nu));
    }
    let b0 = c.b(&Point::zeros()).norm();

    let mut lip_a: f64 = 0.0;
    let mut lip_b: f64 = 0.0;
    for w in interior.windows(2) {
        let d = (w[0] - w[1]).norm();
        if d > 1e-12 {
            lip_a = lip_a.max((c.a(&w[0]) - c.a(&w[1])).abs().max() / d);
            lip_b = lip_b.max((c.b(&w[0]) - c.b(&w[1])).norm() / d);
        }
    }

    let semilinear = p.semilinear.as_ref().map(|f| {
        let eps = 0.05;
        let m = f.m(eps);
        let mut ratio: f64 = 0.0;
        let mut monotone = true;
        let mut zero_ok = true;
        for x in interior.iter().take(200) {
            let pvec = Point::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let u1: f64 = rng.gen_range(-3.0..3.0);
            let u2 = u1 + rng.gen_range(0.0..2.0);
            let f1 = f.f(eps, x, u1, &pvec);
            let f2 = f.f(eps, x, u2, &pvec);
            if m > 0.0 {
                ratio = ratio.max(f1.abs() / (m * pvec.norm()));
            } else if f1 != 0.0 {
                ratio = f64::INFINITY;
            }
            monotone &= f2 <= f1 + 1e-15;
            zero_ok &= f.f(eps, x, u1, &Point::zeros()) == 0.0;
        }
        let m_vanishes = f.m(1e-8) <= 1e-6;
        SemilinearCheck {
            max_bound_ratio: ratio,
            monotone,
            zero_at_zero_gradient: zero_ok,
            m_vanishes,
            passed: ratio <= 1.0 + 1e-12 && monotone && zero_ok && m_vanishes,
        }
    });

    let radius = p
        .domain
        .boundary_samples()
        .map(|y| y.norm())
        .fold(0.0, f64::max);
    let (confinement_time, stability_message) =
        match crate::flow::confinement_time(c, 0.1 * radius, radius, 64) {
            Ok(t) => (Some(t.time), None),
            Err(e) => (None, Some(e.to_string())),
        };

    let inward_ok = max_bnu < 0.0;
    let passed = ellipticity_ok
        && inward_ok
        && b0 < 1e-12
        && confinement_time.is_some()
        && semilinear.as_ref().map(|s| s.passed).unwrap_or(true);
    ValidationReport {
        theta,
        min_eig_over_theta: min_ratio,
        max_eig_times_theta: max_ratio,
        ellipticity_ok,
        max_b_dot_nu: max_bnu,
        inward_ok,
        b_at_origin: b0,
        lip_a,
        lip_b,
        semilinear,
        confinement_time,
        stability_message,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hamiltonian_examples() {
        let c = Coefficients::isotropic_quadratic();
        let x = Point::new(0.3, 0.4);
        assert!(hamiltonian(&c, &x, &x).abs() < 1e-15);
        assert_eq!(hamiltonian(&c, &x, &Point::zeros()), 0.0);
        assert!(
            (hamiltonian(&c, &Point::new(1.0, 0.0), &Point::new(1.0, 1.0)) - 1.0).abs() < 1e-15
        );
    }

    #[test]
    fn lagrangian_examples() {
        let c = Coefficients::isotropic_quadratic();
        let x = Point::new(0.5, 0.0);
        assert_eq!(lagrangian(&c, &x, &c.b(&x)), 0.0);
        assert!((lagrangian(&c, &x, &Point::new(1.0, 0.0)) - 0.5625).abs() < 1e-15);
    }

    #[test]
    fn roots() {
        let i = Matrix2::identity();
        assert!((spd_sqrt(&i).unwrap() - i).abs().max() < 1e-15);
        let d = Matrix2::new(4.0, 0.0, 0.0, 1.0);
        assert!(
            (spd_sqrt(&d).unwrap() - Matrix2::new(2.0, 0.0, 0.0, 1.0))
                .abs()
                .max()
                < 1e-15
        );
        let a = Matrix2::new(2.0, 1.0, 1.0, 2.0);
        let r = spd_sqrt(&a).unwrap();
        assert!((r * r - a).abs().max() < 1e-12);
        assert!((r - r.transpose()).abs().max() == 0.0);
        assert!(spd_sqrt(&Matrix2::new(1.0, 2.0, 2.0, 1.0)).is_err());
    }

    #[test]
    fn preset_parsing() {
        assert!(Coefficients::from_preset("isotropic_quadratic").is_ok());
        assert!(Coefficients::from_preset("nope").is_err());
        assert_eq!(
            BoundaryData::from_preset("constant:2.5").unwrap(),
            BoundaryData::Constant(2.5)
        );
        assert!(BoundaryData::from_preset("constant:x").is_err());
    }
}
