//! Grid constructions of the auxiliary sub- and supersolutions and checks of their inequalities.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::rk4_step;
use crate::geometry::{GridFunction, MaskedGrid, NodeClass, Point, NEIGHBORS8};
use crate::model::{hamiltonian, Coefficients, Problem};
use crate::parabolic::assemble_operator;
use crate::quasipotential::{pullback, solve_to_boundary, PotentialField};
use crate::residual::{central_gradient, one_sided_gradients, ResidualReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    Psi,
    PsiR,
    #[serde(rename = "V_r")]
    VR,
    #[serde(rename = "W_r")]
    WR,
    ExitW,
    ExpBarrier,
    AppendixBarrier,
}

/// A scalar side condition of a certificate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub relation: &'static str,
    pub bound: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            relation: "<=",
            bound,
            passed: value <= bound,
        }
    }

    pub fn at_least(name: &str, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            relation: ">=",
            bound,
            passed: value >= bound,
        }
    }

    pub fn below(name: &str, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            relation: "<",
            bound,
            passed: value < bound,
        }
    }

    pub fn above(name: &str, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            relation: ">",
            bound,
            passed: value > bound,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Certificate {
    pub kind: CertificateKind,
    pub values: GridFunction,
    /// Coefficient of `t` for time-dependent barriers `w(x, t) = values(x) + slope t`.
    pub time_slope: Option<f64>,
    pub eta: f64,
    pub params: BTreeMap<String, f64>,
    pub report: ResidualReport,
    pub checks: Vec<Check>,
    pub verified: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CertificateSummary {
    pub kind: CertificateKind,
    pub params: BTreeMap<String, f64>,
    pub eta: f64,
    pub residual_stats: ResidualReport,
    pub checks: Vec<Check>,
    pub verified: bool,
}

impl Certificate {
    fn new(
        kind: CertificateKind,
        values: GridFunction,
        eta: f64,
        params: BTreeMap<String, f64>,
        report: ResidualReport,
        checks: Vec<Check>,
    ) -> Self {
        let verified = report.verified && checks.iter().all(|c| c.passed);
        Certificate {
            kind,
            values,
            time_slope: None,
            eta,
            params,
            report,
            checks,
            verified,
        }
    }

    pub fn param(&self, key: &str) -> Result<f64> {
        self.params
            .get(key)
            .copied()
            .ok_or_else(|| Error::Construction(format!("certificate has no parameter '{key}'")))
    }

    pub fn summary(&self) -> CertificateSummary {
        CertificateSummary {
            kind: self.kind,
            params: self.params.clone(),
            eta: self.eta,
            residual_stats: self.report.clone(),
            checks: self.checks.clone(),
            verified: self.verified,
        }
    }

    /// Recomputes the residual report from the stored values and parameters.
    pub fn recheck(&self, p: &Problem, grid: &MaskedGrid) -> Result<ResidualReport> {
        match self.kind {
            CertificateKind::Psi => Ok(psi_report(
                &p.coefficients,
                grid,
                &self.values,
                &self.params,
            )),
            CertificateKind::PsiR | CertificateKind::VR => Ok(margin_report(
                &p.coefficients,
                grid,
                &self.values,
                self.param("r")? + 2.0 * grid.h(),
                self.eta,
            )),
            CertificateKind::WR => Ok(w_r_report(
                &p.coefficients,
                grid,
                &self.values,
                self.param("r")? + self.param("gamma")?,
            )),
            CertificateKind::ExitW => Ok(exit_report(
                &p.coefficients,
                grid,
                &self.values,
                self.eta,
                self.param("tolerance")?,
            )),
            CertificateKind::ExpBarrier => exp_report(
                p,
                grid,
                &self.values,
                self.param("eps")?,
                self.param("R_eps")?,
            ),
            CertificateKind::AppendixBarrier => {
                let opts = AppendixOptions {
                    n_y: self.param("n_y")? as usize,
                    n_lambda: self.param("n_lambda")? as usize,
                    ..AppendixOptions::default()
                };
                let family =
                    BarrierFamily::new(p, grid, self.param("eps")?, self.param("M_eps")?, &opts)?;
                Ok(family.residual_report(p, grid, opts.tolerance)?.0)
            }
        }
    }

    /// Writes `x1, x2, value` rows for active nodes.
    pub fn write_csv(&self, grid: &MaskedGrid, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::io(path, e.into());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["x1", "x2", "value"]).map_err(io)?;
        for k in grid.active() {
            let x = grid.point(k);
            w.write_record(&[
                x.x.to_string(),
                x.y.to_string(),
                self.values.get(k).to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Smallest `H(x, s·p)` over the four one-sided gradients, the lenient reading for subsolutions.
fn h_min(c: &Coefficients, f: &GridFunction, k: usize, x: &Point, sign: f64) -> Option<f64> {
    let g = one_sided_gradients(f, k)?;
    Some(
        g.iter()
            .map(|p| hamiltonian(c, x, &(p * sign)))
            .fold(f64::INFINITY, f64::min),
    )
}

/// Largest `H(x, s·p)` over the four one-sided gradients, the lenient reading for supersolutions.
fn h_max(c: &Coefficients, f: &GridFunction, k: usize, x: &Point, sign: f64) -> Option<f64> {
    let g = one_sided_gradients(f, k)?;
    Some(
        g.iter()
            .map(|p| hamiltonian(c, x, &(p * sign)))
            .fold(f64::NEG_INFINITY, f64::max),
    )
}

/// Central second differences `(f_xx, f_xy, f_yy)` at node `k`.
fn hessian(f: &GridFunction, k: usize) -> Option<(f64, f64, f64)> {
    let h = f.lattice.h;
    let c = f.get(k);
    let v = |di, dj| f.at(k, di, dj);
    let vals = [
        v(1, 0),
        v(-1, 0),
        v(0, 1),
        v(0, -1),
        v(1, 1),
        v(-1, 1),
        v(1, -1),
        v(-1, -1),
    ];
    if !c.is_finite() || !vals.iter().all(|x| x.is_finite()) {
        return None;
    }
    let fxx = (vals[0] - 2.0 * c + vals[1]) / (h * h);
    let fyy = (vals[2] - 2.0 * c + vals[3]) / (h * h);
    let fxy = (vals[4] - vals[5] - vals[6] + vals[7]) / (4.0 * h * h);
    Some((fxx, fxy, fyy))
}

/// Largest second difference along the axes and diagonals over interior nodes.
pub fn max_second_difference(f: &GridFunction, grid: &MaskedGrid) -> f64 {
    let h = grid.h();
    let mut m = f64::NEG_INFINITY;
    for &k in &grid.interior {
        let c = f.get(k);
        for (di, dj) in [(1, 0), (0, 1), (1, 1), (1, -1)] {
            let (a, b) = (f.at(k, di, dj), f.at(k, -di, -dj));
            if a.is_finite() && b.is_finite() && c.is_finite() {
                let len2 = ((di * di + dj * dj) as f64) * h * h;
                m = m.max((a - 2.0 * c + b) / len2);
            }
        }
    }
    m
}

/// Largest `tr(a D²_h f)` over interior nodes.
fn max_trace(c: &Coefficients, f: &GridFunction, grid: &MaskedGrid) -> f64 {
    grid.interior
        .iter()
        .filter_map(|&k| {
            let (fxx, fxy, fyy) = hessian(f, k)?;
            let a = c.a(&grid.point(k));
            Some(a[(0, 0)] * fxx + 2.0 * a[(0, 1)] * fxy + a[(1, 1)] * fyy)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsiOptions {
    pub big_r: f64,
    pub ramp_width: f64,
    pub annulus: (f64, f64),
    pub tolerance: f64,
    pub dt: f64,
    pub horizon: f64,
}

impl Default for PsiOptions {
    fn default() -> Self {
        PsiOptions {
            big_r: 2.0,
            ramp_width: 1.0,
            annulus: (0.1, 0.95),
            tolerance: 0.05,
            dt: 1e-3,
            horizon: 1e3,
        }
    }
}

fn psi_report(
    c: &Coefficients,
    grid: &MaskedGrid,
    values: &GridFunction,
    params: &BTreeMap<String, f64>,
) -> ResidualReport {
    let (lo, hi) = (params["annulus_inner"], params["annulus_outer"]);
    let samples: Vec<(f64, Point)> = grid
        .interior
        .iter()
        .filter_map(|&k| {
            let x = grid.point(k);
            let r = x.norm();
            if r < lo || r > hi {
                return None;
            }
            let p = central_gradient(values, k)?;
            Some(((c.b(&x).dot(&p) + 1.0).abs(), x))
        })
        .collect();
    ResidualReport::from_samples(&samples, params["tolerance"])
}

/// `ψ(x) = −∫₀^∞ f(X(−t; x)) dt` with the radial ramp `f`, by reverse-flow integration.
pub fn build_psi(p: &Problem, grid: &MaskedGrid, opts: &PsiOptions) -> Result<Certificate> {
    let (big_r, w) = (opts.big_r, opts.ramp_width);
    if !(w > 0.0 && w < big_r) {
        return Err(Error::Parameter(format!(
            "ramp width {w} must lie in (0, {big_r})"
        )));
    }
    let reach = p
        .domain
        .boundary_samples()
        .map(|y| y.norm())
        .fold(0.0, f64::max);
    if reach > big_r - w {
        return Err(Error::Parameter(format!(
            "the ramp starts at radius {} inside the domain (boundary reaches {reach})",
            big_r - w
        )));
    }
    let c = &p.coefficients;
    let f = |x: &Point| ((big_r - x.norm()) / w).clamp(0.0, 1.0);
    let reverse = |x: &Point| -c.b(x);
    struct Rev<F>(F);
    impl<F: Fn(&Point) -> Point + Sync> crate::flow::Drift<2> for Rev<F> {
        fn drift(&self, x: &Point) -> Point {
            (self.0)(x)
        }
    }
    let rev = Rev(reverse);
    let mask = grid.h();
    let nodes: Vec<usize> = grid.active().collect();
    let computed: Vec<f64> = nodes
        .par_iter()
        .map(|&k| {
            let x0 = grid.point(k);
            if x0.norm() <= mask * (1.0 + 1e-12) {
                return Ok(f64::NAN);
            }
            let mut x = x0;
            let mut fx = f(&x);
            let mut integral = 0.0;
            let mut t = 0.0;
            while x.norm() < big_r {
                if t > opts.horizon {
                    return Err(Error::Stability(format!(
                        "reverse trajectory from ({:.4}, {:.4}) stays in B_{big_r} beyond t = {}",
                        x0.x, x0.y, opts.horizon
                    )));
                }
                let next = rk4_step(&rev, &x, opts.dt);
                let fn_ = f(&next);
                integral += 0.5 * opts.dt * (fx + fn_);
                x = next;
                fx = fn_;
                t += opts.dt;
            }
            Ok(-integral)
        })
        .collect::<Result<_>>()?;
    let mut values = GridFunction::undefined(grid.lattice);
    for (&k, v) in nodes.iter().zip(computed) {
        values.values[k] = v;
    }
    let prm = params(&[
        ("R", big_r),
        ("ramp_width", w),
        ("dt", opts.dt),
        ("annulus_inner", opts.annulus.0),
        ("annulus_outer", opts.annulus.1),
        ("mask_radius", mask),
        ("tolerance", opts.tolerance),
    ]);
    let report = psi_report(c, grid, &values, &prm);
    Ok(Certificate::new(
        CertificateKind::Psi,
        values,
        0.0,
        prm,
        report,
        Vec::new(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    PsiR,
    VR,
    WR,
}

/// The three rungs `ψ_r`, `V_r`, `W_r`.
#[derive(Clone, Debug)]
pub struct StrictLadder {
    pub psi_r: Certificate,
    pub v_r: Certificate,
    pub w_r: Certificate,
}

/// Samples `H(x, D_h f) + η` outside `B_rad`, tolerance `η/2`.
fn margin_report(
    c: &Coefficients,
    grid: &MaskedGrid,
    f: &GridFunction,
    rad: f64,
    eta: f64,
) -> ResidualReport {
    let samples: Vec<(f64, Point)> = grid
        .interior
        .iter()
        .filter_map(|&k| {
            let x = grid.point(k);
            if x.norm() <= rad {
                return None;
            }
            Some((h_min(c, f, k, &x, 1.0)? + eta, x))
        })
        .collect();
    ResidualReport::from_samples(&samples, eta / 2.0)
}

/// Samples `H(x, D_h W_r)` outside `B_rad`; the measured margin is `−max`.
fn w_r_report(c: &Coefficients, grid: &MaskedGrid, f: &GridFunction, rad: f64) -> ResidualReport {
    let samples: Vec<(f64, Point)> = grid
        .interior
        .iter()
        .filter_map(|&k| {
            let x = grid.point(k);
            if x.norm() < rad {
                return None;
            }
            Some((h_min(c, f, k, &x, 1.0)?, x))
        })
        .collect();
    let mut rep = ResidualReport::from_samples(&samples, 0.0);
    rep.verified = rep.verified && rep.max < 0.0;
    rep
}

fn max_h_inside(c: &Coefficients, grid: &MaskedGrid, f: &GridFunction, rad: f64) -> f64 {
    grid.interior
        .iter()
        .filter_map(|&k| {
            let x = grid.point(k);
            (x.norm() <= rad).then(|| h_min(c, f, k, &x, 1.0)).flatten()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn sup_distance(a: &GridFunction, b: &GridFunction, grid: &MaskedGrid) -> f64 {
    a.max_abs_diff(b, |k| grid.is_active(k))
}

/// Builds the strict-subsolution ladder from `V` and `ψ` with ball radius `r`.
pub fn strict_subsolution(
    p: &Problem,
    v: &PotentialField,
    psi: &Certificate,
    r: f64,
) -> Result<StrictLadder> {
    let grid = &v.grid;
    let h = grid.h();
    let c = &p.coefficients;
    if psi.kind != CertificateKind::Psi {
        return Err(Error::Construction("expected a ψ certificate".into()));
    }
    let mask = psi.param("mask_radius")?;
    if !(r > mask && r > 2.0 * h) {
        return Err(Error::Parameter(format!(
            "r = {r} must exceed the ψ mask radius {mask} and 2h"
        )));
    }
    let active: Vec<usize> = grid.active().collect();
    let clamp = -active
        .iter()
        .filter(|&&k| grid.point(k).norm() >= r)
        .map(|&k| psi.values.get(k))
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !clamp.is_finite() {
        return Err(Error::Construction("ψ is undefined outside B_r".into()));
    }
    let mut chi = GridFunction::undefined(grid.lattice);
    for &k in &active {
        let s = psi.values.get(k);
        chi.values[k] = if s.is_finite() { s.max(-clamp) } else { -clamp };
    }
    let mut lip: f64 = 0.0;
    for &k in &active {
        for &(di, dj) in &NEIGHBORS8[..4] {
            if let Some(m) = grid.lattice.offset(k, di, dj) {
                if grid.is_active(m) {
                    let d = h * ((di * di + dj * dj) as f64).sqrt();
                    lip = lip.max((chi.values[m] - chi.values[k]).abs() / d);
                }
            }
        }
    }
    let big_c = lip * lip;
    let lambda = c.theta / (2.0 * big_c);
    let mut psi_r = chi.clone();
    for &k in &active {
        psi_r.values[k] = lambda * chi.values[k];
    }
    let eta_psi = lambda / 2.0;
    let inside = max_h_inside(c, grid, &psi_r, r);
    let psi_r_cert = Certificate::new(
        CertificateKind::PsiR,
        psi_r.clone(),
        eta_psi,
        params(&[
            ("r", r),
            ("R_clamp", clamp),
            ("C", big_c),
            ("lambda", lambda),
            ("theta", c.theta),
        ]),
        margin_report(c, grid, &psi_r, r + 2.0 * h, eta_psi),
        vec![Check::at_most(
            "max H(x, D_h psi_r) in B_r",
            inside,
            5.0 * h,
        )],
    );

    let gap = sup_distance(&v.values, &psi_r, grid);
    if !(gap.is_finite() && gap > 0.0) {
        return Err(Error::Construction(format!(
            "blend weight undefined, ‖V − ψ_r‖ = {gap}"
        )));
    }
    let delta = (r / (2.0 * gap)).min(0.5);
    if !(delta > 1e-12) {
        return Err(Error::Construction(format!(
            "blend weight collapsed to {delta:e}"
        )));
    }
    let mut v_r = GridFunction::undefined(grid.lattice);
    for &k in &active {
        v_r.values[k] = (1.0 - delta) * v.values.get(k) + delta * psi_r.values[k];
    }
    let eta_v = delta * eta_psi;
    let dist_v = sup_distance(&v_r, &v.values, grid);
    let tol_v = 5.0 * h;
    let v_r_cert = Certificate::new(
        CertificateKind::VR,
        v_r.clone(),
        eta_v,
        params(&[
            ("r", r),
            ("delta", delta),
            ("lambda", lambda),
            ("tolerance", tol_v),
        ]),
        {
            let mut rep = margin_report(c, grid, &v_r, r + 2.0 * h, eta_v);
            rep.tolerance = tol_v;
            rep.verified = rep.count > 0 && rep.max <= tol_v;
            rep
        },
        vec![Check::below("‖V_r − V‖", dist_v, r)],
    );

    let gamma = r / 4.0;
    let kernel = mollifier(h, gamma);
    let boundary_like: Vec<usize> = active
        .iter()
        .copied()
        .filter(|&k| {
            grid.class[k] == NodeClass::BoundaryAdjacent
                || p.domain.rho(&grid.point(k)) > -(gamma + 2.0 * h)
        })
        .collect();
    let fits = |dp: f64| {
        boundary_like.par_iter().all(|&k| {
            let x = grid.point(k);
            kernel
                .iter()
                .all(|(z, _)| p.domain.rho(&((x - z) * (1.0 - dp))) <= 0.0)
        })
    };
    if !fits(0.5) {
        return Err(Error::Construction(
            "no shrink factor below 1/2 keeps the mollifier support inside".into(),
        ));
    }
    let (mut lo, mut hi) = (0.0, 0.5);
    if !fits(0.0) {
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if fits(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    } else {
        hi = 0.0;
    }
    let shrink = hi;
    let vals: Vec<f64> = active
        .par_iter()
        .map(|&k| {
            let x = grid.point(k);
            kernel
                .iter()
                .map(|(z, wt)| wt * v_r.sample(&((x - z) * (1.0 - shrink))))
                .sum()
        })
        .collect();
    let mut w_r = GridFunction::undefined(grid.lattice);
    for (&k, val) in active.iter().zip(vals) {
        w_r.values[k] = val;
    }
    let rep = w_r_report(c, grid, &w_r, r + gamma);
    let eta_w = -rep.max;
    let dist_w = sup_distance(&w_r, &v.values, grid);
    let inside_w = max_h_inside(c, grid, &w_r, r);
    let w_r_cert = Certificate::new(
        CertificateKind::WR,
        w_r,
        eta_w,
        params(&[
            ("r", r),
            ("gamma", gamma),
            ("shrink", shrink),
            ("delta", delta),
            ("lambda", lambda),
            ("C", big_c),
        ]),
        rep,
        vec![
            Check::above("eta", eta_w, 0.0),
            Check::at_most("‖W_r − V‖", dist_w, 3.0 * r),
            Check::at_most("max H(x, D_h W_r) in B_r", inside_w, 1.0),
        ],
    );
    Ok(StrictLadder {
        psi_r: psi_r_cert,
        v_r: v_r_cert,
        w_r: w_r_cert,
    })
}

pub fn build_strict_subsolution(
    p: &Problem,
    v: &PotentialField,
    psi: &Certificate,
    r: f64,
    stage: Stage,
) -> Result<Certificate> {
    let l = strict_subsolution(p, v, psi, r)?;
    Ok(match stage {
        Stage::PsiR => l.psi_r,
        Stage::VR => l.v_r,
        Stage::WR => l.w_r,
    })
}

/// Offsets and weights of the discretely normalized bump `(1 − |z/γ|²)³` on `|z| < γ`.
fn mollifier(h: f64, gamma: f64) -> Vec<(Point, f64)> {
    let m = (gamma / h).ceil() as i64;
    let mut out = Vec::new();
    for i in -m..=m {
        for j in -m..=m {
            let z = Point::new(i as f64 * h, j as f64 * h);
            let s = z.norm_squared() / (gamma * gamma);
            if s < 1.0 {
                out.push((z, (1.0 - s).powi(3)));
            }
        }
    }
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    out.iter_mut().for_each(|(_, w)| *w /= total);
    out
}

/// One-dimensional lower envelope `min_q f(q) + w (p − q)²`; non-finite entries are ignored.
fn lower_envelope(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let key = |q: usize| f[q] + w * (q * q) as f64;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&last) => {
                    let s = (key(q) - key(last)) / (2.0 * w * (q - last) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while j + 1 < v.len() && z[j + 1] < p as f64 {
            j += 1;
        }
        let q = v[j];
        let d = p as f64 - q as f64;
        *o = f[q] + w * d * d;
    }
}

/// `inf_y f(y) + |x − y|²/α` over defined nodes, by two separable lower-envelope passes.
/// Undefined nodes stay undefined.
pub fn inf_convolution(f: &GridFunction, alpha: f64) -> GridFunction {
    let l = f.lattice;
    let w = l.h * l.h / alpha;
    let mut tmp = vec![f64::INFINITY; l.len()];
    let mut row_in = vec![0.0; l.nx];
    let mut row_out = vec![0.0; l.nx];
    for j in 0..l.ny {
        for i in 0..l.nx {
            let v = f.values[l.index(i, j)];
            row_in[i] = if v.is_finite() { v } else { f64::INFINITY };
        }
        lower_envelope(&row_in, w, &mut row_out);
        for i in 0..l.nx {
            tmp[l.index(i, j)] = row_out[i];
        }
    }
    let mut col_in = vec![0.0; l.ny];
    let mut col_out = vec![0.0; l.ny];
    let mut out = GridFunction::undefined(l);
    for i in 0..l.nx {
        for j in 0..l.ny {
            col_in[j] = tmp[l.index(i, j)];
        }
        lower_envelope(&col_in, w, &mut col_out);
        for j in 0..l.ny {
            let k = l.index(i, j);
            if f.values[k].is_finite() {
                out.values[k] = col_out[j];
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitOptions {
    pub stencil_order: usize,
    pub gamma_min: f64,
    pub mu_ladder: Vec<f64>,
    /// Inf-convolution parameter in units of `h`.
    pub alpha_h: f64,
    /// Shrink `δ'` as a multiple of `μ`.
    pub shrink_ratio: f64,
    pub eta_cap: f64,
    pub tolerance: f64,
}

impl Default for ExitOptions {
    fn default() -> Self {
        ExitOptions {
            stencil_order: 2,
            gamma_min: 0.01,
            mu_ladder: vec![0.05, 0.02, 0.01, 0.005, 0.002],
            alpha_h: 1.0,
            shrink_ratio: 0.025,
            eta_cap: 0.005,
            tolerance: 0.0,
        }
    }
}

/// Samples `η − max H(x, −D_h W)` over interior nodes.
fn exit_report(
    c: &Coefficients,
    grid: &MaskedGrid,
    w: &GridFunction,
    eta: f64,
    tol: f64,
) -> ResidualReport {
    let samples: Vec<(f64, Point)> = grid
        .interior
        .iter()
        .filter_map(|&k| {
            let x = grid.point(k);
            Some((eta - h_max(c, w, k, &x, -1.0)?, x))
        })
        .collect();
    ResidualReport::from_samples(&samples, tol)
}

/// Exit supersolution `W` with `H(x, −DW) >= η` and `0 < W < λ`, for `λ > m₀`.
pub fn build_exit_supersolution(
    p: &Problem,
    v: &PotentialField,
    lambda: f64,
    opts: &ExitOptions,
) -> Result<Certificate> {
    let grid = &v.grid;
    let h = grid.h();
    let c = &p.coefficients;
    let m0 =
        v.m0.ok_or_else(|| Error::Precondition("the potential field has no m0".into()))?;
    let bound = m0 + 4.0 * opts.gamma_min;
    if lambda <= bound {
        return Err(Error::InfeasibleMargin { lambda, bound });
    }
    let gamma = (lambda - m0) / 4.0;
    let mut chosen = None;
    for &mu in &opts.mu_ladder {
        let u = solve_to_boundary(p, grid, mu, opts.stencil_order)?;
        if u.values.finite_max() + 1.5 * gamma < lambda {
            chosen = Some((mu, u));
            break;
        }
    }
    let (mu, u) = chosen.ok_or_else(|| {
        Error::Construction(format!(
            "no μ in the ladder keeps u_μ below {}",
            lambda - 1.5 * gamma
        ))
    })?;
    let shrink = opts.shrink_ratio * mu;
    let mut w1 = pullback(p, &u, |x| x * (1.0 - shrink))?;
    for v in w1.values.iter_mut().filter(|v| v.is_finite()) {
        *v += gamma;
    }
    let alpha = opts.alpha_h * h;
    let w = inf_convolution(&w1, alpha);
    let eta = (mu / 4.0).min(opts.eta_cap);
    let report = exit_report(c, grid, &w, eta, opts.tolerance);
    let semi = max_second_difference(&w, grid);
    let trace = max_trace(c, &w, grid);
    let (wmin, wmax) = (w.finite_min(), w.finite_max());
    Ok(Certificate::new(
        CertificateKind::ExitW,
        w,
        eta,
        params(&[
            ("lambda", lambda),
            ("m0", m0),
            ("gamma", gamma),
            ("mu", mu),
            ("shrink", shrink),
            ("alpha", alpha),
            ("tolerance", opts.tolerance),
        ]),
        report,
        vec![
            Check::above("min W", wmin, 0.0),
            Check::below("max W", wmax, lambda),
            Check::at_most("semiconcavity", semi, 2.0 / alpha + 10.0 * h),
            Check::at_most("eta * max tr(a D2 W)", eta * trace, 1.0),
        ],
    ))
}

fn exp_report(
    p: &Problem,
    grid: &MaskedGrid,
    v: &GridFunction,
    eps: f64,
    big_r: f64,
) -> Result<ResidualReport> {
    let op = assemble_operator(p, grid, eps)?;
    let lv = op.apply(&v.values);
    let samples: Vec<(f64, Point)> = op
        .rows
        .iter()
        .zip(lv)
        .map(|(&k, l)| (l - big_r, grid.point(k)))
        .collect();
    let mut rep = ResidualReport::from_samples(&samples, 0.0);
    rep.verified = rep.verified && rep.max < 0.0;
    Ok(rep)
}

/// `w(x, t) = exp((W_r − μ)/ε) + R_ε t` with `R_ε = (2/ε) max_{B_r} v`; verified iff
/// `R_ε > L_ε^h v` at every interior node.
pub fn build_exponential_barrier(
    p: &Problem,
    grid: &MaskedGrid,
    w_r: &Certificate,
    mu: f64,
    eps: f64,
) -> Result<Certificate> {
    if w_r.kind != CertificateKind::WR {
        return Err(Error::Construction("expected a W_r certificate".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("ε = {eps} must be positive")));
    }
    let r = w_r.param("r")?;
    let mut v = GridFunction::undefined(grid.lattice);
    let mut vmax: f64 = 0.0;
    for k in grid.active() {
        let val = ((w_r.values.get(k) - mu) / eps).exp();
        v.values[k] = val;
        if grid.point(k).norm() <= r {
            vmax = vmax.max(val);
        }
    }
    let big_r = 2.0 / eps * vmax;
    let c2 = max_trace(&p.coefficients, &w_r.values, grid).max(f64::MIN_POSITIVE);
    let eps0 = w_r.eta.min(1.0).max(0.0) / c2;
    let report = exp_report(p, grid, &v, eps, big_r)?;
    let mut cert = Certificate::new(
        CertificateKind::ExpBarrier,
        v,
        w_r.eta,
        params(&[
            ("r", r),
            ("mu", mu),
            ("eps", eps),
            ("R_eps", big_r),
            ("eps0", eps0),
            ("C_trace", c2),
        ]),
        report,
        Vec::new(),
    );
    cert.time_slope = Some(big_r);
    Ok(cert)
}

/// Allowance for rounding in `v_b(y; y, λ)`, which vanishes exactly when `δ(λ) = λ`.
pub const CONSISTENCY_ROUNDOFF: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct AppendixOptions {
    pub n_y: usize,
    pub n_lambda: usize,
    pub gamma_net: Vec<f64>,
    /// Interior y-net stride in nodes.
    pub interior_stride: usize,
    pub tolerance: f64,
}

impl Default for AppendixOptions {
    fn default() -> Self {
        AppendixOptions {
            n_y: 256,
            n_lambda: 8,
            gamma_net: vec![0.4, 0.2, 0.1, 0.05],
            interior_stride: 4,
            tolerance: 1e-6,
        }
    }
}

/// `Λ` from `ε(2nθ⁻¹ − 4θΛ) + 2(d+1)(M + ‖b‖) = 0`, and the residual of that equation.
pub fn lambda_balance(
    eps: f64,
    m_eps: f64,
    theta: f64,
    n: f64,
    d: f64,
    b_sup: f64,
) -> Result<(f64, f64)> {
    if !(eps > 0.0 && m_eps >= 0.0 && theta > 0.0) {
        return Err(Error::Parameter(format!(
            "need ε > 0, M ≥ 0, θ > 0; got {eps}, {m_eps}, {theta}"
        )));
    }
    let big_l = (2.0 * n / theta * eps + 2.0 * (d + 1.0) * (m_eps + b_sup)) / (4.0 * theta * eps);
    if !(big_l > 0.0) || !big_l.is_finite() {
        return Err(Error::Parameter(format!(
            "balance equation gives Λ = {big_l}"
        )));
    }
    let residual =
        eps * (2.0 * n / theta - 4.0 * theta * big_l) + 2.0 * (d + 1.0) * (m_eps + b_sup);
    Ok((big_l, residual))
}

struct Barrier {
    y: Point,
    z: Point,
    gy: f64,
    lambda: f64,
    delta: f64,
    alpha: f64,
}

impl Barrier {
    fn v(&self, x: &Point) -> f64 {
        -(-self.alpha * ((x - self.z).norm_squared() - self.delta * self.delta)).exp_m1()
    }
}

struct BarrierFamily {
    big_l: f64,
    balance_residual: f64,
    eps: f64,
    m_eps: f64,
    lambdas: Vec<f64>,
    barriers: Vec<Barrier>,
    lip: f64,
    osc: f64,
}

impl BarrierFamily {
    fn new(
        p: &Problem,
        grid: &MaskedGrid,
        eps: f64,
        m_eps: f64,
        opts: &AppendixOptions,
    ) -> Result<Self> {
        let c = &p.coefficients;
        let d = p.domain.diameter();
        let (big_l, balance_residual) = lambda_balance(eps, m_eps, c.theta, 2.0, d, p.drift_sup())?;
        let top = p.domain.lambda0().min(1.0);
        let h = grid.h();
        let mut lambdas: Vec<f64> = (1..=opts.n_lambda)
            .map(|k| top * 0.5f64.powi(k as i32))
            .collect();
        let resolved = lambdas.iter().filter(|&&l| l >= h).count().max(1);
        lambdas.truncate(resolved);
        let mut deltas = Vec::with_capacity(lambdas.len());
        for &l in &lambdas {
            deltas.push(p.domain.normal_offset_gap(l)?);
        }
        let mut ys = Vec::with_capacity(opts.n_y + grid.boundary.len());
        for m in 0..opts.n_y {
            ys.push(
                p.domain
                    .boundary_point(2.0 * std::f64::consts::PI * m as f64 / opts.n_y as f64)?,
            );
        }
        ys.extend(
            grid.boundary
                .iter()
                .map(|&k| grid.projection[k].unwrap().point),
        );
        let mut barriers = Vec::with_capacity(ys.len() * lambdas.len());
        for y in ys {
            let nu = p.domain.boundary_normal(&y)?;
            for (&lambda, &delta) in lambdas.iter().zip(&deltas) {
                barriers.push(Barrier {
                    y,
                    z: y + nu * lambda,
                    gy: p.boundary.eval(&y),
                    lambda,
                    delta,
                    alpha: big_l / (delta * delta),
                });
            }
        }
        let g = |k: usize| p.boundary.eval(&grid.point(k));
        let mut lip: f64 = 0.0;
        for k in grid.active() {
            for &(di, dj) in &NEIGHBORS8[..4] {
                if let Some(m) = grid.lattice.offset(k, di, dj) {
                    if grid.is_active(m) {
                        let dist = grid.h() * ((di * di + dj * dj) as f64).sqrt();
                        lip = lip.max((g(m) - g(k)).abs() / dist);
                    }
                }
            }
        }
        let data: Vec<f64> = grid
            .active()
            .map(|k| p.boundary.eval(&grid.data_point(k)))
            .collect();
        let osc = data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - data.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(BarrierFamily {
            big_l,
            balance_residual,
            eps,
            m_eps,
            lambdas,
            barriers,
            lip,
            osc,
        })
    }

    fn omega(&self, s: f64) -> f64 {
        (1.05 * self.lip * s).min(self.osc)
    }

    /// `𝓛⁺_h v_b` samples over every barrier, at nodes whose stencil meets the region where
    /// `1 − v_b` is representable; elsewhere `v_b` rounds to 1 on the whole stencil and the
    /// residual is exactly 0. Also returns the maximum for each `λ` of the net.
    fn residual_report(
        &self,
        p: &Problem,
        grid: &MaskedGrid,
        tol: f64,
    ) -> Result<(ResidualReport, Vec<f64>)> {
        let op = assemble_operator(p, grid, self.eps)?;
        let lat = grid.lattice;
        let h = grid.h();
        let per: Vec<Vec<(f64, Point, usize)>> = self
            .barriers
            .par_iter()
            .map(|b| {
                let level = self
                    .lambdas
                    .iter()
                    .position(|&l| l == b.lambda)
                    .unwrap_or(0);
                let reach = b.delta * (1.0 + 40.0 / self.big_l).sqrt() + 2.0 * h;
                let lo = Point::new(b.z.x - reach, b.z.y - reach);
                let hi = Point::new(b.z.x + reach, b.z.y + reach);
                let i0 = ((lo.x / h).floor() as i64 - lat.i0).max(0);
                let j0 = ((lo.y / h).floor() as i64 - lat.j0).max(0);
                let i1 = ((hi.x / h).ceil() as i64 - lat.i0).min(lat.nx as i64 - 1);
                let j1 = ((hi.y / h).ceil() as i64 - lat.j0).min(lat.ny as i64 - 1);
                let mut vals = GridFunction::undefined(lat);
                let mut rows = Vec::new();
                for j in j0.max(1) - 1..=(j1 + 1).min(lat.ny as i64 - 1) {
                    for i in i0.max(1) - 1..=(i1 + 1).min(lat.nx as i64 - 1) {
                        let k = lat.index(i as usize, j as usize);
                        if grid.is_active(k) {
                            vals.values[k] = b.v(&grid.point(k));
                        }
                    }
                }
                let mut out = Vec::new();
                for j in j0..=j1 {
                    for i in i0..=i1 {
                        let k = lat.index(i as usize, j as usize);
                        if grid.class[k] == NodeClass::Interior {
                            rows.push(k);
                        }
                    }
                }
                for k in rows {
                    let r = op.row_of[k];
                    let lv = op.apply_row(r, k, &vals.values);
                    let grad = one_sided_gradients(&vals, k)
                        .map(|g| g.iter().map(|q| q.norm()).fold(0.0, f64::max))
                        .unwrap_or(0.0);
                    out.push((lv + self.m_eps * grad, grid.point(k), level));
                }
                out
            })
            .collect();
        let mut samples = Vec::new();
        let mut per_level = vec![f64::NEG_INFINITY; self.lambdas.len()];
        for list in per {
            for (r, x, level) in list {
                per_level[level] = per_level[level].max(r);
                samples.push((r, x));
            }
        }
        Ok((ResidualReport::from_samples(&samples, tol), per_level))
    }
}

/// Perron barriers `v_b`, `w_b`, `w_i` and their combination `w = min(w_b, w_i(·, 0))`.
pub fn build_appendix_barriers(
    p: &Problem,
    grid: &MaskedGrid,
    eps: f64,
    m_eps: f64,
    opts: &AppendixOptions,
) -> Result<Certificate> {
    let fam = BarrierFamily::new(p, grid, eps, m_eps, opts)?;
    let h = grid.h();
    let c = &p.coefficients;
    let amp = fam.osc / (-(-3.0 * fam.big_l).exp_m1());
    let active: Vec<usize> = grid.active().collect();
    let wb: Vec<f64> = active
        .par_iter()
        .map(|&k| {
            let x = grid.data_point(k);
            fam.barriers
                .iter()
                .map(|b| b.gy + fam.omega(3.0 * b.lambda) + amp * b.v(&x))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let y_net: Vec<Point> = grid
        .interior
        .iter()
        .filter(|&&k| {
            let (i, j) = grid.lattice.ij(k);
            i % opts.interior_stride == 0 && j % opts.interior_stride == 0
        })
        .map(|&k| grid.point(k))
        .collect();
    let gy: Vec<f64> = y_net.iter().map(|y| p.boundary.eval(y)).collect();
    let b_sup = p.drift_sup();
    let d = p.domain.diameter();
    let mut c_gamma: f64 = 0.0;
    for &g in &opts.gamma_net {
        let big_b = fam.osc / (g * g);
        c_gamma = c_gamma.max(2.0 * big_b * (eps * 2.0 / c.theta + (b_sup + m_eps) * d));
    }
    let wi: Vec<f64> = active
        .par_iter()
        .map(|&k| {
            let x = grid.data_point(k);
            let mut best = f64::INFINITY;
            for &g in &opts.gamma_net {
                let big_b = fam.osc / (g * g);
                let om = fam.omega(g);
                for (y, gv) in y_net.iter().zip(&gy) {
                    best = best.min(gv + big_b * (x - y).norm_squared() + om);
                }
            }
            best
        })
        .collect();
    let mut w = GridFunction::undefined(grid.lattice);
    let mut below: f64 = f64::INFINITY;
    let mut below_b: f64 = f64::INFINITY;
    let mut boundary_gap: f64 = 0.0;
    for (i, &k) in active.iter().enumerate() {
        let gx = p.boundary.eval(&grid.data_point(k));
        w.values[k] = wb[i].min(wi[i]);
        below = below.min(w.values[k] - gx);
        below_b = below_b.min(wb[i] - gx);
        if grid.class[k] == NodeClass::BoundaryAdjacent {
            boundary_gap = boundary_gap.max((w.values[k] - gx).abs());
        }
    }
    let lambda_min = *fam.lambdas.last().unwrap();
    let tol_w = fam.omega(3.0 * lambda_min) + 2.0 * h * fam.lip;
    let (report, per_level) = fam.residual_report(p, grid, opts.tolerance)?;
    let smallest = *per_level.last().unwrap();
    let y0 = &fam.barriers[0];
    let consistency: Vec<f64> = fam
        .barriers
        .iter()
        .take(fam.lambdas.len())
        .map(|b| b.v(&y0.y))
        .collect();
    let mut checks = vec![
        Check::at_most("Lambda balance residual", fam.balance_residual.abs(), 1e-12),
        Check::at_least("min (w_b − g)", below_b, -tol_w),
        Check::at_least("min (w − g)", below, -tol_w),
        Check::at_most("max |w − g| on boundary projections", boundary_gap, tol_w),
        Check::at_most("smallest-lambda residual", smallest, opts.tolerance),
    ];
    checks.push(Check::at_most(
        "|v_b(y; y, lambda_min)| − |v_b(y; y, lambda_max)|",
        consistency[consistency.len() - 1].abs() - consistency[0].abs(),
        CONSISTENCY_ROUNDOFF,
    ));
    let mut named = vec![
        ("eps", eps),
        ("M_eps", m_eps),
        ("Lambda", fam.big_l),
        ("Lambda_residual", fam.balance_residual),
        ("diameter", d),
        ("b_sup", b_sup),
        ("n_y", opts.n_y as f64),
        ("n_lambda", opts.n_lambda as f64),
        ("lambda_max", fam.lambdas[0]),
        ("lambda_min", lambda_min),
        ("v_b_at_y_lambda_min", consistency[consistency.len() - 1]),
        ("A", amp),
        ("lip_g", fam.lip),
        ("osc_g", fam.osc),
        ("C_gamma", c_gamma),
        ("tolerance_w", tol_w),
    ];
    let level_names: Vec<String> = (0..per_level.len())
        .map(|k| format!("max_residual_lambda_{k}"))
        .collect();
    named.extend(
        level_names
            .iter()
            .map(|n| n.as_str())
            .zip(per_level.iter().copied()),
    );
    Ok(Certificate::new(
        CertificateKind::AppendixBarrier,
        w,
        0.0,
        params(&named),
        report,
        checks,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, Domain, Lattice};
    use crate::model::BoundaryData;

    #[test]
    fn lambda_for_ball_example() {
        let (l, res) = lambda_balance(0.05, 0.05, 1.0, 2.0, 2.0, 1.0).unwrap();
        assert!((l - 32.5).abs() < 1e-12);
        assert!(res.abs() <= 1e-12);
        assert!(lambda_balance(0.0, 0.05, 1.0, 2.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn envelope_of_constant() {
        let l = Lattice {
            h: 0.1,
            nx: 7,
            ny: 5,
            i0: -3,
            j0: -2,
        };
        let f = GridFunction {
            lattice: l,
            values: vec![2.5; l.len()],
        };
        let g = inf_convolution(&f, 0.3);
        assert!(g.values.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn envelope_brute_force() {
        let l = Lattice {
            h: 0.1,
            nx: 9,
            ny: 6,
            i0: -4,
            j0: -3,
        };
        let mut f = GridFunction::undefined(l);
        for k in 0..l.len() {
            if k % 7 != 3 {
                let x = l.point(k);
                f.values[k] = (3.0 * x.x).sin() + x.y * x.y;
            }
        }
        let alpha = 0.05;
        let g = inf_convolution(&f, alpha);
        for k in 0..l.len() {
            if !f.values[k].is_finite() {
                assert!(g.values[k].is_nan());
                continue;
            }
            let x = l.point(k);
            let brute = (0..l.len())
                .filter(|&m| f.values[m].is_finite())
                .map(|m| f.values[m] + (x - l.point(m)).norm_squared() / alpha)
                .fold(f64::INFINITY, f64::min);
            assert!(
                (g.values[k] - brute).abs() < 1e-12,
                "{} vs {}",
                g.values[k],
                brute
            );
        }
    }

    #[test]
    fn mollifier_has_unit_mass() {
        let k = mollifier(0.01, 0.05);
        assert!((k.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k
            .iter()
            .all(|(z, w)| z.norm() <= 0.05 * (1.0 + 1e-9) && *w >= 0.0));
    }

    #[test]
    fn psi_spot_values() {
        let p = Problem::new(
            Domain::ball(1.0).unwrap(),
            Coefficients::isotropic_quadratic(),
            BoundaryData::X1Squared,
        );
        let g = build_grid(&p.domain, 1.0 / 16.0).unwrap();
        let psi = build_psi(&p, &g, &PsiOptions::default()).unwrap();
        let at = |x: f64| {
            psi.values
                .get(g.lattice.nearest(&Point::new(x, 0.0)).unwrap())
        };
        assert!((at(0.5) - at(1.0) - 0.5f64.ln()).abs() < 1e-3);
        assert!((at(1.0) + (2.0 * 2f64.ln() - 1.0)).abs() < 1e-3);
    }

    #[test]
    fn outward_drift_has_no_psi() {
        let p = Problem::new(
            Domain::ball(1.0).unwrap(),
            Coefficients::outward_drift(),
            BoundaryData::X1Squared,
        );
        let g = build_grid(&p.domain, 0.25).unwrap();
        let opts = PsiOptions {
            horizon: 50.0,
            ..PsiOptions::default()
        };
        assert!(matches!(build_psi(&p, &g, &opts), Err(Error::Stability(_))));
    }
}
