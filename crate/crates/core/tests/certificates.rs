use std::sync::OnceLock;

use metastab::certificates::{
    build_appendix_barriers, build_exit_supersolution, build_exponential_barrier, build_psi,
    inf_convolution, strict_subsolution, AppendixOptions, Certificate, ExitOptions, PsiOptions,
    StrictLadder,
};
use metastab::error::Error;
use metastab::geometry::{build_grid, Domain, GridFunction, Lattice, MaskedGrid, Point};
use metastab::model::{hamiltonian, BoundaryData, Coefficients, Problem};
use metastab::quasipotential::{solve_from_point, PotentialField};
use proptest::prelude::*;

struct Suite {
    p: Problem,
    grid: MaskedGrid,
    v: PotentialField,
    psi: Certificate,
    ladder: StrictLadder,
}

fn iso() -> &'static Suite {
    static S: OnceLock<Suite> = OnceLock::new();
    S.get_or_init(|| {
        let p = Problem::new(
            Domain::ball(1.0).unwrap(),
            Coefficients::isotropic_quadratic(),
            BoundaryData::X1Squared,
        );
        let grid = build_grid(&p.domain, 1.0 / 128.0).unwrap();
        let v = solve_from_point(&p, &grid, 2).unwrap();
        let psi = build_psi(&p, &grid, &PsiOptions::default()).unwrap();
        let ladder = strict_subsolution(&p, &v, &psi, 0.2).unwrap();
        Suite {
            p,
            grid,
            v,
            psi,
            ladder,
        }
    })
}

/// The four one-sided difference gradients at node `k`, when all neighbours are defined.
fn one_sided(f: &GridFunction, k: usize) -> Option<[Point; 4]> {
    let h = f.lattice.h;
    let c = f.get(k);
    let (e, w, n, s) = (f.at(k, 1, 0), f.at(k, -1, 0), f.at(k, 0, 1), f.at(k, 0, -1));
    if ![c, e, w, n, s].iter().all(|v| v.is_finite()) {
        return None;
    }
    let (fx, bx, fy, by) = ((e - c) / h, (c - w) / h, (n - c) / h, (c - s) / h);
    Some([
        Point::new(fx, fy),
        Point::new(fx, by),
        Point::new(bx, fy),
        Point::new(bx, by),
    ])
}

fn h_lenient(c: &Coefficients, f: &GridFunction, k: usize, x: &Point) -> Option<f64> {
    Some(
        one_sided(f, k)?
            .iter()
            .map(|p| hamiltonian(c, x, p))
            .fold(f64::INFINITY, f64::min),
    )
}

#[test]
fn psi_solves_the_transport_identity() {
    let s = iso();
    let h = s.grid.h();
    let b = |x: &Point| -x;
    let mut worst: f64 = 0.0;
    for &k in &s.grid.interior {
        let x = s.grid.point(k);
        if !(0.1..=0.95).contains(&x.norm()) {
            continue;
        }
        let f = &s.psi.values;
        let grad = Point::new(
            (f.at(k, 1, 0) - f.at(k, -1, 0)) / (2.0 * h),
            (f.at(k, 0, 1) - f.at(k, 0, -1)) / (2.0 * h),
        );
        worst = worst.max((b(&x).dot(&grad) + 1.0).abs());
    }
    assert!(worst <= 0.05, "{worst}");
    assert!(s.psi.verified);
    let at = |r: f64| s.psi.values.sample(&Point::new(r, 0.0));
    assert!((at(0.5) - at(1.0) - 0.5f64.ln()).abs() < 1e-3);
    assert!((at(1.0) + 2.0 * 2f64.ln() - 1.0).abs() < 1e-3);
    assert!(at(0.02) <= at(0.1) - 1.5, "{} {}", at(0.02), at(0.1));
}

#[test]
fn strict_subsolution_ladder() {
    let s = iso();
    let c = &s.p.coefficients;
    let h = s.grid.h();
    let w = &s.ladder.w_r;
    assert!(w.verified, "{:?}", w.summary());
    assert!(w.eta > 0.0);
    let outside = s
        .grid
        .interior
        .iter()
        .filter(|&&k| s.grid.point(k).norm() >= 0.25)
        .filter_map(|&k| h_lenient(c, &w.values, k, &s.grid.point(k)))
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(outside <= -w.eta / 2.0, "{outside} vs eta {}", w.eta);
    let dist = w.values.max_abs_diff(&s.v.values, |k| s.grid.is_active(k));
    assert!(dist <= 3.0 * 0.2, "{dist}");

    let psi_r = &s.ladder.psi_r;
    let inside = s
        .grid
        .interior
        .iter()
        .filter(|&&k| s.grid.point(k).norm() <= 0.2)
        .filter_map(|&k| h_lenient(c, &psi_r.values, k, &s.grid.point(k)))
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(inside <= 5.0 * h, "{inside}");
    let (theta, big_c, lambda) = (
        psi_r.param("theta").unwrap(),
        psi_r.param("C").unwrap(),
        psi_r.param("lambda").unwrap(),
    );
    assert_eq!(theta, 1.0);
    assert_eq!(lambda, theta / (2.0 * big_c));
}

#[test]
fn stored_reports_survive_recheck() {
    let s = iso();
    for cert in [&s.psi, &s.ladder.psi_r, &s.ladder.v_r, &s.ladder.w_r] {
        let again = cert.recheck(&s.p, &s.grid).unwrap();
        assert!(
            (again.max - cert.report.max).abs() <= 1e-12,
            "{:?}",
            cert.kind
        );
        assert_eq!(again.count, cert.report.count);
    }
}

#[test]
fn exit_supersolution_examples() {
    let s = iso();
    let cert = build_exit_supersolution(&s.p, &s.v, 0.7, &ExitOptions::default()).unwrap();
    assert!(cert.verified, "{:?}", cert.summary());
    assert!(cert.values.finite_max() <= 0.69 && cert.values.finite_min() >= 0.01);
    let again = cert.recheck(&s.p, &s.grid).unwrap();
    assert!((again.max - cert.report.max).abs() <= 1e-12);
    assert!(matches!(
        build_exit_supersolution(&s.p, &s.v, 0.51, &ExitOptions::default()),
        Err(Error::InfeasibleMargin { .. })
    ));

    let p = Problem::new(
        Domain::ball(1.0).unwrap(),
        Coefficients::anisotropic_quadratic(),
        BoundaryData::X1Squared,
    );
    let grid = build_grid(&p.domain, 1.0 / 64.0).unwrap();
    let v = solve_from_point(&p, &grid, 2).unwrap();
    let cert = build_exit_supersolution(&p, &v, 0.8, &ExitOptions::default()).unwrap();
    assert!(cert.verified, "{:?}", cert.summary());
    assert!(cert.eta >= 1e-3, "{}", cert.eta);
}

#[test]
fn exponential_barrier_examples() {
    let s = iso();
    let w = &s.ladder.w_r;
    let eps = 0.05;
    let cert = build_exponential_barrier(&s.p, &s.grid, w, 0.4, eps).unwrap();
    assert!(cert.verified, "{:?}", cert.summary());
    let mut vmax: f64 = 0.0;
    for k in s.grid.active() {
        let expected = ((w.values.get(k) - 0.4) / eps).exp();
        let got = cert.values.get(k);
        assert!((got - expected).abs() <= 1e-12 * expected.max(1.0));
        if s.grid.point(k).norm() <= 0.2 {
            vmax = vmax.max(expected);
        }
    }
    assert!((cert.param("R_eps").unwrap() - 2.0 / eps * vmax).abs() <= 1e-12 * vmax / eps);
    let again = cert.recheck(&s.p, &s.grid).unwrap();
    assert!((again.max - cert.report.max).abs() <= 1e-9 * cert.param("R_eps").unwrap());
    let eps0 = cert.param("eps0").unwrap();
    let coarse = build_exponential_barrier(&s.p, &s.grid, w, 0.4, 20.0 * eps0.max(0.05)).unwrap();
    assert!(!coarse.verified);
}

#[test]
fn appendix_barriers_balance_and_consistency() {
    let p = Problem::new(
        Domain::ball(1.0).unwrap(),
        Coefficients::isotropic_quadratic(),
        BoundaryData::X1Squared,
    );
    let grid = build_grid(&p.domain, 1.0 / 64.0).unwrap();
    let cert = build_appendix_barriers(&p, &grid, 0.05, 0.05, &AppendixOptions::default()).unwrap();
    let (theta, d, n, m, bsup, eps) = (1.0, 2.0, 2.0, 0.05, cert.param("b_sup").unwrap(), 0.05);
    assert!((bsup - 1.0).abs() < 1e-9, "{bsup}");
    let lambda = (2.0 * d / theta * eps + 2.0 * (n + 1.0) * (m + bsup)) / (4.0 * theta * eps);
    assert!((lambda - 32.5).abs() < 1e-9);
    assert!(
        (cert.param("Lambda").unwrap() - lambda).abs() <= 1e-12 * lambda,
        "{}",
        cert.param("Lambda").unwrap()
    );
    assert!(cert.param("Lambda_residual").unwrap().abs() <= 1e-12);
    let smallest = cert
        .params
        .iter()
        .filter(|(k, _)| k.starts_with("max_residual_lambda_"))
        .last()
        .map(|(_, v)| *v)
        .unwrap();
    assert!(smallest <= 1e-6, "{smallest}");
    let consistency = cert
        .checks
        .iter()
        .find(|c| c.name.starts_with("|v_b(y; y, lambda_min)|"))
        .unwrap();
    assert!(consistency.passed, "{consistency:?}");
    assert!(cert.param("v_b_at_y_lambda_min").unwrap().abs() <= 1e-9);
    assert!(cert.verified, "{:?}", cert.summary());
}

fn lattice() -> Lattice {
    Lattice {
        h: 0.05,
        nx: 21,
        ny: 21,
        i0: -10,
        j0: -10,
    }
}

fn sampled(l: Lattice, f: impl Fn(&Point) -> f64) -> GridFunction {
    GridFunction {
        lattice: l,
        values: (0..l.len()).map(|k| f(&l.point(k))).collect(),
    }
}

#[test]
fn inf_convolution_examples() {
    let l = Lattice {
        h: 1.0 / 128.0,
        nx: 257,
        ny: 257,
        i0: -128,
        j0: -128,
    };
    let c = inf_convolution(&sampled(l, |_| 1.25), 0.3);
    assert!(c.values.iter().all(|&v| v == 1.25));
    let alpha = 0.5;
    let f = sampled(l, |x| x.norm_squared());
    let g = inf_convolution(&f, alpha);
    for k in 0..l.len() {
        let x = l.point(k);
        assert!(
            (g.values[k] - x.norm_squared() / (1.0 + alpha)).abs() <= 2.0 * l.h * x.norm() + 1e-12
        );
    }
    let alpha = 1e-4;
    let lip: f64 = 2.0 * 2f64.sqrt();
    let g = inf_convolution(&f, alpha);
    let gap = (0..l.len())
        .map(|k| (g.values[k] - f.values[k]).abs())
        .fold(0.0, f64::max);
    assert!(gap <= alpha * lip * lip / 4.0 + l.h * lip, "{gap}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inf_convolution_is_monotone_and_below(
        vals in prop::collection::vec(-1.0f64..1.0, 441),
        shift in prop::collection::vec(0.0f64..0.5, 441),
        a1 in 0.01f64..1.0,
        a2 in 0.01f64..1.0,
    ) {
        let l = lattice();
        let f = GridFunction { lattice: l, values: vals.clone() };
        let g = GridFunction { lattice: l, values: vals.iter().zip(&shift).map(|(v, s)| v + s).collect() };
        let cf = inf_convolution(&f, a1);
        let cg = inf_convolution(&g, a1);
        for k in 0..l.len() {
            prop_assert!(cf.values[k] <= cg.values[k] + 1e-12);
            prop_assert!(cf.values[k] <= f.values[k] + 1e-12);
        }
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let small = inf_convolution(&f, lo);
        let large = inf_convolution(&f, hi);
        for k in 0..l.len() {
            prop_assert!(large.values[k] <= small.values[k] + 1e-12);
        }
    }

    #[test]
    fn inf_convolution_commutes_with_constants(vals in prop::collection::vec(-1.0f64..1.0, 441), c in -3.0f64..3.0, alpha in 0.01f64..1.0) {
        let l = lattice();
        let f = GridFunction { lattice: l, values: vals.clone() };
        let g = GridFunction { lattice: l, values: vals.iter().map(|v| v + c).collect() };
        let (cf, cg) = (inf_convolution(&f, alpha), inf_convolution(&g, alpha));
        for k in 0..l.len() {
            prop_assert!((cf.values[k] + c - cg.values[k]).abs() <= 1e-12);
        }
    }
}
