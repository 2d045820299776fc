use std::sync::OnceLock;

use metastab::geometry::{build_grid, Domain, MaskedGrid, NodeClass, Point};
use metastab::model::{lagrangian, BoundaryData, Coefficients, Problem};
use metastab::quasipotential::{
    boundary_minimum, check_subsolution, minimize_path_action, segment_action, solve_from_point,
    solve_from_point_with, solve_to_boundary, stencil, BoundaryValue, PotentialField, Source,
    UpdateMode,
};
use proptest::prelude::*;

fn problem(c: Coefficients) -> Problem {
    Problem::new(Domain::ball(1.0).unwrap(), c, BoundaryData::X1Squared)
}

struct Fields {
    grid: MaskedGrid,
    v: PotentialField,
    u: PotentialField,
}

fn solved(c: Coefficients, h: f64) -> Fields {
    let p = problem(c);
    let grid = build_grid(&p.domain, h).unwrap();
    let v = solve_from_point(&p, &grid, 2).unwrap();
    let u = solve_to_boundary(&p, &grid, 0.0, 2).unwrap();
    Fields { grid, v, u }
}

fn iso() -> &'static Fields {
    static F: OnceLock<Fields> = OnceLock::new();
    F.get_or_init(|| solved(Coefficients::isotropic_quadratic(), 1.0 / 128.0))
}

fn aniso() -> &'static Fields {
    static F: OnceLock<Fields> = OnceLock::new();
    F.get_or_init(|| solved(Coefficients::anisotropic_quadratic(), 1.0 / 64.0))
}

/// `min_T T·L(m, s/T) + γT` by a logarithmic scan refined with ternary search.
fn segment_oracle(c: &Coefficients, x: &Point, y: &Point, gamma: f64) -> f64 {
    let m = 0.5 * (x + y);
    let s = y - x;
    let cost = |t: f64| t * lagrangian(c, &m, &(s / t)) + gamma * t;
    let logs: Vec<f64> = (0..=4000)
        .map(|k| -8.0 + 14.0 * k as f64 / 4000.0)
        .collect();
    let best = (0..logs.len())
        .min_by(|&a, &b| cost(logs[a].exp()).total_cmp(&cost(logs[b].exp())))
        .unwrap();
    let (mut lo, mut hi) = (
        logs[best.saturating_sub(1)],
        logs[(best + 1).min(logs.len() - 1)],
    );
    for _ in 0..200 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if cost(a.exp()) < cost(b.exp()) {
            hi = b;
        } else {
            lo = a;
        }
    }
    cost((0.5 * (lo + hi)).exp())
}

#[test]
fn segment_action_examples() {
    let c = Coefficients::isotropic_quadratic();
    let (x, y) = (Point::new(0.5, 0.0), Point::new(0.6, 0.0));
    let up = segment_action(&c, &x, &y, 0.0).unwrap();
    assert!((up - 0.055).abs() < 1e-12, "{up}");
    assert!((up - segment_oracle(&c, &x, &y, 0.0)).abs() < 1e-9);
    assert!((up - (0.5 * 0.36 - 0.5 * 0.25)).abs() < 1e-12);
    let down = segment_action(&c, &y, &x, 0.0).unwrap();
    assert!(down.abs() < 1e-12, "{down}");
    let g = segment_action(&c, &y, &x, 0.02).unwrap();
    let expected = 0.5 * (0.01f64 * 0.3825).sqrt() - 0.0275;
    assert!((g - expected).abs() < 1e-12, "{g} vs {expected}");
    assert!((g - segment_oracle(&c, &y, &x, 0.02)).abs() < 1e-9);
}

#[test]
fn isotropic_point_source_is_half_norm_squared() {
    let f = iso();
    let err = f
        .grid
        .interior
        .iter()
        .filter(|&&k| f.grid.point(k).norm() <= 0.9)
        .map(|&k| (f.v.values.get(k) - 0.5 * f.grid.point(k).norm_squared()).abs())
        .fold(0.0, f64::max);
    assert!(err <= 0.03, "{err}");
    let m0 = f.v.m0.unwrap();
    assert!((0.47..=0.53).contains(&m0), "{m0}");
    assert_eq!(f.v.values.get(f.grid.origin()), 0.0);
    assert!(f.v.argmin.as_ref().unwrap().uniform);
}

#[test]
fn anisotropic_point_source_matches_candidate() {
    let f = aniso();
    let phi = |x: &Point| 0.5 * (x.x * x.x + 2.0 * x.y * x.y);
    for x in [Point::new(0.0, 0.8), Point::new(0.8, 0.0)] {
        assert!(
            (f.v.value_at(&x) - phi(&x)).abs() < 0.03,
            "{x:?}: {}",
            f.v.value_at(&x)
        );
    }
    let set = f.v.argmin.as_ref().unwrap();
    assert!((0.46..=0.54).contains(&set.m0), "{}", set.m0);
    assert_eq!(set.clusters.len(), 2);
    for target in [[1.0, 0.0], [-1.0, 0.0]] {
        let hit = set.clusters.iter().any(|c| {
            (c.representative[0] - target[0]).hypot(c.representative[1] - target[1]) <= 0.05
        });
        assert!(hit, "{:?}", set.clusters);
    }
    let c = Coefficients::anisotropic_quadratic();
    let d = Domain::ball(1.0).unwrap();
    for k in 0..5 {
        let t = 0.3 + 1.1 * k as f64;
        let y = Point::new(t.cos(), t.sin());
        let path = minimize_path_action(&c, &Point::zeros(), &y, 32, &d).unwrap();
        assert!(
            (path.action - phi(&y)).abs() < 0.03,
            "target {y:?}: {} vs {}",
            path.action,
            phi(&y)
        );
    }
}

#[test]
fn boundary_source_equals_m0_at_origin() {
    let f = iso();
    let u0 = f.u.values.get(f.grid.origin());
    assert!((0.47..=0.53).contains(&u0), "{u0}");
    assert!((u0 - f.v.m0.unwrap()).abs() <= 0.02);
    let h = f.grid.h();
    let lip = 1.0;
    for &k in &f.grid.boundary {
        assert!(
            f.u.values.get(k).abs() <= 2f64.sqrt() * h * lip,
            "{}",
            f.u.values.get(k)
        );
    }
}

#[test]
fn running_cost_is_monotone_and_converges() {
    let f = iso();
    let p = problem(Coefficients::isotropic_quadratic());
    let u1 = solve_to_boundary(&p, &f.grid, 0.01, 2).unwrap();
    let u2 = solve_to_boundary(&p, &f.grid, 0.05, 2).unwrap();
    let h = f.grid.h();
    for k in f.grid.active() {
        assert!(u1.values.get(k) <= u2.values.get(k) + 2.0 * h);
    }
    let gap = u1.values.max_abs_diff(&f.u.values, |k| f.grid.is_active(k));
    assert!(gap <= 0.05, "{gap}");
}

#[test]
fn argmin_examples() {
    let f = iso();
    let set = boundary_minimum(&f.v, 0.01).unwrap();
    assert!((set.m0 - 0.5).abs() < 0.02 && set.uniform);
    let mut flat = f.v.clone();
    for b in &mut flat.boundary_values {
        b.value = 0.25;
    }
    let set = boundary_minimum(&flat, 0.0).unwrap();
    assert_eq!(set.points.len(), flat.boundary_values.len());
    flat.boundary_values = Vec::<BoundaryValue>::new();
    assert!(boundary_minimum(&flat, 0.0).is_err());
}

#[test]
fn path_optimizer_examples() {
    let c = Coefficients::isotropic_quadratic();
    let d = Domain::ball(1.0).unwrap();
    let path = minimize_path_action(&c, &Point::zeros(), &Point::new(1.0, 0.0), 32, &d).unwrap();
    assert!(
        path.action >= 0.5 - 1e-12 && path.action <= 0.52,
        "{}",
        path.action
    );
    assert!(path
        .points
        .iter()
        .all(|q| q[1].abs() <= 0.05 && (-0.05..=1.05).contains(&q[0])));
    let down =
        minimize_path_action(&c, &Point::new(0.8, 0.3), &Point::new(0.4, 0.15), 32, &d).unwrap();
    assert!(down.action <= 1e-3, "{}", down.action);
    let a = Coefficients::anisotropic_quadratic();
    let up = minimize_path_action(&a, &Point::zeros(), &Point::new(0.0, 1.0), 32, &d).unwrap();
    assert!((0.97..=1.05).contains(&up.action), "{}", up.action);
    let grid_value = aniso().v.value_at(&Point::new(0.0, 1.0));
    assert!(
        (up.action - grid_value).abs() <= 0.03,
        "{} vs {grid_value}",
        up.action
    );
}

#[test]
fn residual_examples() {
    let f = iso();
    let c = Coefficients::isotropic_quadratic();
    let h = f.grid.h();
    let mut exact = f.v.clone();
    exact.values = f.grid.sample(|x| 0.5 * x.norm_squared());
    for &k in &f.grid.boundary {
        exact.values.values[k] = 0.5 * f.grid.point(k).norm_squared();
    }
    let r = check_subsolution(&exact, &c, 5.0 * h);
    assert!(r.max <= 5.0 * h, "{}", r.max);
    let r = check_subsolution(&f.v, &c, 0.05);
    assert!(r.p99 <= 0.05, "{}", r.p99);
    let mut zero = f.v.clone();
    zero.values = f.grid.sample(|_| 0.0);
    let r = check_subsolution(&zero, &c, 0.0);
    assert_eq!(r.max, 0.0);
    assert_eq!(zero.source, Source::Origin);
}

#[test]
fn potentials_are_positive_away_from_the_source() {
    let f = iso();
    let m0 = f.v.m0.unwrap();
    for &k in &f.grid.interior {
        let x = f.grid.point(k);
        if x.norm() >= 0.1 {
            assert!(f.v.values.get(k) > 0.0);
        }
        let u = f.u.values.get(k);
        assert!((0.0..=m0 + 0.02).contains(&u), "U = {u} at {x:?}");
    }
}

#[test]
fn wider_stencils_do_not_raise_edge_values() {
    let p = problem(Coefficients::anisotropic_quadratic());
    let g = build_grid(&p.domain, 1.0 / 16.0).unwrap();
    let narrow = solve_from_point_with(&p, &g, 1, UpdateMode::Edges).unwrap();
    let wide = solve_from_point_with(&p, &g, 3, UpdateMode::Edges).unwrap();
    assert!(stencil(1).iter().all(|d| stencil(3).contains(d)));
    for k in g.active() {
        assert!(wide.values.get(k) <= narrow.values.get(k) + 1e-12);
    }
    assert!(g.class.iter().any(|c| *c == NodeClass::BoundaryAdjacent));
}

fn presets() -> impl Strategy<Value = Coefficients> {
    prop_oneof![
        Just(Coefficients::isotropic_quadratic()),
        Just(Coefficients::anisotropic_quadratic())
    ]
}

fn pt() -> impl Strategy<Value = Point> {
    prop::array::uniform2(-1.0f64..1.0).prop_map(|v| Point::new(v[0], v[1]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn segment_action_matches_time_minimization(c in presets(), x in pt(), y in pt(), gamma in 0.0f64..0.1) {
        prop_assume!((x + y).norm() > 0.05 && (x - y).norm() > 1e-3);
        let a = segment_action(&c, &x, &y, gamma).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - segment_oracle(&c, &x, &y, gamma)).abs() < 1e-7 * (1.0 + a));
    }

    #[test]
    fn segment_action_bounds_potential_increase(x in pt(), y in pt()) {
        prop_assume!((x + y).norm() > 0.05);
        // V = |x|²/2 is the exact potential for the isotropic preset, and midpoint coefficients
        // are exact for linear drift along a chord.
        let c = Coefficients::isotropic_quadratic();
        let a = segment_action(&c, &x, &y, 0.0).unwrap();
        prop_assert!(a >= 0.5 * (y.norm_squared() - x.norm_squared()) - 1e-12);
    }

    #[test]
    fn segment_action_is_monotone_in_running_cost(c in presets(), x in pt(), y in pt(), g1 in 0.0f64..0.1, g2 in 0.0f64..0.1) {
        prop_assume!((x + y).norm() > 0.05);
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        prop_assert!(segment_action(&c, &x, &y, lo).unwrap() <= segment_action(&c, &x, &y, hi).unwrap() + 1e-15);
    }
}
