use std::f64::consts::PI;

use metastab::error::Error;
use metastab::geometry::{build_grid, Domain, NodeClass, Point};
use proptest::prelude::*;

fn ellipse() -> Domain {
    Domain::ellipse(1.0, 1.0 / 2f64.sqrt()).unwrap()
}

/// Distance from `x` to a dense sampling of the ellipse boundary.
fn ellipse_distance_oracle(x: &Point) -> f64 {
    let b = 1.0 / 2f64.sqrt();
    let n = 200_000;
    (0..n)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / n as f64;
            (Point::new(t.cos(), b * t.sin()) - x).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn ellipse_center_distance_matches_dense_sampling() {
    let d = ellipse().signed_distance(&Point::zeros()).unwrap();
    assert!((d + 1.0 / 2f64.sqrt()).abs() < 1e-8, "{d}");
    assert!((d.abs() - ellipse_distance_oracle(&Point::zeros())).abs() < 1e-6);
}

#[test]
fn ellipse_normal_is_normalized_gradient() {
    let e = ellipse();
    let b = 1.0 / 2f64.sqrt();
    for k in 0..12 {
        let t = 2.0 * PI * k as f64 / 12.0 + 0.1;
        let y = Point::new(t.cos(), b * t.sin());
        let g = Point::new(2.0 * y.x, 4.0 * y.y);
        let n = e.boundary_normal(&y).unwrap();
        assert!((n - g / g.norm()).norm() < 1e-9, "at {t}");
    }
}

#[test]
fn ball_interior_count_matches_area() {
    let h = 1.0 / 128.0;
    let g = build_grid(&Domain::ball(1.0).unwrap(), h).unwrap();
    let expected = PI / (h * h);
    let ratio = g.interior.len() as f64 / expected;
    assert!((ratio - 1.0).abs() < 0.02, "ratio {ratio}");
}

#[test]
fn coarse_spacing_is_a_configuration_error() {
    let d = Domain::ball(1.0).unwrap();
    assert!(matches!(build_grid(&d, 2.5), Err(Error::GridTooCoarse(_))));
    assert!(matches!(build_grid(&d, -0.1), Err(Error::Config(_))));
}

#[test]
fn ball_offset_gap_is_exact() {
    let d = Domain::ball(1.0).unwrap().normal_offset_gap(0.1).unwrap();
    assert!((d - 0.1).abs() < 1e-12, "{d}");
}

#[test]
fn ellipse_offset_gap_ratio_tends_to_one() {
    let e = ellipse();
    let d = e.normal_offset_gap(0.01).unwrap();
    assert!((0.009..=0.01).contains(&d), "{d}");
    let ratios: Vec<f64> = [0.04, 0.02, 0.01, 0.005]
        .iter()
        .map(|&l| e.normal_offset_gap(l).unwrap() / l)
        .collect();
    assert!(
        ratios.iter().all(|r| (0.95..=1.0).contains(r)),
        "{ratios:?}"
    );
    assert!(
        ratios
            .windows(2)
            .all(|w| (1.0 - w[1]) <= (1.0 - w[0]) + 1e-12),
        "{ratios:?}"
    );
}

#[test]
fn offset_above_threshold_is_rejected() {
    let e = ellipse();
    let lambda0 = e.lambda0();
    assert!(matches!(
        e.normal_offset_gap(lambda0 * 1.01),
        Err(Error::OffsetTooLarge { .. })
    ));
    assert!(e.normal_offset_gap(0.5 * lambda0).is_ok());
}

#[test]
fn origin_outside_is_rejected() {
    assert!(matches!(Domain::ball(-1.0), Err(_)));
    assert!(Domain::from_preset("square:1").is_err());
}

fn domain_strategy() -> impl Strategy<Value = Domain> {
    prop_oneof![
        (0.5f64..2.0).prop_map(|r| Domain::ball(r).unwrap()),
        (0.5f64..2.0, 0.4f64..1.5).prop_map(|(a, b)| Domain::ellipse(a, b).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn signed_distance_is_one_lipschitz(d in domain_strategy(), x in prop::array::uniform2(-2.0f64..2.0), y in prop::array::uniform2(-2.0f64..2.0)) {
        let s = d.bounding_box.max;
        let (x, y) = (Point::new(x[0] * s.x, x[1] * s.y), Point::new(y[0] * s.x, y[1] * s.y));
        let dx = d.signed_distance(&x).unwrap();
        let dy = d.signed_distance(&y).unwrap();
        prop_assert!((dx - dy).abs() <= (x - y).norm() + 1e-9);
        prop_assert_eq!(dx < 0.0, d.contains(&x) && d.rho(&x) < 0.0);
    }

    #[test]
    fn ellipse_distance_matches_sampling(x in prop::array::uniform2(-1.5f64..1.5)) {
        let x = Point::new(x[0], x[1]);
        let d = ellipse().signed_distance(&x).unwrap();
        prop_assert!((d.abs() - ellipse_distance_oracle(&x)).abs() < 1e-4);
    }

    #[test]
    fn normal_points_outward(d in domain_strategy(), phi in 0.0f64..(2.0 * PI), t in 1e-3f64..0.05) {
        let y = d.boundary_point(phi).unwrap();
        let n = d.boundary_normal(&y).unwrap();
        prop_assert!((n.norm() - 1.0).abs() < 1e-12);
        prop_assert!(!d.contains(&(y + n * t)));
        prop_assert!(d.contains(&(y - n * t)));
    }

    #[test]
    fn offset_gap_never_exceeds_offset(d in domain_strategy(), lambda in 1e-3f64..0.3) {
        let gap = d.normal_offset_gap(lambda).unwrap();
        prop_assert!(gap > 0.0 && gap <= lambda);
    }

    #[test]
    fn grid_classes_are_consistent(d in domain_strategy(), n in 8usize..40) {
        let h = d.diameter() / n as f64;
        let g = build_grid(&d, h).unwrap();
        for &k in &g.interior {
            prop_assert!(d.rho(&g.point(k)) <= 0.0);
        }
        for &k in &g.boundary {
            prop_assert_eq!(g.class[k], NodeClass::BoundaryAdjacent);
            let pr = g.projection[k].as_ref().unwrap();
            prop_assert!(pr.distance <= 2f64.sqrt() * h + 1e-9);
            prop_assert!(d.signed_distance(&pr.point).unwrap().abs() < 1e-9);
        }
        let fine = build_grid(&d, h / 2.0).unwrap();
        for &k in &g.interior {
            let m = fine.lattice.nearest(&g.point(k)).unwrap();
            prop_assert_eq!(fine.class[m], NodeClass::Interior);
        }
    }
}
