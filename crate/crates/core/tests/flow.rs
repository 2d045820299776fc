use metastab::error::Error;
use metastab::flow::{confinement_time, integrate_flow, transport_solution, Drift};
use metastab::geometry::Point;
use metastab::model::{BoundaryData, Coefficients};
use nalgebra::SVector;
use proptest::prelude::*;

#[test]
fn isotropic_flow_is_exponential_decay() {
    let c = Coefficients::isotropic_quadratic();
    let tr = integrate_flow(&c, &Point::new(0.5, 0.0), 1.0, 1e-3).unwrap();
    assert!((tr.last() - Point::new(0.5 * (-1f64).exp(), 0.0)).norm() < 1e-6);
    let back = integrate_flow(&c, &Point::new(0.5, 0.0), -(2f64.ln()), 1e-3).unwrap();
    assert!((back.last() - Point::new(1.0, 0.0)).norm() < 1e-6);
}

#[test]
fn equilibrium_stays_put() {
    for c in [
        Coefficients::isotropic_quadratic(),
        Coefficients::anisotropic_quadratic(),
    ] {
        for t in [0.3, 7.0, -2.0] {
            assert_eq!(
                *integrate_flow(&c, &Point::zeros(), t, 1e-2).unwrap().last(),
                Point::zeros()
            );
        }
    }
}

#[test]
fn confinement_time_matches_log_ratio() {
    let c = Coefficients::isotropic_quadratic();
    let t = confinement_time(&c, 0.1, 1.0, 400).unwrap().time;
    assert!((t - 10f64.ln()).abs() < 0.05, "{t}");
    let t = confinement_time(&c, 0.5, 1.0, 400).unwrap().time;
    assert!((t - 2f64.ln()).abs() < 0.05, "{t}");
}

#[test]
fn outward_flow_is_not_confined() {
    let r = confinement_time(&Coefficients::outward_drift(), 0.1, 1.0, 100);
    assert!(matches!(r, Err(Error::Stability(_))));
}

#[test]
fn transport_examples() {
    let c = Coefficients::isotropic_quadratic();
    let g = BoundaryData::X1Squared;
    let x = Point::new(0.8, 0.3);
    assert_eq!(transport_solution(&c, &g, &x, 0.0), 0.8 * 0.8);
    assert!(
        (transport_solution(&c, &g, &Point::new(0.8, 0.0), 1.0) - (0.8 * (-1f64).exp()).powi(2))
            .abs()
            < 1e-9
    );
    for c in [
        Coefficients::isotropic_quadratic(),
        Coefficients::anisotropic_quadratic(),
    ] {
        let g = BoundaryData::Polynomial(metastab::model::Polynomial2 {
            terms: vec![(1.0, 1, 0), (0.7, 0, 0), (0.2, 0, 1)],
        });
        assert!((transport_solution(&c, &g, &x, 50.0) - 0.7).abs() < 1e-6);
    }
}

/// Planar rotation with cubic damping, a nonlinear field with no closed-form flow.
struct Spiral;

impl Drift<2> for Spiral {
    fn drift(&self, x: &Point) -> Point {
        let r2 = x.norm_squared();
        Point::new(-x.y - x.x * r2, x.x - x.y * r2)
    }
}

struct Linear3;

impl Drift<3> for Linear3 {
    fn drift(&self, x: &SVector<f64, 3>) -> SVector<f64, 3> {
        SVector::<f64, 3>::new(-x[0] + x[1], -x[1], -3.0 * x[2])
    }
}

#[test]
fn rk4_is_fourth_order() {
    let x = Point::new(0.9, -0.4);
    let reference = *integrate_flow(&Spiral, &x, 2.0, 1e-4).unwrap().last();
    let err = |dt: f64| (integrate_flow(&Spiral, &x, 2.0, dt).unwrap().last() - reference).norm();
    let ratio = err(0.1) / err(0.05);
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn higher_dimensional_flow_matches_matrix_exponential() {
    let x = SVector::<f64, 3>::new(1.0, 2.0, -1.0);
    let t = 1.5;
    let e = (-t as f64).exp();
    let exact = SVector::<f64, 3>::new((x[0] + t * x[1]) * e, x[1] * e, x[2] * (-3.0 * t).exp());
    assert!((integrate_flow(&Linear3, &x, t, 1e-3).unwrap().last() - exact).norm() < 1e-10);
}

fn presets() -> impl Strategy<Value = Coefficients> {
    prop_oneof![
        Just(Coefficients::isotropic_quadratic()),
        Just(Coefficients::anisotropic_quadratic())
    ]
}

fn in_ball() -> impl Strategy<Value = Point> {
    (0.0f64..1.0, 0.0f64..std::f64::consts::TAU)
        .prop_map(|(r, phi)| Point::new(r * phi.cos(), r * phi.sin()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_has_the_semigroup_property(c in presets(), x in in_ball(), s in 0.0f64..2.0, t in 0.0f64..2.0) {
        let direct = *integrate_flow(&c, &x, s + t, 1e-3).unwrap().last();
        let mid = *integrate_flow(&c, &x, s, 1e-3).unwrap().last();
        let composed = *integrate_flow(&c, &mid, t, 1e-3).unwrap().last();
        prop_assert!((direct - composed).norm() < 1e-9);
    }

    #[test]
    fn unit_ball_is_positively_invariant(c in presets(), x in in_ball(), t in 0.0f64..5.0) {
        let tr = integrate_flow(&c, &x, t, 1e-2).unwrap();
        prop_assert!(tr.points.windows(2).all(|w| w[1].norm() <= w[0].norm() + 1e-15));
        prop_assert!(tr.last().norm() <= x.norm() * (-t).exp() + 1e-9);
    }

    #[test]
    fn reverse_flow_inverts_forward_flow(c in presets(), x in in_ball(), t in 0.0f64..1.5) {
        let fwd = *integrate_flow(&c, &x, t, 1e-3).unwrap().last();
        let back = *integrate_flow(&c, &fwd, -t, 1e-3).unwrap().last();
        prop_assert!((back - x).norm() < 1e-9);
    }
}
