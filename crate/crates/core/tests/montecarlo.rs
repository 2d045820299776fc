use std::f64::consts::PI;

use metastab::error::Error;
use metastab::geometry::{Domain, Point};
use metastab::model::{BoundaryData, Coefficients, Problem};
use metastab::montecarlo::{
    concentration_mass, estimate_m0, exit_statistics, exit_statistics_with, fit_m0, simulate_batch,
    simulate_exit, ExitSample, SimulationOptions,
};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn problem(c: Coefficients) -> Problem {
    Problem::new(Domain::ball(1.0).unwrap(), c, BoundaryData::X1Squared)
}

fn sample(tau: f64, phi: f64) -> ExitSample {
    ExitSample {
        stream: 0,
        tau,
        exit_point: [phi.cos(), phi.sin()],
        steps: 1,
        censored: false,
    }
}

/// Mean exit time from the origin for the isotropic preset on the unit disk,
/// `∫₀¹ (exp(r²/(2ε)) − 1)/r dr`, by composite Simpson quadrature.
fn mean_exit_time(eps: f64) -> f64 {
    let f = |r: f64| {
        if r == 0.0 {
            0.0
        } else {
            (r * r / (2.0 * eps)).exp_m1() / r
        }
    };
    let n = 20_000;
    let h = 1.0 / n as f64;
    let mut s = f(0.0) + f(1.0);
    for k in 1..n {
        s += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn zero_noise_never_exits() {
    let p = problem(Coefficients::isotropic_quadratic());
    let opts = SimulationOptions {
        dt: 1e-3,
        seed: 1,
        max_steps: 20_000,
    };
    let s = simulate_exit(&p, 0.0, &Point::new(0.3, 0.2), &opts, 0).unwrap();
    assert!(s.censored);
    assert_eq!(s.steps, 20_000);
    assert_eq!(s.tau, 20.0);
}

#[test]
fn isotropic_exits_match_the_radial_oracle_and_are_uniform() {
    let p = problem(Coefficients::isotropic_quadratic());
    let eps = 0.15;
    let n = 2000;
    let samples = simulate_batch(
        &p,
        eps,
        &Point::zeros(),
        &SimulationOptions::new(1e-3, 1),
        0,
        n,
    )
    .unwrap();
    let stats = exit_statistics(
        &p.domain,
        &samples,
        eps,
        &[Point::new(1.0, 0.0), Point::new(-1.0, 0.0)],
        0.3,
        16,
    )
    .unwrap();
    assert_eq!(stats.n_censored, 0);
    let taus: Vec<f64> = samples.iter().map(|s| s.tau).collect();
    let sd = (taus
        .iter()
        .map(|t| (t - stats.mean_tau).powi(2))
        .sum::<f64>()
        / (n - 1) as f64)
        .sqrt();
    let exact = mean_exit_time(eps);
    assert!((exact - 5.33).abs() < 0.01, "{exact}");
    assert!(
        (stats.mean_tau - exact).abs() <= 4.0 * sd / (n as f64).sqrt() + 0.02 * exact,
        "{} vs {exact}",
        stats.mean_tau
    );

    let expected = n as f64 / 16.0;
    let chi2: f64 = stats
        .histogram
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let p_value = 1.0 - ChiSquared::new(15.0).unwrap().cdf(chi2);
    assert!(p_value >= 1e-3, "chi2 {chi2}, p {p_value}");

    let uniform = 2.0 * 2.0 * 0.3 / (2.0 * PI);
    assert!(
        (stats.concentration_mass - uniform).abs() <= 0.05,
        "{} vs {uniform}",
        stats.concentration_mass
    );
}

#[test]
fn anisotropic_exits_concentrate_at_the_argmin() {
    let p = problem(Coefficients::anisotropic_quadratic());
    let eps = 0.09;
    let samples = simulate_batch(
        &p,
        eps,
        &Point::zeros(),
        &SimulationOptions::new(1e-3, 1),
        0,
        1000,
    )
    .unwrap();
    let stats = exit_statistics(
        &p.domain,
        &samples,
        eps,
        &[Point::new(1.0, 0.0), Point::new(-1.0, 0.0)],
        0.6,
        16,
    )
    .unwrap();
    assert!(
        stats.concentration_mass >= 0.7,
        "{}",
        stats.concentration_mass
    );
}

#[test]
fn single_sample_statistics() {
    let d = Domain::ball(1.0).unwrap();
    let s = exit_statistics_with(
        &d,
        &[sample(5.0, 0.4)],
        0.1,
        &[Point::new(1.0, 0.0)],
        0.5,
        8,
        1,
    )
    .unwrap();
    assert_eq!((s.mean_tau, s.median_tau), (5.0, 5.0));
    assert!(matches!(
        exit_statistics(&d, &[sample(5.0, 0.4)], 0.1, &[], 0.5, 8),
        Err(Error::Statistics(_))
    ));
}

#[test]
fn synthetic_log_linear_data_recovers_the_slope() {
    let c = 0.37;
    let batches: Vec<(f64, Vec<ExitSample>)> = [0.2, 0.15, 0.11, 0.09]
        .iter()
        .map(|&e| (e, vec![sample((c / e as f64).exp(), 0.0); 150]))
        .collect();
    let fit = fit_m0(&batches).unwrap();
    assert!((fit.slope - c).abs() <= 1e-12, "{}", fit.slope);
    assert!(fit.intercept.abs() <= 1e-11);
}

#[test]
fn fewer_than_three_eps_values_are_rejected() {
    let p = problem(Coefficients::isotropic_quadratic());
    let r = estimate_m0(&p, &[0.2, 0.15, 0.2], 10, &Point::zeros(), 1e-3, 1);
    assert!(matches!(r, Err(Error::Precondition(_))));
    let mut censored = sample(1.0, 0.0);
    censored.censored = true;
    let mut b: Vec<(f64, Vec<ExitSample>)> = [0.2, 0.15, 0.1]
        .iter()
        .map(|&e| (e, vec![sample(1.0, 0.0); 150]))
        .collect();
    b[1].1.extend(vec![censored; 10]);
    assert!(matches!(fit_m0(&b), Err(Error::Censoring(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn batches_are_reproducible_across_thread_counts(seed in any::<u64>(), first in 0u64..1000) {
        let p = problem(Coefficients::anisotropic_quadratic());
        let opts = SimulationOptions::new(1e-3, seed);
        let run = |threads: usize, start: u64, n: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                simulate_batch(&p, 0.3, &Point::new(0.1, -0.2), &opts, start, n).unwrap()
            })
        };
        let one = run(1, first, 24);
        prop_assert_eq!(&one, &run(4, first, 24));
        prop_assert_eq!(&one[8..], &run(3, first + 8, 16)[..]);
    }

    #[test]
    fn histogram_and_concentration_are_consistent(
        phis in prop::collection::vec(0.0f64..(2.0 * PI), 1..300),
        bins in 1usize..40,
        d1 in 0.0f64..1.0,
        d2 in 0.0f64..1.0,
        anchor in 0.0f64..(2.0 * PI),
    ) {
        let dom = Domain::ellipse(1.0, 0.6).unwrap();
        let pts: Vec<Point> = phis.iter().map(|&f| dom.boundary_point(f).unwrap()).collect();
        let samples: Vec<ExitSample> = pts.iter().map(|q| ExitSample { stream: 0, tau: 1.0, exit_point: [q.x, q.y], steps: 1, censored: false }).collect();
        let argmin = [dom.boundary_point(anchor).unwrap()];
        let s = exit_statistics_with(&dom, &samples, 0.1, &argmin, d1, bins, 1).unwrap();
        prop_assert_eq!(s.histogram.iter().sum::<usize>(), pts.len());
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let a = concentration_mass(&dom, &pts, &argmin, lo);
        let b = concentration_mass(&dom, &pts, &argmin, hi);
        prop_assert!(a <= b && (0.0..=1.0).contains(&a) && b <= 1.0);
        prop_assert_eq!(concentration_mass(&dom, &pts, &argmin, dom.perimeter()), 1.0);
    }
}
