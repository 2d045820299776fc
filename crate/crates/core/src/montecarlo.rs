//! Euler–Maruyama exit simulation, exit statistics and the log-mean-exit-time slope.

use std::path::Path;

use nalgebra::Matrix2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Domain, Point};
use crate::model::{Coefficients, Problem};
use crate::numerics::{linear_fit, quantile};

pub const DEFAULT_MAX_STEPS: u64 = 1_000_000_000;
pub const MIN_UNCENSORED: usize = 100;
pub const MAX_CENSORED_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitSample {
    pub stream: u64,
    pub tau: f64,
    /// Projected crossing point, or the last position of a censored path.
    pub exit_point: [f64; 2],
    pub steps: u64,
    pub censored: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    pub dt: f64,
    pub seed: u64,
    pub max_steps: u64,
}

impl SimulationOptions {
    pub fn new(dt: f64, seed: u64) -> Self {
        SimulationOptions {
            dt,
            seed,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

/// Square root of a 2×2 symmetric positive definite matrix in closed form.
fn sqrt2(a: &Matrix2<f64>) -> Matrix2<f64> {
    let s = (a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)])
        .max(0.0)
        .sqrt();
    let t = (a[(0, 0)] + a[(1, 1)] + 2.0 * s).sqrt();
    (a + Matrix2::identity() * s) / t
}

fn constant_diffusion(c: &Coefficients) -> bool {
    c.a11.is_constant() && c.a12.is_constant() && c.a22.is_constant()
}

/// Generator for trajectory `stream` under `seed`: the same pair gives the same path on any thread.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One path of `dX = b dt + √(2ε) σ dW` from `x0` until it leaves the domain.
pub fn simulate_exit(
    p: &Problem,
    eps: f64,
    x0: &Point,
    opts: &SimulationOptions,
    stream: u64,
) -> Result<ExitSample> {
    if !(opts.dt > 0.0 && opts.dt <= 1e-2) {
        return Err(Error::Parameter(format!(
            "dt = {} must lie in (0, 0.01]",
            opts.dt
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::Parameter(format!("eps = {eps} must be nonnegative")));
    }
    let dom = &p.domain;
    if dom.rho(x0) > 0.0 {
        return Err(Error::Precondition(format!(
            "start point ({}, {}) is outside the domain",
            x0.x, x0.y
        )));
    }
    let c = &p.coefficients;
    let dt = opts.dt;
    let scale = (2.0 * eps * dt).sqrt();
    let fixed = constant_diffusion(c).then(|| sqrt2(&c.a(x0)));
    let mut rng = stream_rng(opts.seed, stream);
    let mut x = *x0;
    for step in 1..=opts.max_steps {
        let xi = Point::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        let sigma = fixed.unwrap_or_else(|| sqrt2(&c.a(&x)));
        let next = x + c.b(&x) * dt + sigma * xi * scale;
        if dom.rho(&next) > 0.0 {
            let (crossing, frac) = locate_crossing(dom, &x, &next)?;
            return Ok(ExitSample {
                stream,
                tau: (step as f64 - 1.0 + frac) * dt,
                exit_point: [crossing.x, crossing.y],
                steps: step,
                censored: false,
            });
        }
        x = next;
    }
    Ok(ExitSample {
        stream,
        tau: opts.max_steps as f64 * dt,
        exit_point: [x.x, x.y],
        steps: opts.max_steps,
        censored: true,
    })
}

/// Linear interpolation of the signed distance between `inside` and `outside`, projected onto the boundary.
fn locate_crossing(dom: &Domain, inside: &Point, outside: &Point) -> Result<(Point, f64)> {
    let d0 = dom.signed_distance(inside)?.min(0.0);
    let d1 = dom.signed_distance(outside)?.max(0.0);
    let frac = if d1 - d0 > 0.0 { -d0 / (d1 - d0) } else { 1.0 };
    let z = inside + (outside - inside) * frac;
    let (y, _) = dom.nearest_boundary(&z)?;
    Ok((y, frac))
}

/// `n` independent exits from `x0`, streams `first_stream..first_stream + n`.
pub fn simulate_batch(
    p: &Problem,
    eps: f64,
    x0: &Point,
    opts: &SimulationOptions,
    first_stream: u64,
    n: usize,
) -> Result<Vec<ExitSample>> {
    (0..n as u64)
        .into_par_iter()
        .map(|k| simulate_exit(p, eps, x0, opts, first_stream + k))
        .collect()
}

/// Fraction of `points` within arc distance `delta` of some point of `argmin`.
pub fn concentration_mass(dom: &Domain, points: &[Point], argmin: &[Point], delta: f64) -> f64 {
    if points.is_empty() {
        return f64::NAN;
    }
    let hits = points
        .iter()
        .filter(|x| argmin.iter().any(|y| dom.arc_distance(x, y) <= delta))
        .count();
    hits as f64 / points.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitStatistics {
    pub eps: f64,
    pub n: usize,
    pub n_censored: usize,
    pub censored_fraction: f64,
    pub mean_tau: f64,
    pub median_tau: f64,
    pub eps_log_mean: f64,
    /// Counts over equal arc-length bins starting at angle 0.
    pub histogram: Vec<usize>,
    pub delta: f64,
    pub concentration_mass: f64,
}

/// Statistics of the uncensored samples; needs at least [`MIN_UNCENSORED`] of them.
pub fn exit_statistics(
    dom: &Domain,
    samples: &[ExitSample],
    eps: f64,
    argmin: &[Point],
    delta: f64,
    n_bins: usize,
) -> Result<ExitStatistics> {
    exit_statistics_with(dom, samples, eps, argmin, delta, n_bins, MIN_UNCENSORED)
}

pub fn exit_statistics_with(
    dom: &Domain,
    samples: &[ExitSample],
    eps: f64,
    argmin: &[Point],
    delta: f64,
    n_bins: usize,
    min_samples: usize,
) -> Result<ExitStatistics> {
    let done: Vec<&ExitSample> = samples.iter().filter(|s| !s.censored).collect();
    if done.is_empty() {
        return Err(Error::Statistics(format!(
            "all {} samples are censored",
            samples.len()
        )));
    }
    if done.len() < min_samples {
        return Err(Error::Statistics(format!(
            "{} uncensored samples, at least {min_samples} needed",
            done.len()
        )));
    }
    if n_bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    let taus: Vec<f64> = done.iter().map(|s| s.tau).collect();
    let mean_tau = taus.iter().sum::<f64>() / taus.len() as f64;
    let points: Vec<Point> = done
        .iter()
        .map(|s| Point::new(s.exit_point[0], s.exit_point[1]))
        .collect();
    let per = dom.perimeter();
    let mut histogram = vec![0; n_bins];
    for x in &points {
        let b = ((dom.arc_coordinate(x) / per * n_bins as f64) as usize).min(n_bins - 1);
        histogram[b] += 1;
    }
    let n_censored = samples.len() - done.len();
    Ok(ExitStatistics {
        eps,
        n: done.len(),
        n_censored,
        censored_fraction: n_censored as f64 / samples.len() as f64,
        mean_tau,
        median_tau: quantile(&taus, 0.5),
        eps_log_mean: eps * mean_tau.ln(),
        histogram,
        delta,
        concentration_mass: concentration_mass(dom, &points, argmin, delta),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub eps: f64,
    pub n: usize,
    pub censored_fraction: f64,
    pub mean_tau: f64,
    pub eps_log_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct M0Estimate {
    pub slope: f64,
    pub intercept: f64,
    pub table: Vec<SlopeRow>,
}

/// Least-squares fit of `log(mean τ)` against `1/ε` over batches `(ε, samples)`.
pub fn fit_m0(batches: &[(f64, Vec<ExitSample>)]) -> Result<M0Estimate> {
    let mut distinct: Vec<f64> = batches.iter().map(|b| b.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Precondition(format!(
            "{} distinct eps values, at least 3 needed",
            distinct.len()
        )));
    }
    let mut table = Vec::with_capacity(batches.len());
    for (eps, samples) in batches {
        let done: Vec<f64> = samples
            .iter()
            .filter(|s| !s.censored)
            .map(|s| s.tau)
            .collect();
        let censored_fraction = 1.0 - done.len() as f64 / samples.len().max(1) as f64;
        let mean_tau = done.iter().sum::<f64>() / done.len() as f64;
        table.push(SlopeRow {
            eps: *eps,
            n: samples.len(),
            censored_fraction,
            mean_tau,
            eps_log_mean: eps * mean_tau.ln(),
        });
    }
    let bad: Vec<String> = table
        .iter()
        .filter(|r| !(r.censored_fraction < MAX_CENSORED_FRACTION))
        .map(|r| {
            format!(
                "eps {}: {:.2}% censored",
                r.eps,
                100.0 * r.censored_fraction
            )
        })
        .collect();
    if !bad.is_empty() {
        return Err(Error::Censoring(bad.join("; ")));
    }
    let x: Vec<f64> = table.iter().map(|r| 1.0 / r.eps).collect();
    let y: Vec<f64> = table.iter().map(|r| r.mean_tau.ln()).collect();
    let (slope, intercept) = linear_fit(&x, &y);
    Ok(M0Estimate {
        slope,
        intercept,
        table,
    })
}

/// Simulates `n_traj` exits per `ε` from `x0` and fits the slope. Batch `k` uses seed `seed + k`.
pub fn estimate_m0(
    p: &Problem,
    eps_list: &[f64],
    n_traj: usize,
    x0: &Point,
    dt: f64,
    seed: u64,
) -> Result<M0Estimate> {
    let mut distinct = eps_list.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Precondition(format!(
            "{} distinct eps values, at least 3 needed",
            distinct.len()
        )));
    }
    let mut batches = Vec::with_capacity(eps_list.len());
    for (k, &eps) in eps_list.iter().enumerate() {
        let opts = SimulationOptions::new(dt, seed.wrapping_add(k as u64));
        batches.push((eps, simulate_batch(p, eps, x0, &opts, 0, n_traj)?));
    }
    fit_m0(&batches)
}

/// Writes `stream_id, tau, exit_x1, exit_x2, censored` rows.
pub fn write_samples_csv(path: &Path, samples: &[ExitSample]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["stream_id", "tau", "exit_x1", "exit_x2", "censored"])
        .map_err(io)?;
    for s in samples {
        w.write_record([
            s.stream.to_string(),
            s.tau.to_string(),
            s.exit_point[0].to_string(),
            s.exit_point[1].to_string(),
            s.censored.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
