//! The deterministic flow `Ẋ = b(X)`.

use std::path::Path;

use nalgebra::SVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::model::{BoundaryData, Coefficients};

/// A vector field on `R^N`.
pub trait Drift<const N: usize>: Sync {
    fn drift(&self, x: &SVector<f64, N>) -> SVector<f64, N>;
}

impl Drift<2> for Coefficients {
    fn drift(&self, x: &Point) -> Point {
        self.b(x)
    }
}

pub fn rk4_step<const N: usize, F: Drift<N> + ?Sized>(
    f: &F,
    x: &SVector<f64, N>,
    dt: f64,
) -> SVector<f64, N> {
    let k1 = f.drift(x);
    let k2 = f.drift(&(x + k1 * (0.5 * dt)));
    let k3 = f.drift(&(x + k2 * (0.5 * dt)));
    let k4 = f.drift(&(x + k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug)]
pub struct Trajectory<const N: usize> {
    pub times: Vec<f64>,
    pub points: Vec<SVector<f64, N>>,
    pub dt: f64,
    pub direction: Direction,
    /// Time at which the trajectory left the escape ball, if it did.
    pub escaped_at: Option<f64>,
}

impl<const N: usize> Trajectory<N> {
    pub fn last(&self) -> &SVector<f64, N> {
        self.points.last().unwrap()
    }
}

impl Trajectory<2> {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        w.write_record(["t", "x1", "x2"])
            .map_err(|e| Error::io(path, e.into()))?;
        for (t, p) in self.times.iter().zip(&self.points) {
            w.write_record(&[t.to_string(), p.x.to_string(), p.y.to_string()])
                .map_err(|e| Error::io(path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// RK4 trajectory from `x` over `[0, t_final]` (reverse flow if `t_final < 0`). The step is
/// adjusted so that an integer number of steps lands exactly on `t_final`.
pub fn integrate_flow<const N: usize, F: Drift<N> + ?Sized>(
    f: &F,
    x: &SVector<f64, N>,
    t_final: f64,
    dt: f64,
) -> Result<Trajectory<N>> {
    integrate_flow_bounded(f, x, t_final, dt, f64::INFINITY)
}

/// As [`integrate_flow`], stopping early once `|X| > escape_radius`.
pub fn integrate_flow_bounded<const N: usize, F: Drift<N> + ?Sized>(
    f: &F,
    x: &SVector<f64, N>,
    t_final: f64,
    dt: f64,
    escape_radius: f64,
) -> Result<Trajectory<N>> {
    if !(dt > 0.0) {
        return Err(Error::Parameter(format!(
            "time step dt = {dt} must be positive"
        )));
    }
    let steps = ((t_final.abs() / dt).ceil() as usize).max(1);
    let h = t_final / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut points = Vec::with_capacity(steps + 1);
    times.push(0.0);
    points.push(*x);
    let mut cur = *x;
    let mut escaped_at = None;
    for s in 1..=steps {
        cur = rk4_step(f, &cur, h);
        let t = if s == steps { t_final } else { s as f64 * h };
        times.push(t);
        points.push(cur);
        if cur.norm() > escape_radius || !cur.iter().all(|v| v.is_finite()) {
            escaped_at = Some(t);
            break;
        }
    }
    Ok(Trajectory {
        times,
        points,
        dt: h.abs(),
        direction: if t_final >= 0.0 {
            Direction::Forward
        } else {
            Direction::Backward
        },
        escaped_at,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Confinement {
    pub time: f64,
    pub net_spacing: f64,
    pub n_points: usize,
}

/// Smallest sampled `T` such that every trajectory from a net on `B_R` stays in `B_r` on `[T, 2T]`.
pub fn confinement_time(
    c: &Coefficients,
    r: f64,
    big_r: f64,
    n_samples: usize,
) -> Result<Confinement> {
    if !(r > 0.0 && r < big_r) {
        return Err(Error::Parameter(format!(
            "need 0 < r < R, got r = {r}, R = {big_r}"
        )));
    }
    let k = ((n_samples as f64).sqrt().ceil() as usize).max(2);
    let spacing = 2.0 * big_r / (k - 1) as f64;
    let mut net = Vec::new();
    for i in 0..k {
        for j in 0..k {
            let p = Point::new(-big_r + i as f64 * spacing, -big_r + j as f64 * spacing);
            if p.norm() <= big_r {
                net.push(p);
            }
        }
    }
    for m in 0..4 * k {
        let phi = 2.0 * std::f64::consts::PI * m as f64 / (4 * k) as f64;
        net.push(Point::new(big_r * phi.cos(), big_r * phi.sin()));
    }
    let dt = 1e-3;
    let cap = 1e3;
    let mut horizon = 2.0;
    loop {
        let last_out: Vec<Option<f64>> = net
            .par_iter()
            .map(|p| {
                let tr = integrate_flow_bounded(c, p, horizon, dt, 1e6 * big_r).ok()?;
                if tr.escaped_at.is_some() {
                    return None;
                }
                let mut last = 0.0;
                for (t, x) in tr.times.iter().zip(&tr.points) {
                    if x.norm() > r {
                        last = *t;
                    }
                }
                Some(last)
            })
            .collect();
        if last_out.iter().all(|v| v.is_some()) {
            let t = last_out.iter().map(|v| v.unwrap()).fold(0.0, f64::max);
            if 2.0 * t <= horizon {
                return Ok(Confinement {
                    time: t,
                    net_spacing: spacing,
                    n_points: net.len(),
                });
            }
        }
        horizon *= 2.0;
        if horizon > cap {
            return Err(Error::Stability(format!(
                "trajectories from B_{big_r} do not settle in B_{r} before t = {cap}"
            )));
        }
    }
}

/// `g(X(t; x))`, the exact solution of the transport problem `u_t = b·Du`, `u(·,0) = g`.
pub fn transport_solution(c: &Coefficients, g: &BoundaryData, x: &Point, t: f64) -> f64 {
    let tr = integrate_flow(c, x, t, 1e-3).expect("positive step");
    g.eval(tr.last())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_is_fixed() {
        let c = Coefficients::isotropic_quadratic();
        let tr = integrate_flow(&c, &Point::zeros(), 3.0, 1e-2).unwrap();
        assert_eq!(*tr.last(), Point::zeros());
    }

    #[test]
    fn step_lands_on_final_time() {
        let c = Coefficients::isotropic_quadratic();
        let tr = integrate_flow(&c, &Point::new(0.5, 0.0), -0.7, 0.3).unwrap();
        assert_eq!(*tr.times.last().unwrap(), -0.7);
        assert_eq!(tr.direction, Direction::Backward);
    }
}
