//! Residual statistics and one-sided difference stencils.

use serde::{Deserialize, Serialize};

use crate::geometry::{GridFunction, Point};
use crate::numerics::quantile;

/// Summary of a pointwise residual; `verified` iff `max <= tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub max: f64,
    pub p99: f64,
    pub count: usize,
    pub worst: Option<[f64; 2]>,
    pub tolerance: f64,
    pub verified: bool,
}

impl ResidualReport {
    pub fn from_samples(samples: &[(f64, Point)], tolerance: f64) -> Self {
        let mut max = f64::NEG_INFINITY;
        let mut worst = None;
        for (r, x) in samples {
            if *r > max || r.is_nan() {
                max = *r;
                worst = Some([x.x, x.y]);
                if r.is_nan() {
                    break;
                }
            }
        }
        let vals: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let p99 = quantile(&vals, 0.99);
        let verified = !samples.is_empty() && max <= tolerance;
        ResidualReport {
            max,
            p99,
            count: samples.len(),
            worst,
            tolerance,
            verified,
        }
    }
}

/// The four one-sided gradients `(D±x f, D±y f)` at node `k`, if all four neighbours are finite.
pub fn one_sided_gradients(f: &GridFunction, k: usize) -> Option<[Point; 4]> {
    let h = f.lattice.h;
    let c = f.get(k);
    let e = f.at(k, 1, 0);
    let w = f.at(k, -1, 0);
    let n = f.at(k, 0, 1);
    let s = f.at(k, 0, -1);
    if ![c, e, w, n, s].iter().all(|v| v.is_finite()) {
        return None;
    }
    let (fx, bx) = ((e - c) / h, (c - w) / h);
    let (fy, by) = ((n - c) / h, (c - s) / h);
    Some([
        Point::new(fx, fy),
        Point::new(fx, by),
        Point::new(bx, fy),
        Point::new(bx, by),
    ])
}

/// Central gradient at node `k`, if the four neighbours are finite.
pub fn central_gradient(f: &GridFunction, k: usize) -> Option<Point> {
    let h = f.lattice.h;
    let e = f.at(k, 1, 0);
    let w = f.at(k, -1, 0);
    let n = f.at(k, 0, 1);
    let s = f.at(k, 0, -1);
    if ![e, w, n, s].iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(Point::new((e - w) / (2.0 * h), (n - s) / (2.0 * h)))
}
