//! Config-driven experiment drivers and their reports.

mod certify;
pub mod config;
mod evolution;
mod mc;
mod potential;
mod regimes;
pub mod report;
mod stationary;

use serde_json::{json, Value};

pub use config::{ExperimentConfig, ExperimentKind, SigmaCutoff, SCHEMA_VERSION};
pub use report::{content_hash, input_hash, Failure, Outputs, Recorder, Report, Skip};

use crate::error::{Error, Result};
use crate::geometry::{MaskedGrid, Point};
use crate::model::{BoundaryData, Problem};
use crate::quasipotential::{solve_from_point, ArgminSet, PotentialField};

/// Runs one experiment; files go to `out` when given.
pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig, out: Option<&Outputs>) -> Result<Report> {
    cfg.check_kind(kind)?;
    let hash = input_hash(cfg)?;
    let p = cfg.problem()?;
    let grid = cfg.grid(&p)?;
    let mut rec = Recorder::default();
    let results = match kind {
        ExperimentKind::Quasipotential => potential::run(cfg, &p, &grid, &mut rec, out)?,
        ExperimentKind::Parabolic => evolution::run(cfg, &p, &grid, &mut rec, out)?,
        ExperimentKind::Stationary => stationary::run(cfg, &p, &grid, &mut rec, out)?,
        ExperimentKind::Montecarlo => mc::run(cfg, &p, &grid, &mut rec, out)?,
        ExperimentKind::Certify => certify::run(cfg, &p, &grid, &mut rec, out)?,
        ExperimentKind::Regimes => regimes::run(cfg, &p, &grid, &mut rec, out)?,
    };
    let (report, plot) = rec.finish(kind.name(), cfg, hash, results);
    if let Some(o) = out {
        o.write_plot(&plot)?;
        o.write_report(&report)?;
    }
    Ok(report)
}

/// Point-source potential with a provenance id derived from the inputs that determine it.
pub(crate) struct Potential {
    pub field: PotentialField,
    pub m0: f64,
    pub argmin: ArgminSet,
    pub run_id: String,
}

pub(crate) fn potential(
    cfg: &ExperimentConfig,
    p: &Problem,
    grid: &MaskedGrid,
) -> Result<Potential> {
    let field = solve_from_point(p, grid, cfg.grid.stencil_order)?;
    let argmin = field
        .argmin
        .clone()
        .ok_or_else(|| Error::Construction("potential has no argmin".into()))?;
    let run_id = content_hash(
        format!(
            "quasipotential\ndomain={}\ncoefficients={}\nh={}\nstencil_order={}\n",
            cfg.problem.domain, cfg.problem.coefficients, cfg.grid.h, cfg.grid.stencil_order
        )
        .as_bytes(),
    );
    Ok(Potential {
        m0: argmin.m0,
        argmin,
        field,
        run_id,
    })
}

/// Boundary data on the argmin set: `(g₀, spread)` over the cluster minimizers, or over every
/// near-minimal point when the set wraps the whole boundary.
pub(crate) fn data_on_argmin(g: &BoundaryData, set: &ArgminSet) -> (f64, f64) {
    let pts: Vec<[f64; 2]> = if set.uniform {
        set.points.clone()
    } else {
        set.clusters.iter().map(|c| c.representative).collect()
    };
    let vals: Vec<f64> = pts
        .iter()
        .map(|q| g.eval(&Point::new(q[0], q[1])))
        .collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (vals.iter().sum::<f64>() / vals.len().max(1) as f64, hi - lo)
}

pub(crate) fn argmin_json(set: &ArgminSet) -> Value {
    json!({
        "m0": set.m0,
        "tol": set.tol,
        "uniform": set.uniform,
        "n_points": set.points.len(),
        "clusters": set.clusters,
    })
}

/// Probes must keep a distance of at least `3h` from the boundary.
pub(crate) fn check_probes(
    p: &Problem,
    grid: &MaskedGrid,
    probes: &[[f64; 2]],
) -> Result<Vec<Point>> {
    let margin = 3.0 * grid.h();
    probes
        .iter()
        .map(|q| {
            let x = config::point(q);
            let d = p.domain.signed_distance(&x)?;
            if d > -margin {
                return Err(Error::Config(format!(
                    "probe ({}, {}) is {:.4} from the boundary, closer than 3h = {margin}",
                    x.x, x.y, -d
                )));
            }
            Ok(x)
        })
        .collect()
}

/// True when `errors` (ordered by decreasing `ε`) never increase.
pub(crate) fn nonincreasing(errors: &[f64]) -> bool {
    errors.windows(2).all(|w| w[1] <= w[0])
}

/// Indices of `eps` in decreasing order.
pub(crate) fn by_decreasing(eps: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..eps.len()).collect();
    idx.sort_by(|&a, &b| eps[b].total_cmp(&eps[a]));
    idx
}

pub(crate) fn require_eps(eps: &[f64]) -> Result<()> {
    if eps.is_empty() {
        return Err(Error::Config("the eps list is empty".into()));
    }
    if let Some(e) = eps.iter().find(|e| !(**e > 0.0)) {
        return Err(Error::Config(format!("eps = {e} must be positive")));
    }
    Ok(())
}

fn fmt_num(x: f64) -> String {
    format!("{x}")
}

pub(crate) fn tag(name: &str, x: f64) -> String {
    format!("{name}={}", fmt_num(x))
}
