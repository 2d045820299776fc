//! Stationary experiment: `v^ε` at probes against the argmin value `g₀`.

use rayon::prelude::*;
use serde_json::{json, Value};

use super::evolution::data_range;
use super::{
    argmin_json, by_decreasing, data_on_argmin, nonincreasing, potential, require_eps, tag,
    ExperimentConfig, Outputs, Recorder,
};
use crate::certificates::Check;
use crate::error::{Error, Result};
use crate::geometry::{MaskedGrid, Point};
use crate::model::Problem;
use crate::parabolic::solve_stationary;

fn inside(p: &Problem, probes: &[[f64; 2]]) -> Result<Vec<Point>> {
    probes
        .iter()
        .map(|q| {
            let x = super::config::point(q);
            if p.domain.rho(&x) < 0.0 {
                Ok(x)
            } else {
                Err(Error::Config(format!(
                    "probe ({}, {}) is not inside the domain",
                    x.x, x.y
                )))
            }
        })
        .collect()
}

pub(super) fn run(
    cfg: &ExperimentConfig,
    p: &Problem,
    grid: &MaskedGrid,
    rec: &mut Recorder,
    out: Option<&Outputs>,
) -> Result<Value> {
    let sc = &cfg.stationary;
    require_eps(&sc.eps)?;
    let probes = super::check_probes(p, grid, &sc.probes)?;
    let near = inside(p, &sc.near_probes)?;
    let pot = potential(cfg, p, grid)?;
    let (g0, spread) = data_on_argmin(&p.boundary, &pot.argmin);
    let constant = spread <= sc.argmin_data_tolerance;
    let f = p.semilinear.as_ref();
    let sols = sc
        .eps
        .par_iter()
        .map(|&eps| solve_stationary(p, eps, grid, f))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = data_range(p, grid);

    let mut rows = Vec::new();
    for (&eps, v) in sc.eps.iter().zip(&sols) {
        let viol = grid
            .interior
            .iter()
            .map(|&k| (lo - v.get(k)).max(v.get(k) - hi))
            .fold(0.0, f64::max);
        rec.check(Check::at_most(
            &format!("maximum principle violation [{}]", tag("eps", eps)),
            viol,
            0.0,
        ));
        let at = |x: &Point| v.sample(x);
        rows.push(json!({
            "eps": eps,
            "probes": probes.iter().map(|x| json!({"probe": [x.x, x.y], "v": at(x), "abs_error": (at(x) - g0).abs()})).collect::<Vec<_>>(),
            "near_probes": near.iter().map(|x| json!({"probe": [x.x, x.y], "v": at(x), "abs_error": (at(x) - g0).abs()})).collect::<Vec<_>>(),
        }));
    }

    let order = by_decreasing(&sc.eps);
    let small = *order.last().unwrap();
    let eps_small = sc.eps[small];
    let all: Vec<(Point, f64, &str)> = probes
        .iter()
        .map(|x| (*x, sc.tolerance, "probe"))
        .chain(near.iter().map(|x| (*x, sc.near_tolerance, "near probe")))
        .collect();
    for (x, tol, label) in &all {
        let name = format!(
            "|v − g0| at {label} ({},{}) [{}]",
            x.x,
            x.y,
            tag("eps", eps_small)
        );
        if !constant {
            rec.skip(
                &name,
                "g_not_constant_on_argmin",
                format!("spread of g over argmin = {spread}"),
            );
            continue;
        }
        let errs: Vec<f64> = order
            .iter()
            .map(|&i| (sols[i].sample(x) - g0).abs())
            .collect();
        rec.check(Check::at_most(&name, *errs.last().unwrap(), *tol));
        rec.holds(
            &format!(
                "{label} ({},{}) error nonincreasing as eps decreases",
                x.x, x.y
            ),
            nonincreasing(&errs),
        );
        rec.series(
            &format!("v[x=({},{})]", x.x, x.y),
            order.iter().map(|&i| (1.0 / sc.eps[i], sols[i].sample(x))),
        );
    }

    if let Some(o) = out {
        for (&eps, v) in sc.eps.iter().zip(&sols) {
            let rows: Vec<Vec<f64>> = grid
                .active()
                .map(|k| vec![grid.point(k).x, grid.point(k).y, v.get(k)])
                .collect();
            o.write_rows(
                &format!("stationary_eps_{eps}.csv"),
                &["x1", "x2", "v"],
                &rows,
            )?;
        }
    }

    Ok(json!({
        "m0": pot.m0,
        "m0_provenance": {"quasipotential_run_id": pot.run_id},
        "argmin": argmin_json(&pot.argmin),
        "g0": g0,
        "g_spread_on_argmin": spread,
        "g_constant_on_argmin": constant,
        "data_range": [lo, hi],
        "rows": rows,
    }))
}
