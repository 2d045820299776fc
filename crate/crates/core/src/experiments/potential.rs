//! Quasi-potential experiment: `V`, `m₀`, `U`, `u_γ` and the path-optimizer comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use super::{argmin_json, potential, tag, ExperimentConfig, Outputs, Recorder};
use crate::certificates::Check;
use crate::error::{Error, Result};
use crate::geometry::{MaskedGrid, Point};
use crate::model::Problem;
use crate::quasipotential::{check_subsolution, minimize_path_action, solve_to_boundary};

/// Uniform targets in the domain, at least `3h` from the boundary and `5h` from the origin.
fn targets(p: &Problem, h: f64, n: usize, seed: u64) -> Result<Vec<Point>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = p.domain.bounding_box;
    let mut out = Vec::with_capacity(n);
    let mut tries = 0usize;
    while out.len() < n {
        tries += 1;
        if tries > 1000 * (n + 1) {
            return Err(Error::Config("no admissible path targets found".into()));
        }
        let x = Point::new(
            rng.gen_range(bb.min.x..=bb.max.x),
            rng.gen_range(bb.min.y..=bb.max.y),
        );
        if x.norm() >= 5.0 * h && p.domain.signed_distance(&x)? <= -3.0 * h {
            out.push(x);
        }
    }
    Ok(out)
}

pub(super) fn run(
    cfg: &ExperimentConfig,
    p: &Problem,
    grid: &MaskedGrid,
    rec: &mut Recorder,
    out: Option<&Outputs>,
) -> Result<Value> {
    let qc = &cfg.quasipotential;
    let h = grid.h();
    let order = cfg.grid.stencil_order;
    let pot = potential(cfg, p, grid)?;
    let v = &pot.field;

    let sub = check_subsolution(v, &p.coefficients, qc.subsolution_tolerance_h * h);
    rec.check(Check::at_most(
        "V subsolution residual",
        sub.max,
        sub.tolerance,
    ));

    let u = solve_to_boundary(p, grid, 0.0, order)?;
    let u0 = u.values.get(grid.origin());
    rec.check(Check::at_most(
        "|U(0) − m0|",
        (u0 - pot.m0).abs(),
        qc.u0_tolerance,
    ));
    let u_min = grid
        .interior
        .iter()
        .map(|&k| u.values.get(k))
        .fold(f64::INFINITY, f64::min);
    rec.check(Check::at_least("min U over interior nodes", u_min, 0.0));

    let mut gammas = qc.gammas.clone();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0)) {
        return Err(Error::Config(format!("gamma = {g} must be positive")));
    }
    let fields = gammas
        .par_iter()
        .map(|&g| solve_to_boundary(p, grid, g, order))
        .collect::<Result<Vec<_>>>()?;
    let mut gamma_rows = Vec::new();
    let keep = |k: usize| grid.is_active(k);
    let mut prev = &u;
    for (g, f) in gammas.iter().zip(&fields) {
        let close = f.values.max_abs_diff(&u.values, keep);
        rec.check(Check::at_most(
            &format!("max |u_γ − U| [{}]", tag("gamma", *g)),
            close,
            qc.closeness_tolerance,
        ));
        let excess = grid
            .active()
            .map(|k| prev.values.get(k) - f.values.get(k))
            .filter(|d| d.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        rec.check(Check::at_most(
            &format!(
                "max (u_γ1 − u_γ2) [{}, {}]",
                tag("gamma1", prev.gamma),
                tag("gamma2", *g)
            ),
            excess,
            qc.monotone_slack_h * h,
        ));
        gamma_rows.push(json!({"gamma": g, "u_at_origin": f.values.get(grid.origin()), "max_abs_diff_to_U": close, "max_below_previous": excess}));
        prev = f;
    }

    let pts = targets(p, h, qc.path_targets, qc.path_seed)?;
    let paths = pts
        .par_iter()
        .map(|y| {
            minimize_path_action(
                &p.coefficients,
                &Point::zeros(),
                y,
                qc.path_knots,
                &p.domain,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut path_rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (y, path) in pts.iter().zip(&paths) {
        let dv = v.value_at(y);
        let diff = (dv - path.action).abs();
        worst = worst.max(diff);
        path_rows.push(json!({"target": [y.x, y.y], "dijkstra": dv, "path_action": path.action, "converged": path.converged, "abs_diff": diff}));
    }
    if !pts.is_empty() {
        rec.check(Check::at_most(
            "max |V − path action|",
            worst,
            qc.path_tolerance,
        ));
    }

    let axis: Vec<(f64, f64)> = grid
        .interior
        .iter()
        .filter(|&&k| grid.lattice.ij(k).1 == grid.lattice.ij(grid.origin()).1)
        .map(|&k| (grid.point(k).x, v.values.get(k)))
        .collect();
    rec.series("V_axis_x1", axis);
    rec.series(
        "V_boundary_arc",
        v.boundary_values.iter().map(|b| {
            (
                p.domain.arc_coordinate(&Point::new(b.point[0], b.point[1])),
                b.value,
            )
        }),
    );

    if let Some(o) = out {
        v.write_csv(&o.path("V.csv"))?;
        u.write_csv(&o.path("U.csv"))?;
        for (g, f) in gammas.iter().zip(&fields) {
            f.write_csv(&o.path(&format!("u_gamma_{g}.csv")))?;
        }
    }

    Ok(json!({
        "run_id": pot.run_id,
        "h": h,
        "stencil_order": order,
        "interior_nodes": grid.interior.len(),
        "m0": pot.m0,
        "argmin": argmin_json(&pot.argmin),
        "U_at_origin": u0,
        "V_subsolution": sub,
        "gammas": gamma_rows,
        "paths": path_rows,
    }))
}
