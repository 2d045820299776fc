//! Parabolic experiment: time series at probes, slice bounds and the transport comparison.

use rayon::prelude::*;
use serde_json::{json, Value};

use super::{check_probes, require_eps, tag, ExperimentConfig, Outputs, Recorder};
use crate::certificates::Check;
use crate::error::Result;
use crate::flow::transport_solution;
use crate::geometry::MaskedGrid;
use crate::model::Problem;
use crate::parabolic::{geometric_time_grid, solve_parabolic, SolveOptions, SpaceTimeSolution};

/// Largest violation of `min g ≤ u ≤ max g` over stored slices; zero when the bounds hold.
pub(super) fn bound_violation(sol: &SpaceTimeSolution, grid: &MaskedGrid, lo: f64, hi: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for s in &sol.slices {
        for &k in &grid.interior {
            let u = s.get(k);
            worst = worst.max(lo - u).max(u - hi);
        }
    }
    worst
}

pub(super) fn data_range(p: &Problem, grid: &MaskedGrid) -> (f64, f64) {
    grid.active()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), k| {
            let g = p.boundary.eval(&grid.data_point(k));
            (lo.min(g), hi.max(g))
        })
}

pub(super) fn run(
    cfg: &ExperimentConfig,
    p: &Problem,
    grid: &MaskedGrid,
    rec: &mut Recorder,
    out: Option<&Outputs>,
) -> Result<Value> {
    let pc = &cfg.parabolic;
    require_eps(&pc.eps)?;
    let probes = check_probes(p, grid, &pc.probes)?;
    let mut checkpoints = pc.store.clone();
    if let Some(tc) = &pc.transport {
        checkpoints.extend(&tc.times);
    }
    let tg = geometric_time_grid(pc.t_min, pc.t_max, pc.n_steps)?.with_checkpoints(&checkpoints)?;
    let opts = SolveOptions {
        store: checkpoints.clone(),
        probes: probes.clone(),
    };
    let f = p.semilinear.as_ref();
    let sols = pc
        .eps
        .par_iter()
        .map(|&eps| solve_parabolic(p, eps, grid, &tg, f, &opts))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = data_range(p, grid);

    let mut rows = Vec::new();
    for sol in &sols {
        let e = sol.eps;
        rec.check(Check::at_most(
            &format!("slice bound violation [{}]", tag("eps", e)),
            bound_violation(sol, grid, lo, hi),
            0.0,
        ));
        let mut entry = json!({
            "eps": e,
            "scheme": sol.scheme,
            "n_times": sol.series_times.len(),
            "clamp_correction": sol.clamp_correction,
            "max_fixed_point_iterations": sol.max_fixed_point_iterations,
            "final": probes.iter().enumerate().map(|(i, _)| sol.series.last().map(|r| r[i])).collect::<Vec<_>>(),
        });
        if let Some(tc) = &pc.transport {
            let mut worst: f64 = 0.0;
            let mut per_time = Vec::new();
            for &t in &tc.times {
                let slice = sol.slice_at(t).expect("checkpoint stored");
                let mut m: f64 = 0.0;
                for &k in &grid.interior {
                    let x = grid.point(k);
                    if x.norm() <= tc.radius {
                        m = m.max(
                            (slice.get(k)
                                - transport_solution(&p.coefficients, &p.boundary, &x, t))
                            .abs(),
                        );
                    }
                }
                worst = worst.max(m);
                per_time.push(json!({"t": t, "max_abs_error": m}));
            }
            rec.check(Check::at_most(
                &format!("transport error [{}]", tag("eps", e)),
                worst,
                tc.tolerance,
            ));
            entry["transport"] = json!(per_time);
        }
        for (i, x) in probes.iter().enumerate() {
            rec.series(
                &format!("u[eps={e},x=({},{})]", x.x, x.y),
                sol.series_times
                    .iter()
                    .zip(&sol.series)
                    .skip(1)
                    .map(|(t, r)| (t.ln(), r[i])),
            );
        }
        rows.push(entry);
        if let Some(o) = out {
            let series: Vec<Vec<f64>> = sol
                .series_times
                .iter()
                .zip(&sol.series)
                .map(|(t, r)| std::iter::once(*t).chain(r.iter().copied()).collect())
                .collect();
            let mut header = vec!["t".to_string()];
            header.extend((0..probes.len()).map(|i| format!("probe_{i}")));
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            o.write_rows(&format!("series_eps_{e}.csv"), &header, &series)?;
            for (t, s) in sol.times.iter().zip(&sol.slices) {
                let rows: Vec<Vec<f64>> = grid
                    .active()
                    .map(|k| vec![grid.point(k).x, grid.point(k).y, s.get(k)])
                    .collect();
                o.write_rows(
                    &format!("slice_eps_{e}_t_{t}.csv"),
                    &["x1", "x2", "u"],
                    &rows,
                )?;
            }
        }
    }
    Ok(json!({
        "probes": probes.iter().map(|x| [x.x, x.y]).collect::<Vec<_>>(),
        "time_grid": {"t_min": tg.t_min, "t_max": tg.t_max, "n_steps": tg.n_steps, "ratio": tg.ratio, "n_times": tg.times.len()},
        "data_range": [lo, hi],
        "runs": rows,
    }))
}
