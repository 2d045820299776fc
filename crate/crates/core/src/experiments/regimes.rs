//! Regime experiment: probe values at `t = e^{λ/ε}` on both sides of `m₀`.

use rayon::prelude::*;
use serde_json::{json, Value};

use super::{
    argmin_json, by_decreasing, check_probes, data_on_argmin, nonincreasing, potential,
    require_eps, tag, ExperimentConfig, Outputs, Recorder,
};
use crate::certificates::Check;
use crate::error::{Error, Result};
use crate::geometry::{MaskedGrid, Point};
use crate::model::{validate_assumptions, Problem};
use crate::parabolic::{
    evolve, geometric_time_grid, solve_parabolic, Nonlinear, SolveOptions, SpaceTimeSolution,
};

/// Samples used by the assumption check that gates semilinear runs.
const VALIDATION_SAMPLES: usize = 2000;

struct Run {
    eps: f64,
    sigma: f64,
    horizon: f64,
    sol: SpaceTimeSolution,
}

/// Largest `|u − target|` over series times in `[a, b]` for probe `i`.
fn plateau(sol: &SpaceTimeSolution, i: usize, a: f64, b: f64, target: f64) -> f64 {
    sol.series_times
        .iter()
        .zip(&sol.series)
        .filter(|(t, _)| **t >= a && **t <= b)
        .map(|(_, r)| (r[i] - target).abs())
        .fold(0.0, f64::max)
}

pub(super) fn run(
    cfg: &ExperimentConfig,
    p: &Problem,
    grid: &MaskedGrid,
    rec: &mut Recorder,
    out: Option<&Outputs>,
) -> Result<Value> {
    let rc = &cfg.regimes;
    require_eps(&rc.eps)?;
    let validation = match &p.semilinear {
        Some(_) => {
            let v = validate_assumptions(p, VALIDATION_SAMPLES, 0);
            if !v.passed {
                return Err(Error::Precondition(format!(
                    "the semilinear problem fails the assumption checks: {}",
                    serde_json::to_string(&v).unwrap_or_default()
                )));
            }
            Some(v)
        }
        None => None,
    };
    let pot = potential(cfg, p, grid)?;
    let m0 = pot.m0;
    let below: Vec<f64> = rc.lambdas.iter().copied().filter(|&l| l < m0).collect();
    let above: Vec<f64> = rc.lambdas.iter().copied().filter(|&l| l > m0).collect();
    if below.is_empty() || above.is_empty() {
        return Err(Error::Config(format!(
            "the lambda list {:?} does not straddle m0 = {m0}",
            rc.lambdas
        )));
    }
    let probes = check_probes(p, grid, &rc.probes)?;
    let g_origin = p.boundary.eval(&Point::zeros());
    let (g0, spread) = data_on_argmin(&p.boundary, &pot.argmin);
    let constant = spread <= rc.argmin_data_tolerance;
    let lmax = rc.lambdas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lmin = rc.lambdas.iter().copied().fold(f64::INFINITY, f64::min);

    let f = p.semilinear.as_ref();
    let runs = rc
        .eps
        .par_iter()
        .map(|&eps| {
            let sigma = rc.sigma.eval(eps);
            if !(sigma > 0.0 && sigma <= (lmin / eps).exp()) {
                return Err(Error::Config(format!(
                    "sigma({eps}) = {sigma} is not in (0, e^(lambda/eps)] for every lambda"
                )));
            }
            let horizon = (lmax / eps).exp() * rc.horizon_factor;
            let mut checks: Vec<f64> = rc.lambdas.iter().map(|l| (l / eps).exp()).collect();
            checks.push(sigma);
            let tg =
                geometric_time_grid(rc.t_min, horizon, rc.n_steps)?.with_checkpoints(&checks)?;
            let opts = SolveOptions {
                store: Vec::new(),
                probes: probes.clone(),
            };
            let sol = solve_parabolic(p, eps, grid, &tg, f, &opts)?;
            Ok(Run {
                eps,
                sigma,
                horizon,
                sol,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // err[λ index][probe][run index]
    let mut rows = Vec::new();
    let mut err = vec![vec![vec![f64::NAN; runs.len()]; probes.len()]; rc.lambdas.len()];
    let mut val = err.clone();
    for (ri, r) in runs.iter().enumerate() {
        for (li, &l) in rc.lambdas.iter().enumerate() {
            let t = (l / r.eps).exp();
            let (regime, target) = if l < m0 { ("i", g_origin) } else { ("iii", g0) };
            let mut pr = Vec::new();
            for i in 0..probes.len() {
                let u = r.sol.probe_at(t, i).expect("checkpoint in the series");
                let plat = if l < m0 {
                    plateau(&r.sol, i, r.sigma, t, target)
                } else {
                    plateau(&r.sol, i, t, r.horizon, target)
                };
                val[li][i][ri] = u;
                err[li][i][ri] = (u - target).abs();
                pr.push(json!({"probe": [probes[i].x, probes[i].y], "u": u, "target": target, "abs_error": (u - target).abs(), "plateau_max_error": plat}));
            }
            let plateau_interval = if l < m0 { [r.sigma, t] } else { [t, r.horizon] };
            rows.push(json!({"eps": r.eps, "lambda": l, "regime": regime, "t": t, "sigma": r.sigma, "plateau_interval": plateau_interval, "probes": pr}));
        }
        for (i, x) in probes.iter().enumerate() {
            rec.series(
                &format!("u[eps={},x=({},{})]", r.eps, x.x, x.y),
                r.sol
                    .series_times
                    .iter()
                    .zip(&r.sol.series)
                    .skip(1)
                    .map(|(t, v)| (r.eps * t.ln(), v[i])),
            );
        }
    }

    let order = by_decreasing(&rc.eps);
    let small = *order.last().unwrap();
    let eps_small = rc.eps[small];
    for (li, &l) in rc.lambdas.iter().enumerate() {
        for (i, x) in probes.iter().enumerate() {
            let at = format!(
                "[{}, {}, probe=({},{})]",
                tag("eps", eps_small),
                tag("lambda", l),
                x.x,
                x.y
            );
            let trend: Vec<f64> = order.iter().map(|&ri| err[li][i][ri]).collect();
            if l < m0 {
                rec.check(Check::at_most(
                    &format!("regime (i) |u − g(0)| {at}"),
                    err[li][i][small],
                    rc.tol_i,
                ));
                rec.holds(
                    &format!(
                        "regime (i) error nonincreasing as eps decreases [{}, probe=({},{})]",
                        tag("lambda", l),
                        x.x,
                        x.y
                    ),
                    nonincreasing(&trend),
                );
            } else if constant {
                rec.check(Check::at_most(
                    &format!("regime (iii) |u − g0| {at}"),
                    err[li][i][small],
                    rc.tol_iii,
                ));
                rec.holds(
                    &format!(
                        "regime (iii) error nonincreasing as eps decreases [{}, probe=({},{})]",
                        tag("lambda", l),
                        x.x,
                        x.y
                    ),
                    nonincreasing(&trend),
                );
            } else {
                rec.skip(
                    &format!("regime (iii) {at}"),
                    "g_not_constant_on_argmin",
                    format!("spread of g over argmin = {spread}"),
                );
            }
        }
    }
    let needed = 0.5 * (g0 - g_origin).abs();
    for (i, x) in probes.iter().enumerate() {
        let name = format!(
            "trichotomy gap [{}, probe=({},{})]",
            tag("eps", eps_small),
            x.x,
            x.y
        );
        if !constant {
            rec.skip(
                &name,
                "g_not_constant_on_argmin",
                format!("spread of g over argmin = {spread}"),
            );
            continue;
        }
        let mut gap = f64::INFINITY;
        for (la, &a) in rc.lambdas.iter().enumerate() {
            for (lb, &b) in rc.lambdas.iter().enumerate() {
                if a < m0 && b > m0 {
                    gap = gap.min((val[lb][i][small] - val[la][i][small]).abs());
                }
            }
        }
        rec.check(Check::at_least(&name, gap, needed));
    }

    let transfer = match f {
        Some(f) => {
            let eps = eps_small;
            let lb = below.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tg = geometric_time_grid(rc.t_min, (lb / eps).exp(), rc.n_steps)?;
            let store: Vec<f64> = tg.times.iter().skip(1).step_by(8).copied().collect();
            let opts = SolveOptions {
                store,
                probes: Vec::new(),
            };
            let c = &p.coefficients;
            let du = grid.sample(|x| p.boundary.eval(x));
            let dv =
                grid.sample(|x| p.boundary.eval(x) + rc.transfer_offset * (1.0 + x.x.tanh()) / 2.0);
            let mut dz = dv.clone();
            for (z, u) in dz.values.iter_mut().zip(&du.values) {
                *z -= u;
            }
            let sols = [
                (&dv, Nonlinear::Semilinear(f)),
                (&du, Nonlinear::Semilinear(f)),
                (&dz, Nonlinear::UpperEnvelope(f.m(eps))),
            ]
            .par_iter()
            .map(|(d, nl)| evolve(c, eps, grid, d, &tg, *nl, &opts))
            .collect::<Result<Vec<_>>>()?;
            let mut excess = f64::NEG_INFINITY;
            for ((sv, su), sz) in sols[0]
                .slices
                .iter()
                .zip(&sols[1].slices)
                .zip(&sols[2].slices)
            {
                for k in grid.active() {
                    excess = excess.max(sv.get(k) - su.get(k) - sz.get(k));
                }
            }
            rec.check(Check::at_most(
                &format!("transfer excess max (v − u − z) [{}]", tag("eps", eps)),
                excess,
                rc.transfer_tolerance,
            ));
            Some(
                json!({"eps": eps, "M_eps": f.m(eps), "t_max": tg.t_max, "offset": rc.transfer_offset, "max_excess": excess}),
            )
        }
        None => None,
    };

    if let Some(o) = out {
        let mut table = Vec::new();
        for (ri, r) in runs.iter().enumerate() {
            for (li, &l) in rc.lambdas.iter().enumerate() {
                for i in 0..probes.len() {
                    table.push(vec![
                        r.eps,
                        l,
                        probes[i].x,
                        probes[i].y,
                        val[li][i][ri],
                        err[li][i][ri],
                    ]);
                }
            }
        }
        o.write_rows(
            "regimes.csv",
            &["eps", "lambda", "probe_x1", "probe_x2", "u", "abs_error"],
            &table,
        )?;
    }

    Ok(json!({
        "m0": m0,
        "m0_provenance": {"quasipotential_run_id": pot.run_id, "h": grid.h(), "stencil_order": cfg.grid.stencil_order},
        "argmin": argmin_json(&pot.argmin),
        "g_origin": g_origin,
        "g0": g0,
        "g_spread_on_argmin": spread,
        "g_constant_on_argmin": constant,
        "sigma": rc.sigma,
        "horizons": runs.iter().map(|r| json!({"eps": r.eps, "horizon": r.horizon, "clamp_correction": r.sol.clamp_correction})).collect::<Vec<_>>(),
        "rows": rows,
        "validation": validation,
        "transfer": transfer,
    }))
}
