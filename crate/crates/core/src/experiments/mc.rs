//! Monte Carlo experiment: exit-time slope, exit locations and the time-step check.

use serde_json::{json, Value};

use super::{
    argmin_json, by_decreasing, potential, require_eps, tag, ExperimentConfig, Outputs, Recorder,
};
use crate::certificates::Check;
use crate::error::{Error, Result};
use crate::geometry::{MaskedGrid, Point};
use crate::model::Problem;
use crate::montecarlo::{
    exit_statistics, fit_m0, simulate_batch, write_samples_csv, ExitSample, SimulationOptions,
};

/// Relative half-width of the default slope band around the computed `m₀`.
pub const DEFAULT_SLOPE_BAND: f64 = 0.25;

pub(super) fn run(
    cfg: &ExperimentConfig,
    p: &Problem,
    grid: &MaskedGrid,
    rec: &mut Recorder,
    out: Option<&Outputs>,
) -> Result<Value> {
    let mc = &cfg.montecarlo;
    require_eps(&mc.eps)?;
    let x0 = Point::new(mc.x0[0], mc.x0[1]);
    if !p.domain.contains(&x0) {
        return Err(Error::Config(format!(
            "x0 = ({}, {}) is not inside the domain",
            x0.x, x0.y
        )));
    }
    let pot = potential(cfg, p, grid)?;
    let argmin: Vec<Point> = pot
        .argmin
        .clusters
        .iter()
        .map(|c| Point::new(c.representative[0], c.representative[1]))
        .collect();
    let opts_for = |seed: u64, dt: f64| SimulationOptions {
        dt,
        seed,
        max_steps: mc.max_steps,
    };

    let mut batches: Vec<(f64, Vec<ExitSample>)> = Vec::with_capacity(mc.eps.len());
    for (k, &eps) in mc.eps.iter().enumerate() {
        let samples = simulate_batch(
            p,
            eps,
            &x0,
            &opts_for(mc.seed.wrapping_add(k as u64), mc.dt),
            0,
            mc.n_traj,
        )?;
        batches.push((eps, samples));
    }
    let mut stats = Vec::new();
    for (eps, samples) in &batches {
        match exit_statistics(&p.domain, samples, *eps, &argmin, mc.delta, mc.n_bins) {
            Ok(s) => stats.push(Some(s)),
            Err(e) => {
                rec.fail(&format!("exit statistics [{}]", tag("eps", *eps)), &e);
                stats.push(None);
            }
        }
    }

    let band = mc.slope_band.unwrap_or([
        pot.m0 * (1.0 - DEFAULT_SLOPE_BAND),
        pot.m0 * (1.0 + DEFAULT_SLOPE_BAND),
    ]);
    let fit = match fit_m0(&batches) {
        Ok(fit) => {
            rec.check(Check::at_least("slope lower band", fit.slope, band[0]));
            rec.check(Check::at_most("slope upper band", fit.slope, band[1]));
            rec.series(
                "log_mean_tau",
                fit.table.iter().map(|r| (1.0 / r.eps, r.mean_tau.ln())),
            );
            Some(fit)
        }
        Err(e @ (Error::Censoring(_) | Error::Precondition(_))) => {
            rec.fail("slope fit", &e);
            None
        }
        Err(e) => return Err(e),
    };

    let order = by_decreasing(&mc.eps);
    let means: Vec<f64> = order
        .iter()
        .filter_map(|&i| stats[i].as_ref().map(|s| s.mean_tau))
        .collect();
    if means.len() == mc.eps.len() {
        rec.holds(
            "mean exit time increases as eps decreases",
            means.windows(2).all(|w| w[1] > w[0]),
        );
    }
    let small = *order.last().unwrap();
    if let Some(min) = mc.concentration_min {
        match &stats[small] {
            Some(s) => rec.check(Check::at_least(
                &format!(
                    "concentration mass [{}, delta={}]",
                    tag("eps", mc.eps[small]),
                    mc.delta
                ),
                s.concentration_mass,
                min,
            )),
            None => rec.skip(
                "concentration mass",
                "statistics_unavailable",
                "too few uncensored samples",
            ),
        }
    }

    let dt_check = match mc.dt_check_eps {
        Some(eps) => {
            let k = mc.eps.iter().position(|&e| e == eps);
            let seed = mc.seed.wrapping_add(k.unwrap_or(mc.eps.len()) as u64);
            let coarse = match k {
                Some(k) => batches[k].1.clone(),
                None => simulate_batch(p, eps, &x0, &opts_for(seed, mc.dt), 0, mc.n_traj)?,
            };
            let fine = simulate_batch(p, eps, &x0, &opts_for(seed, mc.dt / 2.0), 0, mc.n_traj)?;
            let a = exit_statistics(&p.domain, &coarse, eps, &argmin, mc.delta, mc.n_bins)?;
            let b = exit_statistics(&p.domain, &fine, eps, &argmin, mc.delta, mc.n_bins)?;
            let shift = (a.eps_log_mean - b.eps_log_mean).abs();
            rec.check(Check::at_most(
                &format!("dt halving shift of eps log mean tau [{}]", tag("eps", eps)),
                shift,
                mc.dt_check_tolerance,
            ));
            Some(
                json!({"eps": eps, "dt": mc.dt, "eps_log_mean": a.eps_log_mean, "eps_log_mean_half_dt": b.eps_log_mean, "shift": shift}),
            )
        }
        None => None,
    };

    if let Some(o) = out {
        for (eps, samples) in &batches {
            write_samples_csv(&o.path(&format!("exits_eps_{eps}.csv")), samples)?;
        }
    }

    Ok(json!({
        "m0": pot.m0,
        "m0_provenance": {"quasipotential_run_id": pot.run_id},
        "argmin": argmin_json(&pot.argmin),
        "x0": [x0.x, x0.y],
        "slope_band": band,
        "fit": fit,
        "statistics": stats,
        "dt_check": dt_check,
    }))
}
