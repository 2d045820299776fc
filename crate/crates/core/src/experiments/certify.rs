//! Certificate suite: every construction on the configured problem, failures kept as entries.

use serde_json::{json, Value};

use super::{potential, tag, ExperimentConfig, Outputs, Recorder};
use crate::certificates::{
    build_appendix_barriers, build_exit_supersolution, build_exponential_barrier, build_psi,
    lambda_balance, strict_subsolution, AppendixOptions, Certificate, Check, ExitOptions,
    PsiOptions,
};
use crate::error::Result;
use crate::geometry::MaskedGrid;
use crate::model::Problem;

/// Lower bound on `δ(λ)/λ` at the probed offset.
pub const OFFSET_RATIO_MIN: f64 = 0.95;

fn record(
    rec: &mut Recorder,
    name: &str,
    cert: &Certificate,
    out: Option<&Outputs>,
    grid: &MaskedGrid,
    file: &str,
) -> Result<Value> {
    rec.check(Check {
        name: format!("certificate {name}"),
        value: cert.report.max,
        relation: "<=",
        bound: cert.report.tolerance,
        passed: cert.verified,
    });
    if let Some(o) = out {
        cert.write_csv(grid, &o.path(file))?;
    }
    Ok(json!({"name": name, "summary": cert.summary()}))
}

pub(super) fn run(
    cfg: &ExperimentConfig,
    p: &Problem,
    grid: &MaskedGrid,
    rec: &mut Recorder,
    out: Option<&Outputs>,
) -> Result<Value> {
    let cc = &cfg.certify;
    let mut certs = Vec::new();

    let offset = match p.domain.normal_offset_gap(cc.offset_lambda) {
        Ok(d) => {
            let ratio = d / cc.offset_lambda;
            rec.check(Check::at_least(
                &format!(
                    "offset gap ratio lower [{}]",
                    tag("lambda", cc.offset_lambda)
                ),
                ratio,
                OFFSET_RATIO_MIN,
            ));
            rec.check(Check::at_most(
                &format!(
                    "offset gap ratio upper [{}]",
                    tag("lambda", cc.offset_lambda)
                ),
                ratio,
                1.0,
            ));
            Some(json!({"lambda": cc.offset_lambda, "delta": d, "ratio": ratio}))
        }
        Err(e) => {
            rec.fail("offset gap", &e);
            None
        }
    };

    let pot = match potential(cfg, p, grid) {
        Ok(v) => Some(v),
        Err(e) => {
            rec.fail("quasipotential", &e);
            None
        }
    };

    let psi_opts = PsiOptions {
        big_r: cc.psi_radius,
        ramp_width: cc.ramp_width,
        ..PsiOptions::default()
    };
    let psi = match build_psi(p, grid, &psi_opts) {
        Ok(c) => {
            certs.push(record(rec, "psi", &c, out, grid, "psi.csv")?);
            Some(c)
        }
        Err(e) => {
            rec.fail("psi", &e);
            None
        }
    };

    let mut w_r = None;
    match (&pot, &psi) {
        (Some(pot), Some(psi)) => match strict_subsolution(p, &pot.field, psi, cc.r) {
            Ok(l) => {
                certs.push(record(rec, "psi_r", &l.psi_r, out, grid, "psi_r.csv")?);
                certs.push(record(rec, "V_r", &l.v_r, out, grid, "V_r.csv")?);
                certs.push(record(rec, "W_r", &l.w_r, out, grid, "W_r.csv")?);
                w_r = Some(l.w_r);
            }
            Err(e) => rec.fail("strict subsolution ladder", &e),
        },
        _ => rec.skip(
            "strict subsolution ladder",
            "missing_prerequisite",
            "needs V and psi",
        ),
    }

    for &lambda in &cc.exit_lambdas {
        let name = format!("exit W [{}]", tag("lambda", lambda));
        match &pot {
            Some(pot) => {
                match build_exit_supersolution(p, &pot.field, lambda, &ExitOptions::default()) {
                    Ok(c) => certs.push(record(
                        rec,
                        &name,
                        &c,
                        out,
                        grid,
                        &format!("exit_W_lambda_{lambda}.csv"),
                    )?),
                    Err(e) => rec.fail(&name, &e),
                }
            }
            None => rec.skip(&name, "missing_prerequisite", "needs V"),
        }
    }

    for &eps in &cc.barrier_eps {
        let name = format!("exponential barrier [{}]", tag("eps", eps));
        match &w_r {
            Some(w) => match build_exponential_barrier(p, grid, w, cc.barrier_mu, eps) {
                Ok(c) => certs.push(record(
                    rec,
                    &name,
                    &c,
                    out,
                    grid,
                    &format!("exp_barrier_eps_{eps}.csv"),
                )?),
                Err(e) => rec.fail(&name, &e),
            },
            None => rec.skip(&name, "missing_prerequisite", "needs W_r"),
        }
    }

    let eps = cc.appendix_eps;
    let m_eps = p
        .semilinear
        .as_ref()
        .map(|f| f.m(eps))
        .unwrap_or(cc.appendix_m);
    let name = format!("appendix barriers [{}]", tag("eps", eps));
    match build_appendix_barriers(p, grid, eps, m_eps, &AppendixOptions::default()) {
        Ok(c) => {
            let (l, _) = lambda_balance(
                eps,
                m_eps,
                p.coefficients.theta,
                2.0,
                c.param("diameter")?,
                c.param("b_sup")?,
            )?;
            rec.check(Check::at_most(
                "Lambda recomputation mismatch",
                (l - c.param("Lambda")?).abs(),
                0.0,
            ));
            certs.push(record(
                rec,
                &name,
                &c,
                out,
                grid,
                &format!("appendix_w_eps_{eps}.csv"),
            )?);
        }
        Err(e) => rec.fail(&name, &e),
    }

    Ok(json!({
        "h": grid.h(),
        "m0": pot.as_ref().map(|v| v.m0),
        "m0_provenance": pot.as_ref().map(|v| json!({"quasipotential_run_id": v.run_id})),
        "offset_gap": offset,
        "appendix_M_eps": m_eps,
        "certificates": certs,
    }))
}
