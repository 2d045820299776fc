//! Versioned TOML configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_grid, Domain, MaskedGrid, Point};
use crate::model::{BoundaryData, Coefficients, Problem, SemilinearTerm};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Quasipotential,
    Parabolic,
    Stationary,
    Montecarlo,
    Certify,
    Regimes,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Quasipotential => "quasipotential",
            ExperimentKind::Parabolic => "parabolic",
            ExperimentKind::Stationary => "stationary",
            ExperimentKind::Montecarlo => "montecarlo",
            ExperimentKind::Certify => "certify",
            ExperimentKind::Regimes => "regimes",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub quasipotential: QuasipotentialConfig,
    #[serde(default)]
    pub parabolic: ParabolicConfig,
    #[serde(default)]
    pub regimes: RegimeConfig,
    #[serde(default)]
    pub stationary: StationaryConfig,
    #[serde(default)]
    pub montecarlo: MonteCarloConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// `ball:r`, `ellipse:a,b` or `implicit:<path>`.
    pub domain: String,
    pub coefficients: String,
    /// `x1_squared`, `x2_squared` or `constant:c`.
    pub boundary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semilinear: Option<SemilinearConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemilinearConfig {
    /// `tanh`, `tanh_constant` or `zero`.
    pub kind: String,
    #[serde(default = "one")]
    pub m_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub h: f64,
    pub stencil_order: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            h: 1.0 / 64.0,
            stencil_order: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuasipotentialConfig {
    /// Extra `u_γ` solves.
    pub gammas: Vec<f64>,
    /// Bound on `|U(0) − m0|`.
    pub u0_tolerance: f64,
    /// Allowed `H` excess in the subsolution check, in units of `h`.
    pub subsolution_tolerance_h: f64,
    /// Bound on `u_{γ₁} − u_{γ₂}` for `γ₁ < γ₂`, in units of `h`.
    pub monotone_slack_h: f64,
    /// Bound on `max |u_γ − U|` for every listed `γ`.
    pub closeness_tolerance: f64,
    /// Random targets for the path-optimizer comparison.
    pub path_targets: usize,
    pub path_seed: u64,
    pub path_knots: usize,
    pub path_tolerance: f64,
}

impl Default for QuasipotentialConfig {
    fn default() -> Self {
        QuasipotentialConfig {
            gammas: vec![0.01],
            u0_tolerance: 0.02,
            subsolution_tolerance_h: 4.0,
            monotone_slack_h: 2.0,
            closeness_tolerance: 0.05,
            path_targets: 10,
            path_seed: 1,
            path_knots: 32,
            path_tolerance: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportCheck {
    pub radius: f64,
    pub times: Vec<f64>,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParabolicConfig {
    pub eps: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
    pub n_steps: usize,
    /// Times at which whole slices are written.
    pub store: Vec<f64>,
    pub probes: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transport: Option<TransportCheck>,
}

impl Default for ParabolicConfig {
    fn default() -> Self {
        ParabolicConfig {
            eps: vec![0.05],
            t_min: 0.01,
            t_max: 10.0,
            n_steps: 200,
            store: vec![],
            probes: default_probes(),
            transport: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaCutoff {
    /// `σ(ε) = 1/ε`.
    InverseEps,
    /// `σ(ε) = log(1/ε)`.
    LogInverseEps,
}

impl SigmaCutoff {
    pub fn eval(self, eps: f64) -> f64 {
        match self {
            SigmaCutoff::InverseEps => 1.0 / eps,
            SigmaCutoff::LogInverseEps => (1.0 / eps).ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeConfig {
    pub eps: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub t_min: f64,
    pub n_steps: usize,
    pub horizon_factor: f64,
    pub sigma: SigmaCutoff,
    pub probes: Vec<[f64; 2]>,
    pub tol_i: f64,
    pub tol_iii: f64,
    /// Largest spread of `g` over the argmin clusters for `g` to count as constant there.
    pub argmin_data_tolerance: f64,
    /// Ordered data offset for the subsolution transfer check of semilinear runs.
    pub transfer_offset: f64,
    pub transfer_tolerance: f64,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        RegimeConfig {
            eps: vec![0.1, 0.07, 0.05],
            lambdas: vec![0.3, 0.7],
            t_min: 0.01,
            n_steps: 400,
            horizon_factor: 1.05,
            sigma: SigmaCutoff::InverseEps,
            probes: vec![[0.0, 0.0]],
            tol_i: 0.1,
            tol_iii: 0.1,
            argmin_data_tolerance: 0.05,
            transfer_offset: 0.25,
            transfer_tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StationaryConfig {
    pub eps: Vec<f64>,
    pub probes: Vec<[f64; 2]>,
    pub tolerance: f64,
    /// Probes near the argmin clusters, inside the domain.
    pub near_probes: Vec<[f64; 2]>,
    pub near_tolerance: f64,
    pub argmin_data_tolerance: f64,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        StationaryConfig {
            eps: vec![0.15, 0.1, 0.07, 0.05],
            probes: vec![[0.0, 0.0]],
            tolerance: 0.15,
            near_probes: vec![],
            near_tolerance: 0.2,
            argmin_data_tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    pub eps: Vec<f64>,
    pub n_traj: usize,
    pub dt: f64,
    pub seed: u64,
    pub x0: [f64; 2],
    pub max_steps: u64,
    /// Arc half-width for the concentration mass.
    pub delta: f64,
    pub n_bins: usize,
    /// Accepted slope interval; defaults to `m0 ± 25%`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope_band: Option<[f64; 2]>,
    /// Required concentration mass at the smallest `ε`, if set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concentration_min: Option<f64>,
    /// `ε` at which the run is repeated with `dt/2`, if set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_check_eps: Option<f64>,
    pub dt_check_tolerance: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            eps: vec![0.15, 0.11, 0.09],
            n_traj: 1000,
            dt: 1e-3,
            seed: 1,
            x0: [0.0, 0.0],
            max_steps: crate::montecarlo::DEFAULT_MAX_STEPS,
            delta: 0.6,
            n_bins: 16,
            slope_band: None,
            concentration_min: None,
            dt_check_eps: None,
            dt_check_tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    pub r: f64,
    pub psi_radius: f64,
    pub ramp_width: f64,
    pub exit_lambdas: Vec<f64>,
    pub barrier_mu: f64,
    pub barrier_eps: Vec<f64>,
    pub appendix_eps: f64,
    /// `M(ε)` for the appendix barriers; the semilinear bound replaces it when present.
    pub appendix_m: f64,
    /// Offset `λ` at which `δ(λ)/λ` is checked.
    pub offset_lambda: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            r: 0.2,
            psi_radius: 2.0,
            ramp_width: 1.0,
            exit_lambdas: vec![0.7],
            barrier_mu: 0.4,
            barrier_eps: vec![0.05],
            appendix_eps: 0.05,
            appendix_m: 0.05,
            offset_lambda: 0.005,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_probes() -> Vec<[f64; 2]> {
    vec![[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]]
}

pub fn point(p: &[f64; 2]) -> Point {
    Point::new(p[0], p[1])
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical TOML of the resolved configuration, defaults filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn problem(&self) -> Result<Problem> {
        let pc = &self.problem;
        let mut p = Problem::new(
            Domain::from_preset(&pc.domain)?,
            Coefficients::from_preset(&pc.coefficients)?,
            BoundaryData::from_preset(&pc.boundary)?,
        );
        if let Some(s) = &pc.semilinear {
            p = p.with_semilinear(SemilinearTerm::from_preset(&s.kind, s.m_scale)?);
        }
        Ok(p)
    }

    pub fn grid(&self, p: &Problem) -> Result<MaskedGrid> {
        build_grid(&p.domain, self.grid.h)
    }

    /// Checks that an embedded `kind`, when present, names the requested experiment.
    pub fn check_kind(&self, kind: ExperimentKind) -> Result<()> {
        match self.kind {
            Some(k) if k != kind => Err(Error::Config(format!(
                "config is for '{}' but '{}' was requested",
                k.name(),
                kind.name()
            ))),
            _ => Ok(()),
        }
    }
}
