use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("projection onto the boundary did not converge for x = ({x}, {y})")]
    Projection { x: f64, y: f64 },

    #[error("point ({x}, {y}) is not on the boundary (signed distance {distance:e})")]
    NotOnBoundary { x: f64, y: f64, distance: f64 },

    #[error("offset lambda = {lambda} is not below the probed threshold lambda0 = {lambda0}")]
    OffsetTooLarge { lambda: f64, lambda0: f64 },

    #[error("model error: {0}")]
    Model(String),

    #[error("stability violation: {0}")]
    Stability(String),

    #[error("segment midpoint at the equilibrium: the action degenerates to {limit}")]
    DegenerateSegment { limit: f64 },

    #[error("topology error: {0} active nodes unreachable from the source")]
    Unreachable(usize),

    #[error("empty boundary set")]
    EmptyBoundary,

    #[error("construction error: {0}")]
    Construction(String),

    #[error("infeasible margin: lambda = {lambda} is not above m0 + 4 gamma_min = {bound}")]
    InfeasibleMargin { lambda: f64, bound: f64 },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("anisotropy unsupported at node ({x}, {y}): |a12| = {a12} exceeds min(a11, a22) = {min_diag}")]
    Anisotropy {
        x: f64,
        y: f64,
        a12: f64,
        min_diag: f64,
    },

    #[error(
        "semilinear step did not converge in {iterations} iterations (last update {update:e})"
    )]
    SemilinearStep { iterations: usize, update: f64 },

    #[error("linear solver error: {0}")]
    Solver(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("censoring too high: {0}")]
    Censoring(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
