use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate chart: smallest singular value {sigma_min:.3e} of the Jacobian at {at:?}")]
    DegenerateChart { sigma_min: f64, at: Vec<f64> },

    #[error("chart is not convex: principal curvature {kappa:.4e} at {at:?}")]
    NonConvex { kappa: f64, at: Vec<f64> },

    #[error("chart is not injective: parameters {a:?} and {b:?} map to within {distance:.3e}")]
    NotInjective { a: Vec<f64>, b: Vec<f64>, distance: f64 },

    #[error("not a graph: normal angle {angle:.4} rad at {at:?} reaches the limit {limit:.4} rad")]
    NotAGraph { angle: f64, limit: f64, at: Vec<f64> },

    #[error("point is not in the {dim}-dimensional ambient space of the chart")]
    DimensionMismatch { dim: usize },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("the tangent plane of a cone is undefined at its apex")]
    Apex,

    #[error("line lies on a generatrix and meets the cone in a segment")]
    Generatrix,

    #[error("first-level cells overlap: {branches} copies at ratio {ratio}")]
    Overlap { ratio: f64, branches: usize },

    #[error("source meets only {cells} cells; at least {needed:.1} are needed")]
    Infeasible { cells: usize, needed: f64 },

    #[error("cancelled")]
    Cancelled,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed point file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}
