use thiserror::Error;

use crate::discrete_ocp::DiscreteTriple;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error)]
pub enum SweepError {
    #[error("point violates constraint {index} by {violation:.3e}")]
    InfeasiblePoint { index: usize, violation: f64 },

    /// The inequality system has no solution. `ray` holds nonnegative weights
    /// `a` with `Σ a_i u_i = 0` and `Σ a_i b_i < 0`.
    #[error("polyhedron is empty")]
    EmptySet { ray: Vec<f64> },

    #[error("polyhedron at node {step} is empty")]
    EmptySetAt { step: usize },

    #[error(
        "DiscontinuityDetected: step {step} moved the state by {displacement:.3e}; \
         the move persists under bisection at {ratio:.3e} times the continuous-motion scale"
    )]
    DiscontinuityDetected {
        step: usize,
        displacement: f64,
        /// Displacement over the motion scale at the finest bisection level.
        ratio: f64,
    },

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("measure format: {0}")]
    MeasureFormat(String),

    #[error("(alpha, beta) is not in the graph of the orthant normal cone: {0}")]
    NotInGraph(String),

    #[error("velocity is not generated by any admissible multiplier (residual {residual:.3e})")]
    NoMultiplier { residual: f64 },

    #[error("positive linear independence fails at the base point")]
    QualificationFailure,

    #[error("oracle supports n, m <= 3 (got n = {n}, m = {m})")]
    DimensionTooLarge { n: usize, m: usize },

    #[error("initial state is outside C(u(0), b(0)) (violation {violation:.3e})")]
    InfeasibleInitial { violation: f64 },

    #[error("solver stalled after {iterations} iterations (best cost {best_cost:.6e})")]
    SolverStalled {
        iterations: usize,
        best_cost: f64,
        best: Box<DiscreteTriple>,
    },

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown scenario id `{0}`")]
    UnknownScenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl SweepError {
    /// Short machine-readable tag, used in error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            SweepError::InfeasiblePoint { .. } => "InfeasiblePoint",
            SweepError::EmptySet { .. } => "EmptySet",
            SweepError::EmptySetAt { .. } => "EmptySetAt",
            SweepError::DiscontinuityDetected { .. } => "DiscontinuityDetected",
            SweepError::MeshMismatch(_) => "MeshMismatch",
            SweepError::ShapeMismatch(_) => "ShapeMismatch",
            SweepError::MeasureFormat(_) => "MeasureFormat",
            SweepError::NotInGraph(_) => "NotInGraph",
            SweepError::NoMultiplier { .. } => "NoMultiplier",
            SweepError::QualificationFailure => "QualificationFailure",
            SweepError::DimensionTooLarge { .. } => "DimensionTooLarge",
            SweepError::InfeasibleInitial { .. } => "InfeasibleInitial",
            SweepError::SolverStalled { .. } => "SolverStalled",
            SweepError::Lp(_) => "Lp",
            SweepError::Config(_) => "Config",
            SweepError::UnknownScenario(_) => "UnknownScenario",
            SweepError::Io(_) => "Io",
            SweepError::Csv(_) => "Csv",
            SweepError::Json(_) => "Json",
            SweepError::Toml(_) => "Toml",
        }
    }

    /// Process exit code: 2 infeasible or degenerate input, 3 solver stall,
    /// 4 bad configuration, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            SweepError::InfeasiblePoint { .. }
            | SweepError::EmptySet { .. }
            | SweepError::EmptySetAt { .. }
            | SweepError::DiscontinuityDetected { .. }
            | SweepError::NotInGraph(_)
            | SweepError::NoMultiplier { .. }
            | SweepError::QualificationFailure
            | SweepError::InfeasibleInitial { .. } => 2,
            SweepError::SolverStalled { .. } => 3,
            SweepError::MeshMismatch(_)
            | SweepError::ShapeMismatch(_)
            | SweepError::MeasureFormat(_)
            | SweepError::DimensionTooLarge { .. }
            | SweepError::Config(_)
            | SweepError::UnknownScenario(_)
            | SweepError::Io(_)
            | SweepError::Csv(_)
            | SweepError::Json(_)
            | SweepError::Toml(_) => 4,
            SweepError::Lp(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, SweepError>;
