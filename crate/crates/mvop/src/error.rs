use thiserror::Error;

pub type Result<T> = std::result::Result<T, MvopError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MvopError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("level size overflows for dimension {dim}, level {level}")]
    Overflow { dim: usize, level: usize },

    #[error("singular pivot (smallest/largest singular value {ratio:.3e})")]
    SingularPivot { ratio: f64 },

    #[error("leading truncation at level {level} cannot be factorized")]
    SingularTruncation { level: usize },

    #[error("matrix is numerically rank deficient")]
    RankDeficient,

    #[error("requested level {requested} but only {available} levels are available")]
    OutOfRange { requested: usize, available: usize },

    #[error("weight is not finite at node {node:?}")]
    WeightEvaluation { node: Vec<f64> },

    #[error("negative-power factor vanishes at {node:?}")]
    PoleOnSupport { node: Vec<f64> },

    #[error("evaluation point {point:?} is too close to the support")]
    TooCloseToSupport { point: Vec<f64> },

    #[error("direction is degenerate for the given points (|n·(x−y)| = {gap:.3e})")]
    DegenerateDirection { gap: f64 },

    #[error("no poised node set found after {attempts} attempts")]
    PoisednessFailure { attempts: usize },

    #[error("evaluation point lies on a transformation hyperplane")]
    DegeneratePoint,

    #[error("support box is not inside the validity region |n·x| < |q|")]
    ValidityRegion,

    #[error("finite-difference stencil unstable (disagreement {disagreement:.3e})")]
    StencilInstability { disagreement: f64 },

    #[error("matrix is not orthogonal (defect {defect:.3e})")]
    NotOrthogonal { defect: f64 },
}

impl MvopError {
    /// True for breakdowns of the numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MvopError::SingularPivot { .. }
                | MvopError::SingularTruncation { .. }
                | MvopError::RankDeficient
                | MvopError::PoisednessFailure { .. }
                | MvopError::StencilInstability { .. }
        )
    }
}
