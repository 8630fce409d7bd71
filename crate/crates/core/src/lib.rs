//! Scale transformed power priors for borrowing historical data across
//! generalized linear models.

pub mod glm;
pub mod linalg;
pub mod transform;
pub mod priors;
pub mod sampler;
pub mod analysis;
pub mod closedform;
pub mod simharness;
pub mod io;
pub mod workflow;

use thiserror::Error;

/// Process exit code for validation failures (bad input or config).
pub const EXIT_VALIDATION: i32 = 2;
/// Process exit code for numerical failures.
pub const EXIT_NUMERICAL: i32 = 3;

/// Any error raised by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Glm(#[from] glm::GlmError),
    #[error(transparent)]
    Transform(#[from] transform::TransformError),
    #[error(transparent)]
    Prior(#[from] priors::PriorError),
    #[error(transparent)]
    Sampler(#[from] sampler::SamplerError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    ClosedForm(#[from] closedform::ClosedFormError),
    #[error(transparent)]
    Sim(#[from] simharness::SimError),
}

fn glm_numerical(e: &glm::GlmError) -> bool {
    use glm::GlmError::*;
    matches!(e, NonConvergence { .. } | SeparableData | Linalg(_))
}

fn transform_numerical(e: &transform::TransformError) -> bool {
    !matches!(e, transform::TransformError::InvalidContext(_))
}

fn prior_numerical(e: &priors::PriorError) -> bool {
    match e {
        priors::PriorError::InvalidSpec(_) => false,
        priors::PriorError::Glm(g) => glm_numerical(g),
        priors::PriorError::Transform(t) => transform_numerical(t),
    }
}

fn sampler_numerical(e: &sampler::SamplerError) -> bool {
    use sampler::SamplerError::*;
    match e {
        InitOutOfSupport | BadProposal | SolverFailureRate { .. } => true,
        WrongStrategy { .. } | DataMismatch(_) | Merge(_) => false,
        Prior(p) => prior_numerical(p),
        Glm(g) => glm_numerical(g),
    }
}

impl Error {
    /// True for failures of a numerical routine, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        use simharness::SimError;
        match self {
            Error::Io(_) | Error::Analysis(_) | Error::ClosedForm(_) => false,
            Error::Glm(e) => glm_numerical(e),
            Error::Transform(e) => transform_numerical(e),
            Error::Prior(e) => prior_numerical(e),
            Error::Sampler(e) => sampler_numerical(e),
            Error::Sim(e) => match e {
                SimError::InvalidScenario(_) | SimError::ClosedForm(_) | SimError::Pool(_) => false,
                SimError::TruthSolve { .. } => true,
                SimError::Glm(g) => glm_numerical(g),
                SimError::Prior(p) => prior_numerical(p),
                SimError::Sampler(s) => sampler_numerical(s),
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            EXIT_NUMERICAL
        } else {
            EXIT_VALIDATION
        }
    }
}
