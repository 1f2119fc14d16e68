use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model parameter: {0}")]
    Parameter(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("swing-foot velocity constraint cannot be enforced (condition {cond:.3e})")]
    ConstraintSingular { cond: f64 },

    #[error("no periodic gait exists for this timing")]
    NoPeriodicGait,

    #[error("no pseudo-passive single support duration in [{lo}, {hi}] s")]
    NoPseudoPassive { lo: f64, hi: f64 },

    #[error("error-coordinate transform is singular (condition {cond:.3e})")]
    SingularTransform { cond: f64 },

    #[error("Riccati iteration did not converge after {iterations} iterations")]
    Unstabilizable { iterations: usize },

    #[error("disturbance observer is degenerate")]
    ObserverDegenerate,

    #[error("projection system is singular (condition {cond:.3e})")]
    ProjectionSingular { cond: f64 },

    #[error("simulation diverged at stride {stride}")]
    Divergence { stride: usize },

    #[error("probed map violates superposition (residual {residual:.3e})")]
    Nonlinear { residual: f64 },

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures caused by inputs rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Parameter(_) | Error::Domain(_) | Error::Config(_) | Error::Io(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
