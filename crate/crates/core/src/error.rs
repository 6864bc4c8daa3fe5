use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty grid")]
    EmptyGrid,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("grid too small for K sources (K = {k}, placed {placed})")]
    GridTooSmall { k: usize, placed: usize },

    #[error("B not contractive: {0}")]
    NotContractive(String),

    #[error("too few time points: T = {t} but {r} nuisance regressors")]
    TooFewTimePoints { t: usize, r: usize },

    #[error("kernel degenerate: center weight {w0} at voxel {voxel}")]
    KernelDegenerate { voxel: usize, w0: f64 },

    #[error("conjugate gradient did not converge after {iterations} iterations (residual {residual:.3e})")]
    CgNotConverged {
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("no signal: every candidate (lambda1, lambda2) pair produced all-zero maps")]
    NoSignal,

    #[error("degenerate driver: subject {subject}, source {component} has zero variance")]
    DegenerateDriver { subject: usize, component: usize },

    #[error("all symptom columns are degenerate")]
    AllColumnsDegenerate,

    #[error("no effect mass: correlation density denominator is zero")]
    NoEffectMass,

    #[error("weighted effect map is identically zero")]
    ZeroWeightedMap,

    #[error("not a simulated cohort: {0}")]
    NotSimulated(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
