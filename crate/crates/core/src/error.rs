use thiserror::Error;

/// Errors produced by the filter design, simulation and evaluation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not Hermitian (relative asymmetry {0:.3e})")]
    NonHermitian(f64),
    #[error("matrix is singular or ill-conditioned (condition estimate {0:.3e})")]
    Singular(f64),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("channels have different lengths ({0} vs {1} samples)")]
    ChannelMismatch(usize, usize),
    #[error("signal too short: {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("frames are inconsistent: {0}")]
    InconsistentFrames(String),
    #[error("source position {0:?} lies outside the room")]
    SourceOutsideRoom([f64; 3]),
    #[error("trajectory leaves the room at step {step} (position {position:?})")]
    TrajectoryExitsRoom { step: usize, position: [f64; 3] },
    #[error("decay too short to fit a -5..-25 dB line")]
    DecayTooShort,
    #[error("sphere scattering series did not converge within {0} terms")]
    SeriesNotConverged(usize),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("steering columns are rank deficient (detected directions too close)")]
    RankDeficient,
    #[error("negative loss {value} for expert {expert}")]
    NegativeLoss { expert: usize, value: f64 },
    #[error("direction (az {az_deg:.3} deg, el {el_deg:.3} deg) is not on the grid")]
    DirectionOffGrid { az_deg: f64, el_deg: f64 },
    #[error("timeline mismatch: {0}")]
    TimelineMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
