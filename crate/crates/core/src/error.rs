use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("quaternion norm {0} is too far from 1 to renormalize")]
    NotUnitQuaternion(f64),
    #[error("matrix is not a rotation: orthonormality defect {defect:e}, determinant {det}")]
    NotRotation { defect: f64, det: f64 },
    #[error("grid too coarse: n_base = {n_base} (min 16), n_fiber = {n_fiber} (min 8)")]
    GridTooCoarse { n_base: usize, n_fiber: usize },
    #[error("degenerate input to {op}: norm {norm:e} below threshold")]
    DegenerateInput { op: &'static str, norm: f64 },
    #[error("vector lies outside the plane spanned by the fiber basis (off-plane component {0:e})")]
    OutOfSpan(f64),
    #[error("affine matrix is near-singular: |det W| = {0:e}")]
    NearSingular(f64),
    #[error("LU diagonal entry {index} is zero")]
    ZeroDiagonal { index: usize },
    #[error("inverse search failed to bracket target angle {0}")]
    NotBracketed(f64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("condition vector has length {got}, model expects {expected}")]
    ConditionMismatch { expected: usize, got: usize },
    #[error("log normalizer not computed")]
    LogNormUnset,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
