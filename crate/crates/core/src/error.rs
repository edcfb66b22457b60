use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("point is behind the near plane (z = {z})")]
    BehindCamera { z: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("no gaussian is visible from the camera")]
    EmptyFrustum,

    #[error("quaternion collapsed to zero length")]
    ZeroQuaternion,

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("unsupported camera model `{0}` (only PINHOLE and SIMPLE_PINHOLE)")]
    UnsupportedCameraModel(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("image {image} references unknown camera {camera}")]
    DanglingCameraRef { image: u32, camera: u32 },

    #[error("PLY header error: {0}")]
    PlyHeader(String),

    #[error("PLY is missing required property `{0}`")]
    MissingProperty(String),

    #[error("image format error at byte {offset}: {message}")]
    ImageFormat { offset: usize, message: String },

    #[error("camera id mismatch: {0}")]
    CameraIdMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
