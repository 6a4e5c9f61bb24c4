use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: &'static str },

    #[error("backward root must hold exactly one element, got {numel}")]
    NotScalar { numel: usize },

    #[error("invalid pooling scale {0}; expected one of 2, 4, 8")]
    InvalidScale(usize),

    #[error("spatial mismatch: student is {student_h}x{student_w}, teacher is {teacher_h}x{teacher_w}")]
    SpatialMismatch { student_h: usize, student_w: usize, teacher_h: usize, teacher_w: usize },

    #[error("gaussian affinity needs equal channel counts, got student {student} and teacher {teacher}")]
    GaussianChannelMismatch { student: usize, teacher: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_mismatch(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch { op, detail: detail.into() }
}
