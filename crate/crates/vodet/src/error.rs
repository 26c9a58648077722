use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("degenerate box with zero area")]
    DegenerateBox,

    #[error("non-finite box delta ({dx}, {dy}, {dw}, {dh})")]
    NonFiniteDelta { dx: f64, dy: f64, dw: f64, dh: f64 },

    #[error("IoU threshold {0} outside (0, 1]")]
    InvalidIouThreshold(f64),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("RoI ({x1}, {y1}, {x2}, {y2}) lies fully outside the {w}x{h} frame")]
    RoiOutsideFrame {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        w: usize,
        h: usize,
    },

    #[error("frame {w}x{h} is smaller than the 16x16 minimum")]
    FrameTooSmall { w: usize, h: usize },

    #[error("empty clip")]
    EmptyClip,

    #[error("no ground-truth boxes available for oracle proposals")]
    NoGroundTruth,

    #[error("no RoIs to compute losses over")]
    NoRois,

    #[error("non-finite loss term {term} = {value}")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("target frame {target} out of range for video of length {video_len}")]
    TargetOutOfRange { target: usize, video_len: usize },

    #[error("invalid sampling plan: {0}")]
    InvalidSamplingPlan(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("object {index} of size {w}x{h} does not fit a {frame_w}x{frame_h} frame")]
    ObjectTooLarge {
        index: usize,
        w: f64,
        h: f64,
        frame_w: usize,
        frame_h: usize,
    },

    #[error("dataset error in clip {clip}: {message}")]
    Dataset { clip: String, message: String },

    #[error("checkpoint parameter {param}: {message}")]
    Checkpoint { param: String, message: String },

    #[error("evaluation requires at least one ground-truth instance")]
    NoGroundTruthInstances,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
