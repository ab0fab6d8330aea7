use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box (cx={cx}, cy={cy}, w={w}, h={h}): width and height must be positive and finite")]
    InvalidBox { cx: f64, cy: f64, w: f64, h: f64 },

    #[error("location not inside box")]
    LocationNotInsideBox,

    #[error("encoding kind does not match the coder")]
    EncodingKindMismatch,

    #[error("infeasible occlusion request: {0}")]
    InfeasibleOcclusion(String),

    #[error("stride {stride} does not divide canvas {width}x{height}")]
    StrideMismatch { stride: u32, width: u32, height: u32 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scene {scene} is not allocated in the table backend ({allocated} scenes, {anchors} anchors per scene)")]
    SceneNotAllocated { scene: usize, allocated: usize, anchors: usize },

    #[error("non-finite loss at step {step}: scene {scene}, anchor {anchor:?}: {detail}")]
    NonFiniteLoss { step: u64, scene: usize, anchor: Option<usize>, detail: String },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
