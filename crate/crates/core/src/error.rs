use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("example has no turns")]
    NoTurns,
    #[error("turn {0} has an empty answer")]
    EmptyAnswer(usize),
    #[error("image {index} has invalid size {height}x{width}")]
    InvalidImage { index: usize, height: u32, width: u32 },
    #[error("expected {expected} vision token counts, got {got}")]
    VisionCountMismatch { expected: usize, got: usize },
    #[error("image {0} declared with zero vision tokens")]
    ZeroVisionTokens(usize),
    #[error("resolution cap {cap_px} px cannot fit one 28x28 cell")]
    CapTooSmall { cap_px: f64 },
    #[error("example {index} has length {len} > capacity {capacity}")]
    ExampleTooLong { index: usize, len: usize, capacity: usize },
    #[error("invalid expert budget: {0}")]
    InvalidBudget(&'static str),
    #[error("index ({i}, {j}) out of range for sequence of length {len}")]
    IndexOutOfRange { i: usize, j: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid toy config: {0}")]
    Config(String),
    #[error("sequence has no loss tokens")]
    NoLossTokens,
    #[error("top-k router tie at token {token} in layer {layer}")]
    RouterTie { layer: usize, token: usize },
    #[error("grounding parse error: {0}")]
    Grounding(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
