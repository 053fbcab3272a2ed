use thiserror::Error;

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Error)]
pub enum SimError {
    /// A MAC accumulator left the 29-bit signed range.
    #[error("accumulator overflow at output {index}: partial sum {value} exceeds 29-bit range")]
    Overflow { index: usize, value: i64 },

    #[error("invalid quantization scale {0}: must be finite and > 0")]
    InvalidScale(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("placement infeasible: one neuron of layer {layer} needs {bytes} bytes, budget is {budget}")]
    PlacementInfeasible {
        layer: usize,
        bytes: usize,
        budget: usize,
    },

    #[error("plant diverged at step {step}: |theta| = {theta} exceeds bound {bound}")]
    Divergence { step: usize, theta: f64, bound: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("bad weight file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
