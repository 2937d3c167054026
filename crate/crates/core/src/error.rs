use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("dimension error: tensor {name:?} expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("token id {id} out of vocabulary (size {vocab})")]
    Vocabulary { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds the encoder's {max} positions")]
    SequenceLength { len: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate feature: {0} has zero norm")]
    DegenerateFeature(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("parity error: D={d_prompts} x N={n_ctx} = {} != budget M={budget}", d_prompts * n_ctx)]
    Parity {
        d_prompts: usize,
        n_ctx: usize,
        budget: usize,
    },

    #[error("training diverged at epoch {epoch} (lr {lr:e})")]
    Divergence { epoch: usize, lr: f64 },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
