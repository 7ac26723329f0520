use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown relation label `{0}`")]
    UnknownRelation(String),

    #[error("generation failed after {attempts} attempts (seed {seed}): {what}")]
    GenerationFailed {
        seed: u64,
        attempts: u32,
        what: String,
    },

    #[error("token `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("expression has {len} tokens, max is {max}")]
    Overlength { len: usize, max: usize },

    #[error("expression is empty after the noun/adjective filter")]
    EmptyAfterFilter,

    #[error("instance has no valid adversarial swap")]
    NoValidSwap,

    #[error("contrastive training needs batch size >= 2, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite value in `{param}` during {context}")]
    NonFinite { param: String, context: String },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("invalid learning-rate schedule: total steps {total} <= warmup {warmup}")]
    BadSchedule { total: usize, warmup: usize },

    #[error("{file}:{line}: {msg}")]
    Malformed {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
