use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty audio")]
    EmptyAudio,

    #[error("audio too short: {len} samples, need at least {min}")]
    AudioTooShort { len: usize, min: usize },

    #[error("wav format mismatch: expected {expected}, found {found}")]
    WavFormat { expected: String, found: String },

    #[error("utterance {id}: non-positive duration {duration_s}")]
    NonPositiveDuration { id: String, duration_s: f64 },

    #[error("malformed syllable {0:?}")]
    MalformedSyllable(String),

    #[error("utterance {id}: {source}")]
    InUtterance {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("out-of-vocabulary token(s): {0}")]
    OutOfVocabulary(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("duplicate utterance id {0}")]
    DuplicateId(String),

    #[error("value {0} is not on the 16-bit sample grid")]
    OffGrid(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("checkpoint holds a {found} model, expected {expected}")]
    CheckpointKind { expected: String, found: String },

    #[error("checkpoint tensor {name}: {detail}")]
    CheckpointTensor { name: String, detail: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn in_utterance(id: &str, source: Error) -> Self {
        Error::InUtterance {
            id: id.to_string(),
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
