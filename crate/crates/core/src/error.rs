use thiserror::Error;

use crate::model::{RuleId, TupleId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("tuple {tuple} has no attribute `{attr}`")]
    UnknownAttribute { attr: String, tuple: TupleId },
    #[error("invalid rule {rule}: {reason}")]
    InvalidRule { rule: RuleId, reason: String },
    #[error("rule id {0} appears more than once")]
    DuplicateRule(RuleId),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("duplicate violation message for tuple {tuple} from rule {rule}")]
    DuplicateMessage { tuple: TupleId, rule: RuleId },
    #[error("message from rule {rule} for tuple {tuple}, which does not expect it")]
    UnexpectedMessage { tuple: TupleId, rule: RuleId },
    #[error("tuple id {tuple} is not greater than the previous id {previous}")]
    OutOfOrder { tuple: TupleId, previous: TupleId },
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("window size {size} must be a positive multiple of slide {slide}")]
    WindowRatio { size: u64, slide: u64 },
    #[error("at least one repair worker is required")]
    NoWorkers,
    #[error("latency sample rate {0} outside (0, 1]")]
    SampleRate(f64),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum RuleUpdateError {
    #[error("rule {0} already exists")]
    DuplicateRule(RuleId),
    #[error("rule {0} does not exist")]
    UnknownRule(RuleId),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoordinationError {
    #[error("merge proposal from worker {worker} missing for tuple {tuple}")]
    MissingProposal { worker: usize, tuple: TupleId },
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    RuleUpdate(#[from] RuleUpdateError),
    #[error(transparent)]
    Coordination(#[from] CoordinationError),
    #[error("worker thread terminated unexpectedly")]
    WorkerGone,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("output tuple {0} has no ground truth")]
    MissingTruth(TupleId),
    #[error("ground truth tuple {0} missing from output")]
    MissingOutput(TupleId),
    #[error("output contains tuple {0} twice")]
    Duplicate(TupleId),
    #[error(transparent)]
    Model(#[from] ModelError),
}
