use std::io;

use crate::model::{Key, NodeId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("key {key:?} is out of range (num_keys = {num_keys})")]
    KeyOutOfRange { key: Key, num_keys: usize },

    #[error("key {0:?} is not managed by the requested technique")]
    TechniqueMismatch(Key),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("no route to node {0}")]
    UnknownNode(NodeId),

    #[error("unknown distribution id {0}")]
    UnknownDistribution(usize),

    #[error("sample handle exhausted: requested {requested}, {remaining} remaining")]
    ExhaustedHandle { requested: usize, remaining: usize },

    #[error("malformed frame: {0}")]
    Wire(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
