use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): require 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("box too thin to quantize into {bins} bins without collapsing")]
    Unquantizable { bins: usize },

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
