use std::io;

use thiserror::Error;

use crate::numerics::Grid;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("{op}: dimension mismatch, expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op}: element {index} = {value:e} does not lie on the {grid} grid")]
    OffGrid {
        op: &'static str,
        index: usize,
        value: f64,
        grid: Grid,
    },

    #[error("{op}: mode {mode} requires operands on the {required} grid, got {found}")]
    ModeIncompatible {
        op: &'static str,
        mode: &'static str,
        required: Grid,
        found: Grid,
    },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("{op}: non-finite value {value} at index {index}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("tape is missing `{field}` required by {needed_by}")]
    MissingTapeField {
        field: &'static str,
        needed_by: &'static str,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("logsumexp does not match these inputs (stale forward state)")]
    StaleLogSumExp,

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("fp32 conformance self-test failed: {0}")]
    Conformance(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
