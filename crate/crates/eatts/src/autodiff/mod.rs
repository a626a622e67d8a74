//! Minimal reverse-mode automatic differentiation over dense arrays:
//! enough to train LSTM extractors and the conditioned decoder, with a
//! finite-difference gradient-check harness.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod lstm;
pub mod real;
pub mod tensor;

pub use adam::{AdamState, NamedParam};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, GradMap, NodeId, EPS_NORM};
pub use lstm::{lstm_cell, lstm_cell_from_pre, stage_lstm, LstmIds, LstmParams};
pub use real::Real;
pub use tensor::{Shape, Tensor};
