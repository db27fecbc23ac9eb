//! Conversation-level emotion classification: recurrent temporal encoding,
//! self-attention spatial encoding, and a curriculum-weighted training loss,
//! all on a from-scratch reverse-mode autodiff engine.

pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod spatial;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
