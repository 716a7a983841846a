//! Cross-modal prototype network for report generation on a synthetic
//! image/report corpus.

pub mod config;
pub mod corpus;
pub mod error;
mod init;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod proto_init;
pub mod proto_net;
pub mod seq_model;
pub mod train;

pub use error::{Error, Result};
