//! Knowledge-graph concept embeddings, a shared visit encoder, multi-task
//! pretraining on EHR visits, downstream fine-tuning and explanation tools.

pub mod checkpoint;
pub mod config;
pub mod downstream;
pub mod ehr;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod init;
pub mod kgraph;
pub mod metrics;
pub mod pretrain;

pub use error::{Error, Result};
