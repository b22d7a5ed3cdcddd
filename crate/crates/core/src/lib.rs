//! Domain-dispersal and adaptive learning for person re-identification:
//! synthetic multi-domain data, a small CNN with hand-written gradients,
//! central-domain selection and the retrieval protocol.

pub mod config;
pub mod data_synth;
pub mod domain_align;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod id_pool;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod trainer;

pub use config::TrainConfig;
pub use error::{Error, Result};
