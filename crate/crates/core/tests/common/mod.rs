//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use ddan_core::data_synth::ImageShape;
use ddan_core::model::{Model, ModelConfig};

/// 1×8×8 input, one 2-channel encoder stage, 2-d embedding, 3 identities:
/// 98 parameters in total.
pub fn tiny_model(seed: u64) -> Model {
    Model::new(ModelConfig {
        input: ImageShape::new(1, 8, 8),
        encoder_widths: vec![2],
        embedding_dim: 2,
        domain_hidden: 3,
        num_identities: 3,
        use_bnneck: true,
        init_seed: seed,
    })
    .unwrap()
}
