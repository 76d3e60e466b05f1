//! Attention blocks with rotary embeddings and the velocity-field network.

pub mod attention;
pub mod block;
pub mod layers;
pub mod model;
pub mod params;
pub mod rope;

pub use attention::{attention, AttentionLayer, AttentionOutput, RopeSpec};
pub use block::DitBlock;
pub use model::{ModelConfig, TimestepEmbedding, VelocityModel};
pub use params::{Ctx, ParamId, ParamStore};
pub use rope::rope_apply;
