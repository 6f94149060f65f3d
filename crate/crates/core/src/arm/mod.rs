//! Block-causal next-scale transformer with prefix conditioning.

pub mod generate;
pub mod mask;
pub mod model;

pub use generate::{generate, Generation, GenerationState, KvCache, Sampler, StepOutput, Stream};
pub use mask::{allowed_pairs, batch_layout, build_block_mask, sequence_runs, visible_keys, BlockMask};
pub use model::{token_loss, Arm, ArmConfig, ArmForward, Condition};
