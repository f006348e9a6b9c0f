//! The policy trunk: frame-causal lower blocks, history pooling at the split
//! block, and upper blocks over `[context | current frame | instruction]`.

mod checkpoint;
mod config;
mod forward;
mod mask;
mod weights;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, round_to_f32, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{parse_kv, DecoderKind, ModelConfig};
pub use forward::{
    block_on, compress_history, context_with_rest_on, embed_frame_on, embed_instruction_on, embed_observation,
    embed_sequence, embed_sequence_on, forward_features, forward_features_on, forward_lower, forward_lower_on,
    forward_uncompressed_on, forward_upper, forward_upper_on, patchify, rope_positions, run_blocks_on, splice_on,
    BlockOut, ContextToken, HiddenStates,
};
pub use mask::{build_mask, Layout, TokenKind};
pub use weights::{ArIds, BlockIds, FlowIds, ParamLayout, Weights};
