//! Differentiable-computation substrate: a reverse-mode tape over rank-2
//! arrays, parameter storage, standard layers, Adam, a finite-difference
//! gradient checker, and the binary checkpoint format.

mod checkpoint;
mod fdcheck;
mod layers;
mod params;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use fdcheck::{
    finite_difference_check, finite_difference_check_filtered, standard_suite, SuiteRow,
};
pub use layers::{
    attention_init, bilstm_fuse, bilstm_init, dense, dense_init, embedding_lookup, layer_norm,
    layer_norm_init, multi_head_attention, positional_encoding, MaskMode, NEG_INF_MASK,
};
pub use params::{AdamConfig, AdamState, ParamStore};
pub use tape::{GradMap, NodeId, Tape};
