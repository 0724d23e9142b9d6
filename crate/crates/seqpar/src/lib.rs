//! Simulated-rank numerics for tensor- and sequence-parallel transformer layers.
//!
//! Runs a transformer layer on `t` ranks inside one process with `f64`
//! tensors, and checks it against a serial reference: outputs, gradients,
//! collective identities, saved-activation byte counts and selective
//! recomputation.

pub mod block;
pub mod collectives;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod ops;
pub mod parallel;
pub mod reference;
pub mod rng;
pub mod suite;
pub mod tensor;

pub use block::{
    check_recompute, selective_recompute_attention, ActivationLedger, AttentionInterior, BlockConfig, LayerParams,
    RecomputePolicy, SavedLayer,
};
pub use collectives::{all_gather, all_reduce, reduce_scatter, CollectiveKind, CommLog, CommTag};
pub use error::SeqparError;
pub use exec::{run_layer, Execution, LayerRun};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use parallel::{
    parallel_block_backward, parallel_block_forward, seqpar_block_backward, seqpar_block_forward, ParallelMode,
};
pub use reference::{reference_block_backward, reference_block_forward, ForwardOutput};
pub use suite::{run_verify, VerifyReport};
pub use tensor::{RankShardedTensor, ShardAxis};
