//! One entry point for running the layer serially or on simulated ranks.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::block::{ActivationLedger, BlockConfig, LayerParams, RecomputePolicy};
use crate::collectives::CommLog;
use crate::error::SeqparError;
use crate::parallel::{parallel_block_backward, parallel_block_forward, ParallelMode};
use crate::reference::{reference_block_backward, reference_block_forward};
use crate::tensor::{RankShardedTensor, ShardAxis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Execution {
    Reference,
    Parallel { mode: ParallelMode, ranks: usize },
}

impl Execution {
    pub fn sequence(ranks: usize) -> Self {
        Execution::Parallel { mode: ParallelMode::SequenceTensor, ranks }
    }

    pub fn tensor(ranks: usize) -> Self {
        Execution::Parallel { mode: ParallelMode::Tensor, ranks }
    }

    fn shard(mode: ParallelMode, x: &Array2<f64>, ranks: usize) -> Result<RankShardedTensor, SeqparError> {
        let axis = match mode {
            ParallelMode::Tensor => ShardAxis::Replicated,
            ParallelMode::SequenceTensor => ShardAxis::Sequence,
        };
        RankShardedTensor::from_logical(x, axis, ranks)
    }
}

/// Logical results of a forward and backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRun {
    pub y: Array2<f64>,
    pub dx: Array2<f64>,
    pub grads: LayerParams,
    pub ledgers: Vec<ActivationLedger>,
    pub comm: CommLog,
}

pub fn forward(
    exec: Execution,
    x: &Array2<f64>,
    params: &LayerParams,
    cfg: &BlockConfig,
) -> Result<Array2<f64>, SeqparError> {
    match exec {
        Execution::Reference => Ok(reference_block_forward(x, params, cfg, RecomputePolicy::None)?.y),
        Execution::Parallel { mode, ranks } => {
            let xs = Execution::shard(mode, x, ranks)?;
            let out = parallel_block_forward(&xs, params, cfg, RecomputePolicy::None, mode, &mut CommLog::default())?;
            Ok(out.y.to_logical())
        }
    }
}

/// Forward then backward with output gradient `dy`.
pub fn run_layer(
    exec: Execution,
    x: &Array2<f64>,
    params: &LayerParams,
    cfg: &BlockConfig,
    policy: RecomputePolicy,
    dy: &Array2<f64>,
) -> Result<LayerRun, SeqparError> {
    match exec {
        Execution::Reference => {
            let f = reference_block_forward(x, params, cfg, policy)?;
            let (dx, grads) = reference_block_backward(dy, params, cfg, &f.saved)?;
            Ok(LayerRun { y: f.y, dx, grads, ledgers: vec![f.ledger], comm: CommLog::default() })
        }
        Execution::Parallel { mode, ranks } => {
            let mut comm = CommLog::default();
            let xs = Execution::shard(mode, x, ranks)?;
            let f = parallel_block_forward(&xs, params, cfg, policy, mode, &mut comm)?;
            let dys = Execution::shard(mode, dy, ranks)?;
            let b = parallel_block_backward(&dys, params, cfg, &f.saved, mode, &mut comm)?;
            Ok(LayerRun { y: f.y.to_logical(), dx: b.dx.to_logical(), grads: b.grads, ledgers: f.ledgers, comm })
        }
    }
}

/// Largest absolute difference over outputs, input gradients and parameter gradients.
pub fn max_abs_diff(a: &LayerRun, b: &LayerRun) -> f64 {
    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    let flat = |x: &Array2<f64>| x.iter().copied().collect::<Vec<_>>();
    if a.y.dim() != b.y.dim() || a.dx.dim() != b.dx.dim() {
        return f64::INFINITY;
    }
    let mut worst = diff(&flat(&a.y), &flat(&b.y)).max(diff(&flat(&a.dx), &flat(&b.dx)));
    let mut other = Vec::new();
    b.grads.visit(|_, v| other.push(v.to_vec()));
    let mut i = 0;
    a.grads.visit(|_, v| {
        worst = worst.max(diff(v, &other[i]));
        i += 1;
    });
    worst
}
