//! The layer executed on `t` simulated ranks.
//!
//! `Tensor` mode keeps layer norms and dropouts replicated and joins the two
//! sharded regions with all-reduces. `SequenceTensor` mode shards those
//! regions along the sequence and uses an all-gather (`g`) on entry to each
//! tensor-parallel region and a reduce-scatter (`ḡ`) on exit, swapped in
//! backward. Only the local shard of each layer-norm output is kept; backward
//! gathers it again before the weight gradients.

use actplan_core::ByteConvention;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::block::{
    attention_backward, attention_context, attention_interior, ensure_finite, interior_for_backward, row_mask,
    ActivationLedger, BlockConfig, LayerParams, RecomputePolicy, SavedLayer,
};
use crate::collectives::{all_gather, all_reduce, reduce_scatter, CollectiveKind, CommLog, CommTag};
use crate::error::SeqparError;
use crate::ops::{dropout, gelu, gelu_grad, layer_norm, layer_norm_backward, linear};
use crate::rng::DropoutSite;
use crate::tensor::{RankShardedTensor, ShardAxis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParallelMode {
    /// Tensor parallelism only.
    Tensor,
    /// Tensor parallelism plus sequence parallelism.
    SequenceTensor,
}

impl ParallelMode {
    fn input_axis(self) -> ShardAxis {
        match self {
            ParallelMode::Tensor => ShardAxis::Replicated,
            ParallelMode::SequenceTensor => ShardAxis::Sequence,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelForward {
    pub y: RankShardedTensor,
    pub saved: Vec<SavedLayer>,
    pub ledgers: Vec<ActivationLedger>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelBackward {
    pub dx: RankShardedTensor,
    /// Gradients in the logical layout.
    pub grads: LayerParams,
}

struct Comm<'a> {
    mode: ParallelMode,
    log: &'a mut CommLog,
    t: usize,
}

impl Comm<'_> {
    /// Entry into a tensor-parallel region: `g` forward / `ḡ` backward.
    fn enter(&mut self, local: Vec<Array2<f64>>, tag: CommTag) -> Result<Vec<Array2<f64>>, SeqparError> {
        match self.mode {
            ParallelMode::Tensor => Ok(local),
            ParallelMode::SequenceTensor => {
                let out = all_gather(&local, Axis(0))?;
                self.log.record(CollectiveKind::AllGather, tag, self.t, out[0].len());
                Ok(out)
            }
        }
    }

    /// Exit from a tensor-parallel region: sums partial outputs.
    fn exit(&mut self, partials: Vec<Array2<f64>>) -> Result<Vec<Array2<f64>>, SeqparError> {
        let elements = partials[0].len();
        match self.mode {
            ParallelMode::Tensor => {
                self.log.record(CollectiveKind::AllReduce, CommTag::Conjugate, self.t, elements);
                all_reduce(&partials)
            }
            ParallelMode::SequenceTensor => {
                self.log.record(CollectiveKind::ReduceScatter, CommTag::Conjugate, self.t, elements);
                reduce_scatter(&partials, Axis(0))
            }
        }
    }

    /// Sums gradients of replicated parameters. Under pure tensor
    /// parallelism every rank already holds the full gradient.
    fn param_grad(&mut self, partials: Vec<Array1<f64>>) -> Result<Array1<f64>, SeqparError> {
        match self.mode {
            ParallelMode::Tensor => Ok(partials.into_iter().next().expect("at least one rank")),
            ParallelMode::SequenceTensor => {
                let rows: Vec<Array2<f64>> = partials.into_iter().map(|p| p.insert_axis(Axis(0))).collect();
                self.log.record(CollectiveKind::AllReduce, CommTag::ParamGrad, self.t, rows[0].len());
                Ok(all_reduce(&rows)?.swap_remove(0).remove_axis(Axis(0)))
            }
        }
    }
}

/// Forward pass on `x.ranks()` simulated ranks. `x` must be sharded along the
/// sequence for `SequenceTensor` and replicated for `Tensor`.
pub fn parallel_block_forward(
    x: &RankShardedTensor,
    params: &LayerParams,
    cfg: &BlockConfig,
    policy: RecomputePolicy,
    mode: ParallelMode,
    log: &mut CommLog,
) -> Result<ParallelForward, SeqparError> {
    let t = x.ranks();
    cfg.validate(t)?;
    x.check()?;
    if x.shard_axis != mode.input_axis() || x.logical_shape != (cfg.tokens(), cfg.hidden) {
        return Err(SeqparError::ShapeMismatch {
            what: "sharded input",
            rank: 0,
            expected: (cfg.tokens(), cfg.hidden),
            found: x.logical_shape,
        });
    }
    for s in &x.shards {
        ensure_finite("input", s)?;
    }
    let h = cfg.hidden;
    let rows = x.shards[0].nrows();
    let local: Vec<LayerParams> = (0..t).map(|r| params.shard(r, t)).collect();
    let row_offset = |r: usize| if mode == ParallelMode::SequenceTensor { r * rows } else { 0 };
    let mut comm = Comm { mode, log, t };

    let y1: Vec<_> = (0..t)
        .map(|r| layer_norm(x.shards[r].view(), local[r].ln1_gain.view(), local[r].ln1_bias.view()))
        .collect();
    let y1_full = comm.enter(y1.clone(), CommTag::Conjugate)?;
    let mut qkv = Vec::with_capacity(t);
    let mut partial_o = Vec::with_capacity(t);
    for r in 0..t {
        let p = &local[r];
        let q = linear(y1_full[r].view(), p.wq.view(), Some(p.bq.view()));
        let k = linear(y1_full[r].view(), p.wk.view(), Some(p.bk.view()));
        let v = linear(y1_full[r].view(), p.wv.view(), Some(p.bv.view()));
        let interior = attention_interior(q.view(), k.view(), cfg, r * cfg.heads / t);
        let context = attention_context(&interior, v.view(), cfg);
        partial_o.push(context.dot(&p.wo));
        qkv.push((q, k, v, interior, context));
    }
    let o = comm.exit(partial_o)?;

    let mut x2 = Vec::with_capacity(t);
    let mut proj_keep = Vec::with_capacity(t);
    let mut y2 = Vec::with_capacity(t);
    for r in 0..t {
        let mut o_r = o[r].clone();
        o_r += &local[r].bo;
        let keep = row_mask(cfg, DropoutSite::Projection, row_offset(r), rows, h);
        let x2_r = &x.shards[r] + &dropout(o_r.view(), keep.view(), cfg.dropout);
        y2.push(layer_norm(x2_r.view(), local[r].ln2_gain.view(), local[r].ln2_bias.view()));
        x2.push(x2_r);
        proj_keep.push(keep);
    }
    let y2_full = comm.enter(y2.clone(), CommTag::Conjugate)?;
    let mut mlp = Vec::with_capacity(t);
    let mut partial_u = Vec::with_capacity(t);
    for r in 0..t {
        let p = &local[r];
        let hid = linear(y2_full[r].view(), p.mlp_a.view(), Some(p.mlp_a_bias.view()));
        let act = hid.mapv(gelu);
        partial_u.push(act.dot(&p.mlp_b));
        mlp.push((hid, act));
    }
    let u = comm.exit(partial_u)?;

    let mut out = Vec::with_capacity(t);
    let mut saved = Vec::with_capacity(t);
    let parts = y1.into_iter().zip(y2).zip(qkv).zip(mlp).zip(x2).zip(proj_keep).enumerate();
    for (r, (((((y1_r, y2_r), (q, k, v, interior, context)), (hid, act)), x2_r), keep)) in parts {
        let mut u_r = u[r].clone();
        u_r += &local[r].mlp_b_bias;
        let mlp_keep = row_mask(cfg, DropoutSite::Mlp, row_offset(r), rows, h);
        let y_r = &x2_r + &dropout(u_r.view(), mlp_keep.view(), cfg.dropout);
        ensure_finite("output", &y_r)?;
        out.push(y_r);
        saved.push(SavedLayer {
            policy,
            head_offset: r * cfg.heads / t,
            row_offset: row_offset(r),
            x: x.shards[r].clone(),
            y1: y1_r,
            q,
            k,
            v,
            interior: (policy == RecomputePolicy::None).then_some(interior),
            context,
            proj_keep: keep,
            x2: x2_r,
            y2: y2_r,
            mlp_hidden: hid,
            mlp_act: act,
            mlp_keep,
        });
    }
    let bytes = ByteConvention::default();
    let ledgers = saved.iter().map(|s| s.ledger(&bytes)).collect();
    Ok(ParallelForward { y: RankShardedTensor::from_shards(out, mode.input_axis())?, saved, ledgers })
}

/// Backward pass matching [`parallel_block_forward`].
pub fn parallel_block_backward(
    dy: &RankShardedTensor,
    params: &LayerParams,
    cfg: &BlockConfig,
    saved: &[SavedLayer],
    mode: ParallelMode,
    log: &mut CommLog,
) -> Result<ParallelBackward, SeqparError> {
    let t = dy.ranks();
    cfg.validate(t)?;
    dy.check()?;
    if saved.len() != t {
        return Err(SeqparError::MissingSaved("per-rank state"));
    }
    if dy.shard_axis != mode.input_axis() {
        return Err(SeqparError::ShapeMismatch { what: "output gradient", rank: 0, expected: saved[0].x.dim(), found: dy.shards[0].dim() });
    }
    for (rank, (d, s)) in dy.shards.iter().zip(saved).enumerate() {
        if d.dim() != s.x.dim() {
            return Err(SeqparError::ShapeMismatch { what: "output gradient", rank, expected: s.x.dim(), found: d.dim() });
        }
    }
    let local: Vec<LayerParams> = (0..t).map(|r| params.shard(r, t)).collect();
    let mut grads: Vec<LayerParams> = (0..t).map(|_| LayerParams::zeros(cfg.hidden)).collect();
    let mut comm = Comm { mode, log, t };
    let mut replicated: Vec<Vec<Array1<f64>>> = vec![Vec::with_capacity(t); 6];

    // MLP: ḡ is an all-gather in backward; Y2 is gathered again for dA.
    let du: Vec<_> = (0..t).map(|r| dropout(dy.shards[r].view(), saved[r].mlp_keep.view(), cfg.dropout)).collect();
    replicated[0] = du.iter().map(|d| d.sum_axis(Axis(0))).collect();
    let du_full = comm.enter(du, CommTag::Conjugate)?;
    let y2_full = comm.enter(saved.iter().map(|s| s.y2.clone()).collect(), CommTag::Regather)?;
    let mut partial_dy2 = Vec::with_capacity(t);
    for r in 0..t {
        let (s, p, g) = (&saved[r], &local[r], &mut grads[r]);
        g.mlp_b = s.mlp_act.t().dot(&du_full[r]);
        let dz = du_full[r].dot(&p.mlp_b.t());
        let dh = &dz * &s.mlp_hidden.mapv(gelu_grad);
        g.mlp_a = y2_full[r].t().dot(&dh);
        g.mlp_a_bias = dh.sum_axis(Axis(0));
        partial_dy2.push(dh.dot(&p.mlp_a.t()));
    }
    let dy2 = comm.exit(partial_dy2)?;
    let mut dx2 = Vec::with_capacity(t);
    for r in 0..t {
        let (d, dg, db) = layer_norm_backward(saved[r].x2.view(), local[r].ln2_gain.view(), dy2[r].view());
        replicated[1].push(dg);
        replicated[2].push(db);
        dx2.push(&dy.shards[r] + &d);
    }

    // Attention.
    let d_o: Vec<_> = (0..t).map(|r| dropout(dx2[r].view(), saved[r].proj_keep.view(), cfg.dropout)).collect();
    replicated[3] = d_o.iter().map(|d| d.sum_axis(Axis(0))).collect();
    let d_o_full = comm.enter(d_o, CommTag::Conjugate)?;
    let y1_full = comm.enter(saved.iter().map(|s| s.y1.clone()).collect(), CommTag::Regather)?;
    let mut partial_dy1 = Vec::with_capacity(t);
    for r in 0..t {
        let (s, p, g) = (&saved[r], &local[r], &mut grads[r]);
        g.wo = s.context.t().dot(&d_o_full[r]);
        let dcontext = d_o_full[r].dot(&p.wo.t());
        let mut scratch = None;
        let interior = interior_for_backward(s, cfg, &mut scratch)?;
        let (dq, dk, dv) = attention_backward(s, interior, dcontext.view(), cfg);
        g.wq = y1_full[r].t().dot(&dq);
        g.wk = y1_full[r].t().dot(&dk);
        g.wv = y1_full[r].t().dot(&dv);
        g.bq = dq.sum_axis(Axis(0));
        g.bk = dk.sum_axis(Axis(0));
        g.bv = dv.sum_axis(Axis(0));
        partial_dy1.push(dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t()));
    }
    let dy1 = comm.exit(partial_dy1)?;
    let mut dx = Vec::with_capacity(t);
    for r in 0..t {
        let (d, dg, db) = layer_norm_backward(saved[r].x.view(), local[r].ln1_gain.view(), dy1[r].view());
        replicated[4].push(dg);
        replicated[5].push(db);
        let dx_r = &dx2[r] + &d;
        ensure_finite("input gradient", &dx_r)?;
        dx.push(dx_r);
    }

    let mut logical = LayerParams::assemble(&grads);
    let mut reduced = replicated.into_iter().map(|parts| comm.param_grad(parts));
    logical.mlp_b_bias = reduced.next().expect("six groups")?;
    logical.ln2_gain = reduced.next().expect("six groups")?;
    logical.ln2_bias = reduced.next().expect("six groups")?;
    logical.bo = reduced.next().expect("six groups")?;
    logical.ln1_gain = reduced.next().expect("six groups")?;
    logical.ln1_bias = reduced.next().expect("six groups")?;
    Ok(ParallelBackward { dx: RankShardedTensor::from_shards(dx, mode.input_axis())?, grads: logical })
}

/// Sequence + tensor parallel forward; `x` is sharded along the sequence.
pub fn seqpar_block_forward(
    x: &RankShardedTensor,
    params: &LayerParams,
    cfg: &BlockConfig,
    policy: RecomputePolicy,
    log: &mut CommLog,
) -> Result<ParallelForward, SeqparError> {
    parallel_block_forward(x, params, cfg, policy, ParallelMode::SequenceTensor, log)
}

pub fn seqpar_block_backward(
    dy: &RankShardedTensor,
    params: &LayerParams,
    cfg: &BlockConfig,
    saved: &[SavedLayer],
    log: &mut CommLog,
) -> Result<ParallelBackward, SeqparError> {
    parallel_block_backward(dy, params, cfg, saved, ParallelMode::SequenceTensor, log)
}
