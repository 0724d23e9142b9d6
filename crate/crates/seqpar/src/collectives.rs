//! Simulated collectives over per-rank dense tensors.
//!
//! Reductions always add rank 0 first, then ranks 1..t in order, so results
//! are bitwise reproducible and `all_reduce` equals
//! `all_gather(reduce_scatter(..))` exactly, even for floats.

use std::ops::AddAssign;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::SeqparError;

fn check_shapes<T>(parts: &[Array2<T>]) -> Result<(), SeqparError> {
    let first = parts.first().ok_or(SeqparError::NoRanks)?;
    for (rank, p) in parts.iter().enumerate() {
        if p.dim() != first.dim() {
            return Err(SeqparError::ShapeMismatch {
                what: "collective input",
                rank,
                expected: first.dim(),
                found: p.dim(),
            });
        }
    }
    Ok(())
}

fn ordered_sum<T: Clone + AddAssign>(parts: &[Array2<T>]) -> Array2<T> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc.zip_mut_with(p, |a, b| *a += b.clone());
    }
    acc
}

/// Splits `x` into `t` equal chunks along `axis`.
pub fn split<T: Clone>(x: ArrayView2<T>, axis: Axis, t: usize) -> Result<Vec<Array2<T>>, SeqparError> {
    let len = x.len_of(axis);
    if t == 0 {
        return Err(SeqparError::NoRanks);
    }
    if len % t != 0 {
        return Err(SeqparError::NotDivisible { len, parts: t });
    }
    let chunk = len / t;
    Ok((0..t)
        .map(|r| x.slice_axis(axis, (r * chunk..(r + 1) * chunk).into()).to_owned())
        .collect())
}

/// Concatenates the shards along `axis`; every rank receives the result.
pub fn all_gather<T: Clone>(shards: &[Array2<T>], axis: Axis) -> Result<Vec<Array2<T>>, SeqparError> {
    let first = shards.first().ok_or(SeqparError::NoRanks)?;
    let other = Axis(1 - axis.index());
    for (rank, s) in shards.iter().enumerate() {
        if s.len_of(other) != first.len_of(other) || s.len_of(axis) != first.len_of(axis) {
            return Err(SeqparError::ShapeMismatch { what: "all-gather shard", rank, expected: first.dim(), found: s.dim() });
        }
    }
    let views: Vec<_> = shards.iter().map(|a| a.view()).collect();
    let full = concatenate(axis, &views).map_err(|_| SeqparError::NoRanks)?;
    Ok(vec![full; shards.len()])
}

/// Sums the partials and hands chunk `r` (along `axis`) to rank `r`.
pub fn reduce_scatter<T: Clone + AddAssign>(partials: &[Array2<T>], axis: Axis) -> Result<Vec<Array2<T>>, SeqparError> {
    check_shapes(partials)?;
    let sum = ordered_sum(partials);
    split(sum.view(), axis, partials.len())
}

/// Sums the partials; every rank receives the sum.
pub fn all_reduce<T: Clone + AddAssign>(partials: &[Array2<T>]) -> Result<Vec<Array2<T>>, SeqparError> {
    check_shapes(partials)?;
    Ok(vec![ordered_sum(partials); partials.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CollectiveKind {
    AllGather,
    ReduceScatter,
    AllReduce,
}

/// Why a collective was issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommTag {
    /// The `g` / `ḡ` operators (or their all-reduce form) on the activation path.
    Conjugate,
    /// Gathering a sequence-sharded activation again during backward.
    Regather,
    /// Summing gradients of replicated parameters.
    ParamGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub kind: CollectiveKind,
    pub tag: CommTag,
    pub ranks: usize,
    /// Elements of the full (unsharded) tensor.
    pub elements: usize,
}

impl CommRecord {
    /// Elements each rank sends under a ring algorithm.
    pub fn elements_sent_per_rank(&self) -> u64 {
        let t = self.ranks as u64;
        let n = self.elements as u64;
        let base = n * (t - 1) / t;
        match self.kind {
            CollectiveKind::AllGather | CollectiveKind::ReduceScatter => base,
            CollectiveKind::AllReduce => 2 * base,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLog {
    pub records: Vec<CommRecord>,
}

impl CommLog {
    pub fn record(&mut self, kind: CollectiveKind, tag: CommTag, ranks: usize, elements: usize) {
        // A single rank has nobody to talk to.
        if ranks > 1 {
            self.records.push(CommRecord { kind, tag, ranks, elements });
        }
    }

    pub fn count(&self, kind: CollectiveKind, tag: CommTag) -> usize {
        self.records.iter().filter(|r| r.kind == kind && r.tag == tag).count()
    }

    pub fn elements_sent_per_rank(&self, tag: CommTag) -> u64 {
        self.records.iter().filter(|r| r.tag == tag).map(CommRecord::elements_sent_per_rank).sum()
    }
}
