//! A logical 2-D tensor held as one shard per simulated rank.

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::collectives::split;
use crate::error::SeqparError;

/// Rows are tokens in sequence-major order (`row = i_s · b + i_b`), columns
/// are features, so a sequence shard is a contiguous block of rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShardAxis {
    Sequence,
    Hidden,
    Replicated,
}

impl ShardAxis {
    fn axis(self) -> Option<Axis> {
        match self {
            ShardAxis::Sequence => Some(Axis(0)),
            ShardAxis::Hidden => Some(Axis(1)),
            ShardAxis::Replicated => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankShardedTensor {
    pub shards: Vec<Array2<f64>>,
    pub shard_axis: ShardAxis,
    pub logical_shape: (usize, usize),
}

impl RankShardedTensor {
    pub fn from_logical(x: &Array2<f64>, shard_axis: ShardAxis, t: usize) -> Result<Self, SeqparError> {
        let shards = match shard_axis.axis() {
            Some(axis) => split(x.view(), axis, t)?,
            None if t == 0 => return Err(SeqparError::NoRanks),
            None => vec![x.clone(); t],
        };
        Ok(Self { shards, shard_axis, logical_shape: x.dim() })
    }

    pub fn from_shards(shards: Vec<Array2<f64>>, shard_axis: ShardAxis) -> Result<Self, SeqparError> {
        let first = shards.first().ok_or(SeqparError::NoRanks)?.dim();
        let t = shards.len();
        let logical_shape = match shard_axis {
            ShardAxis::Sequence => (first.0 * t, first.1),
            ShardAxis::Hidden => (first.0, first.1 * t),
            ShardAxis::Replicated => first,
        };
        let tensor = Self { shards, shard_axis, logical_shape };
        tensor.check()?;
        Ok(tensor)
    }

    pub fn ranks(&self) -> usize {
        self.shards.len()
    }

    /// Checks equal shard shapes, the logical shape and, for replicated
    /// tensors, identical contents.
    pub fn check(&self) -> Result<(), SeqparError> {
        let t = self.ranks();
        if t == 0 {
            return Err(SeqparError::NoRanks);
        }
        let (rows, cols) = self.logical_shape;
        let expected = match self.shard_axis {
            ShardAxis::Sequence if rows % t == 0 => (rows / t, cols),
            ShardAxis::Hidden if cols % t == 0 => (rows, cols / t),
            ShardAxis::Replicated => (rows, cols),
            ShardAxis::Sequence => return Err(SeqparError::NotDivisible { len: rows, parts: t }),
            ShardAxis::Hidden => return Err(SeqparError::NotDivisible { len: cols, parts: t }),
        };
        for (rank, s) in self.shards.iter().enumerate() {
            if s.dim() != expected {
                return Err(SeqparError::ShapeMismatch { what: "shard", rank, expected, found: s.dim() });
            }
            if self.shard_axis == ShardAxis::Replicated && s != &self.shards[0] {
                return Err(SeqparError::ShapeMismatch { what: "replica", rank, expected, found: s.dim() });
            }
        }
        Ok(())
    }

    /// Reassembles the logical tensor.
    pub fn to_logical(&self) -> Array2<f64> {
        match self.shard_axis.axis() {
            Some(axis) => {
                let views: Vec<_> = self.shards.iter().map(|a| a.view()).collect();
                concatenate(axis, &views).expect("shards checked on construction")
            }
            None => self.shards[0].clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn round_trips_on_every_axis() {
        let x = Array2::from_shape_fn((4, 6), |(i, j)| (i * 6 + j) as f64);
        for axis in [ShardAxis::Sequence, ShardAxis::Hidden, ShardAxis::Replicated] {
            let s = RankShardedTensor::from_logical(&x, axis, 2).unwrap();
            s.check().unwrap();
            assert_eq!(s.to_logical(), x);
        }
        assert!(RankShardedTensor::from_logical(&x, ShardAxis::Sequence, 3).is_err());
    }

    #[test]
    fn diverging_replicas_are_rejected() {
        let x = Array2::<f64>::zeros((2, 2));
        let mut s = RankShardedTensor::from_logical(&x, ShardAxis::Replicated, 2).unwrap();
        s.shards[1][[0, 0]] = 1.0;
        assert!(s.check().is_err());
    }
}
