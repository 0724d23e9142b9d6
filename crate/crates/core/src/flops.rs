//! GEMM FLOPs per iteration, MFU/HFU and recompute overheads.
//!
//! Only matrix multiplications are counted. For a batch of `B` sequences a
//! layer's forward pass costs `24Bsh² + 4Bs²h` and the logits layer `2Bshv`;
//! the backward pass costs twice the forward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{self, Exact, Overflow, RationalValue};
use crate::model::{validate, Hardware, ModelShape, ParallelLayout, Recompute, RecomputeStrategy, Violations};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlopsError {
    #[error(transparent)]
    Invalid(#[from] Violations),
    #[error("FLOP count overflows")]
    Overflow,
    #[error("iteration time must be positive")]
    NonPositiveTime,
    #[error("hardware peak FLOP rate is zero")]
    ZeroPeak,
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error("microbatch-level recomputation needs the recomputed-microbatch fraction")]
    MissingRecomputeFraction,
    #[error("recomputed fraction {0} is outside [0, 1]")]
    FractionOutOfRange(Exact),
}

impl From<Overflow> for FlopsError {
    fn from(_: Overflow) -> Self {
        FlopsError::Overflow
    }
}

/// How much extra work selective recomputation is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectiveFlops {
    /// `72BLsh²(1 + s/3h + v/12hL)`: `12BLs²h` on top of model FLOPs.
    #[default]
    Equation,
    /// One extra forward of the two attention GEMMs: `4Bs²h` per layer.
    Text,
}

/// Per-iteration FLOPs and utilizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub strategy: String,
    pub batch: u64,
    pub model_flops_per_iter: u128,
    pub hardware_flops_per_iter: u128,
    pub hw_model_ratio: RationalValue,
    pub mfu: Option<RationalValue>,
    pub hfu: Option<RationalValue>,
}

fn check_shape(shape: &ModelShape) -> Result<(), FlopsError> {
    validate(shape, &ParallelLayout::single_device(1))?;
    Ok(())
}

/// Bsh², Bs²h and Bshv, each times L where the term is per layer.
struct Terms {
    blsh2: u128,
    bls2h: u128,
    bshv: u128,
}

fn terms(shape: &ModelShape, batch: u64) -> Result<Terms, FlopsError> {
    check_shape(shape)?;
    if batch == 0 {
        return Err(FlopsError::EmptyBatch);
    }
    let (s, h, l, v) = (shape.seq_len, shape.hidden, shape.layers, shape.vocab);
    Ok(Terms {
        blsh2: exact::product(&[batch, l, s, h, h])?,
        bls2h: exact::product(&[batch, l, s, s, h])?,
        bshv: exact::product(&[batch, s, h, v])?,
    })
}

fn lin(terms: &[(u128, u128)]) -> Result<u128, FlopsError> {
    terms
        .iter()
        .try_fold(0u128, |acc, &(k, x)| k.checked_mul(x).and_then(|y| acc.checked_add(y)))
        .ok_or(FlopsError::Overflow)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopsModel {
    pub selective: SelectiveFlops,
}

impl FlopsModel {
    pub fn new(selective: SelectiveFlops) -> Self {
        Self { selective }
    }

    /// `72BLsh² + 12BLs²h + 6Bshv`.
    pub fn model_flops(&self, shape: &ModelShape, batch: u64) -> Result<u128, FlopsError> {
        let t = terms(shape, batch)?;
        lin(&[(72, t.blsh2), (12, t.bls2h), (6, t.bshv)])
    }

    /// FLOPs added on top of model FLOPs when every microbatch is recomputed under `policy`.
    pub fn recompute_flops(&self, shape: &ModelShape, batch: u64, policy: Recompute) -> Result<u128, FlopsError> {
        let t = terms(shape, batch)?;
        match policy {
            Recompute::None => Ok(0),
            Recompute::Selective => match self.selective {
                SelectiveFlops::Equation => lin(&[(12, t.bls2h)]),
                SelectiveFlops::Text => lin(&[(4, t.bls2h)]),
            },
            // One more transformer forward; the logits layer is not checkpointed.
            Recompute::Full => lin(&[(24, t.blsh2), (4, t.bls2h)]),
        }
    }

    /// Hardware FLOPs per iteration. Microbatch-level strategies need the
    /// fraction of microbatch-stage passes that were recomputed.
    pub fn hardware_flops(
        &self,
        shape: &ModelShape,
        batch: u64,
        strategy: &RecomputeStrategy,
        recomputed_fraction: Option<Exact>,
    ) -> Result<u128, FlopsError> {
        let model = self.model_flops(shape, batch)?;
        let extra = self.recompute_flops(shape, batch, strategy.checkpoint_policy())?;
        let extra = match strategy {
            RecomputeStrategy::Uniform { .. } => extra,
            RecomputeStrategy::MicrobatchLevel { .. } => {
                let fraction = recomputed_fraction.ok_or(FlopsError::MissingRecomputeFraction)?;
                if fraction > Exact::from_integer(1) {
                    return Err(FlopsError::FractionOutOfRange(fraction));
                }
                exact::mul(&Exact::from_integer(extra), &fraction)?.to_integer()
            }
        };
        model.checked_add(extra).ok_or(FlopsError::Overflow)
    }

    /// Exact hardware/model ratio for selective recomputation.
    pub fn hw_model_ratio(&self, shape: &ModelShape) -> Result<Exact, FlopsError> {
        let model = self.model_flops(shape, 1)?;
        let hw = self.hardware_flops(shape, 1, &RecomputeStrategy::SELECTIVE, None)?;
        Ok(Exact::new(hw, model))
    }

    pub fn report(
        &self,
        shape: &ModelShape,
        batch: u64,
        strategy: &RecomputeStrategy,
        recomputed_fraction: Option<Exact>,
        timing: Option<(&Exact, &Hardware)>,
    ) -> Result<FlopsReport, FlopsError> {
        let model = self.model_flops(shape, batch)?;
        let hw = self.hardware_flops(shape, batch, strategy, recomputed_fraction)?;
        let (mfu, hfu) = match timing {
            Some((time, hardware)) => {
                let (mfu, hfu) = mfu_hfu(model, hw, time, hardware)?;
                (Some(mfu.into()), Some(hfu.into()))
            }
            None => (None, None),
        };
        Ok(FlopsReport {
            strategy: strategy.to_string(),
            batch,
            model_flops_per_iter: model,
            hardware_flops_per_iter: hw,
            hw_model_ratio: Exact::new(hw, model).into(),
            mfu,
            hfu,
        })
    }
}

/// `1 + s/6h`, the usual approximation of the selective hardware/model ratio.
pub fn approx_ratio(shape: &ModelShape) -> Exact {
    let h6 = 6 * u128::from(shape.hidden);
    Exact::new(h6 + u128::from(shape.seq_len), h6)
}

/// FLOPs per second divided by the aggregate peak of `hw.devices` devices.
pub fn utilization(flops: u128, iteration_time: &Exact, hw: &Hardware) -> Result<Exact, FlopsError> {
    if *iteration_time <= Exact::from_integer(0) {
        return Err(FlopsError::NonPositiveTime);
    }
    let peak = exact::product(&[hw.devices, hw.peak_flops_per_device])?;
    if peak == 0 {
        return Err(FlopsError::ZeroPeak);
    }
    let denom = iteration_time.numer().checked_mul(peak).ok_or(Overflow)?;
    Ok(exact::mul(&Exact::new(flops, denom), &Exact::from_integer(*iteration_time.denom()))?)
}

/// Model and hardware FLOPs utilization for one iteration.
pub fn mfu_hfu(model_flops: u128, hardware_flops: u128, iteration_time: &Exact, hw: &Hardware) -> Result<(Exact, Exact), FlopsError> {
    Ok((utilization(model_flops, iteration_time, hw)?, utilization(hardware_flops, iteration_time, hw)?))
}

/// Predicted throughput gain of going from `slow` to `fast` hardware FLOPs
/// at equal achieved FLOP rate: `slow / fast - 1`.
pub fn predicted_speedup(slow_hardware_flops: u128, fast_hardware_flops: u128) -> Exact {
    Exact::new(slow_hardware_flops, fast_hardware_flops) - Exact::from_integer(1)
}
