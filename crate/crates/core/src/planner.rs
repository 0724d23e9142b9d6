//! Search over parallel layouts and recompute strategies.
//!
//! Every candidate gets its rank-0 activation peak from the pipeline
//! simulator and its iteration cost from hardware FLOPs. Hardware FLOPs are a
//! proxy for time; no latency model is involved.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{Exact, RationalValue};
use crate::flops::{FlopsError, FlopsModel};
use crate::memory::{MemoryError, MemoryModel};
use crate::model::{validate, Hardware, ModelShape, ParallelLayout, RecomputeStrategy};
use crate::pipeline::{first_stage_peak, microbatch_window_plan, PipelineError, SimOptions};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("search space is empty")]
    EmptySearchSpace,
    #[error("no layout in the search space satisfies the divisibility rules")]
    NoValidLayouts,
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Flops(#[from] FlopsError),
}

/// Values to try for each layout dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub tensor: Vec<u64>,
    pub pipeline: Vec<u64>,
    pub interleave: Vec<u64>,
    pub microbatch: Vec<u64>,
    pub strategies: Vec<RecomputeStrategy>,
    /// Samples per iteration; fixes `n_mb = global_batch / (b · d)`.
    pub global_batch: u64,
    pub options: SimOptions,
}

impl SearchSpace {
    /// A space holding just `layout` and `strategies`.
    pub fn single(layout: &ParallelLayout, strategies: Vec<RecomputeStrategy>, options: SimOptions) -> Self {
        Self {
            tensor: vec![layout.tensor],
            pipeline: vec![layout.pipeline],
            interleave: vec![layout.interleave],
            microbatch: vec![layout.microbatch],
            strategies,
            global_batch: layout.global_batch(),
            options,
        }
    }

    fn is_empty(&self) -> bool {
        self.tensor.is_empty()
            || self.pipeline.is_empty()
            || self.interleave.is_empty()
            || self.microbatch.is_empty()
            || self.strategies.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCandidate {
    pub layout: ParallelLayout,
    pub strategy: String,
    /// Rank-0 activation peak.
    pub peak_bytes: u64,
    pub param_bytes: u64,
    pub optimizer_bytes: u64,
    pub total_bytes: u64,
    pub hardware_flops: u128,
    pub feasible: bool,
    /// `device_mem - total_bytes`; negative when infeasible.
    pub headroom: i128,
    /// Share of microbatch-stage passes recomputed by a microbatch-level window.
    pub recomputed_fraction: Option<RationalValue>,
    #[serde(skip)]
    order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub candidates: Vec<PlanCandidate>,
    pub feasible_count: usize,
    /// Smallest `total_bytes - device_mem` when nothing fits.
    pub min_shortfall: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Planner {
    pub memory: MemoryModel,
    pub flops: FlopsModel,
}

impl Planner {
    pub fn new(memory: MemoryModel, flops: FlopsModel) -> Self {
        Self { memory, flops }
    }

    /// Layouts that divide `hw.devices` and the global batch and pass validation.
    fn layouts(&self, shape: &ModelShape, hw: &Hardware, space: &SearchSpace) -> Vec<ParallelLayout> {
        let mut out = Vec::new();
        for &t in &space.tensor {
            for &p in &space.pipeline {
                let group = t.saturating_mul(p);
                if group == 0 || hw.devices % group != 0 {
                    continue;
                }
                let d = hw.devices / group;
                for &m in &space.interleave {
                    for &b in &space.microbatch {
                        let per_step = b.saturating_mul(d);
                        if per_step == 0 || space.global_batch % per_step != 0 {
                            continue;
                        }
                        let layout = ParallelLayout::new(t, p, b)
                            .with_interleave(m)
                            .with_data_parallel(d)
                            .with_microbatches(space.global_batch / per_step);
                        if validate(shape, &layout).is_ok() {
                            out.push(layout);
                        }
                    }
                }
            }
        }
        out
    }

    fn evaluate(
        &self,
        shape: &ModelShape,
        hw: &Hardware,
        layout: &ParallelLayout,
        strategy: &RecomputeStrategy,
        options: SimOptions,
        order: usize,
    ) -> Result<PlanCandidate, PlanError> {
        let footprint = self.memory.params_and_optimizer_bytes(shape, layout)?;
        let fixed = footprint.param_bytes.saturating_add(footprint.optimizer_bytes);
        let (peak_bytes, fraction) = match *strategy {
            RecomputeStrategy::Uniform { .. } => (first_stage_peak(&self.memory, shape, layout, strategy, options, None)?, None),
            RecomputeStrategy::MicrobatchLevel { inner, sequence_parallel } => {
                let budget = hw.device_mem.saturating_sub(fixed);
                match microbatch_window_plan(&self.memory, shape, layout, inner, sequence_parallel, budget, options) {
                    Ok(plan) => {
                        let peak = first_stage_peak(&self.memory, shape, layout, strategy, options, Some(&plan))?;
                        (peak, Some(plan.recomputed_fraction()))
                    }
                    // Even the all-checkpointed window does not fit; report that
                    // window's cost with every pass recomputed.
                    Err(PipelineError::InfeasibleBudget { minimum, .. }) => (minimum, Some(Exact::from_integer(1))),
                    Err(e) => return Err(e.into()),
                }
            }
        };
        let hardware_flops = self.flops.hardware_flops(shape, layout.global_batch(), strategy, fraction)?;
        let total_bytes = peak_bytes.saturating_add(fixed);
        let headroom = i128::from(hw.device_mem) - i128::from(total_bytes);
        Ok(PlanCandidate {
            layout: *layout,
            strategy: strategy.to_string(),
            peak_bytes,
            param_bytes: footprint.param_bytes,
            optimizer_bytes: footprint.optimizer_bytes,
            total_bytes,
            hardware_flops,
            feasible: headroom >= 0,
            headroom,
            recomputed_fraction: fraction.map(RationalValue::from),
            order,
        })
    }

    /// Evaluates every layout × strategy in the space and ranks the result:
    /// feasible first, then ascending hardware FLOPs, descending headroom,
    /// ascending `t`, `p`, `m`, `b` and the strategy's position in the space.
    ///
    /// Microbatch-level strategies are only tried on non-interleaved layouts.
    pub fn enumerate_plans(&self, shape: &ModelShape, hw: &Hardware, space: &SearchSpace) -> Result<PlanReport, PlanError> {
        if space.is_empty() {
            return Err(PlanError::EmptySearchSpace);
        }
        let layouts = self.layouts(shape, hw, space);
        if layouts.is_empty() {
            return Err(PlanError::NoValidLayouts);
        }
        let jobs: Vec<(ParallelLayout, usize, RecomputeStrategy)> = layouts
            .iter()
            .flat_map(|l| space.strategies.iter().enumerate().map(move |(i, s)| (*l, i, *s)))
            .filter(|(l, _, s)| l.interleave == 1 || matches!(s, RecomputeStrategy::Uniform { .. }))
            .collect();
        let mut candidates = jobs
            .par_iter()
            .map(|(layout, i, strategy)| self.evaluate(shape, hw, layout, strategy, space.options, *i))
            .collect::<Result<Vec<_>, _>>()?;
        candidates.sort_by(rank_order);
        let feasible_count = candidates.iter().filter(|c| c.feasible).count();
        let min_shortfall = if feasible_count == 0 {
            candidates.iter().map(|c| u64::try_from(-c.headroom).unwrap_or(u64::MAX)).min()
        } else {
            None
        };
        Ok(PlanReport { candidates, feasible_count, min_shortfall })
    }
}

fn rank_order(a: &PlanCandidate, b: &PlanCandidate) -> Ordering {
    let key = |c: &PlanCandidate| (c.layout.tensor, c.layout.pipeline, c.layout.interleave, c.layout.microbatch, c.order);
    b.feasible
        .cmp(&a.feasible)
        .then(a.hardware_flops.cmp(&b.hardware_flops))
        .then(b.headroom.cmp(&a.headroom))
        .then(key(a).cmp(&key(b)))
}
