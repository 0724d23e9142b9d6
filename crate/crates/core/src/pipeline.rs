//! 1F1B pipeline schedule and per-rank activation memory over logical time.
//!
//! One tick is one microbatch pass through one stage. A forward on stage `S`
//! waits for the same microbatch's forward on `S - 1`; a backward (or the
//! recompute that precedes it) waits for the backward on `S + 1`. Memory only
//! depends on event order, so no latency model is involved.
//!
//! Interleaved schedules are not simulated; [`first_stage_peak`] applies the
//! analytical interleave factor to the rank-0 transformer activations instead.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{self, Exact, Overflow};
use crate::memory::{interleave_factor, ExtraTerms, MemoryError, MemoryModel};
use crate::model::{validate, InnerRecompute, ModelShape, ParallelLayout, Recompute, RecomputeStrategy, Violations};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Invalid(#[from] Violations),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("pipeline cannot be filled: {microbatches} microbatches for {pipeline} stages")]
    NotFilled { pipeline: u64, microbatches: u64 },
    #[error("pipeline size must be at least 1")]
    EmptyPipeline,
    #[error("activation budget {budget} is below the all-checkpointed minimum {minimum}")]
    InfeasibleBudget { budget: u64, minimum: u64 },
    #[error("microbatch-level recomputation needs a window plan")]
    MissingWindow,
    #[error("window plan does not match the layout")]
    WindowMismatch,
    #[error("microbatch-level windows are only simulated for non-interleaved schedules")]
    InterleavedWindow,
    #[error("byte count overflows")]
    Overflow,
}

impl From<Overflow> for PipelineError {
    fn from(_: Overflow) -> Self {
        PipelineError::Overflow
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Forward,
    Recompute,
    Backward,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Forward => "forward",
            EventKind::Recompute => "recompute",
            EventKind::Backward => "backward",
        }
    }
}

/// Whether a microbatch keeps every activation on a stage or only its checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoredMode {
    Checkpointed,
    FullyStored,
}

impl StoredMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            StoredMode::Checkpointed => "checkpointed",
            StoredMode::FullyStored => "fully_stored",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScheduleEvent {
    /// 0-based pipeline stage.
    pub rank: u64,
    pub step: u64,
    pub kind: EventKind,
    /// 1-based microbatch id.
    pub microbatch: u64,
    pub stored_mode: StoredMode,
}

/// Events of one iteration ordered by `(step, rank)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub pipeline: u64,
    pub microbatches: u64,
    pub events: Vec<ScheduleEvent>,
}

impl Schedule {
    pub fn rank_events(&self, rank: u64) -> impl Iterator<Item = &ScheduleEvent> + '_ {
        self.events.iter().filter(move |e| e.rank == rank)
    }

    /// Number of ticks from the first event to the last.
    pub fn makespan(&self) -> u64 {
        self.events.iter().map(|e| e.step + 1).max().unwrap_or(0)
    }
}

/// Microbatches whose backward is still outstanding on stage `stage` at the
/// steady state of 1F1B: `max(0, p - stage)`.
pub fn in_flight(pipeline: u64, stage: u64) -> u64 {
    pipeline.saturating_sub(stage)
}

/// Forward/backward order on one stage: warmup, steady 1F1B, cooldown.
fn stage_program(pipeline: u64, microbatches: u64, stage: u64) -> Vec<(EventKind, u64)> {
    let warmup = (pipeline - stage - 1).min(microbatches);
    let mut program = Vec::with_capacity(2 * microbatches as usize);
    program.extend((1..=warmup).map(|mb| (EventKind::Forward, mb)));
    for i in 1..=(microbatches - warmup) {
        program.push((EventKind::Forward, warmup + i));
        program.push((EventKind::Backward, i));
    }
    program.extend((microbatches - warmup + 1..=microbatches).map(|mb| (EventKind::Backward, mb)));
    program
}

fn check_fill(pipeline: u64, microbatches: u64) -> Result<(), PipelineError> {
    if pipeline == 0 {
        return Err(PipelineError::EmptyPipeline);
    }
    if microbatches < pipeline {
        return Err(PipelineError::NotFilled { pipeline, microbatches });
    }
    Ok(())
}

/// Plain 1F1B schedule with every microbatch fully stored.
pub fn build_1f1b(pipeline: u64, microbatches: u64) -> Result<Schedule, PipelineError> {
    check_fill(pipeline, microbatches)?;
    let modes = vec![vec![StoredMode::FullyStored; microbatches as usize]; pipeline as usize];
    build_schedule(pipeline, microbatches, &modes)
}

/// 1F1B schedule where `modes[rank][mb - 1]` picks how each microbatch is
/// stored; checkpointed microbatches get a recompute right before their backward.
pub fn build_schedule(pipeline: u64, microbatches: u64, modes: &[Vec<StoredMode>]) -> Result<Schedule, PipelineError> {
    check_fill(pipeline, microbatches)?;
    if modes.len() as u64 != pipeline || modes.iter().any(|m| m.len() as u64 != microbatches) {
        return Err(PipelineError::WindowMismatch);
    }
    let p = pipeline as usize;
    let n = microbatches as usize;
    let programs: Vec<Vec<(EventKind, u64)>> = (0..pipeline)
        .map(|stage| {
            stage_program(pipeline, microbatches, stage)
                .into_iter()
                .flat_map(|(kind, mb)| {
                    let recompute = kind == EventKind::Backward
                        && modes[stage as usize][mb as usize - 1] == StoredMode::Checkpointed;
                    recompute.then_some((EventKind::Recompute, mb)).into_iter().chain([(kind, mb)])
                })
                .collect()
        })
        .collect();

    let mut fwd_done: Vec<Vec<Option<u64>>> = vec![vec![None; n + 1]; p];
    let mut bwd_done: Vec<Vec<Option<u64>>> = vec![vec![None; n + 1]; p];
    let mut cursor = vec![0usize; p];
    let total: usize = programs.iter().map(Vec::len).sum();
    let mut events = Vec::with_capacity(total);
    let mut tick = 0u64;
    while events.len() < total {
        let mut progressed = false;
        for stage in 0..p {
            let Some(&(kind, mb)) = programs[stage].get(cursor[stage]) else { continue };
            let m = mb as usize;
            let ready = |done: Option<u64>| done.is_some_and(|d| d < tick);
            let ok = match kind {
                EventKind::Forward => stage == 0 || ready(fwd_done[stage - 1][m]),
                EventKind::Recompute | EventKind::Backward => stage + 1 == p || ready(bwd_done[stage + 1][m]),
            };
            if !ok {
                continue;
            }
            match kind {
                EventKind::Forward => fwd_done[stage][m] = Some(tick),
                EventKind::Backward => bwd_done[stage][m] = Some(tick),
                EventKind::Recompute => {}
            }
            events.push(ScheduleEvent {
                rank: stage as u64,
                step: tick,
                kind,
                microbatch: mb,
                stored_mode: modes[stage][m - 1],
            });
            cursor[stage] += 1;
            progressed = true;
        }
        // Dependencies always point at strictly earlier ticks, so a tick with
        // no progress means no later tick can progress either.
        if !progressed && events.iter().all(|e| e.step + 1 < tick) {
            unreachable!("1F1B schedule deadlocked at tick {tick}");
        }
        tick += 1;
    }
    Ok(Schedule { pipeline, microbatches, events })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimOptions {
    /// Free each stage's output tensor once it has been handed to the next stage.
    pub dealloc: bool,
}

/// Memory held by one rank at one instant, by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RankMemory {
    pub transformer: u64,
    pub extras: ExtraTerms<u64>,
    pub output_tensors: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub step: u64,
    pub kind: EventKind,
    pub microbatch: u64,
    pub stored_mode: StoredMode,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankTimeline {
    pub rank: u64,
    pub points: Vec<TimelinePoint>,
    pub peak: RankMemory,
}

/// Per-rank activation bytes after every event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryTimeline {
    pub strategy: String,
    pub dealloc: bool,
    pub schedule: Schedule,
    pub ranks: Vec<RankTimeline>,
    pub peak_per_rank: Vec<u64>,
    /// Checkpointed microbatches per stage, i.e. recompute passes.
    pub recompute_counts: Vec<u64>,
}

impl MemoryTimeline {
    /// `(rank, step, event, microbatch, stored_mode, bytes_after_event)` rows in rank-major order.
    pub fn rows(&self) -> impl Iterator<Item = (u64, u64, &'static str, u64, &'static str, u64)> + '_ {
        self.ranks.iter().flat_map(|r| {
            r.points
                .iter()
                .map(move |p| (r.rank, p.step, p.kind.as_str(), p.microbatch, p.stored_mode.as_str(), p.bytes))
        })
    }
}

/// Exact bytes one microbatch pins on one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
struct StageCosts {
    full: Exact,
    checkpointed: Exact,
    extras: ExtraTerms<Exact>,
    output: u64,
}

impl StageCosts {
    fn stored(&self, mode: StoredMode) -> &Exact {
        match mode {
            StoredMode::FullyStored => &self.full,
            StoredMode::Checkpointed => &self.checkpointed,
        }
    }

    /// Everything the microbatch holds, used for window projections.
    fn total(&self, mode: StoredMode) -> Result<Exact, Overflow> {
        let mut sum = exact::add(self.stored(mode), &Exact::from_integer(self.output.into()))?;
        for e in self.extras.as_array() {
            sum = exact::add(&sum, e)?;
        }
        Ok(sum)
    }
}

fn stage_costs(
    model: &MemoryModel,
    shape: &ModelShape,
    layout: &ParallelLayout,
    policy: Recompute,
    sequence_parallel: bool,
    options: SimOptions,
) -> Result<Vec<StageCosts>, PipelineError> {
    let layers = layout.layers_per_stage(shape);
    let full = exact::scale(&model.per_layer_exact(shape, layout, Recompute::None, sequence_parallel)?, layers)?;
    let checkpointed = exact::scale(&model.per_layer_exact(shape, layout, policy, sequence_parallel)?, layers)?;
    let first_extras = model.extras_per_microbatch(shape, layout)?;
    let output = if options.dealloc { 0 } else { model.stage_output_bytes(shape, layout.microbatch)? };
    Ok((0..layout.pipeline)
        .map(|stage| StageCosts {
            full: full.clone(),
            checkpointed: checkpointed.clone(),
            extras: if stage == 0 { first_extras.clone() } else { zero_extras() },
            output,
        })
        .collect())
}

fn zero_extras() -> ExtraTerms<Exact> {
    let z = || Exact::from_integer(0);
    ExtraTerms { embedding_dropout: z(), final_layernorm: z(), output_proj_input: z(), logits: z() }
}

/// Running exact totals for one rank.
#[derive(Debug, Clone)]
struct Held {
    transformer: Exact,
    extras: ExtraTerms<Exact>,
    outputs: u64,
}

impl Held {
    fn new() -> Self {
        Self { transformer: Exact::from_integer(0), extras: zero_extras(), outputs: 0 }
    }

    fn apply(&mut self, costs: &StageCosts, mode: StoredMode, sign_add: bool) -> Result<(), Overflow> {
        let step = |acc: &mut Exact, x: &Exact| -> Result<(), Overflow> {
            *acc = if sign_add { exact::add(acc, x)? } else { acc.clone() - x.clone() };
            Ok(())
        };
        step(&mut self.transformer, costs.stored(mode))?;
        step(&mut self.extras.embedding_dropout, &costs.extras.embedding_dropout)?;
        step(&mut self.extras.final_layernorm, &costs.extras.final_layernorm)?;
        step(&mut self.extras.output_proj_input, &costs.extras.output_proj_input)?;
        step(&mut self.extras.logits, &costs.extras.logits)?;
        self.outputs = if sign_add {
            self.outputs.checked_add(costs.output).ok_or(Overflow)?
        } else {
            self.outputs - costs.output
        };
        Ok(())
    }

    /// Each component floored on its own, matching the analytical reports.
    fn snapshot(&self) -> Result<RankMemory, Overflow> {
        let extras = ExtraTerms {
            embedding_dropout: exact::floor_u64(&self.extras.embedding_dropout)?,
            final_layernorm: exact::floor_u64(&self.extras.final_layernorm)?,
            output_proj_input: exact::floor_u64(&self.extras.output_proj_input)?,
            logits: exact::floor_u64(&self.extras.logits)?,
        };
        let transformer = exact::floor_u64(&self.transformer)?;
        let total = transformer
            .checked_add(extras.sum())
            .and_then(|x| x.checked_add(self.outputs))
            .ok_or(Overflow)?;
        Ok(RankMemory { transformer, extras, output_tensors: self.outputs, total })
    }
}

fn strategy_modes(
    strategy: &RecomputeStrategy,
    layout: &ParallelLayout,
    window: Option<&WindowPlan>,
) -> Result<Vec<Vec<StoredMode>>, PipelineError> {
    let uniform = |mode| vec![vec![mode; layout.microbatches as usize]; layout.pipeline as usize];
    match strategy {
        RecomputeStrategy::Uniform { recompute: Recompute::None, .. } => Ok(uniform(StoredMode::FullyStored)),
        RecomputeStrategy::Uniform { .. } => Ok(uniform(StoredMode::Checkpointed)),
        RecomputeStrategy::MicrobatchLevel { .. } => {
            let window = window.ok_or(PipelineError::MissingWindow)?;
            if window.stages.len() as u64 != layout.pipeline
                || window.stages.iter().any(|s| s.modes.len() as u64 != layout.microbatches)
            {
                return Err(PipelineError::WindowMismatch);
            }
            Ok(window.stages.iter().map(|s| s.modes.clone()).collect())
        }
    }
}

struct SimOutcome {
    timeline: MemoryTimeline,
    /// Exact transformer bytes held at each rank's peak.
    transformer_at_peak: Vec<Exact>,
}

fn simulate(
    model: &MemoryModel,
    shape: &ModelShape,
    layout: &ParallelLayout,
    strategy: &RecomputeStrategy,
    options: SimOptions,
    window: Option<&WindowPlan>,
) -> Result<SimOutcome, PipelineError> {
    validate(shape, layout)?;
    let modes = strategy_modes(strategy, layout, window)?;
    let schedule = build_schedule(layout.pipeline, layout.microbatches, &modes)?;
    let costs = stage_costs(model, shape, layout, strategy.checkpoint_policy(), strategy.sequence_parallel(), options)?;

    let mut ranks = Vec::with_capacity(layout.pipeline as usize);
    let mut transformer_at_peak = Vec::with_capacity(layout.pipeline as usize);
    for rank in 0..layout.pipeline {
        let cost = &costs[rank as usize];
        let mut held = Held::new();
        let mut peak = RankMemory::default();
        let mut peak_exact = Exact::from_integer(0);
        let mut points = Vec::with_capacity(3 * layout.microbatches as usize);
        for event in schedule.rank_events(rank) {
            match event.kind {
                EventKind::Forward => held.apply(cost, event.stored_mode, true)?,
                EventKind::Backward => held.apply(cost, event.stored_mode, false)?,
                // Recomputation rebuilds one layer at a time; the transient is not tracked.
                EventKind::Recompute => {}
            }
            let snap = held.snapshot()?;
            if snap.total > peak.total {
                peak = snap;
                peak_exact = held.transformer.clone();
            }
            points.push(TimelinePoint {
                step: event.step,
                kind: event.kind,
                microbatch: event.microbatch,
                stored_mode: event.stored_mode,
                bytes: snap.total,
            });
        }
        ranks.push(RankTimeline { rank, points, peak });
        transformer_at_peak.push(peak_exact);
    }
    let recompute_counts = modes
        .iter()
        .map(|m| m.iter().filter(|&&x| x == StoredMode::Checkpointed).count() as u64)
        .collect();
    let timeline = MemoryTimeline {
        strategy: strategy.to_string(),
        dealloc: options.dealloc,
        peak_per_rank: ranks.iter().map(|r| r.peak.total).collect(),
        schedule,
        ranks,
        recompute_counts,
    };
    Ok(SimOutcome { timeline, transformer_at_peak })
}

/// Simulates per-rank activation memory over one 1F1B iteration.
///
/// Rank 0 additionally holds the embedding dropout mask of every in-flight
/// microbatch (and the output-head activations when `p = 1`). Without
/// deallocation, each in-flight microbatch also pins its stage-output tensor.
/// Microbatch-level strategies take their stored modes from `window`.
pub fn simulate_memory(
    model: &MemoryModel,
    shape: &ModelShape,
    layout: &ParallelLayout,
    strategy: &RecomputeStrategy,
    options: SimOptions,
    window: Option<&WindowPlan>,
) -> Result<MemoryTimeline, PipelineError> {
    simulate(model, shape, layout, strategy, options, window).map(|o| o.timeline)
}

/// Rank-0 peak bytes, with the transformer share scaled by the interleave
/// factor when `m > 1`.
pub fn first_stage_peak(
    model: &MemoryModel,
    shape: &ModelShape,
    layout: &ParallelLayout,
    strategy: &RecomputeStrategy,
    options: SimOptions,
    window: Option<&WindowPlan>,
) -> Result<u64, PipelineError> {
    if layout.interleave > 1 && matches!(strategy, RecomputeStrategy::MicrobatchLevel { .. }) {
        return Err(PipelineError::InterleavedWindow);
    }
    let outcome = simulate(model, shape, layout, strategy, options, window)?;
    let peak = outcome.timeline.ranks[0].peak;
    if layout.interleave <= 1 {
        return Ok(peak.total);
    }
    let scaled = exact::floor_u64(&exact::mul(&outcome.transformer_at_peak[0], &interleave_factor(layout))?)?;
    Ok(peak.total - peak.transformer + scaled)
}

/// Stored modes chosen for one stage by the moving window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageWindow {
    pub rank: u64,
    /// `modes[mb - 1]`.
    pub modes: Vec<StoredMode>,
    pub fully_stored: u64,
    pub checkpointed: u64,
}

impl StageWindow {
    pub fn fully_stored_microbatches(&self) -> Vec<u64> {
        (1..=self.modes.len() as u64).filter(|&mb| self.modes[mb as usize - 1] == StoredMode::FullyStored).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub budget: u64,
    /// Smallest budget that fits with every microbatch checkpointed.
    pub minimum_budget: u64,
    pub stages: Vec<StageWindow>,
}

impl WindowPlan {
    pub fn recompute_counts(&self) -> Vec<u64> {
        self.stages.iter().map(|s| s.checkpointed).collect()
    }

    /// Recomputed microbatch-stage passes over all `p · n_mb` passes.
    pub fn recomputed_fraction(&self) -> Exact {
        let total: u64 = self.stages.iter().map(|s| s.modes.len() as u64).sum();
        let recomputed: u64 = self.recompute_counts().iter().sum();
        Exact::new(recomputed.into(), total.max(1).into())
    }
}

/// Decides, per stage, which microbatches keep all activations within `budget`
/// bytes of activation memory.
///
/// Walking each stage's 1F1B order, a microbatch is fully stored when the
/// stage's worst case stays within budget: the microbatches already in flight,
/// this one fully stored, and the remaining in-flight slots checkpointed.
/// Backward passes free their slot before the next forward is admitted.
pub fn microbatch_window_plan(
    model: &MemoryModel,
    shape: &ModelShape,
    layout: &ParallelLayout,
    inner: InnerRecompute,
    sequence_parallel: bool,
    budget: u64,
    options: SimOptions,
) -> Result<WindowPlan, PipelineError> {
    validate(shape, layout)?;
    let costs = stage_costs(model, shape, layout, inner.into(), sequence_parallel, options)?;
    let budget_exact = Exact::from_integer(budget.into());

    let mut minimum = Exact::from_integer(0);
    for (stage, cost) in costs.iter().enumerate() {
        let slots = in_flight(layout.pipeline, stage as u64);
        let floor = exact::scale(&cost.total(StoredMode::Checkpointed)?, slots)?;
        if floor > minimum {
            minimum = floor;
        }
    }
    let minimum_budget = exact::ceil_u64(&minimum)?;
    if budget < minimum_budget {
        return Err(PipelineError::InfeasibleBudget { budget, minimum: minimum_budget });
    }

    let mut stages = Vec::with_capacity(costs.len());
    for (stage, cost) in costs.iter().enumerate() {
        let stage = stage as u64;
        let slots = in_flight(layout.pipeline, stage);
        let full = cost.total(StoredMode::FullyStored)?;
        let ckpt = cost.total(StoredMode::Checkpointed)?;
        let mut modes = vec![StoredMode::Checkpointed; layout.microbatches as usize];
        let mut resident: Vec<u64> = Vec::new();
        let mut resident_bytes = Exact::from_integer(0);
        for (kind, mb) in stage_program(layout.pipeline, layout.microbatches, stage) {
            let idx = mb as usize - 1;
            match kind {
                EventKind::Forward => {
                    let open_slots = slots - 1 - resident.len() as u64;
                    let projected = exact::add(&exact::add(&resident_bytes, &full)?, &exact::scale(&ckpt, open_slots)?)?;
                    let mode = if projected <= budget_exact { StoredMode::FullyStored } else { StoredMode::Checkpointed };
                    modes[idx] = mode;
                    resident.push(mb);
                    resident_bytes = exact::add(&resident_bytes, if mode == StoredMode::FullyStored { &full } else { &ckpt })?;
                }
                EventKind::Backward => {
                    resident.retain(|&r| r != mb);
                    let freed = if modes[idx] == StoredMode::FullyStored { &full } else { &ckpt };
                    resident_bytes = resident_bytes - freed.clone();
                }
                EventKind::Recompute => {}
            }
        }
        let fully_stored = modes.iter().filter(|&&m| m == StoredMode::FullyStored).count() as u64;
        stages.push(StageWindow {
            rank: stage,
            checkpointed: modes.len() as u64 - fully_stored,
            fully_stored,
            modes,
        });
    }
    Ok(WindowPlan { budget, minimum_budget, stages })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank_sequence(s: &Schedule, rank: u64) -> Vec<String> {
        s.rank_events(rank)
            .map(|e| format!("{}{}", &e.kind.as_str()[..1].to_uppercase(), e.microbatch))
            .collect()
    }

    #[test]
    fn two_by_two_schedule() {
        let s = build_1f1b(2, 2).unwrap();
        assert_eq!(rank_sequence(&s, 0), ["F1", "F2", "B1", "B2"]);
        assert_eq!(rank_sequence(&s, 1), ["F1", "B1", "F2", "B2"]);
    }

    #[test]
    fn single_stage_alternates() {
        let s = build_1f1b(1, 3).unwrap();
        assert_eq!(rank_sequence(&s, 0), ["F1", "B1", "F2", "B2", "F3", "B3"]);
    }

    #[test]
    fn four_stages_nine_microbatches_warmup() {
        let s = build_1f1b(4, 9).unwrap();
        let r0 = rank_sequence(&s, 0);
        assert_eq!(&r0[..5], ["F1", "F2", "F3", "F4", "B1"]);
        let r3 = rank_sequence(&s, 3);
        assert_eq!(&r3[..3], ["F1", "B1", "F2"]);
    }

    #[test]
    fn cannot_fill_pipeline() {
        assert_eq!(build_1f1b(4, 3), Err(PipelineError::NotFilled { pipeline: 4, microbatches: 3 }));
        assert!(build_1f1b(4, 3).unwrap_err().to_string().contains("pipeline cannot be filled"));
    }

    #[test]
    fn in_flight_values() {
        assert_eq!(in_flight(35, 0), 35);
        assert_eq!(in_flight(4, 4), 0);
        assert_eq!(in_flight(4, 2), 2);
        assert_eq!(in_flight(4, 9), 0);
    }

    #[test]
    fn dependencies_respected() {
        let s = build_1f1b(3, 5).unwrap();
        let when = |rank, kind, mb| {
            s.events.iter().find(|e| e.rank == rank && e.kind == kind && e.microbatch == mb).unwrap().step
        };
        for mb in 1..=5 {
            assert!(when(0, EventKind::Forward, mb) < when(1, EventKind::Forward, mb));
            assert!(when(1, EventKind::Forward, mb) < when(2, EventKind::Forward, mb));
            assert!(when(2, EventKind::Backward, mb) < when(1, EventKind::Backward, mb));
            assert!(when(1, EventKind::Backward, mb) < when(0, EventKind::Backward, mb));
        }
    }

    #[test]
    fn recompute_precedes_backward() {
        let modes = vec![vec![StoredMode::Checkpointed; 4]; 2];
        let s = build_schedule(2, 4, &modes).unwrap();
        for rank in 0..2 {
            let ev: Vec<_> = s.rank_events(rank).collect();
            for (i, e) in ev.iter().enumerate() {
                if e.kind == EventKind::Backward {
                    assert_eq!(ev[i - 1].kind, EventKind::Recompute);
                    assert_eq!(ev[i - 1].microbatch, e.microbatch);
                    assert_eq!(ev[i - 1].step + 1, e.step);
                }
            }
        }
    }

    fn small() -> (ModelShape, ParallelLayout) {
        (ModelShape::new(4, 64, 8, 32, 100), ParallelLayout::new(2, 4, 1).with_microbatches(9))
    }

    #[test]
    fn p1_peak_matches_per_layer_times_l_plus_extras() {
        let m = MemoryModel::default();
        let shape = ModelShape::new(4, 64, 8, 32, 100);
        let layout = ParallelLayout::new(2, 1, 2).with_microbatches(3);
        let s = RecomputeStrategy::SEQUENCE_PARALLEL;
        let t = simulate_memory(&m, &shape, &layout, &s, SimOptions { dealloc: true }, None).unwrap();
        let expected = m.per_layer_bytes(&shape, &layout, &s).unwrap() * 8 + m.extras_bytes(&shape, &layout).unwrap().sum();
        assert_eq!(t.peak_per_rank, vec![expected]);
    }

    #[test]
    fn memory_returns_to_zero() {
        let m = MemoryModel::default();
        let (shape, layout) = small();
        for s in RecomputeStrategy::all().iter().filter(|s| matches!(s, RecomputeStrategy::Uniform { .. })) {
            for dealloc in [false, true] {
                let t = simulate_memory(&m, &shape, &layout, s, SimOptions { dealloc }, None).unwrap();
                for r in &t.ranks {
                    assert_eq!(r.points.last().unwrap().bytes, 0);
                }
            }
        }
    }

    #[test]
    fn dealloc_difference_per_rank() {
        let m = MemoryModel::default();
        let (shape, layout) = small();
        let s = RecomputeStrategy::SEQUENCE_SELECTIVE;
        let on = simulate_memory(&m, &shape, &layout, &s, SimOptions { dealloc: true }, None).unwrap();
        let off = simulate_memory(&m, &shape, &layout, &s, SimOptions { dealloc: false }, None).unwrap();
        for stage in 0..4 {
            let diff = off.peak_per_rank[stage as usize] - on.peak_per_rank[stage as usize];
            assert_eq!(diff, m.dealloc_savings_bytes(&shape, &layout, stage).unwrap());
        }
    }

    #[test]
    fn later_ranks_decrease_linearly() {
        let m = MemoryModel::default();
        let (shape, layout) = small();
        let t = simulate_memory(&m, &shape, &layout, &RecomputeStrategy::SEQUENCE_PARALLEL, SimOptions::default(), None).unwrap();
        let peaks = &t.peak_per_rank;
        let step = peaks[1] - peaks[2];
        assert!(step > 0);
        assert_eq!(peaks[2] - peaks[3], step);
        assert!(peaks[0] - peaks[1] > step, "rank 0 carries the embedding extras");
    }

    #[test]
    fn microbatch_level_needs_window() {
        let m = MemoryModel::default();
        let (shape, layout) = small();
        let s = RecomputeStrategy::MicrobatchLevel { inner: InnerRecompute::Full, sequence_parallel: true };
        assert_eq!(
            simulate_memory(&m, &shape, &layout, &s, SimOptions::default(), None),
            Err(PipelineError::MissingWindow)
        );
    }

    #[test]
    fn window_with_one_spare_full_slot() {
        let m = MemoryModel::default();
        let (shape, layout) = small();
        let opts = SimOptions { dealloc: true };
        let min = microbatch_window_plan(&m, &shape, &layout, InnerRecompute::Full, true, u64::MAX, opts)
            .unwrap()
            .minimum_budget;
        let costs = stage_costs(&m, &shape, &layout, Recompute::Full, true, opts).unwrap();
        let extra = exact::ceil_u64(&(costs[0].total(StoredMode::FullyStored).unwrap() - costs[0].total(StoredMode::Checkpointed).unwrap())).unwrap();
        let plan = microbatch_window_plan(&m, &shape, &layout, InnerRecompute::Full, true, min + extra, opts).unwrap();
        assert_eq!(plan.stages[0].fully_stored_microbatches(), vec![1, 5, 9]);
        let counts = plan.recompute_counts();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    }

    #[test]
    fn window_extremes() {
        let m = MemoryModel::default();
        let (shape, layout) = small();
        let opts = SimOptions { dealloc: true };
        let unlimited = microbatch_window_plan(&m, &shape, &layout, InnerRecompute::Selective, true, u64::MAX, opts).unwrap();
        assert!(unlimited.recompute_counts().iter().all(|&c| c == 0));
        assert_eq!(unlimited.recomputed_fraction(), Exact::from_integer(0));
        let tight = microbatch_window_plan(&m, &shape, &layout, InnerRecompute::Selective, true, unlimited.minimum_budget, opts).unwrap();
        assert_eq!(tight.stages[0].fully_stored, 0);
        let err = microbatch_window_plan(&m, &shape, &layout, InnerRecompute::Selective, true, unlimited.minimum_budget - 1, opts);
        assert_eq!(err, Err(PipelineError::InfeasibleBudget { budget: unlimited.minimum_budget - 1, minimum: unlimited.minimum_budget }));
    }
}
