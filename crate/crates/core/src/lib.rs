//! Activation memory, FLOPs and pipeline-schedule models for large
//! transformer training with tensor, sequence and pipeline parallelism.

pub mod config;
pub mod exact;
pub mod flops;
pub mod memory;
pub mod model;
pub mod pipeline;
pub mod planner;

pub use config::{parse_config, preset, serialize_config, Config, ConfigError, PRESET_NAMES};
pub use exact::{Exact, RationalValue};
pub use flops::{FlopsError, FlopsModel, FlopsReport, SelectiveFlops};
pub use memory::{interleave_factor, ExtraTerms, MemoryError, MemoryModel, MemoryReport};
pub use model::{
    validate, validate_with_hardware, ByteConvention, Hardware, InnerRecompute, ModelShape, ParallelLayout, Recompute,
    RecomputeStrategy, Violation, Violations,
};
pub use pipeline::{
    build_1f1b, build_schedule, first_stage_peak, in_flight, microbatch_window_plan, simulate_memory, EventKind,
    MemoryTimeline, PipelineError, Schedule, ScheduleEvent, SimOptions, StoredMode, WindowPlan,
};
pub use planner::{PlanCandidate, PlanError, PlanReport, Planner, SearchSpace};
