//! Subcommand bodies.

use std::io::{self, Write};

use actplan_core::flops::approx_ratio;
use actplan_core::{
    first_stage_peak, interleave_factor, microbatch_window_plan, parse_config, preset, simulate_memory,
    validate_with_hardware, Config, Exact, FlopsModel, MemoryModel, MemoryReport, ModelShape, ParallelLayout,
    PipelineError, PlanCandidate, Planner, RationalValue, RecomputeStrategy, SearchSpace, SelectiveFlops, SimOptions,
    WindowPlan,
};
use actplan_seqpar::suite::{run_verify, CheckResult};
use serde::Serialize;
use thiserror::Error;

use crate::render::{self, gib, percent, signed_gib};
use crate::{Common, Format, Source, Toggle, EXIT_INFEASIBLE, EXIT_INVALID, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("writing output: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Invalid(_) | CliError::Io(_) => EXIT_INVALID,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
        }
    }
}

fn invalid(e: impl ToString) -> CliError {
    CliError::Invalid(e.to_string())
}

/// A validated configuration plus the model knobs shared by every subcommand.
pub struct Context {
    pub source: String,
    pub config: Config,
    pub memory: MemoryModel,
    pub options: SimOptions,
}

impl Context {
    pub fn load(source: &Source, common: &Common) -> Result<Self, CliError> {
        let (name, config) = match (&source.config, &source.preset) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
                let config = parse_config(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
                (path.display().to_string(), config)
            }
            (None, Some(name)) => (name.clone(), preset(name).map_err(|e| CliError::Usage(e.to_string()))?),
            (None, None) => return Err(CliError::Usage("one of --config or --preset is required".into())),
        };
        validate_with_hardware(&config.shape, &config.layout, &config.hardware).map_err(invalid)?;
        let mut memory = MemoryModel::new(config.bytes);
        if let Some(bytes) = common.optimizer_bytes {
            memory.optimizer_bytes_per_param = bytes;
        }
        Ok(Self { source: name, config, memory, options: SimOptions { dealloc: common.dealloc == Toggle::On } })
    }

    fn shape(&self) -> &ModelShape {
        &self.config.shape
    }

    fn layout(&self) -> &ParallelLayout {
        &self.config.layout
    }

    /// Activation budget left on a device after weights and optimizer state.
    fn activation_budget(&self) -> Result<u64, CliError> {
        let f = self.memory.params_and_optimizer_bytes(self.shape(), self.layout()).map_err(invalid)?;
        Ok(self.config.hardware.device_mem.saturating_sub(f.param_bytes.saturating_add(f.optimizer_bytes)))
    }

    /// The moving-window plan for microbatch-level strategies.
    fn window(&self, strategy: &RecomputeStrategy) -> Result<Option<WindowPlan>, CliError> {
        let RecomputeStrategy::MicrobatchLevel { inner, sequence_parallel } = *strategy else {
            return Ok(None);
        };
        let budget = self.activation_budget()?;
        match microbatch_window_plan(&self.memory, self.shape(), self.layout(), inner, sequence_parallel, budget, self.options) {
            Ok(plan) => Ok(Some(plan)),
            Err(e @ PipelineError::InfeasibleBudget { .. }) => Err(CliError::Infeasible(e.to_string())),
            Err(e) => Err(invalid(e)),
        }
    }
}

#[derive(Serialize)]
struct MemoryOutput<'a> {
    source: &'a str,
    shape: ModelShape,
    layout: ParallelLayout,
    device_mem: u64,
    #[serde(flatten)]
    report: MemoryReport,
    percent_of_baseline: RationalValue,
    fits: bool,
}

pub fn memory(ctx: &Context, strategy: &RecomputeStrategy, format: Format, out: &mut dyn Write) -> Result<i32, CliError> {
    let report = ctx.memory.report(ctx.shape(), ctx.layout(), strategy).map_err(invalid)?;
    let share = ctx.memory.percent_of_baseline(ctx.shape(), ctx.layout(), strategy).map_err(invalid)?;
    let device_mem = ctx.config.hardware.device_mem;
    let o = MemoryOutput {
        source: &ctx.source,
        shape: *ctx.shape(),
        layout: *ctx.layout(),
        device_mem,
        fits: report.grand_total <= device_mem,
        percent_of_baseline: share.into(),
        report,
    };
    let r = &o.report;
    let e = &r.extras;
    let rows: Vec<(&str, u64)> = vec![
        ("activations per layer", r.per_layer),
        ("transformer layers, first stage", r.transformer_total_first_stage),
        ("transformer layers, interleaved", r.transformer_total_interleaved),
        ("embedding dropout mask", e.embedding_dropout),
        ("final layer norm", e.final_layernorm),
        ("output projection input", e.output_proj_input),
        ("logits", e.logits),
        ("parameters", r.params),
        ("optimizer state", r.optimizer_state),
        ("total", r.grand_total),
        ("device memory", device_mem),
        ("rank-0 output deallocation saves", r.dealloc_savings_rank0),
    ];
    match format {
        Format::Json => render::json(out, &o)?,
        Format::Csv => render::csv(out, &["quantity", "bytes"], rows)?,
        Format::Table => {
            writeln!(out, "{}  strategy {}", o.source, r.strategy)?;
            let mut cells: Vec<Vec<String>> = rows.iter().map(|(k, v)| vec![(*k).to_owned(), v.to_string(), gib(*v)]).collect();
            cells.push(vec!["per layer vs tensor-parallel baseline".into(), String::new(), percent(&share)]);
            render::table(out, &["quantity", "bytes", "GiB"], &cells)?;
            for note in &r.notes {
                writeln!(out, "note: {note}")?;
            }
        }
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct FlopsOutput<'a> {
    source: &'a str,
    selective_flops: SelectiveFlops,
    #[serde(flatten)]
    report: actplan_core::FlopsReport,
    approx_ratio: RationalValue,
    full_recompute_hardware_flops: u128,
    /// Throughput gain over full recomputation at equal achieved FLOP rate.
    predicted_speedup_vs_full: RationalValue,
    iteration_time: Option<RationalValue>,
    devices: u64,
    peak_flops_per_device: u64,
}

pub fn flops(
    ctx: &Context,
    strategy: &RecomputeStrategy,
    iter_time: Option<Exact>,
    selective: SelectiveFlops,
    format: Format,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let model = FlopsModel::new(selective);
    let fraction = ctx.window(strategy)?.map(|w| w.recomputed_fraction());
    let batch = ctx.layout().global_batch();
    let hw = ctx.config.hardware;
    let report = model
        .report(ctx.shape(), batch, strategy, fraction, iter_time.as_ref().map(|t| (t, &hw)))
        .map_err(invalid)?;
    let full = model.hardware_flops(ctx.shape(), batch, &RecomputeStrategy::FULL, None).map_err(invalid)?;
    let speedup = actplan_core::flops::predicted_speedup(full, report.hardware_flops_per_iter);
    let o = FlopsOutput {
        source: &ctx.source,
        selective_flops: selective,
        approx_ratio: approx_ratio(ctx.shape()).into(),
        full_recompute_hardware_flops: full,
        predicted_speedup_vs_full: speedup.into(),
        iteration_time: iter_time.map(Into::into),
        devices: hw.devices,
        peak_flops_per_device: hw.peak_flops_per_device,
        report,
    };
    let r = &o.report;
    let pct = |v: &Option<RationalValue>| v.map_or_else(|| "-".to_owned(), |v| format!("{:.1}%", 100.0 * v.value));
    match format {
        Format::Json => render::json(out, &o)?,
        Format::Csv => render::csv(
            out,
            &["strategy", "batch", "model_flops", "hardware_flops", "hw_model_ratio", "predicted_speedup_vs_full", "mfu", "hfu"],
            [(
                r.strategy.as_str(),
                r.batch,
                r.model_flops_per_iter.to_string(),
                r.hardware_flops_per_iter.to_string(),
                r.hw_model_ratio.value,
                o.predicted_speedup_vs_full.value,
                r.mfu.map(|v| v.value),
                r.hfu.map(|v| v.value),
            )],
        )?,
        Format::Table => {
            writeln!(out, "{}  strategy {}  batch {}", o.source, r.strategy, r.batch)?;
            let time = o.iteration_time.map_or_else(|| "-".to_owned(), |t| format!("{}", t.value));
            render::table(
                out,
                &["model FLOPs", "hardware FLOPs", "hw/model", "iteration time (s)", "throughput increase", "MFU", "HFU"],
                &[vec![
                    format!("{:.4e}", r.model_flops_per_iter as f64),
                    format!("{:.4e}", r.hardware_flops_per_iter as f64),
                    format!("{:.4}", r.hw_model_ratio.value),
                    time,
                    format!("{:.1}%", 100.0 * o.predicted_speedup_vs_full.value),
                    pct(&r.mfu),
                    pct(&r.hfu),
                ]],
            )?;
            writeln!(out, "throughput increase is predicted from hardware FLOPs against full recomputation")?;
        }
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct EventRow {
    rank: u64,
    step: u64,
    event: &'static str,
    microbatch: u64,
    stored_mode: &'static str,
    bytes_after_event: u64,
}

#[derive(Serialize)]
struct PipelineOutput<'a> {
    source: &'a str,
    strategy: String,
    dealloc: bool,
    pipeline: u64,
    microbatches: u64,
    interleave_factor: RationalValue,
    peak_per_rank: Vec<u64>,
    /// Rank-0 peak with the transformer share scaled by the interleave factor.
    rank0_peak: u64,
    recompute_counts: Vec<u64>,
    window: Option<WindowPlan>,
    events: Vec<EventRow>,
}

pub const CSV_COLUMNS: [&str; 6] = ["rank", "step", "event", "microbatch", "stored_mode", "bytes_after_event"];

pub fn pipeline_sim(ctx: &Context, strategy: &RecomputeStrategy, format: Format, out: &mut dyn Write) -> Result<i32, CliError> {
    let window = ctx.window(strategy)?;
    let timeline = simulate_memory(&ctx.memory, ctx.shape(), ctx.layout(), strategy, ctx.options, window.as_ref())
        .map_err(invalid)?;
    let rank0_peak = first_stage_peak(&ctx.memory, ctx.shape(), ctx.layout(), strategy, ctx.options, window.as_ref())
        .map_err(invalid)?;
    let events: Vec<EventRow> = timeline
        .rows()
        .map(|(rank, step, event, microbatch, stored_mode, bytes_after_event)| EventRow {
            rank,
            step,
            event,
            microbatch,
            stored_mode,
            bytes_after_event,
        })
        .collect();
    let o = PipelineOutput {
        source: &ctx.source,
        strategy: timeline.strategy.clone(),
        dealloc: timeline.dealloc,
        pipeline: ctx.layout().pipeline,
        microbatches: ctx.layout().microbatches,
        interleave_factor: interleave_factor(ctx.layout()).into(),
        peak_per_rank: timeline.peak_per_rank.clone(),
        rank0_peak,
        recompute_counts: timeline.recompute_counts.clone(),
        window,
        events,
    };
    match format {
        Format::Json => render::json(out, &o)?,
        Format::Csv => render::csv(out, &CSV_COLUMNS, &o.events)?,
        Format::Table => {
            writeln!(
                out,
                "{}  strategy {}  p={} n_mb={}  dealloc {}",
                o.source,
                o.strategy,
                o.pipeline,
                o.microbatches,
                if o.dealloc { "on" } else { "off" }
            )?;
            let rows: Vec<Vec<String>> = timeline
                .ranks
                .iter()
                .map(|r| {
                    vec![
                        r.rank.to_string(),
                        r.peak.total.to_string(),
                        gib(r.peak.total),
                        o.recompute_counts[r.rank as usize].to_string(),
                    ]
                })
                .collect();
            render::table(out, &["rank", "peak bytes", "peak GiB", "recomputed microbatches"], &rows)?;
            writeln!(out, "rank-0 peak with interleaving: {} bytes ({} GiB)", o.rank0_peak, gib(o.rank0_peak))?;
            if let Some(w) = &o.window {
                for s in &w.stages {
                    writeln!(out, "rank {} fully stores microbatches {{{}}}", s.rank, ranges(&s.fully_stored_microbatches()))?;
                }
            }
        }
    }
    Ok(EXIT_OK)
}

/// `1, 2, 3, 5, 9` as `1-3, 5, 9`.
fn ranges(ids: &[u64]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        let mut j = i;
        while j + 1 < ids.len() && ids[j + 1] == ids[j] + 1 {
            j += 1;
        }
        parts.push(if j > i + 1 { format!("{}-{}", ids[i], ids[j]) } else { ids[i].to_string() });
        if j == i + 1 {
            parts.push(ids[j].to_string());
        }
        i = j + 1;
    }
    parts.join(", ")
}

fn divisors(n: u64) -> Vec<u64> {
    (1..=n).filter(|k| n % k == 0).collect()
}

fn with(mut values: Vec<u64>, extra: u64) -> Vec<u64> {
    values.push(extra);
    values.sort_unstable();
    values.dedup();
    values
}

/// Layouts over the config's device count and global batch.
pub fn search_space(config: &Config, options: SimOptions) -> SearchSpace {
    let devices = config.hardware.devices;
    let pipeline: Vec<u64> = divisors(config.shape.layers).into_iter().filter(|p| devices % p == 0).collect();
    SearchSpace {
        tensor: with(vec![1, 2, 4, 8].into_iter().filter(|t| devices % t == 0).collect(), config.layout.tensor),
        pipeline: with(pipeline, config.layout.pipeline),
        interleave: with(vec![1, 2, 3, 4], config.layout.interleave),
        microbatch: with(vec![1, 2, 4, 8], config.layout.microbatch),
        strategies: RecomputeStrategy::all(),
        global_batch: config.layout.global_batch(),
        options,
    }
}

#[derive(Serialize)]
struct PlanOutput<'a> {
    source: &'a str,
    devices: u64,
    device_mem: u64,
    global_batch: u64,
    evaluated: usize,
    feasible_count: usize,
    min_shortfall: Option<u64>,
    candidates: &'a [PlanCandidate],
}

pub fn plan(ctx: &Context, top: Option<usize>, selective: SelectiveFlops, format: Format, out: &mut dyn Write) -> Result<i32, CliError> {
    let planner = Planner::new(ctx.memory, FlopsModel::new(selective));
    let space = search_space(&ctx.config, ctx.options);
    let report = planner.enumerate_plans(ctx.shape(), &ctx.config.hardware, &space).map_err(invalid)?;
    let shown = top.unwrap_or(report.candidates.len()).min(report.candidates.len());
    let o = PlanOutput {
        source: &ctx.source,
        devices: ctx.config.hardware.devices,
        device_mem: ctx.config.hardware.device_mem,
        global_batch: space.global_batch,
        evaluated: report.candidates.len(),
        feasible_count: report.feasible_count,
        min_shortfall: report.min_shortfall,
        candidates: &report.candidates[..shown],
    };
    let rows = o.candidates.iter().enumerate().map(|(i, c)| {
        let l = &c.layout;
        (
            i + 1,
            l.tensor,
            l.pipeline,
            l.interleave,
            l.data_parallel,
            l.microbatch,
            l.microbatches,
            c.strategy.as_str(),
            c.peak_bytes,
            c.total_bytes,
            c.headroom.to_string(),
            c.hardware_flops.to_string(),
            c.feasible,
        )
    });
    match format {
        Format::Json => render::json(out, &o)?,
        Format::Csv => render::csv(
            out,
            &["rank", "t", "p", "m", "d", "b", "n_mb", "strategy", "peak_bytes", "total_bytes", "headroom", "hardware_flops", "feasible"],
            rows,
        )?,
        Format::Table => {
            writeln!(
                out,
                "{}  {} devices  {} GiB each  global batch {}  {} of {} candidates feasible",
                o.source,
                o.devices,
                gib(o.device_mem),
                o.global_batch,
                o.feasible_count,
                o.evaluated
            )?;
            let cells: Vec<Vec<String>> = o
                .candidates
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let l = &c.layout;
                    vec![
                        (i + 1).to_string(),
                        l.tensor.to_string(),
                        l.pipeline.to_string(),
                        l.interleave.to_string(),
                        l.data_parallel.to_string(),
                        l.microbatch.to_string(),
                        c.strategy.clone(),
                        gib(c.peak_bytes),
                        gib(c.total_bytes),
                        signed_gib(c.headroom),
                        format!("{:.4e}", c.hardware_flops as f64),
                        if c.feasible { "yes" } else { "no" }.to_owned(),
                    ]
                })
                .collect();
            render::table(
                out,
                &["#", "t", "p", "m", "d", "b", "strategy", "peak GiB", "total GiB", "headroom GiB", "hardware FLOPs", "fits"],
                &cells,
            )?;
            if let Some(short) = o.min_shortfall {
                writeln!(out, "nothing fits; smallest shortfall {short} bytes ({} GiB)", gib(short))?;
            }
        }
    }
    Ok(if report.feasible_count == 0 { EXIT_INFEASIBLE } else { EXIT_OK })
}

pub fn verify(seed: u64, format: Format, out: &mut dyn Write) -> Result<i32, CliError> {
    let report = run_verify(seed);
    match format {
        Format::Json => render::json(out, &report)?,
        Format::Csv => render::csv(
            out,
            &["name", "passed", "cases", "max_error", "tolerance", "detail"],
            report.checks.iter().map(|c: &CheckResult| (&c.name, c.passed, c.cases, c.max_error, c.tolerance, &c.detail)),
        )?,
        Format::Table => {
            writeln!(out, "seed {}", report.seed)?;
            let rows: Vec<Vec<String>> = report
                .checks
                .iter()
                .map(|c| {
                    vec![
                        c.name.clone(),
                        if c.passed { "pass" } else { "FAIL" }.to_owned(),
                        c.cases.to_string(),
                        format!("{:.3e}", c.max_error),
                        format!("{:.0e}", c.tolerance),
                    ]
                })
                .collect();
            render::table(out, &["check", "result", "cases", "max error", "tolerance"], &rows)?;
        }
    }
    Ok(if report.passed { EXIT_OK } else { EXIT_INVALID })
}
