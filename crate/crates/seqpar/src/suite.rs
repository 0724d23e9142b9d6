//! The property suite behind `actplan verify`.

use actplan_core::exact::Exact;
use actplan_core::{
    preset, simulate_memory, MemoryModel, ModelShape, ParallelLayout, Recompute, RecomputeStrategy, SimOptions,
    PRESET_NAMES,
};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{check_recompute, selective_recompute_attention, BlockConfig, LayerParams, RecomputePolicy};
use crate::collectives::{all_gather, all_reduce, reduce_scatter, CollectiveKind, CommTag};
use crate::exec::{max_abs_diff, run_layer, Execution};
use crate::gradcheck::gradcheck;
use crate::parallel::{parallel_block_forward, ParallelMode};
use crate::reference::reference_block_forward;
use crate::tensor::{RankShardedTensor, ShardAxis};

pub const DEFAULT_SEED: u64 = 42;
pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const GRADCHECK_TOL: f64 = 1e-6;
pub const FLOAT_COLLECTIVE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn check(name: &str, cases: usize, max_error: f64, tolerance: f64, failures: Vec<String>) -> CheckResult {
    let passed = failures.is_empty() && max_error <= tolerance;
    let detail = if failures.is_empty() { String::new() } else { failures.join("; ") };
    CheckResult { name: name.into(), passed, cases, max_error, tolerance, detail }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// A small shape that splits over 1, 2 and 4 ranks.
pub fn random_toy_config(rng: &mut ChaCha8Rng) -> BlockConfig {
    let heads = 4 * rng.random_range(1..=2);
    let head_dim = rng.random_range(1..=3);
    let seq = 4 * rng.random_range(1..=2);
    let batch = rng.random_range(1..=2);
    BlockConfig::new(heads, heads * head_dim, seq, batch).with_causal(rng.random_bool(0.5)).with_seed(rng.random())
}

pub fn collective_identity_integers(rng: &mut ChaCha8Rng, cases: usize) -> CheckResult {
    let mut failures = Vec::new();
    for case in 0..cases {
        let t = rng.random_range(1..=4usize);
        let axis = Axis(rng.random_range(0..2usize));
        let (mut rows, mut cols) = (rng.random_range(1..=3usize), rng.random_range(1..=3usize));
        if axis.index() == 0 { rows *= t } else { cols *= t }
        let partials: Vec<Array2<i64>> =
            (0..t).map(|_| Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1000..=1000))).collect();
        let direct = all_reduce(&partials);
        let composed = reduce_scatter(&partials, axis).and_then(|s| all_gather(&s, axis));
        if direct != composed {
            failures.push(format!("case {case}: t={t} shape=({rows},{cols})"));
        }
    }
    check("collective_identity_integers", cases, 0.0, 0.0, failures)
}

pub fn collective_identity_floats(rng: &mut ChaCha8Rng, cases: usize) -> CheckResult {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for case in 0..cases {
        let t = rng.random_range(1..=4usize);
        let rows = t * rng.random_range(1..=3usize);
        let partials: Vec<_> = (0..t).map(|_| random_matrix(rng, rows, 3)).collect();
        match (all_reduce(&partials), reduce_scatter(&partials, Axis(0)).and_then(|s| all_gather(&s, Axis(0)))) {
            (Ok(a), Ok(b)) => {
                for (x, y) in a.iter().zip(&b) {
                    worst = worst.max((x - y).iter().zip(y.iter()).fold(0.0, |m, (d, _)| m.max(d.abs())));
                }
            }
            _ => failures.push(format!("case {case} failed to run")),
        }
    }
    check("collective_identity_floats", cases, worst, FLOAT_COLLECTIVE_TOL, failures)
}

/// Sharded forward/backward against the serial layer for t ∈ {1, 2, 4}.
pub fn parallel_equivalence(rng: &mut ChaCha8Rng, shapes: usize, mode: ParallelMode) -> CheckResult {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut cases = 0;
    for _ in 0..shapes {
        let cfg = random_toy_config(rng);
        let params = LayerParams::random(cfg.hidden, rng.random());
        let x = random_matrix(rng, cfg.tokens(), cfg.hidden);
        let dy = random_matrix(rng, cfg.tokens(), cfg.hidden);
        let reference = match run_layer(Execution::Reference, &x, &params, &cfg, RecomputePolicy::None, &dy) {
            Ok(r) => r,
            Err(e) => {
                failures.push(e.to_string());
                continue;
            }
        };
        for t in [1, 2, 4] {
            cases += 1;
            match run_layer(Execution::Parallel { mode, ranks: t }, &x, &params, &cfg, RecomputePolicy::None, &dy) {
                Ok(run) => {
                    let diff = max_abs_diff(&reference, &run);
                    if t == 1 && diff != 0.0 {
                        failures.push(format!("t=1 differs from the reference by {diff:e}"));
                    }
                    worst = worst.max(diff);
                }
                Err(e) => failures.push(format!("t={t}: {e}")),
            }
        }
    }
    let name = match mode {
        ParallelMode::SequenceTensor => "sequence_parallel_equivalence",
        ParallelMode::Tensor => "tensor_parallel_equivalence",
    };
    check(name, cases, worst, EQUIVALENCE_TOL, failures)
}

pub fn gradient_checks(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let plans = [
        (Execution::Reference, RecomputePolicy::None),
        (Execution::sequence(2), RecomputePolicy::Selective),
        (Execution::tensor(2), RecomputePolicy::None),
        (Execution::sequence(4), RecomputePolicy::None),
    ];
    for (exec, policy) in plans {
        let cfg = BlockConfig::new(4, 8, 4, 2).with_dropout(0.1).with_causal(rng.random_bool(0.5)).with_seed(rng.random());
        let params = LayerParams::random(cfg.hidden, rng.random());
        let x = random_matrix(rng, cfg.tokens(), cfg.hidden);
        let w = random_matrix(rng, cfg.tokens(), cfg.hidden);
        match gradcheck(exec, &x, &params, &cfg, policy, &w) {
            Ok(report) => worst = worst.max(report.max_rel_error),
            Err(e) => failures.push(e.to_string()),
        }
    }
    check("finite_difference_gradients", plans.len(), worst, GRADCHECK_TOL, failures)
}

/// Exact per-layer bytes from the analytical model.
fn analytical(cfg: &BlockConfig, t: usize, policy: Recompute, sequence_parallel: bool) -> Exact {
    let shape = ModelShape::new(cfg.heads as u64, cfg.hidden as u64, 1, cfg.seq_len as u64, 1);
    MemoryModel::default()
        .per_layer_exact(&shape, &ParallelLayout::new(t as u64, 1, cfg.batch as u64), policy, sequence_parallel)
        .expect("valid toy shape")
}

/// Instrumented per-rank bytes equal the analytical per-layer formulas.
pub fn ledger_equality(rng: &mut ChaCha8Rng, shapes: usize) -> CheckResult {
    let mut failures = Vec::new();
    for case in 0..shapes {
        let t = [1usize, 2, 4][rng.random_range(0..3)];
        let heads = t * rng.random_range(1..=3);
        let hidden = heads * rng.random_range(1..=4);
        let cfg = BlockConfig::new(heads, hidden, t * rng.random_range(1..=4), rng.random_range(1..=3));
        let params = LayerParams::random(cfg.hidden, case as u64);
        let x = random_matrix(rng, cfg.tokens(), cfg.hidden);
        for policy in [RecomputePolicy::None, RecomputePolicy::Selective] {
            let core_policy = match policy {
                RecomputePolicy::None => Recompute::None,
                RecomputePolicy::Selective => Recompute::Selective,
            };
            let serial = match reference_block_forward(&x, &params, &cfg, policy) {
                Ok(f) => f.ledger.total(),
                Err(e) => {
                    failures.push(e.to_string());
                    continue;
                }
            };
            if Exact::from_integer(serial.into()) != analytical(&cfg, 1, core_policy, false) {
                failures.push(format!("case {case}: serial ledger {serial} ({policy:?})"));
            }
            for (mode, seq) in [(ParallelMode::Tensor, false), (ParallelMode::SequenceTensor, true)] {
                let axis = if seq { ShardAxis::Sequence } else { ShardAxis::Replicated };
                let xs = RankShardedTensor::from_logical(&x, axis, t).expect("divisible");
                let f = parallel_block_forward(&xs, &params, &cfg, policy, mode, &mut Default::default());
                let expected = analytical(&cfg, t, core_policy, seq);
                match f {
                    Ok(f) => {
                        for (rank, l) in f.ledgers.iter().enumerate() {
                            if Exact::from_integer(l.total().into()) != expected {
                                failures.push(format!("case {case}: rank {rank} {mode:?} {policy:?} ledger {}", l.total()));
                            }
                        }
                    }
                    Err(e) => failures.push(e.to_string()),
                }
            }
        }
    }
    check("activation_ledger_matches_formulas", shapes, 0.0, 0.0, failures)
}

/// Rank-0 simulated peak equals the closed form plus extras for every preset.
pub fn pipeline_peaks() -> CheckResult {
    let model = MemoryModel::default();
    let mut failures = Vec::new();
    let mut cases = 0;
    for name in PRESET_NAMES {
        let c = preset(name).expect("built-in preset");
        let layout = c.layout.with_interleave(1);
        for strategy in RecomputeStrategy::all().into_iter().filter(|s| matches!(s, RecomputeStrategy::Uniform { .. })) {
            cases += 1;
            let sim = simulate_memory(&model, &c.shape, &layout, &strategy, SimOptions { dealloc: true }, None);
            let closed = model
                .total_first_stage_bytes(&c.shape, &layout, &strategy)
                .and_then(|t| Ok(t + model.extras_bytes(&c.shape, &layout)?.sum()));
            match (sim, closed) {
                (Ok(sim), Ok(closed)) if sim.peak_per_rank[0] == closed => {}
                (Ok(sim), Ok(closed)) => {
                    failures.push(format!("{name} {strategy}: simulated {} vs {closed}", sim.peak_per_rank[0]))
                }
                (Err(e), _) => failures.push(format!("{name} {strategy}: {e}")),
                (_, Err(e)) => failures.push(format!("{name} {strategy}: {e}")),
            }
        }
    }
    check("pipeline_rank0_peak_matches_closed_form", cases, 0.0, 0.0, failures)
}

/// The recomputed attention interior is bit-identical and a different seed is caught.
pub fn selective_recompute(rng: &mut ChaCha8Rng, shapes: usize) -> CheckResult {
    let mut failures = Vec::new();
    for case in 0..shapes {
        let cfg = random_toy_config(rng).with_dropout(0.1);
        let t = [1usize, 2, 4][case % 3];
        let params = LayerParams::random(cfg.hidden, rng.random());
        let x = random_matrix(rng, cfg.tokens(), cfg.hidden);
        let xs = RankShardedTensor::from_logical(&x, ShardAxis::Sequence, t).expect("divisible");
        let f = match parallel_block_forward(&xs, &params, &cfg, RecomputePolicy::None, ParallelMode::SequenceTensor, &mut Default::default()) {
            Ok(f) => f,
            Err(e) => {
                failures.push(e.to_string());
                continue;
            }
        };
        for saved in &f.saved {
            let original = saved.interior.as_ref().expect("stored under no recompute");
            if let Err(e) = check_recompute(original, &selective_recompute_attention(saved, &cfg)) {
                failures.push(format!("case {case}: {e}"));
            }
            let other = cfg.with_seed(cfg.seed.wrapping_add(1));
            if check_recompute(original, &selective_recompute_attention(saved, &other)).is_ok() {
                failures.push(format!("case {case}: seed change went unnoticed"));
            }
        }
        let sel = parallel_block_forward(&xs, &params, &cfg, RecomputePolicy::Selective, ParallelMode::SequenceTensor, &mut Default::default());
        if let Ok(sel) = sel {
            let discarded = f.ledgers[0].total() - sel.ledgers[0].total();
            let expected = 5 * cfg.heads * cfg.seq_len * cfg.seq_len * cfg.batch / t;
            if discarded as usize != expected {
                failures.push(format!("case {case}: discarded {discarded} bytes, expected {expected}"));
            }
        }
    }
    check("selective_recompute_bit_equal", shapes, 0.0, 0.0, failures)
}

/// Per layer forward + backward: four all-reduces under tensor parallelism,
/// four all-gathers and four reduce-scatters with sequence parallelism, and
/// the same number of elements on the wire.
pub fn communication_counts(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut failures = Vec::new();
    let cfg = random_toy_config(rng);
    let params = LayerParams::random(cfg.hidden, rng.random());
    let x = random_matrix(rng, cfg.tokens(), cfg.hidden);
    let tp = run_layer(Execution::tensor(4), &x, &params, &cfg, RecomputePolicy::None, &x);
    let sp = run_layer(Execution::sequence(4), &x, &params, &cfg, RecomputePolicy::None, &x);
    match (tp, sp) {
        (Ok(tp), Ok(sp)) => {
            let c = CommTag::Conjugate;
            let counts = (
                tp.comm.count(CollectiveKind::AllReduce, c),
                sp.comm.count(CollectiveKind::AllGather, c),
                sp.comm.count(CollectiveKind::ReduceScatter, c),
            );
            if counts != (4, 4, 4) {
                failures.push(format!("(all-reduce, all-gather, reduce-scatter) = {counts:?}"));
            }
            if tp.comm.elements_sent_per_rank(c) != sp.comm.elements_sent_per_rank(c) {
                failures.push("communication volumes differ".into());
            }
            if sp.comm.count(CollectiveKind::AllGather, CommTag::Regather) != 2 {
                failures.push("expected two backward re-gathers".into());
            }
        }
        (Err(e), _) | (_, Err(e)) => failures.push(e.to_string()),
    }
    check("communication_counts", 2, 0.0, 0.0, failures)
}

pub fn run_verify(seed: u64) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks = vec![
        collective_identity_integers(&mut rng, 1000),
        collective_identity_floats(&mut rng, 1000),
        parallel_equivalence(&mut rng, 20, ParallelMode::SequenceTensor),
        parallel_equivalence(&mut rng, 20, ParallelMode::Tensor),
        gradient_checks(&mut rng),
        ledger_equality(&mut rng, 100),
        pipeline_peaks(),
        selective_recompute(&mut rng, 12),
        communication_counts(&mut rng),
    ];
    let passed = checks.iter().all(|c| c.passed);
    VerifyReport { seed, passed, checks }
}
