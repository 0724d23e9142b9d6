use actplan_seqpar::suite::random_toy_config;
use actplan_seqpar::*;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Array2::from_shape_fn((rows, cols), |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

fn toy(seed: u64) -> BlockConfig {
    random_toy_config(&mut ChaCha8Rng::seed_from_u64(seed))
}

// Hand-written per-layer bytes with 2-byte activations and 1-byte masks.
fn serial_bytes(a: u64, h: u64, s: u64, b: u64) -> u64 {
    s * b * h * 34 + 5 * a * s * s * b
}

fn tensor_bytes(a: u64, h: u64, s: u64, b: u64, t: u64) -> u64 {
    10 * s * b * h + (24 * s * b * h + 5 * a * s * s * b) / t
}

fn sequence_bytes(a: u64, h: u64, s: u64, b: u64, t: u64) -> u64 {
    (34 * s * b * h + 5 * a * s * s * b) / t
}

fn ledgers(cfg: &BlockConfig, t: usize, mode: ParallelMode, policy: RecomputePolicy) -> Vec<u64> {
    let axis = match mode {
        ParallelMode::Tensor => ShardAxis::Replicated,
        ParallelMode::SequenceTensor => ShardAxis::Sequence,
    };
    let x = matrix(cfg.tokens(), cfg.hidden, 7);
    let xs = RankShardedTensor::from_logical(&x, axis, t).unwrap();
    let f = parallel_block_forward(&xs, &LayerParams::random(cfg.hidden, 1), cfg, policy, mode, &mut CommLog::default())
        .unwrap();
    f.ledgers.iter().map(ActivationLedger::total).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduce_scatter_then_gather_is_all_reduce(
        t in 1usize..=4, rows in 1usize..=3, cols in 1usize..=3, axis in 0usize..2,
        values in proptest::collection::vec(-1000i64..=1000, 144),
    ) {
        let (r, c) = if axis == 0 { (rows * t, cols) } else { (rows, cols * t) };
        let partials: Vec<Array2<i64>> = (0..t)
            .map(|k| Array2::from_shape_fn((r, c), |(i, j)| values[(k * r * c + i * c + j) % values.len()]))
            .collect();
        let composed = all_gather(&reduce_scatter(&partials, Axis(axis)).unwrap(), Axis(axis)).unwrap();
        prop_assert_eq!(composed, all_reduce(&partials).unwrap());
    }

    #[test]
    fn sharded_tensor_round_trips(t in 1usize..=4, rows in 1usize..=3, cols in 1usize..=3, seed in any::<u64>()) {
        let x = matrix(rows * t, cols * t, seed);
        for axis in [ShardAxis::Sequence, ShardAxis::Hidden, ShardAxis::Replicated] {
            prop_assert_eq!(RankShardedTensor::from_logical(&x, axis, t).unwrap().to_logical(), x.clone());
        }
    }

    #[test]
    fn ledgers_match_hand_formulas(t in prop::sample::select(vec![1u64, 2, 4]), ha in 1u64..=3, hd in 1u64..=4, sm in 1u64..=4, b in 1u64..=3) {
        let (a, s) = (t * ha, t * sm);
        let h = a * hd;
        let cfg = BlockConfig::new(a as usize, h as usize, s as usize, b as usize);
        let attn = 5 * a * s * s * b;
        let serial = reference_block_forward(&matrix((s * b) as usize, h as usize, 3), &LayerParams::random(h as usize, 1), &cfg, RecomputePolicy::None).unwrap();
        prop_assert_eq!(serial.ledger.total(), serial_bytes(a, h, s, b));
        for rank_total in ledgers(&cfg, t as usize, ParallelMode::Tensor, RecomputePolicy::None) {
            prop_assert_eq!(rank_total, tensor_bytes(a, h, s, b, t));
        }
        for rank_total in ledgers(&cfg, t as usize, ParallelMode::SequenceTensor, RecomputePolicy::None) {
            prop_assert_eq!(rank_total, sequence_bytes(a, h, s, b, t));
        }
        for rank_total in ledgers(&cfg, t as usize, ParallelMode::SequenceTensor, RecomputePolicy::Selective) {
            prop_assert_eq!(rank_total, sequence_bytes(a, h, s, b, t) - attn / t);
        }
        for rank_total in ledgers(&cfg, t as usize, ParallelMode::Tensor, RecomputePolicy::Selective) {
            prop_assert_eq!(rank_total, tensor_bytes(a, h, s, b, t) - attn / t);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn parallel_layers_match_serial(seed in any::<u64>(), dropout in prop::sample::select(vec![0.0, 0.1])) {
        let cfg = toy(seed).with_dropout(dropout);
        let params = LayerParams::random(cfg.hidden, seed ^ 1);
        let x = matrix(cfg.tokens(), cfg.hidden, seed ^ 2);
        let dy = matrix(cfg.tokens(), cfg.hidden, seed ^ 3);
        let serial = run_layer(Execution::Reference, &x, &params, &cfg, RecomputePolicy::None, &dy).unwrap();
        for t in [1, 2, 4] {
            for exec in [Execution::sequence(t), Execution::tensor(t)] {
                for policy in [RecomputePolicy::None, RecomputePolicy::Selective] {
                    let run = run_layer(exec, &x, &params, &cfg, policy, &dy).unwrap();
                    let diff = exec::max_abs_diff(&serial, &run);
                    prop_assert!(diff <= 1e-10, "{:?} {:?} diff {:e}", exec, policy, diff);
                    if t == 1 {
                        prop_assert_eq!(diff, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn recomputed_interior_is_bit_identical(seed in any::<u64>(), t in prop::sample::select(vec![1usize, 2, 4])) {
        let cfg = toy(seed).with_dropout(0.1);
        let x = matrix(cfg.tokens(), cfg.hidden, seed);
        let xs = RankShardedTensor::from_logical(&x, ShardAxis::Sequence, t).unwrap();
        let f = seqpar_block_forward(&xs, &LayerParams::random(cfg.hidden, seed), &cfg, RecomputePolicy::None, &mut CommLog::default()).unwrap();
        for saved in &f.saved {
            let original = saved.interior.as_ref().unwrap();
            prop_assert!(check_recompute(original, &selective_recompute_attention(saved, &cfg)).is_ok());
            let shifted = cfg.with_seed(cfg.seed ^ 0x5555);
            prop_assert!(check_recompute(original, &selective_recompute_attention(saved, &shifted)).is_err());
        }
    }
}

#[test]
fn selective_keeps_34_of_114_bytes_when_attention_dominates() {
    let cfg = BlockConfig::new(2, 8, 64, 1);
    let x = matrix(64, 8, 5);
    let p = LayerParams::random(8, 5);
    let none = reference_block_forward(&x, &p, &cfg, RecomputePolicy::None).unwrap().ledger.total();
    let selective = reference_block_forward(&x, &p, &cfg, RecomputePolicy::Selective).unwrap().ledger.total();
    assert_eq!(none * 34, selective * 114);
}

#[test]
fn gradients_match_finite_differences() {
    for (exec, policy, causal) in [
        (Execution::Reference, RecomputePolicy::None, false),
        (Execution::sequence(2), RecomputePolicy::Selective, true),
        (Execution::tensor(4), RecomputePolicy::None, true),
    ] {
        let cfg = BlockConfig::new(4, 8, 4, 2).with_dropout(0.1).with_causal(causal);
        let report = gradcheck(
            exec,
            &matrix(8, 8, 11),
            &LayerParams::random(8, 12),
            &cfg,
            policy,
            &matrix(8, 8, 13),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{exec:?}: {:?}", report.tensors);
    }
}

#[test]
fn communication_volume_is_equal() {
    let cfg = BlockConfig::new(4, 8, 8, 2);
    let (x, p) = (matrix(16, 8, 1), LayerParams::random(8, 2));
    let tp = run_layer(Execution::tensor(2), &x, &p, &cfg, RecomputePolicy::None, &x).unwrap();
    let sp = run_layer(Execution::sequence(2), &x, &p, &cfg, RecomputePolicy::None, &x).unwrap();
    assert_eq!(tp.comm.count(CollectiveKind::AllReduce, CommTag::Conjugate), 4);
    assert_eq!(sp.comm.count(CollectiveKind::AllGather, CommTag::Conjugate), 4);
    assert_eq!(sp.comm.count(CollectiveKind::ReduceScatter, CommTag::Conjugate), 4);
    assert_eq!(tp.comm.elements_sent_per_rank(CommTag::Conjugate), sp.comm.elements_sent_per_rank(CommTag::Conjugate));
}
