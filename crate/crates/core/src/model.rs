//! Configuration types shared by every model in the crate.
//!
//! Everything here is plain data: the transformer shape, the parallel layout,
//! the recomputation strategy, byte-size conventions and the hardware
//! description. [`validate`] collects every invariant violation at once so a
//! caller can report all of them in one pass.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Transformer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    /// Number of attention heads (`a`).
    pub attention_heads: u64,
    /// Hidden dimension (`h`).
    pub hidden: u64,
    /// Number of transformer layers (`L`).
    pub layers: u64,
    /// Sequence length (`s`).
    pub seq_len: u64,
    /// Vocabulary size (`v`).
    pub vocab: u64,
}

impl ModelShape {
    pub const fn new(attention_heads: u64, hidden: u64, layers: u64, seq_len: u64, vocab: u64) -> Self {
        Self { attention_heads, hidden, layers, seq_len, vocab }
    }

    pub fn head_dim(&self) -> u64 {
        self.hidden / self.attention_heads
    }
}

/// How the model is split across devices and how the batch is sliced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelLayout {
    /// Tensor-parallel size (`t`).
    pub tensor: u64,
    /// Pipeline-parallel size (`p`).
    pub pipeline: u64,
    /// Interleaved chunks per pipeline stage (`m`); 1 is the plain schedule.
    pub interleave: u64,
    /// Data-parallel replicas (`d`).
    pub data_parallel: u64,
    /// Microbatch size (`b`).
    pub microbatch: u64,
    /// Microbatches per iteration, per data-parallel replica.
    pub microbatches: u64,
}

impl ParallelLayout {
    /// Layout with `m = 1`, `d = 1` and `n_mb = p`.
    pub const fn new(tensor: u64, pipeline: u64, microbatch: u64) -> Self {
        Self {
            tensor,
            pipeline,
            interleave: 1,
            data_parallel: 1,
            microbatch,
            microbatches: pipeline,
        }
    }

    pub const fn with_interleave(mut self, m: u64) -> Self {
        self.interleave = m;
        self
    }

    pub const fn with_data_parallel(mut self, d: u64) -> Self {
        self.data_parallel = d;
        self
    }

    pub const fn with_microbatches(mut self, n_mb: u64) -> Self {
        self.microbatches = n_mb;
        self
    }

    /// No parallelism of any kind, microbatch size `b`.
    pub const fn single_device(microbatch: u64) -> Self {
        Self::new(1, 1, microbatch)
    }

    /// Devices used by one iteration: `t * p * d`.
    pub fn devices(&self) -> u64 {
        self.tensor * self.pipeline * self.data_parallel
    }

    /// Samples consumed by one iteration across all data-parallel replicas.
    pub fn global_batch(&self) -> u64 {
        self.microbatch * self.microbatches * self.data_parallel
    }

    /// Transformer layers held by one pipeline stage.
    pub fn layers_per_stage(&self, shape: &ModelShape) -> u64 {
        shape.layers / self.pipeline
    }
}

/// Which activations are recomputed during the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recompute {
    /// Keep every activation.
    None,
    /// Recompute only the attention core (QK^T, softmax, softmax dropout, attention over V).
    Selective,
    /// Checkpoint layer inputs and rerun the whole layer forward.
    Full,
}

/// The recompute flavours allowed inside a microbatch-level window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerRecompute {
    Selective,
    Full,
}

impl From<InnerRecompute> for Recompute {
    fn from(inner: InnerRecompute) -> Self {
        match inner {
            InnerRecompute::Selective => Recompute::Selective,
            InnerRecompute::Full => Recompute::Full,
        }
    }
}

/// Activation recomputation regime for a training run.
///
/// `Uniform` applies the same policy to every microbatch. `MicrobatchLevel`
/// keeps all activations of as many in-flight microbatches as memory allows
/// and applies `inner` to the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum RecomputeStrategy {
    Uniform { recompute: Recompute, sequence_parallel: bool },
    MicrobatchLevel { inner: InnerRecompute, sequence_parallel: bool },
}

impl RecomputeStrategy {
    pub const NONE: Self = Self::uniform(Recompute::None, false);
    pub const SEQUENCE_PARALLEL: Self = Self::uniform(Recompute::None, true);
    pub const SELECTIVE: Self = Self::uniform(Recompute::Selective, false);
    pub const SEQUENCE_SELECTIVE: Self = Self::uniform(Recompute::Selective, true);
    pub const FULL: Self = Self::uniform(Recompute::Full, false);

    pub const fn uniform(recompute: Recompute, sequence_parallel: bool) -> Self {
        Self::Uniform { recompute, sequence_parallel }
    }

    pub fn sequence_parallel(&self) -> bool {
        match *self {
            Self::Uniform { sequence_parallel, .. } | Self::MicrobatchLevel { sequence_parallel, .. } => {
                sequence_parallel
            }
        }
    }

    /// Policy applied to checkpointed microbatches.
    pub fn checkpoint_policy(&self) -> Recompute {
        match *self {
            Self::Uniform { recompute, .. } => recompute,
            Self::MicrobatchLevel { inner, .. } => inner.into(),
        }
    }

    /// Every strategy the crate knows about, in a fixed order.
    pub fn all() -> Vec<Self> {
        let mut out = Vec::with_capacity(10);
        for seq in [false, true] {
            for r in [Recompute::None, Recompute::Selective, Recompute::Full] {
                out.push(Self::uniform(r, seq));
            }
            for inner in [InnerRecompute::Selective, InnerRecompute::Full] {
                out.push(Self::MicrobatchLevel { inner, sequence_parallel: seq });
            }
        }
        out
    }
}

impl fmt::Display for RecomputeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.checkpoint_policy() {
            Recompute::None => "none",
            Recompute::Selective => "selective",
            Recompute::Full => "full",
        };
        f.write_str(base)?;
        if self.sequence_parallel() {
            f.write_str("+seq")?;
        }
        if matches!(self, Self::MicrobatchLevel { .. }) {
            f.write_str("+mblevel")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StrategyParseError {
    #[error("empty strategy")]
    Empty,
    #[error("unknown strategy token `{0}`")]
    UnknownToken(String),
    #[error("strategy needs exactly one of none, selective, full")]
    BasePolicy,
    #[error("repeated strategy token `{0}`")]
    Repeated(String),
    #[error("microbatch-level windowing needs selective or full recomputation")]
    WindowWithoutRecompute,
}

impl FromStr for RecomputeStrategy {
    type Err = StrategyParseError;

    /// Parses `{none,full,selective}[+seq][+mblevel]`; tokens may come in any order.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err(StrategyParseError::Empty);
        }
        let mut base = None;
        let mut seq = false;
        let mut window = false;
        for token in s.split('+').map(|t| t.trim().to_ascii_lowercase()) {
            let flag = match token.as_str() {
                "none" => Some(Recompute::None),
                "selective" => Some(Recompute::Selective),
                "full" => Some(Recompute::Full),
                "seq" => {
                    if std::mem::replace(&mut seq, true) {
                        return Err(StrategyParseError::Repeated(token));
                    }
                    None
                }
                "mblevel" => {
                    if std::mem::replace(&mut window, true) {
                        return Err(StrategyParseError::Repeated(token));
                    }
                    None
                }
                _ => return Err(StrategyParseError::UnknownToken(token)),
            };
            if let Some(r) = flag {
                if base.replace(r).is_some() {
                    return Err(StrategyParseError::BasePolicy);
                }
            }
        }
        let base = base.ok_or(StrategyParseError::BasePolicy)?;
        if window {
            let inner = match base {
                Recompute::None => return Err(StrategyParseError::WindowWithoutRecompute),
                Recompute::Selective => InnerRecompute::Selective,
                Recompute::Full => InnerRecompute::Full,
            };
            Ok(Self::MicrobatchLevel { inner, sequence_parallel: seq })
        } else {
            Ok(Self::uniform(base, seq))
        }
    }
}

/// Bytes per stored element, by element kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ByteConvention {
    /// Activations (fp16 by default).
    pub activation_elem: u64,
    /// Dropout masks.
    pub mask_elem: u64,
    /// Logits kept for the cross-entropy loss (fp32 by default).
    pub logits_elem: u64,
}

impl Default for ByteConvention {
    fn default() -> Self {
        Self { activation_elem: 2, mask_elem: 1, logits_elem: 4 }
    }
}

/// Device description used for memory budgets and utilization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hardware {
    pub device_mem: u64,
    /// Peak dense FLOPs per second of one device.
    pub peak_flops_per_device: u64,
    pub devices: u64,
}

impl Hardware {
    /// 80 GiB A100 with 312 TFLOP/s dense fp16 peak.
    pub const A100_80GB_MEM: u64 = 80 << 30;
    pub const A100_PEAK_FLOPS: u64 = 312_000_000_000_000;

    pub const fn a100(devices: u64) -> Self {
        Self {
            device_mem: Self::A100_80GB_MEM,
            peak_flops_per_device: Self::A100_PEAK_FLOPS,
            devices,
        }
    }
}

/// A single violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("h not divisible by a (h={hidden}, a={heads})")]
    HiddenNotDivisibleByHeads { hidden: u64, heads: u64 },
    #[error("h not divisible by t (h={hidden}, t={tensor})")]
    HiddenNotDivisibleByTensor { hidden: u64, tensor: u64 },
    #[error("s not divisible by t (s={seq_len}, t={tensor})")]
    SeqNotDivisibleByTensor { seq_len: u64, tensor: u64 },
    #[error("a not divisible by t (a={heads}, t={tensor})")]
    HeadsNotDivisibleByTensor { heads: u64, tensor: u64 },
    #[error("L not divisible by p·m (L={layers}, p={pipeline}, m={interleave})")]
    LayersNotDivisibleByStages { layers: u64, pipeline: u64, interleave: u64 },
    #[error("pipeline cannot be filled (n_mb={microbatches} < p={pipeline})")]
    PipelineNotFilled { microbatches: u64, pipeline: u64 },
    #[error("devices ({devices}) != t·p·d ({expected})")]
    DeviceCount { devices: u64, expected: u64 },
}

/// Every violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid configuration: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct Violations(pub Vec<Violation>);

impl Violations {
    pub fn iter(&self) -> impl Iterator<Item = &Violation> {
        self.0.iter()
    }
}

fn shape_violations(shape: &ModelShape, out: &mut Vec<Violation>) {
    let fields = [
        ("a", shape.attention_heads),
        ("h", shape.hidden),
        ("L", shape.layers),
        ("s", shape.seq_len),
        ("v", shape.vocab),
    ];
    for (name, value) in fields {
        if value == 0 {
            out.push(Violation::Zero(name));
        }
    }
    if shape.attention_heads > 0 && shape.hidden % shape.attention_heads != 0 {
        out.push(Violation::HiddenNotDivisibleByHeads {
            hidden: shape.hidden,
            heads: shape.attention_heads,
        });
    }
}

/// Checks every shape and layout invariant and returns all violations found.
pub fn validate(shape: &ModelShape, layout: &ParallelLayout) -> Result<(), Violations> {
    let mut out = Vec::new();
    shape_violations(shape, &mut out);
    let fields = [
        ("t", layout.tensor),
        ("p", layout.pipeline),
        ("m", layout.interleave),
        ("d", layout.data_parallel),
        ("b", layout.microbatch),
        ("n_mb", layout.microbatches),
    ];
    for (name, value) in fields {
        if value == 0 {
            out.push(Violation::Zero(name));
        }
    }
    let t = layout.tensor;
    if t > 0 {
        if shape.hidden % t != 0 {
            out.push(Violation::HiddenNotDivisibleByTensor { hidden: shape.hidden, tensor: t });
        }
        if shape.seq_len % t != 0 {
            out.push(Violation::SeqNotDivisibleByTensor { seq_len: shape.seq_len, tensor: t });
        }
        if shape.attention_heads % t != 0 {
            out.push(Violation::HeadsNotDivisibleByTensor {
                heads: shape.attention_heads,
                tensor: t,
            });
        }
    }
    let stages = layout.pipeline.saturating_mul(layout.interleave);
    if stages > 0 && shape.layers % stages != 0 {
        out.push(Violation::LayersNotDivisibleByStages {
            layers: shape.layers,
            pipeline: layout.pipeline,
            interleave: layout.interleave,
        });
    }
    if layout.microbatches < layout.pipeline {
        out.push(Violation::PipelineNotFilled {
            microbatches: layout.microbatches,
            pipeline: layout.pipeline,
        });
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(Violations(out))
    }
}

/// [`validate`] plus the device-count check against `hw`.
pub fn validate_with_hardware(
    shape: &ModelShape,
    layout: &ParallelLayout,
    hw: &Hardware,
) -> Result<(), Violations> {
    let mut out = validate(shape, layout).err().map(|v| v.0).unwrap_or_default();
    if hw.device_mem == 0 {
        out.push(Violation::Zero("device_mem_bytes"));
    }
    if hw.peak_flops_per_device == 0 {
        out.push(Violation::Zero("peak_flops"));
    }
    let expected = layout.devices();
    if hw.devices != expected {
        out.push(Violation::DeviceCount { devices: hw.devices, expected });
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(Violations(out))
    }
}
