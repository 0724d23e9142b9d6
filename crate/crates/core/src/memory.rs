//! Activation, parameter and optimizer memory per device.
//!
//! Per-layer activation bytes are assembled from a coefficient table over the
//! two natural units of a transformer layer, `sbh` (sequence × microbatch ×
//! hidden) and `as²b` (heads × sequence² × microbatch). With the default
//! [`ByteConvention`] the table reproduces the familiar fp16 coefficients:
//!
//! | term                          | elements (act, mask) | default bytes |
//! |-------------------------------|----------------------|---------------|
//! | replicated under tensor par.  | 4 act + 2 mask (sbh) | 10            |
//! | sharded under tensor par.     | 12 act (sbh)         | 24            |
//! | attention core                | 2 act + 1 mask (as²b)| 5             |
//! | layer-input checkpoint        | 1 act (sbh)          | 2             |
//!
//! so one unparallelized layer needs `sbh·(34 + 5as/h)` bytes. Values are
//! computed as exact rationals and floored once.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{self, Exact, Overflow, RationalValue};
use crate::model::{validate, ByteConvention, ModelShape, ParallelLayout, Recompute, RecomputeStrategy, Violations};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error(transparent)]
    Invalid(#[from] Violations),
    #[error("byte count overflows")]
    Overflow,
    #[error("stage {stage} out of range for p={pipeline}")]
    StageOutOfRange { stage: u64, pipeline: u64 },
}

impl From<Overflow> for MemoryError {
    fn from(_: Overflow) -> Self {
        MemoryError::Overflow
    }
}

/// Per-layer byte coefficients derived from a [`ByteConvention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCoefficients {
    /// `sbh` coefficient of tensors replicated across the tensor-parallel group
    /// (layer-norm inputs, the two block inputs, the two block-output dropout masks).
    pub replicated: u64,
    /// `sbh` coefficient of tensors sharded by tensor parallelism.
    pub sharded: u64,
    /// `as²b` coefficient of the attention core (softmax output, its dropout mask and output).
    pub attention_core: u64,
    /// `sbh` coefficient of a layer-input checkpoint.
    pub checkpoint: u64,
}

impl LayerCoefficients {
    pub fn new(bytes: &ByteConvention) -> Self {
        let act = bytes.activation_elem;
        let mask = bytes.mask_elem;
        Self {
            replicated: 4 * act + 2 * mask,
            sharded: 12 * act,
            attention_core: 2 * act + mask,
            checkpoint: act,
        }
    }
}

/// Itemized activation bytes of one unparallelized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMemoryBreakdown {
    pub attention: u64,
    pub mlp: u64,
    pub layer_norms: u64,
    pub total: u64,
}

/// Activations outside the transformer layers, held by the first pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtraTerms<T> {
    pub embedding_dropout: T,
    pub final_layernorm: T,
    pub output_proj_input: T,
    pub logits: T,
}

impl ExtraTerms<u64> {
    pub fn sum(&self) -> u64 {
        self.embedding_dropout + self.final_layernorm + self.output_proj_input + self.logits
    }
}

impl<T> ExtraTerms<T> {
    pub fn as_array(&self) -> [&T; 4] {
        [&self.embedding_dropout, &self.final_layernorm, &self.output_proj_input, &self.logits]
    }
}

/// Parameter count and the bytes it occupies on the first pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamFootprint {
    /// Whole-model parameter count `12Lh² + 13Lh + (v + s)h`.
    pub total_params: u128,
    /// Parameters held by one device of the first pipeline stage.
    pub local_params: u128,
    pub param_bytes: u64,
    pub optimizer_bytes: u64,
}

/// Whole-device memory summary for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub strategy: String,
    pub per_layer: u64,
    /// `per_layer · L`, the first-stage activations of the plain 1F1B schedule.
    pub transformer_total_first_stage: u64,
    pub interleave_factor: RationalValue,
    /// `per_layer · L · interleave_factor`.
    pub transformer_total_interleaved: u64,
    pub extras: ExtraTerms<u64>,
    pub params: u64,
    pub optimizer_state: u64,
    pub grand_total: u64,
    /// Bytes saved on rank 0 by freeing each stage's output tensor after it is sent.
    pub dealloc_savings_rank0: u64,
    pub notes: Vec<String>,
}

/// Memory model with configurable element sizes and optimizer footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub bytes: ByteConvention,
    /// Bytes per parameter for the weights themselves (fp16).
    pub weight_bytes_per_param: u64,
    /// Extra bytes per parameter for mixed-precision Adam: fp16 gradient,
    /// fp32 master copy and two fp32 moments.
    pub optimizer_bytes_per_param: u64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        Self::new(ByteConvention::default())
    }
}

const TRANSIENT_GATHER_NOTE: &str =
    "the gathered layer-norm output re-materialized during the backward pass is transient and not counted";

fn sbh(shape: &ModelShape, b: u64) -> Result<u128, Overflow> {
    exact::product(&[shape.seq_len, b, shape.hidden])
}

fn as2b(shape: &ModelShape, b: u64) -> Result<u128, Overflow> {
    exact::product(&[shape.attention_heads, shape.seq_len, shape.seq_len, b])
}

/// `1 + (p-1)/(p·m)` for interleaved schedules, `1` otherwise.
pub fn interleave_factor(layout: &ParallelLayout) -> Exact {
    if layout.interleave <= 1 {
        return Exact::from_integer(1);
    }
    let pm = u128::from(layout.pipeline) * u128::from(layout.interleave);
    Exact::new(pm + u128::from(layout.pipeline) - 1, pm)
}

impl MemoryModel {
    pub fn new(bytes: ByteConvention) -> Self {
        Self { bytes, weight_bytes_per_param: 2, optimizer_bytes_per_param: 14 }
    }

    pub fn coefficients(&self) -> LayerCoefficients {
        LayerCoefficients::new(&self.bytes)
    }

    /// Exact per-layer activation bytes for one microbatch under `policy`.
    pub fn per_layer_exact(
        &self,
        shape: &ModelShape,
        layout: &ParallelLayout,
        policy: Recompute,
        sequence_parallel: bool,
    ) -> Result<Exact, MemoryError> {
        validate(shape, layout)?;
        let c = self.coefficients();
        let b = layout.microbatch;
        let t = u128::from(layout.tensor);
        let sbh = sbh(shape, b)?;
        let core = as2b(shape, b)?.checked_mul(c.attention_core.into()).ok_or(Overflow)?;
        let replicated = sbh.checked_mul(c.replicated.into()).ok_or(Overflow)?;
        let sharded = sbh.checked_mul(c.sharded.into()).ok_or(Overflow)?;
        let value = match (policy, sequence_parallel) {
            (Recompute::None, false) => {
                exact::add(&Exact::from_integer(replicated), &Exact::new(sharded.checked_add(core).ok_or(Overflow)?, t))?
            }
            (Recompute::None, true) => {
                let n = replicated.checked_add(sharded).and_then(|x| x.checked_add(core)).ok_or(Overflow)?;
                Exact::new(n, t)
            }
            (Recompute::Selective, false) => exact::add(&Exact::from_integer(replicated), &Exact::new(sharded, t))?,
            (Recompute::Selective, true) => Exact::new(replicated.checked_add(sharded).ok_or(Overflow)?, t),
            // Layer inputs are checkpointed whole on every tensor-parallel rank.
            (Recompute::Full, _) => Exact::from_integer(sbh.checked_mul(c.checkpoint.into()).ok_or(Overflow)?),
        };
        Ok(value)
    }

    /// Per-layer activation bytes. Microbatch-level strategies report their
    /// checkpointed (inner) policy, the least a window can hold.
    pub fn per_layer_bytes(
        &self,
        shape: &ModelShape,
        layout: &ParallelLayout,
        strategy: &RecomputeStrategy,
    ) -> Result<u64, MemoryError> {
        let exact = self.per_layer_exact(shape, layout, strategy.checkpoint_policy(), strategy.sequence_parallel())?;
        Ok(exact::floor_u64(&exact)?)
    }

    /// Itemized bytes of one layer with no parallelism.
    pub fn layer_component_breakdown(&self, shape: &ModelShape, b: u64) -> Result<LayerMemoryBreakdown, MemoryError> {
        validate(shape, &ParallelLayout::single_device(b))?;
        let act = u128::from(self.bytes.activation_elem);
        let mask = u128::from(self.bytes.mask_elem);
        let sbh = sbh(shape, b)?;
        let as2b = as2b(shape, b)?;
        let checked = |x: Option<u128>| x.ok_or(Overflow).and_then(|v| u64::try_from(v).map_err(|_| Overflow));
        // QKV input, Q, K, V, projection input (act); projection dropout mask.
        // Softmax output and its dropout output (act); softmax dropout mask.
        let attention = checked(
            sbh.checked_mul(5 * act + mask).and_then(|x| x.checked_add(as2b.checked_mul(2 * act + mask)?)),
        )?;
        // First linear input (1), GeLU input (4), second linear input (4); dropout mask.
        let mlp = checked(sbh.checked_mul(9 * act + mask))?;
        let layer_norms = checked(sbh.checked_mul(2 * act))?;
        Ok(LayerMemoryBreakdown { attention, mlp, layer_norms, total: attention + mlp + layer_norms })
    }

    /// Exact first-stage transformer activations including the interleave factor.
    pub fn total_first_stage_exact(
        &self,
        shape: &ModelShape,
        layout: &ParallelLayout,
        strategy: &RecomputeStrategy,
    ) -> Result<Exact, MemoryError> {
        let per_layer = self.per_layer_exact(shape, layout, strategy.checkpoint_policy(), strategy.sequence_parallel())?;
        let layers = exact::scale(&per_layer, shape.layers)?;
        Ok(exact::mul(&layers, &interleave_factor(layout))?)
    }

    pub fn total_first_stage_bytes(
        &self,
        shape: &ModelShape,
        layout: &ParallelLayout,
        strategy: &RecomputeStrategy,
    ) -> Result<u64, MemoryError> {
        Ok(exact::floor_u64(&self.total_first_stage_exact(shape, layout, strategy)?)?)
    }

    /// Extras carried by one in-flight microbatch on the first stage.
    /// The output-head terms are zero unless `p = 1`.
    pub fn extras_per_microbatch(&self, shape: &ModelShape, layout: &ParallelLayout) -> Result<ExtraTerms<Exact>, MemoryError> {
        validate(shape, layout)?;
        let t = u128::from(layout.tensor);
        let b = layout.microbatch;
        let sbh = sbh(shape, b)?;
        let embedding_dropout = Exact::new(sbh.checked_mul(self.bytes.mask_elem.into()).ok_or(Overflow)?, t);
        if layout.pipeline > 1 {
            return Ok(ExtraTerms { embedding_dropout, ..Default::default() });
        }
        let act_sbh = Exact::new(sbh.checked_mul(self.bytes.activation_elem.into()).ok_or(Overflow)?, t);
        let sbv = exact::product(&[shape.seq_len, b, shape.vocab, self.bytes.logits_elem])?;
        Ok(ExtraTerms {
            embedding_dropout,
            final_layernorm: act_sbh,
            output_proj_input: act_sbh,
            logits: Exact::new(sbv, t),
        })
    }

    /// Embedding dropout for `p` in-flight microbatches plus, when `p = 1`,
    /// the final layer-norm, output-projection input and fp32 logits.
    pub fn extras_bytes(&self, shape: &ModelShape, layout: &ParallelLayout) -> Result<ExtraTerms<u64>, MemoryError> {
        let per_mb = self.extras_per_microbatch(shape, layout)?;
        let embedding = exact::scale(&per_mb.embedding_dropout, layout.pipeline)?;
        Ok(ExtraTerms {
            embedding_dropout: exact::floor_u64(&embedding)?,
            final_layernorm: exact::floor_u64(&per_mb.final_layernorm)?,
            output_proj_input: exact::floor_u64(&per_mb.output_proj_input)?,
            logits: exact::floor_u64(&per_mb.logits)?,
        })
    }

    /// Bytes of one stage-output tensor (`sbh` activation elements).
    pub fn stage_output_bytes(&self, shape: &ModelShape, b: u64) -> Result<u64, MemoryError> {
        let bytes = sbh(shape, b)?.checked_mul(self.bytes.activation_elem.into()).ok_or(Overflow)?;
        Ok(u64::try_from(bytes).map_err(|_| Overflow)?)
    }

    /// Bytes freed on stage `stage` by deallocating output tensors of the
    /// `max(0, p - stage)` microbatches in flight there.
    pub fn dealloc_savings_bytes(&self, shape: &ModelShape, layout: &ParallelLayout, stage: u64) -> Result<u64, MemoryError> {
        validate(shape, layout)?;
        if stage > layout.pipeline {
            return Err(MemoryError::StageOutOfRange { stage, pipeline: layout.pipeline });
        }
        let in_flight = layout.pipeline.saturating_sub(stage);
        let per_output = self.stage_output_bytes(shape, layout.microbatch)?;
        per_output.checked_mul(in_flight).ok_or(MemoryError::Overflow)
    }

    /// Parameter and optimizer bytes on a device of the first pipeline stage.
    pub fn params_and_optimizer_bytes(&self, shape: &ModelShape, layout: &ParallelLayout) -> Result<ParamFootprint, MemoryError> {
        validate(shape, layout)?;
        let h = u128::from(shape.hidden);
        let l = u128::from(shape.layers);
        let t = u128::from(layout.tensor);
        let total_params = 12 * l * h * h + 13 * l * h + (u128::from(shape.vocab) + u128::from(shape.seq_len)) * h;
        // Column/row-parallel weights and the QKV + first-MLP biases split by t;
        // the projection and second-MLP biases and both layer norms (6h) are replicated.
        let per_layer = 12 * h * h / t + 7 * h / t + 6 * h;
        let layers = u128::from(layout.layers_per_stage(shape));
        let word_embedding = u128::from(shape.vocab).div_ceil(t) * h;
        let position_embedding = u128::from(shape.seq_len) * h;
        let local_params = per_layer * layers + word_embedding + position_embedding;
        let bytes = |per: u64| -> Result<u64, MemoryError> {
            let v = local_params.checked_mul(per.into()).ok_or(Overflow)?;
            Ok(u64::try_from(v).map_err(|_| Overflow)?)
        };
        Ok(ParamFootprint {
            total_params,
            local_params,
            param_bytes: bytes(self.weight_bytes_per_param)?,
            optimizer_bytes: bytes(self.optimizer_bytes_per_param)?,
        })
    }

    /// Per-layer bytes of `strategy` relative to the tensor-parallel baseline
    /// (no recomputation, no sequence parallelism).
    pub fn percent_of_baseline(
        &self,
        shape: &ModelShape,
        layout: &ParallelLayout,
        strategy: &RecomputeStrategy,
    ) -> Result<Exact, MemoryError> {
        let value = self.per_layer_exact(shape, layout, strategy.checkpoint_policy(), strategy.sequence_parallel())?;
        let baseline = self.per_layer_exact(shape, layout, Recompute::None, false)?;
        Ok(value / baseline)
    }

    pub fn report(&self, shape: &ModelShape, layout: &ParallelLayout, strategy: &RecomputeStrategy) -> Result<MemoryReport, MemoryError> {
        let per_layer_exact =
            self.per_layer_exact(shape, layout, strategy.checkpoint_policy(), strategy.sequence_parallel())?;
        let plain = exact::scale(&per_layer_exact, shape.layers)?;
        let interleaved = self.total_first_stage_exact(shape, layout, strategy)?;
        let extras = self.extras_bytes(shape, layout)?;
        let footprint = self.params_and_optimizer_bytes(shape, layout)?;
        let transformer_total_interleaved = exact::floor_u64(&interleaved)?;
        let grand_total = [transformer_total_interleaved, extras.sum(), footprint.param_bytes, footprint.optimizer_bytes]
            .into_iter()
            .try_fold(0u64, u64::checked_add)
            .ok_or(MemoryError::Overflow)?;
        let mut notes = vec![TRANSIENT_GATHER_NOTE.to_owned()];
        if matches!(strategy, RecomputeStrategy::MicrobatchLevel { .. }) {
            notes.push("microbatch-level windows report the all-checkpointed floor; see pipeline-sim for the planned peak".into());
        }
        Ok(MemoryReport {
            strategy: strategy.to_string(),
            per_layer: exact::floor_u64(&per_layer_exact)?,
            transformer_total_first_stage: exact::floor_u64(&plain)?,
            interleave_factor: interleave_factor(layout).into(),
            transformer_total_interleaved,
            extras,
            params: footprint.param_bytes,
            optimizer_state: footprint.optimizer_bytes,
            grand_total,
            dealloc_savings_rank0: self.dealloc_savings_bytes(shape, layout, 0)?,
            notes,
        })
    }
}
