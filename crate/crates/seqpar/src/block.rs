//! Transformer layer definition: configuration, parameters, saved
//! activations and the attention core shared by every execution mode.

use actplan_core::ByteConvention;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SeqparError;
use crate::ops::{attention_head_backward, attention_probs, dropout};
use crate::rng::{DropoutSite, MaskGenerator};

/// Shape and randomness of one layer invocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub heads: usize,
    pub hidden: usize,
    pub seq_len: usize,
    pub batch: usize,
    /// Dropout rate of all three dropout sites.
    pub dropout: f64,
    pub causal: bool,
    pub layer: u64,
    pub microbatch: u64,
    pub seed: u64,
}

impl BlockConfig {
    pub fn new(heads: usize, hidden: usize, seq_len: usize, batch: usize) -> Self {
        Self { heads, hidden, seq_len, batch, dropout: 0.0, causal: false, layer: 0, microbatch: 1, seed: 42 }
    }

    pub fn with_dropout(self, dropout: f64) -> Self {
        Self { dropout, ..self }
    }

    pub fn with_causal(self, causal: bool) -> Self {
        Self { causal, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Rows of the activation matrices, `s · b`.
    pub fn tokens(&self) -> usize {
        self.seq_len * self.batch
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn masks(&self) -> MaskGenerator {
        MaskGenerator { seed: self.seed, layer: self.layer, microbatch: self.microbatch }
    }

    /// Checks the shape against `t` simulated ranks.
    pub fn validate(&self, t: usize) -> Result<(), SeqparError> {
        let bad = |m: String| Err(SeqparError::InvalidConfig(m));
        if self.heads == 0 || self.hidden == 0 || self.seq_len == 0 || self.batch == 0 || t == 0 {
            return bad("all sizes must be at least 1".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("h={} not divisible by a={}", self.hidden, self.heads));
        }
        if self.heads % t != 0 || self.seq_len % t != 0 {
            return bad(format!("a={} and s={} must both be divisible by t={t}", self.heads, self.seq_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Weights of one layer in their logical (unsharded) layout.
///
/// `wq`, `wk`, `wv` and `mlp_a` are split by columns across ranks, `wo` and
/// `mlp_b` by rows; layer norms and the two output biases are replicated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub mlp_a: Array2<f64>,
    pub mlp_a_bias: Array1<f64>,
    pub mlp_b: Array2<f64>,
    pub mlp_b_bias: Array1<f64>,
}

pub const PARAM_NAMES: [&str; 16] = [
    "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain", "ln2_bias", "mlp_a",
    "mlp_a_bias", "mlp_b", "mlp_b_bias",
];

impl LayerParams {
    pub fn zeros(hidden: usize) -> Self {
        let h = hidden;
        let v = |n| Array1::zeros(n);
        let m = |r, c| Array2::zeros((r, c));
        Self {
            ln1_gain: Array1::ones(h),
            ln1_bias: v(h),
            wq: m(h, h),
            bq: v(h),
            wk: m(h, h),
            bk: v(h),
            wv: m(h, h),
            bv: v(h),
            wo: m(h, h),
            bo: v(h),
            ln2_gain: Array1::ones(h),
            ln2_bias: v(h),
            mlp_a: m(h, 4 * h),
            mlp_a_bias: v(4 * h),
            mlp_b: m(4 * h, h),
            mlp_b_bias: v(h),
        }
    }

    /// Uniform weights scaled by `1/sqrt(fan_in)`, gains near 1, small biases.
    pub fn random(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(hidden);
        p.visit_mut(|name, values| {
            let fan_in = if name == "mlp_b" { 4 * hidden } else { hidden } as f64;
            for v in values.iter_mut() {
                let u: f64 = rng.random_range(-1.0..1.0);
                *v = match name {
                    "ln1_gain" | "ln2_gain" => 1.0 + 0.1 * u,
                    n if n.starts_with('w') || n == "mlp_a" || n == "mlp_b" => u / fan_in.sqrt(),
                    _ => 0.1 * u,
                };
            }
        });
        p
    }

    fn fields(&self) -> [&dyn ParamTensor; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo,
            &self.bo, &self.ln2_gain, &self.ln2_bias, &self.mlp_a, &self.mlp_a_bias, &self.mlp_b, &self.mlp_b_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut dyn ParamTensor; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_gain, &mut self.ln2_bias,
            &mut self.mlp_a, &mut self.mlp_a_bias, &mut self.mlp_b, &mut self.mlp_b_bias,
        ]
    }

    /// Calls `f` with every tensor's name and flat values.
    pub fn visit(&self, mut f: impl FnMut(&'static str, &[f64])) {
        for (name, field) in PARAM_NAMES.iter().zip(self.fields()) {
            f(name, field.values());
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut [f64])) {
        for (name, field) in PARAM_NAMES.iter().zip(self.fields_mut()) {
            f(name, field.values_mut());
        }
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Local weights of `rank` out of `t`.
    pub fn shard(&self, rank: usize, t: usize) -> Self {
        let h = self.wq.nrows();
        let cols = |w: &Array2<f64>| {
            let c = w.ncols() / t;
            w.slice(s![.., rank * c..(rank + 1) * c]).to_owned()
        };
        let rows = |w: &Array2<f64>| {
            let r = w.nrows() / t;
            w.slice(s![rank * r..(rank + 1) * r, ..]).to_owned()
        };
        let part = |b: &Array1<f64>| {
            let c = b.len() / t;
            b.slice(s![rank * c..(rank + 1) * c]).to_owned()
        };
        debug_assert_eq!(h % t, 0);
        Self {
            ln1_gain: self.ln1_gain.clone(),
            ln1_bias: self.ln1_bias.clone(),
            wq: cols(&self.wq),
            bq: part(&self.bq),
            wk: cols(&self.wk),
            bk: part(&self.bk),
            wv: cols(&self.wv),
            bv: part(&self.bv),
            wo: rows(&self.wo),
            bo: self.bo.clone(),
            ln2_gain: self.ln2_gain.clone(),
            ln2_bias: self.ln2_bias.clone(),
            mlp_a: cols(&self.mlp_a),
            mlp_a_bias: part(&self.mlp_a_bias),
            mlp_b: rows(&self.mlp_b),
            mlp_b_bias: self.mlp_b_bias.clone(),
        }
    }

    /// Inverse of [`Self::shard`]; replicated tensors are taken from rank 0.
    pub fn assemble(shards: &[Self]) -> Self {
        let cat2 = |axis: usize, get: &dyn Fn(&Self) -> &Array2<f64>| {
            let views: Vec<_> = shards.iter().map(|p| get(p).view()).collect();
            ndarray::concatenate(Axis(axis), &views).expect("equal shard shapes").as_standard_layout().into_owned()
        };
        let cat1 = |get: &dyn Fn(&Self) -> &Array1<f64>| {
            let views: Vec<_> = shards.iter().map(|p| get(p).view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("equal shard shapes")
        };
        let r0 = &shards[0];
        Self {
            ln1_gain: r0.ln1_gain.clone(),
            ln1_bias: r0.ln1_bias.clone(),
            wq: cat2(1, &|p| &p.wq),
            bq: cat1(&|p| &p.bq),
            wk: cat2(1, &|p| &p.wk),
            bk: cat1(&|p| &p.bk),
            wv: cat2(1, &|p| &p.wv),
            bv: cat1(&|p| &p.bv),
            wo: cat2(0, &|p| &p.wo),
            bo: r0.bo.clone(),
            ln2_gain: r0.ln2_gain.clone(),
            ln2_bias: r0.ln2_bias.clone(),
            mlp_a: cat2(1, &|p| &p.mlp_a),
            mlp_a_bias: cat1(&|p| &p.mlp_a_bias),
            mlp_b: cat2(0, &|p| &p.mlp_b),
            mlp_b_bias: r0.mlp_b_bias.clone(),
        }
    }
}

trait ParamTensor {
    fn values(&self) -> &[f64];
    fn values_mut(&mut self) -> &mut [f64];
}

impl<D: ndarray::Dimension> ParamTensor for ndarray::Array<f64, D> {
    fn values(&self) -> &[f64] {
        self.as_slice().expect("parameters are contiguous")
    }

    fn values_mut(&mut self) -> &mut [f64] {
        self.as_slice_mut().expect("parameters are contiguous")
    }
}

/// Whether the attention interior is kept or rebuilt during backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecomputePolicy {
    None,
    Selective,
}

/// Softmax output, its dropout keep flags and the dropped-out probabilities,
/// indexed `[batch, local head, query, key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInterior {
    pub probs: Array4<f64>,
    pub keep: Array4<u8>,
    pub dropped: Array4<f64>,
}

/// Everything one rank keeps from forward for backward.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedLayer {
    pub policy: RecomputePolicy,
    /// First global head owned by this rank.
    pub head_offset: usize,
    /// First logical token row held by the sequence-sharded tensors.
    pub row_offset: usize,
    pub x: Array2<f64>,
    pub y1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub interior: Option<AttentionInterior>,
    pub context: Array2<f64>,
    pub proj_keep: Array2<u8>,
    pub x2: Array2<f64>,
    pub y2: Array2<f64>,
    pub mlp_hidden: Array2<f64>,
    pub mlp_act: Array2<f64>,
    pub mlp_keep: Array2<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElementKind {
    Activation,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub name: String,
    pub elements: u64,
    pub kind: ElementKind,
    pub bytes: u64,
}

/// Byte count of every tensor a rank keeps for backward.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationLedger {
    pub entries: Vec<LedgerEntry>,
}

impl ActivationLedger {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn get(&self, name: &str) -> Option<&LedgerEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl SavedLayer {
    /// Counts the stored tensors; layer-norm statistics are not counted.
    pub fn ledger(&self, bytes: &ByteConvention) -> ActivationLedger {
        use ElementKind::{Activation, Mask};
        let mut tensors: Vec<(&'static str, usize, ElementKind)> = vec![
            ("X", self.x.len(), Activation),
            ("Y1", self.y1.len(), Activation),
            ("Q", self.q.len(), Activation),
            ("K", self.k.len(), Activation),
        ];
        if let Some(i) = &self.interior {
            tensors.push(("P", i.probs.len(), Activation));
            tensors.push(("attention mask", i.keep.len(), Mask));
            tensors.push(("Pd", i.dropped.len(), Activation));
        }
        tensors.extend([
            ("V", self.v.len(), Activation),
            ("C", self.context.len(), Activation),
            ("dropout mask", self.proj_keep.len(), Mask),
            ("X2", self.x2.len(), Activation),
            ("Y2", self.y2.len(), Activation),
            ("H", self.mlp_hidden.len(), Activation),
            ("Z", self.mlp_act.len(), Activation),
            ("MLP mask", self.mlp_keep.len(), Mask),
        ]);
        let entries = tensors
            .into_iter()
            .map(|(name, n, kind)| {
                let per = match kind {
                    Activation => bytes.activation_elem,
                    Mask => bytes.mask_elem,
                };
                LedgerEntry { name: name.into(), elements: n as u64, kind, bytes: n as u64 * per }
            })
            .collect();
        ActivationLedger { entries }
    }
}

/// Keep flags for token rows `row_offset ..` of an `(s·b) × width` activation.
pub fn row_mask(cfg: &BlockConfig, site: DropoutSite, row_offset: usize, rows: usize, width: usize) -> Array2<u8> {
    let flags = cfg.masks().keep(site, (row_offset * width) as u64, rows * width, cfg.dropout);
    Array2::from_shape_vec((rows, width), flags).expect("mask length matches")
}

/// Softmax interior for the heads in `q`/`k`, the first being global head `head_offset`.
pub fn attention_interior(q: ArrayView2<f64>, k: ArrayView2<f64>, cfg: &BlockConfig, head_offset: usize) -> AttentionInterior {
    let (b, s, d) = (cfg.batch, cfg.seq_len, cfg.head_dim());
    let heads = q.ncols() / d;
    let mut probs = Array4::zeros((b, heads, s, s));
    let mut keep = Array4::zeros((b, heads, s, s));
    let gen = cfg.masks();
    for ib in 0..b {
        for hl in 0..heads {
            let qh = q.slice(s![ib..;b, hl * d..(hl + 1) * d]);
            let kh = k.slice(s![ib..;b, hl * d..(hl + 1) * d]);
            probs.slice_mut(s![ib, hl, .., ..]).assign(&attention_probs(qh, kh, cfg.causal));
            let start = ((ib * cfg.heads + head_offset + hl) * s * s) as u64;
            let flags = gen.keep(DropoutSite::AttentionProbs, start, s * s, cfg.dropout);
            keep.slice_mut(s![ib, hl, .., ..])
                .assign(&Array2::from_shape_vec((s, s), flags).expect("mask length matches"));
        }
    }
    let mut dropped = Array4::zeros((b, heads, s, s));
    for ib in 0..b {
        for hl in 0..heads {
            let pd = dropout(probs.slice(s![ib, hl, .., ..]), keep.slice(s![ib, hl, .., ..]), cfg.dropout);
            dropped.slice_mut(s![ib, hl, .., ..]).assign(&pd);
        }
    }
    AttentionInterior { probs, keep, dropped }
}

/// Attention over V for the local heads: returns the `(s·b) × (heads·d)` context.
pub fn attention_context(interior: &AttentionInterior, v: ArrayView2<f64>, cfg: &BlockConfig) -> Array2<f64> {
    let (b, d) = (cfg.batch, cfg.head_dim());
    let heads = v.ncols() / d;
    let mut c = Array2::zeros(v.dim());
    for ib in 0..b {
        for hl in 0..heads {
            let vh = v.slice(s![ib..;b, hl * d..(hl + 1) * d]);
            let ch = interior.dropped.slice(s![ib, hl, .., ..]).dot(&vh);
            c.slice_mut(s![ib..;b, hl * d..(hl + 1) * d]).assign(&ch);
        }
    }
    c
}

/// Gradients of the local attention heads. Returns `(dq, dk, dv)`.
pub fn attention_backward(
    saved: &SavedLayer,
    interior: &AttentionInterior,
    dcontext: ArrayView2<f64>,
    cfg: &BlockConfig,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (b, d) = (cfg.batch, cfg.head_dim());
    let heads = saved.q.ncols() / d;
    let mut dq = Array2::zeros(saved.q.dim());
    let mut dk = Array2::zeros(saved.k.dim());
    let mut dv = Array2::zeros(saved.v.dim());
    for ib in 0..b {
        for hl in 0..heads {
            let cols = s![ib..;b, hl * d..(hl + 1) * d];
            let (gq, gk, gv) = attention_head_backward(
                saved.q.slice(cols),
                saved.k.slice(cols),
                saved.v.slice(cols),
                interior.probs.slice(s![ib, hl, .., ..]),
                interior.keep.slice(s![ib, hl, .., ..]),
                interior.dropped.slice(s![ib, hl, .., ..]),
                cfg.dropout,
                dcontext.slice(cols),
            );
            dq.slice_mut(cols).assign(&gq);
            dk.slice_mut(cols).assign(&gk);
            dv.slice_mut(cols).assign(&gv);
        }
    }
    (dq, dk, dv)
}

/// Rebuilds the discarded attention interior from the stored Q and K.
pub fn selective_recompute_attention(saved: &SavedLayer, cfg: &BlockConfig) -> AttentionInterior {
    attention_interior(saved.q.view(), saved.k.view(), cfg, saved.head_offset)
}

/// Fails unless `recomputed` equals `original` bit for bit.
pub fn check_recompute(original: &AttentionInterior, recomputed: &AttentionInterior) -> Result<(), SeqparError> {
    let same = |a: &Array4<f64>, b: &Array4<f64>| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    if original.keep != recomputed.keep {
        return Err(SeqparError::RecomputeMismatch("attention mask"));
    }
    if original.probs.dim() != recomputed.probs.dim() || !same(&original.probs, &recomputed.probs) {
        return Err(SeqparError::RecomputeMismatch("softmax output"));
    }
    if !same(&original.dropped, &recomputed.dropped) {
        return Err(SeqparError::RecomputeMismatch("softmax dropout output"));
    }
    Ok(())
}

/// Interior to use during backward: the stored one, or a recomputation.
pub fn interior_for_backward<'a>(
    saved: &'a SavedLayer,
    cfg: &BlockConfig,
    scratch: &'a mut Option<AttentionInterior>,
) -> Result<&'a AttentionInterior, SeqparError> {
    match (&saved.interior, saved.policy) {
        (Some(i), _) => Ok(i),
        (None, RecomputePolicy::Selective) => Ok(scratch.insert(selective_recompute_attention(saved, cfg))),
        (None, RecomputePolicy::None) => Err(SeqparError::MissingSaved("attention interior")),
    }
}

pub(crate) fn ensure_finite(what: &'static str, x: &Array2<f64>) -> Result<(), SeqparError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SeqparError::NonFinite(what))
    }
}
