//! Single-rank transformer layer, the oracle for the sharded versions.

use actplan_core::ByteConvention;
use ndarray::{Array2, Axis};

use crate::block::{
    attention_backward, attention_context, attention_interior, ensure_finite, interior_for_backward, row_mask,
    ActivationLedger, BlockConfig, LayerParams, RecomputePolicy, SavedLayer,
};
use crate::error::SeqparError;
use crate::ops::{dropout, gelu, gelu_grad, layer_norm, layer_norm_backward, linear};
use crate::rng::DropoutSite;

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub y: Array2<f64>,
    pub saved: SavedLayer,
    pub ledger: ActivationLedger,
}

fn check_input(x: &Array2<f64>, cfg: &BlockConfig) -> Result<(), SeqparError> {
    let expected = (cfg.tokens(), cfg.hidden);
    if x.dim() != expected {
        return Err(SeqparError::ShapeMismatch { what: "input", rank: 0, expected, found: x.dim() });
    }
    ensure_finite("input", x)
}

/// LayerNorm, attention, dropout, residual, LayerNorm, MLP, dropout, residual.
pub fn reference_block_forward(
    x: &Array2<f64>,
    params: &LayerParams,
    cfg: &BlockConfig,
    policy: RecomputePolicy,
) -> Result<ForwardOutput, SeqparError> {
    cfg.validate(1)?;
    check_input(x, cfg)?;
    if !params.all_finite() {
        return Err(SeqparError::NonFinite("parameters"));
    }
    let (n, h) = (cfg.tokens(), cfg.hidden);
    let y1 = layer_norm(x.view(), params.ln1_gain.view(), params.ln1_bias.view());
    let q = linear(y1.view(), params.wq.view(), Some(params.bq.view()));
    let k = linear(y1.view(), params.wk.view(), Some(params.bk.view()));
    let v = linear(y1.view(), params.wv.view(), Some(params.bv.view()));
    let interior = attention_interior(q.view(), k.view(), cfg, 0);
    let context = attention_context(&interior, v.view(), cfg);
    let mut o = context.dot(&params.wo);
    o += &params.bo;
    let proj_keep = row_mask(cfg, DropoutSite::Projection, 0, n, h);
    let x2 = x + &dropout(o.view(), proj_keep.view(), cfg.dropout);
    let y2 = layer_norm(x2.view(), params.ln2_gain.view(), params.ln2_bias.view());
    let mlp_hidden = linear(y2.view(), params.mlp_a.view(), Some(params.mlp_a_bias.view()));
    let mlp_act = mlp_hidden.mapv(gelu);
    let mut u = mlp_act.dot(&params.mlp_b);
    u += &params.mlp_b_bias;
    let mlp_keep = row_mask(cfg, DropoutSite::Mlp, 0, n, h);
    let y = &x2 + &dropout(u.view(), mlp_keep.view(), cfg.dropout);
    ensure_finite("output", &y)?;
    let saved = SavedLayer {
        policy,
        head_offset: 0,
        row_offset: 0,
        x: x.clone(),
        y1,
        q,
        k,
        v,
        interior: (policy == RecomputePolicy::None).then_some(interior),
        context,
        proj_keep,
        x2,
        y2,
        mlp_hidden,
        mlp_act,
        mlp_keep,
    };
    let ledger = saved.ledger(&ByteConvention::default());
    Ok(ForwardOutput { y, saved, ledger })
}

/// Returns `(dx, parameter gradients)`.
pub fn reference_block_backward(
    dy: &Array2<f64>,
    params: &LayerParams,
    cfg: &BlockConfig,
    saved: &SavedLayer,
) -> Result<(Array2<f64>, LayerParams), SeqparError> {
    check_input(dy, cfg)?;
    let mut g = LayerParams::zeros(cfg.hidden);

    let du = dropout(dy.view(), saved.mlp_keep.view(), cfg.dropout);
    g.mlp_b_bias = du.sum_axis(Axis(0));
    g.mlp_b = saved.mlp_act.t().dot(&du);
    let dz = du.dot(&params.mlp_b.t());
    let dh = &dz * &saved.mlp_hidden.mapv(gelu_grad);
    g.mlp_a = saved.y2.t().dot(&dh);
    g.mlp_a_bias = dh.sum_axis(Axis(0));
    let dy2 = dh.dot(&params.mlp_a.t());
    let (dx2_ln, dg2, db2) = layer_norm_backward(saved.x2.view(), params.ln2_gain.view(), dy2.view());
    g.ln2_gain = dg2;
    g.ln2_bias = db2;
    let dx2 = dy + &dx2_ln;

    let d_o = dropout(dx2.view(), saved.proj_keep.view(), cfg.dropout);
    g.bo = d_o.sum_axis(Axis(0));
    g.wo = saved.context.t().dot(&d_o);
    let dcontext = d_o.dot(&params.wo.t());
    let mut scratch = None;
    let interior = interior_for_backward(saved, cfg, &mut scratch)?;
    let (dq, dk, dv) = attention_backward(saved, interior, dcontext.view(), cfg);
    g.wq = saved.y1.t().dot(&dq);
    g.wk = saved.y1.t().dot(&dk);
    g.wv = saved.y1.t().dot(&dv);
    g.bq = dq.sum_axis(Axis(0));
    g.bk = dk.sum_axis(Axis(0));
    g.bv = dv.sum_axis(Axis(0));
    let dy1 = dq.dot(&params.wq.t()) + dk.dot(&params.wk.t()) + dv.dot(&params.wv.t());
    let (dx_ln, dg1, db1) = layer_norm_backward(saved.x.view(), params.ln1_gain.view(), dy1.view());
    g.ln1_gain = dg1;
    g.ln1_bias = db1;
    let dx = dx2 + dx_ln;
    ensure_finite("input gradient", &dx)?;
    Ok((dx, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn toy_ledger_total() {
        let cfg = BlockConfig::new(2, 8, 4, 1);
        let out = reference_block_forward(&Array2::zeros((4, 8)), &LayerParams::zeros(8), &cfg, RecomputePolicy::None).unwrap();
        assert_eq!(out.ledger.total(), 1248);
        assert_eq!(out.ledger.entries.len(), 15);
    }

    #[test]
    fn zero_input_and_weights_give_zero_output() {
        let cfg = BlockConfig::new(2, 8, 4, 1);
        let out = reference_block_forward(&Array2::zeros((4, 8)), &LayerParams::zeros(8), &cfg, RecomputePolicy::None).unwrap();
        assert!(out.y.iter().all(|&v| v == 0.0));
        assert!(out.saved.proj_keep.iter().all(|&k| k == 1));
    }

    #[test]
    fn masks_are_stored_even_without_dropout() {
        let cfg = BlockConfig::new(2, 8, 4, 1);
        let x = Array2::from_elem((4, 8), 0.3);
        let a = reference_block_forward(&x, &LayerParams::random(8, 1), &cfg, RecomputePolicy::None).unwrap();
        let b = reference_block_forward(&x, &LayerParams::random(8, 1), &cfg.with_dropout(0.2), RecomputePolicy::None).unwrap();
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(a.ledger.get("dropout mask").unwrap().bytes, 32);
    }

    #[test]
    fn silent_branches_make_the_block_an_identity() {
        // With the projection and second MLP weights at zero the layer is
        // `y = x`, so `dx = dy` and only those weights receive gradient.
        let cfg = BlockConfig::new(2, 8, 4, 2);
        let mut params = LayerParams::random(8, 3);
        params.wo.fill(0.0);
        params.bo.fill(0.0);
        params.mlp_b.fill(0.0);
        params.mlp_b_bias.fill(0.0);
        let x = Array2::from_shape_fn((8, 8), |(i, j)| (i as f64 - j as f64) * 0.1);
        let out = reference_block_forward(&x, &params, &cfg, RecomputePolicy::None).unwrap();
        assert_eq!(out.y, x);
        let dy = Array2::from_shape_fn((8, 8), |(i, j)| ((i * 8 + j) % 5) as f64);
        let (dx, g) = reference_block_backward(&dy, &params, &cfg, &out.saved).unwrap();
        assert_eq!(dx, dy);
        assert!(g.wq.iter().chain(g.mlp_a.iter()).chain(g.ln1_gain.iter()).all(|&v| v == 0.0));
        assert_eq!(g.mlp_b_bias, dy.sum_axis(Axis(0)));
        assert_eq!(g.bo, dy.sum_axis(Axis(0)));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let cfg = BlockConfig::new(2, 8, 4, 1);
        let mut x = Array2::zeros((4, 8));
        x[[1, 1]] = f64::NAN;
        let err = reference_block_forward(&x, &LayerParams::zeros(8), &cfg, RecomputePolicy::None).unwrap_err();
        assert_eq!(err, SeqparError::NonFinite("input"));
    }
}
