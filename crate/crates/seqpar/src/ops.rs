//! Row-wise primitives shared by the serial and the sharded block.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Layer norm over each row.
pub fn layer_norm(x: ArrayView2<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.to_owned();
    for mut row in y.rows_mut() {
        let (mean, inv_std) = row_stats(row.view());
        row.map_inplace(|v| *v = (*v - mean) * inv_std);
        Zip::from(&mut row).and(gain).and(bias).for_each(|v, &g, &b| *v = *v * g + b);
    }
    y
}

fn row_stats(row: ArrayView1<f64>) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.sum() / n;
    let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

/// Returns `(dx, dgain, dbias)`; statistics are recomputed from `x`.
pub fn layer_norm_backward(
    x: ArrayView2<f64>,
    gain: ArrayView1<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let h = x.ncols();
    let mut dx = Array2::zeros(x.dim());
    let mut dgain = Array1::zeros(h);
    let dbias = dy.sum_axis(Axis(0));
    for ((xr, dyr), mut dxr) in x.rows().into_iter().zip(dy.rows()).zip(dx.rows_mut()) {
        let (mean, inv_std) = row_stats(xr);
        let xhat: Array1<f64> = xr.mapv(|v| (v - mean) * inv_std);
        Zip::from(&mut dgain).and(&dyr).and(&xhat).for_each(|g, &d, &xh| *g += d * xh);
        let dxhat: Array1<f64> = &dyr * &gain;
        let mean_d = dxhat.sum() / h as f64;
        let mean_dx = (&dxhat * &xhat).sum() / h as f64;
        Zip::from(&mut dxr)
            .and(&dxhat)
            .and(&xhat)
            .for_each(|o, &d, &xh| *o = inv_std * (d - mean_d - xh * mean_dx));
    }
    (dx, dgain, dbias)
}

/// Tanh-approximated GeLU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// `x @ w + bias` with the bias broadcast over rows.
pub fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, bias: Option<ArrayView1<f64>>) -> Array2<f64> {
    let mut y = x.dot(&w);
    if let Some(b) = bias {
        y += &b;
    }
    y
}

/// Applies keep flags with inverted scaling.
pub fn dropout(x: ArrayView2<f64>, keep: ArrayView2<u8>, p: f64) -> Array2<f64> {
    let scale = 1.0 / (1.0 - p);
    Zip::from(x).and(keep).map_collect(|&v, &k| if k == 1 { v * scale } else { 0.0 })
}

/// Softmax of `q kᵀ / sqrt(d)` for one head, with an optional causal mask.
pub fn attention_probs(q: ArrayView2<f64>, k: ArrayView2<f64>, causal: bool) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t());
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v * scale);
        if causal {
            row.slice_mut(ndarray::s![i + 1..]).fill(f64::NEG_INFINITY);
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    scores
}

/// Gradients of one attention head given the stored interior.
/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_head_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    probs: ArrayView2<f64>,
    keep: ArrayView2<u8>,
    dropped: ArrayView2<f64>,
    p: f64,
    dc: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let dv = dropped.t().dot(&dc);
    let d_dropped = dc.dot(&v.t());
    let d_probs = dropout(d_dropped.view(), keep, p);
    let mut ds = Array2::zeros(probs.dim());
    for ((pr, dpr), mut dsr) in probs.rows().into_iter().zip(d_probs.rows()).zip(ds.rows_mut()) {
        let dot = (&pr * &dpr).sum();
        Zip::from(&mut dsr).and(&pr).and(&dpr).for_each(|o, &pv, &dp| *o = pv * (dp - dot) * scale);
    }
    (ds.dot(&k), ds.t().dot(&q), dv)
}
