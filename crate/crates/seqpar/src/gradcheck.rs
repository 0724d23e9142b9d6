//! Central finite-difference check of every input and parameter gradient.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::block::{BlockConfig, LayerParams, RecomputePolicy};
use crate::error::SeqparError;
use crate::exec::{forward, run_layer, Execution};

pub const FD_STEP: f64 = 1e-5;
/// Gradient norms below this are treated as zero; central differences at
/// `FD_STEP` carry roughly 1e-11 of rounding noise.
pub const ZERO_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the plain difference norm when both are below `ZERO_NORM`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < ZERO_NORM {
        diff
    } else {
        diff / scale
    }
}

fn loss(exec: Execution, x: &Array2<f64>, params: &LayerParams, cfg: &BlockConfig, weights: &Array2<f64>) -> Result<f64, SeqparError> {
    Ok((forward(exec, x, params, cfg)? * weights).sum())
}

fn get(p: &LayerParams, name: &str, i: usize) -> f64 {
    let mut out = 0.0;
    p.visit(|n, v| {
        if n == name {
            out = v[i];
        }
    });
    out
}

fn set(p: &mut LayerParams, name: &str, i: usize, value: f64) {
    p.visit_mut(|n, v| {
        if n == name {
            v[i] = value;
        }
    });
}

/// Compares the analytic gradients of `Σ y ⊙ weights` with central differences.
pub fn gradcheck(
    exec: Execution,
    x: &Array2<f64>,
    params: &LayerParams,
    cfg: &BlockConfig,
    policy: RecomputePolicy,
    weights: &Array2<f64>,
) -> Result<GradcheckReport, SeqparError> {
    let run = run_layer(exec, x, params, cfg, policy, weights)?;
    let mut tensors = Vec::new();

    let mut numeric = vec![0.0; x.len()];
    let mut probe = x.as_standard_layout().into_owned();
    for i in 0..x.len() {
        let orig = probe.as_slice().expect("contiguous")[i];
        probe.as_slice_mut().expect("contiguous")[i] = orig + FD_STEP;
        let up = loss(exec, &probe, params, cfg, weights)?;
        probe.as_slice_mut().expect("contiguous")[i] = orig - FD_STEP;
        let down = loss(exec, &probe, params, cfg, weights)?;
        probe.as_slice_mut().expect("contiguous")[i] = orig;
        numeric[i] = (up - down) / (2.0 * FD_STEP);
    }
    tensors.push(TensorCheck { name: "input".into(), rel_error: relative_error(&run.dx.iter().copied().collect::<Vec<_>>(), &numeric) });

    let mut analytic: Vec<(&'static str, Vec<f64>)> = Vec::new();
    run.grads.visit(|name, v| analytic.push((name, v.to_vec())));
    let mut probe = params.clone();
    for (name, grad) in analytic {
        let mut numeric = vec![0.0; grad.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = get(&probe, name, i);
            set(&mut probe, name, i, orig + FD_STEP);
            let up = loss(exec, x, &probe, cfg, weights)?;
            set(&mut probe, name, i, orig - FD_STEP);
            let down = loss(exec, x, &probe, cfg, weights)?;
            set(&mut probe, name, i, orig);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        tensors.push(TensorCheck { name: name.into(), rel_error: relative_error(&grad, &numeric) });
    }
    let max_rel_error = tensors.iter().fold(0.0f64, |m, c| m.max(c.rel_error));
    Ok(GradcheckReport { tensors, max_rel_error })
}
