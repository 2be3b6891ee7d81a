//! Reverse pass from an embedding gradient to the token weights.
//!
//! Only activations are differentiated; model parameters receive no gradient.
//! The pass stops at the lowest reweighted block since nothing below it
//! depends on the weights.

use ndarray::{s, Array2, Axis};

use super::forward::{ActivationState, BlockTrace, LnCache};
use super::{lit, Block, EncoderConfig, EncoderModel, LayerNorm, Scalar};
use crate::error::{Error, Result};

fn ln_backward<T: Scalar>(dy: &Array2<T>, cache: &LnCache<T>, ln: &LayerNorm<T>) -> Array2<T> {
    let d = lit::<T>(dy.ncols() as f64);
    let mut dx = dy * &ln.gamma;
    for ((mut row, xhat), &rstd) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean = row.sum() / d;
        let mean_proj = row.iter().zip(xhat.iter()).map(|(g, x)| *g * *x).sum::<T>() / d;
        for (g, x) in row.iter_mut().zip(xhat.iter()) {
            *g = rstd * (*g - mean - *x * mean_proj);
        }
    }
    dx
}

fn block_backward<T: Scalar>(
    block: &Block<T>,
    trace: &BlockTrace<T>,
    cfg: &EncoderConfig,
    d_out: Array2<T>,
    weights: &[T],
    d_weights: &mut [T],
) -> Array2<T> {
    // MLP branch
    let d_act = d_out.dot(&block.fc2.weight.t());
    let d_pre = &d_act * &trace.pre_act.mapv(|u| cfg.activation.derivative(u));
    let d_h2 = d_pre.dot(&block.fc1.weight.t());
    let d_mid = &d_out + &ln_backward(&d_h2, &trace.ln_2, &block.ln_2);

    // attention branch
    let d_mixed = d_mid.dot(&block.out.weight.t());
    let dh = cfg.head_dim();
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let n = d_mid.nrows();
    let mut dq = Array2::zeros(d_mid.dim());
    let mut dk = Array2::zeros(d_mid.dim());
    let mut dv = Array2::zeros(d_mid.dim());
    for (head, att) in trace.heads.iter().enumerate() {
        let cols = s![.., head * dh..(head + 1) * dh];
        let d_o = d_mixed.slice(cols);
        let da = d_o.dot(&trace.v.slice(cols).t());
        dv.slice_mut(cols).assign(&att.attention.t().dot(&d_o));
        let mut ds = Array2::<T>::zeros((n, n));
        for m in 0..n {
            let a = att.attention.row(m);
            let g = da.row(m);
            let g_bar = (0..=m).map(|j| a[j] * g[j]).sum::<T>();
            for j in 0..=m {
                ds[[m, j]] = a[j] * (g[j] - g_bar);
            }
            if trace.reweighted {
                // e_mj / Z_m, recomputed with the forward pass's row maximum
                let logits = att.logits.row(m);
                let max = (0..=m)
                    .filter(|&j| weights[j] > T::zero())
                    .map(|j| logits[j])
                    .fold(T::neg_infinity(), T::max);
                let e: Vec<T> = (0..=m).map(|j| (logits[j] - max).exp()).collect();
                let z = (0..=m).map(|j| weights[j] * e[j]).sum::<T>();
                for j in 0..=m {
                    d_weights[j] += e[j] / z * (g[j] - g_bar);
                }
            }
        }
        dq.slice_mut(cols)
            .assign(&(ds.dot(&trace.k.slice(cols)) * scale));
        dk.slice_mut(cols)
            .assign(&(ds.t().dot(&trace.q.slice(cols)) * scale));
    }
    let d_h = dq.dot(&block.q.weight.t()) + dk.dot(&block.k.weight.t()) + dv.dot(&block.v.weight.t());
    &d_mid + &ln_backward(&d_h, &trace.ln_1, &block.ln_1)
}

/// Gradient of a scalar loss with respect to every token weight, given the
/// loss gradient at the (unnormalized) output embedding.
pub fn backward_weights<T: Scalar>(
    state: &ActivationState<T>,
    weights: &[T],
    d_embedding: &[T],
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
) -> Result<Vec<T>> {
    let seq_len = state.eos + 1;
    if weights.len() != seq_len || d_embedding.len() != cfg.projection_dim {
        return Err(Error::ShapeMismatch(format!(
            "backward: {} weights for {seq_len} tokens, gradient of {} for projection {}",
            weights.len(),
            d_embedding.len(),
            cfg.projection_dim
        )));
    }
    let mut d_weights = vec![T::zero(); seq_len];
    let Some(lowest) = state.blocks.iter().position(|b| b.reweighted) else {
        return Ok(d_weights);
    };
    let d_emb = ndarray::ArrayView1::from(d_embedding);
    let d_normed = model.text_projection.dot(&d_emb).insert_axis(Axis(0));
    let d_row = ln_backward(&d_normed, &state.final_ln, &model.final_ln);
    let mut dx = Array2::zeros((seq_len, cfg.model_dim));
    dx.row_mut(state.eos).assign(&d_row.row(0));
    for idx in (lowest..state.blocks.len()).rev() {
        dx = block_backward(
            &model.blocks[idx],
            &state.blocks[idx],
            cfg,
            dx,
            weights,
            &mut d_weights,
        );
    }
    if d_weights.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("weight gradient".into()));
    }
    Ok(d_weights)
}
