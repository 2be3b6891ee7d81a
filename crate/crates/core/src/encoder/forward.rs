use ndarray::{s, Array1, Array2, Axis};

use super::attention::{attention_reweighted, HeadAttention};
use super::{lit, Block, EncoderConfig, EncoderModel, Embedding, LayerNorm, Scalar};
use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &Array2<T>,
    ln: &LayerNorm<T>,
    eps: f64,
) -> (Array2<T>, LnCache<T>) {
    let d = lit::<T>(x.ncols() as f64);
    let eps = lit::<T>(eps);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| *v * *v).sum::<T>() / d;
        *r = T::one() / (var + eps).sqrt();
        let scale = *r;
        row.mapv_inplace(|v| v * scale);
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LnCache { xhat, rstd })
}

/// Cached intermediates of one transformer block, enough to run it backward.
#[derive(Debug, Clone)]
pub struct BlockTrace<T> {
    /// Z^{l-1}
    pub input: Array2<T>,
    pub(crate) ln_1: LnCache<T>,
    pub(crate) q: Array2<T>,
    pub(crate) k: Array2<T>,
    pub(crate) v: Array2<T>,
    /// One entry per head: logits and attention maps.
    pub heads: Vec<HeadAttention<T>>,
    pub(crate) ln_2: LnCache<T>,
    pub(crate) pre_act: Array2<T>,
    /// Z^l
    pub output: Array2<T>,
    pub reweighted: bool,
}

/// Per-block activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationState<T> {
    pub blocks: Vec<BlockTrace<T>>,
    pub(crate) final_ln: LnCache<T>,
    pub eos: usize,
}

pub(crate) fn embed<T: Scalar>(
    ids: &[u32],
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
) -> Result<Array2<T>> {
    if ids.len() > cfg.context_length {
        return Err(Error::OverLength {
            len: ids.len(),
            context_length: cfg.context_length,
        });
    }
    let mut x = Array2::zeros((ids.len(), cfg.model_dim));
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= model.token_embedding.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "token id {id} outside vocabulary of {}",
                model.token_embedding.nrows()
            )));
        }
        let row = &model.token_embedding.row(id) + &model.positional_embedding.row(i);
        x.row_mut(i).assign(&row);
    }
    Ok(x)
}

fn block_forward<T: Scalar>(
    block: &Block<T>,
    cfg: &EncoderConfig,
    x: Array2<T>,
    weights: Option<&[T]>,
    capture: bool,
) -> Result<(Array2<T>, Option<BlockTrace<T>>)> {
    let (h, ln_1) = layer_norm(&x, &block.ln_1, cfg.layer_norm_eps);
    let q = block.q.forward(&h);
    let k = block.k.forward(&h);
    let v = block.v.forward(&h);
    let dh = cfg.head_dim();
    let mut mixed = Array2::zeros(x.dim());
    let mut heads = Vec::with_capacity(if capture { cfg.num_heads } else { 0 });
    for head in 0..cfg.num_heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let att = attention_reweighted(
            q.slice(cols),
            k.slice(cols),
            v.slice(cols),
            weights,
            true,
        )?;
        mixed.slice_mut(cols).assign(&att.output);
        if capture {
            heads.push(att);
        }
    }
    let mid = &x + &block.out.forward(&mixed);
    let (h2, ln_2) = layer_norm(&mid, &block.ln_2, cfg.layer_norm_eps);
    let pre_act = block.fc1.forward(&h2);
    let act = pre_act.mapv(|u| cfg.activation.apply(u));
    let output = &mid + &block.fc2.forward(&act);
    let trace = capture.then(|| BlockTrace {
        input: x,
        ln_1,
        q,
        k,
        v,
        heads,
        ln_2,
        pre_act,
        output: output.clone(),
        reweighted: weights.is_some(),
    });
    Ok((output, trace))
}

/// Run blocks `first..last` (0-based, exclusive end) on `x`.
pub(crate) fn run_blocks<T: Scalar>(
    mut x: Array2<T>,
    first: usize,
    last: usize,
    weights: Option<&[T]>,
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
    mut traces: Option<&mut Vec<BlockTrace<T>>>,
) -> Result<Array2<T>> {
    for idx in first..last {
        let w = weights.filter(|_| cfg.is_reweighted(idx + 1));
        let (out, trace) = block_forward(&model.blocks[idx], cfg, x, w, traces.is_some())?;
        if let (Some(traces), Some(trace)) = (traces.as_deref_mut(), trace) {
            traces.push(trace);
        }
        x = out;
    }
    Ok(x)
}

/// Final layer norm on the EOS row followed by the text projection.
pub(crate) fn project_eos<T: Scalar>(
    x: &Array2<T>,
    eos: usize,
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
) -> Result<(Embedding<T>, LnCache<T>)> {
    let row = x.slice(s![eos..eos + 1, ..]).to_owned();
    let (normed, cache) = layer_norm(&row, &model.final_ln, cfg.layer_norm_eps);
    let projected = normed.index_axis(Axis(0), 0).dot(&model.text_projection);
    if projected.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("text embedding".into()));
    }
    Ok((Embedding::new(projected.to_vec()), cache))
}

pub(crate) fn prepare_weights<T: Scalar>(weights: &[f64], seq_len: usize) -> Result<Vec<T>> {
    if weights.len() != seq_len {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for a sequence of {seq_len} tokens",
            weights.len()
        )));
    }
    weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if w.is_finite() && w >= 0.0 {
                Ok(lit(w))
            } else {
                Err(Error::InvalidWeight {
                    what: format!("token {i}"),
                    value: w,
                })
            }
        })
        .collect()
}

fn forward<T: Scalar>(
    seq: &TokenSequence,
    weights: Option<&[T]>,
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
    capture: bool,
) -> Result<(Embedding<T>, Option<ActivationState<T>>)> {
    cfg.validate()?;
    model.check_shapes(cfg)?;
    let x = embed(seq.ids(), model, cfg)?;
    let mut traces = Vec::new();
    let x = run_blocks(
        x,
        0,
        cfg.num_blocks,
        weights,
        model,
        cfg,
        capture.then_some(&mut traces),
    )?;
    let eos = seq.eos_position();
    let (embedding, final_ln) = project_eos(&x, eos, model, cfg)?;
    let state = capture.then(|| ActivationState {
        blocks: traces,
        final_ln,
        eos,
    });
    Ok((embedding, state))
}

/// Encode a prompt with per-token weights (`weights.len() == seq.len()`).
pub fn encode<T: Scalar>(
    seq: &TokenSequence,
    weights: &[f64],
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
) -> Result<Embedding<T>> {
    let w = prepare_weights::<T>(weights, seq.len())?;
    Ok(forward(seq, Some(&w), model, cfg, false)?.0)
}

/// As [`encode`], also returning every block's activations.
pub fn encode_with_state<T: Scalar>(
    seq: &TokenSequence,
    weights: &[f64],
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
) -> Result<(Embedding<T>, ActivationState<T>)> {
    let w = prepare_weights::<T>(weights, seq.len())?;
    let (e, state) = forward(seq, Some(&w), model, cfg, true)?;
    Ok((e, state.expect("captured")))
}

/// The unmodified encoder: plain softmax attention in every block.
pub fn encode_plain<T: Scalar>(
    seq: &TokenSequence,
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
) -> Result<Embedding<T>> {
    Ok(forward(seq, None, model, cfg, false)?.0)
}
