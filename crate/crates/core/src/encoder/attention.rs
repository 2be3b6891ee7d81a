use ndarray::{Array2, ArrayView2};

use super::{lit, Scalar};
use crate::error::{Error, Result};

/// One head's attention result.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention<T> {
    /// seq × head_dim
    pub output: Array2<T>,
    /// Row-stochastic over unmasked columns; masked entries are exactly 0.
    pub attention: Array2<T>,
    /// Scaled pre-softmax logits; masked entries are -inf.
    pub logits: Array2<T>,
}

/// Scaled dot-product attention with the softmax numerator of column `n`
/// multiplied by `weights[n]`:
///
/// `a[m][n] = w_n · exp(s·q_m·k_n) / Σ_j w_j · exp(s·q_m·k_j)` over unmasked `j`,
/// with `s = 1/√d_head`. `None` is plain softmax attention.
///
/// The row maximum is taken over columns with nonzero weight only, and the
/// weights multiply the exponentials directly so that `w = 0` is exact.
pub fn attention_reweighted<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    weights: Option<&[T]>,
    causal: bool,
) -> Result<HeadAttention<T>> {
    let n = q.nrows();
    if k.nrows() != n || v.nrows() != n || q.ncols() != k.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "attention q {:?} k {:?} v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a sequence of {n}",
                w.len()
            )));
        }
        if let Some(bad) = w.iter().find(|x| !(x.is_finite() && **x >= T::zero())) {
            return Err(Error::InvalidWeight {
                what: "attention weight".into(),
                value: bad.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    let scale = lit::<T>(1.0 / (q.ncols() as f64).sqrt());
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|x| x * scale);
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("attention logits".into()));
    }
    let mut attention = Array2::<T>::zeros((n, n));
    for m in 0..n {
        let visible = if causal { m + 1 } else { n };
        let row = logits.row(m);
        let mut max = T::neg_infinity();
        for j in 0..visible {
            let live = weights.map_or(true, |w| w[j] > T::zero());
            if live && row[j] > max {
                max = row[j];
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::DegenerateRow { row: m });
        }
        let mut total = T::zero();
        for j in 0..visible {
            // exp would overflow relative to `max` on a zero-weight column
            let u = match weights {
                Some(w) if w[j] == T::zero() => T::zero(),
                Some(w) => w[j] * (row[j] - max).exp(),
                None => (row[j] - max).exp(),
            };
            attention[[m, j]] = u;
            total += u;
        }
        for j in 0..visible {
            attention[[m, j]] /= total;
        }
    }
    if causal {
        for m in 0..n {
            for j in m + 1..n {
                logits[[m, j]] = T::neg_infinity();
            }
        }
    }
    let output = attention.dot(&v);
    Ok(HeadAttention {
        output,
        attention,
        logits,
    })
}
