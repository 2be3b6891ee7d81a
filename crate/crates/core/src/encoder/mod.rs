//! CLIP-style causal text transformer with per-token attention reweighting.
//!
//! From a configurable block onward, every self-attention softmax multiplies
//! the exponentiated logit of column `n` by the token weight `w_n` before
//! normalizing, so a weight of 0 removes a token from attention exactly and a
//! uniform rescaling of all weights changes nothing.

mod attention;
mod backward;
mod baseline;
mod forward;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{attention_reweighted, HeadAttention};
pub use backward::backward_weights;
pub use baseline::encode_prompt_weighting;
pub use forward::{encode, encode_plain, encode_with_state, ActivationState, BlockTrace};

/// Float types the encoder runs in: `f32` for inference, `f64` for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + LinalgScalar
        + ScalarOperand
        + Send
        + Sync
        + Debug
        + Display
        + Default
        + Sum
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + 'static
{
}

pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 converts to every Scalar")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweightMode {
    /// Reweight the start block and every block after it.
    FromBlockOnward,
    /// Reweight only the start block.
    SingleBlock,
}

impl std::str::FromStr for ReweightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "from_block_onward" | "from-block-onward" | "onward" => Ok(Self::FromBlockOnward),
            "single_block" | "single-block" | "single" => Ok(Self::SingleBlock),
            _ => Err(format!("unknown reweight mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    QuickGelu,
    Gelu,
}

impl Activation {
    pub(crate) fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::QuickGelu => x / (T::one() + (-lit::<T>(1.702) * x).exp()),
            Activation::Gelu => {
                let xf = x.to_f64().unwrap_or(f64::NAN);
                lit(0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2)))
            }
        }
    }

    pub(crate) fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::QuickGelu => {
                let a = lit::<T>(1.702);
                let s = T::one() / (T::one() + (-a * x).exp());
                s + a * x * s * (T::one() - s)
            }
            Activation::Gelu => {
                let xf = x.to_f64().unwrap_or(f64::NAN);
                let cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
                lit(cdf + xf * pdf)
            }
        }
    }
}

pub const DEFAULT_REWEIGHT_START: usize = 7;
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub projection_dim: usize,
    pub context_length: usize,
    pub activation: Activation,
    pub layer_norm_eps: f64,
    /// 1-based; `num_blocks + 1` disables reweighting.
    pub reweight_start_block: usize,
    pub reweight_mode: ReweightMode,
    pub temperature: f64,
}

impl EncoderConfig {
    /// The OpenAI CLIP ViT-L/14 text tower.
    pub fn clip_vit_l14() -> Self {
        Self {
            vocab_size: 49408,
            num_blocks: 12,
            model_dim: 768,
            num_heads: 12,
            mlp_dim: 3072,
            projection_dim: 768,
            context_length: 77,
            activation: Activation::QuickGelu,
            layer_norm_eps: 1e-5,
            reweight_start_block: DEFAULT_REWEIGHT_START,
            reweight_mode: ReweightMode::FromBlockOnward,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn with_reweighting(mut self, start: usize, mode: ReweightMode) -> Self {
        self.reweight_start_block = start;
        self.reweight_mode = mode;
        self
    }

    /// Whether block `block` (1-based) uses reweighted attention.
    pub fn is_reweighted(&self, block: usize) -> bool {
        match self.reweight_mode {
            ReweightMode::FromBlockOnward => block >= self.reweight_start_block,
            ReweightMode::SingleBlock => block == self.reweight_start_block,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.num_blocks == 0 || self.model_dim == 0 || self.num_heads == 0 {
            return fail("num_blocks, model_dim and num_heads must be positive".into());
        }
        if self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if !(1..=self.num_blocks + 1).contains(&self.reweight_start_block) {
            return fail(format!(
                "reweight start block {} outside 1..={}",
                self.reweight_start_block,
                self.num_blocks + 1
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if self.context_length < 2 {
            return fail("context length must be at least 2".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// Stored input-major: `y = x · weight + bias`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub(crate) fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln_1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub ln_2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    /// vocab × model_dim
    pub token_embedding: Array2<T>,
    /// context_length × model_dim
    pub positional_embedding: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub final_ln: LayerNorm<T>,
    /// model_dim × projection_dim
    pub text_projection: Array2<T>,
}

impl<T: Scalar> EncoderModel<T> {
    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        let m2 = |a: &Array2<T>| a.mapv(|x| lit::<U>(x.to_f64().unwrap_or(f64::NAN)));
        let m1 = |a: &Array1<T>| a.mapv(|x| lit::<U>(x.to_f64().unwrap_or(f64::NAN)));
        let lin = |l: &Linear<T>| Linear {
            weight: m2(&l.weight),
            bias: m1(&l.bias),
        };
        let ln = |l: &LayerNorm<T>| LayerNorm {
            gamma: m1(&l.gamma),
            beta: m1(&l.beta),
        };
        EncoderModel {
            token_embedding: m2(&self.token_embedding),
            positional_embedding: m2(&self.positional_embedding),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln_1: ln(&b.ln_1),
                    q: lin(&b.q),
                    k: lin(&b.k),
                    v: lin(&b.v),
                    out: lin(&b.out),
                    ln_2: ln(&b.ln_2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            final_ln: ln(&self.final_ln),
            text_projection: m2(&self.text_projection),
        }
    }

    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        let mut push2 = |name: String, a: &Array2<T>| {
            out.push((name, a.shape().to_vec(), a.iter().copied().collect()));
        };
        push2("token_embedding".into(), &self.token_embedding);
        push2("positional_embedding".into(), &self.positional_embedding);
        push2("text_projection".into(), &self.text_projection);
        let mut vecs = vec![
            ("final_ln.gamma".to_string(), &self.final_ln.gamma),
            ("final_ln.beta".to_string(), &self.final_ln.beta),
        ];
        let mut mats = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, l) in [("ln_1", &b.ln_1), ("ln_2", &b.ln_2)] {
                vecs.push((format!("blocks.{i}.{n}.gamma"), &l.gamma));
                vecs.push((format!("blocks.{i}.{n}.beta"), &l.beta));
            }
            for (n, l) in [
                ("q", &b.q),
                ("k", &b.k),
                ("v", &b.v),
                ("out", &b.out),
                ("fc1", &b.fc1),
                ("fc2", &b.fc2),
            ] {
                mats.push((format!("blocks.{i}.{n}.weight"), &l.weight));
                vecs.push((format!("blocks.{i}.{n}.bias"), &l.bias));
            }
        }
        for (name, a) in mats {
            push2(name, a);
        }
        for (name, a) in vecs {
            out.push((name, vec![a.len()], a.iter().copied().collect()));
        }
        out
    }

    /// Order-sensitive hash over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, shape, values) in self.named_tensors() {
            name.hash(&mut h);
            shape.hash(&mut h);
            for v in values {
                v.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Check every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let d = cfg.model_dim;
        let expect2 = |what: &str, a: &Array2<T>, rows: usize, cols: usize| {
            if a.dim() == (rows, cols) {
                Ok(())
            } else {
                Err(Error::ShapeMismatch(format!(
                    "{what}: expected {rows}x{cols}, got {}x{}",
                    a.nrows(),
                    a.ncols()
                )))
            }
        };
        let expect1 = |what: &str, a: &Array1<T>, len: usize| {
            if a.len() == len {
                Ok(())
            } else {
                Err(Error::ShapeMismatch(format!(
                    "{what}: expected {len}, got {}",
                    a.len()
                )))
            }
        };
        expect2("token_embedding", &self.token_embedding, cfg.vocab_size, d)?;
        expect2("positional_embedding", &self.positional_embedding, cfg.context_length, d)?;
        expect2("text_projection", &self.text_projection, d, cfg.projection_dim)?;
        expect1("final_ln.gamma", &self.final_ln.gamma, d)?;
        expect1("final_ln.beta", &self.final_ln.beta, d)?;
        if self.blocks.len() != cfg.num_blocks {
            return Err(Error::ShapeMismatch(format!(
                "expected {} blocks, got {}",
                cfg.num_blocks,
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, l) in [("ln_1", &b.ln_1), ("ln_2", &b.ln_2)] {
                expect1(&format!("blocks.{i}.{n}.gamma"), &l.gamma, d)?;
                expect1(&format!("blocks.{i}.{n}.beta"), &l.beta, d)?;
            }
            for (n, l, rows, cols) in [
                ("q", &b.q, d, d),
                ("k", &b.k, d, d),
                ("v", &b.v, d, d),
                ("out", &b.out, d, d),
                ("fc1", &b.fc1, d, cfg.mlp_dim),
                ("fc2", &b.fc2, cfg.mlp_dim, d),
            ] {
                expect2(&format!("blocks.{i}.{n}.weight"), &l.weight, rows, cols)?;
                expect1(&format!("blocks.{i}.{n}.bias"), &l.bias, cols)?;
            }
        }
        Ok(())
    }
}

/// A vector in the joint text/image space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T = f32> {
    pub vector: Vec<T>,
    pub normalized: bool,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(vector: Vec<T>) -> Self {
        Self {
            vector,
            normalized: false,
        }
    }

    pub fn norm(&self) -> T {
        self.vector.iter().map(|x| *x * *x).sum::<T>().sqrt()
    }

    pub fn normalize(&self) -> Self {
        let n = self.norm();
        Self {
            vector: self.vector.iter().map(|x| *x / n).collect(),
            normalized: true,
        }
    }

    pub fn dot(&self, other: &[T]) -> T {
        self.vector.iter().zip(other).map(|(a, b)| *a * *b).sum()
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }

    pub fn to_f64(&self) -> Embedding<f64> {
        Embedding {
            vector: self.vector.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect(),
            normalized: self.normalized,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::clip_vit_l14();
        assert!(cfg.validate().is_ok());
        cfg.reweight_start_block = 13;
        assert!(cfg.validate().is_ok());
        cfg.reweight_start_block = 14;
        assert!(cfg.validate().is_err());
        cfg.reweight_start_block = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::clip_vit_l14();
        cfg.num_heads = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reweighted_blocks() {
        let cfg = EncoderConfig::clip_vit_l14();
        let on: Vec<_> = (1..=12).filter(|&b| cfg.is_reweighted(b)).collect();
        assert_eq!(on, (7..=12).collect::<Vec<_>>());
        let cfg = cfg.with_reweighting(3, ReweightMode::SingleBlock);
        let on: Vec<_> = (1..=12).filter(|&b| cfg.is_reweighted(b)).collect();
        assert_eq!(on, vec![3]);
        let cfg = cfg.with_reweighting(13, ReweightMode::FromBlockOnward);
        assert!((1..=12).all(|b| !cfg.is_reweighted(b)));
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [Activation::QuickGelu, Activation::Gelu] {
            for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-7, "{act:?} at {x}");
            }
        }
    }
}
