//! Runtime of reweighted encoding relative to the plain encoder.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::encoder::{encode, encode_plain, EncoderConfig, EncoderModel, Scalar};
use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// Plain encoder against reweighted encoding with the given weights.
    Reweighted,
    /// Plain against plain, to gauge timer noise.
    PlainVsPlain,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub iterations: usize,
    pub warmup: usize,
    pub plain_mean_us: f64,
    pub other_mean_us: f64,
    /// `other_mean_us / plain_mean_us`.
    pub ratio: f64,
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Time `iterations` plain and `iterations` compared encodings, alternating
/// which goes first so drift and cache effects hit both sides equally.
pub fn run<T: Scalar>(
    seq: &TokenSequence,
    weights: &[f64],
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
    iterations: usize,
    warmup: usize,
    mode: BenchMode,
) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::InvalidConfig("bench needs at least one iteration".into()));
    }
    let other = || match mode {
        BenchMode::Reweighted => encode(seq, weights, model, cfg).map(|_| ()),
        BenchMode::PlainVsPlain => encode_plain(seq, model, cfg).map(|_| ()),
    };
    let plain = || encode_plain(seq, model, cfg).map(|_| ());
    for _ in 0..warmup {
        plain()?;
        other()?;
    }
    let (mut tp, mut to) = (Duration::ZERO, Duration::ZERO);
    for i in 0..iterations {
        let order: [bool; 2] = if i % 2 == 0 { [true, false] } else { [false, true] };
        for is_plain in order {
            let start = Instant::now();
            if is_plain {
                std::hint::black_box(plain()?);
                tp += start.elapsed();
            } else {
                std::hint::black_box(other()?);
                to += start.elapsed();
            }
        }
    }
    let plain_mean_us = micros(tp) / iterations as f64;
    let other_mean_us = micros(to) / iterations as f64;
    Ok(BenchReport {
        mode,
        iterations,
        warmup,
        plain_mean_us,
        other_mean_us,
        ratio: other_mean_us / plain_mean_us,
    })
}
