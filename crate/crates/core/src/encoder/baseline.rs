//! Modified prompt weighting: blend intermediate token states between the
//! prompt and an empty prompt, then continue with plain attention.

use ndarray::Array2;

use super::forward::{embed, prepare_weights, project_eos, run_blocks};
use super::{EncoderConfig, EncoderModel, Embedding, Scalar};
use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

/// Encode with the blend `ẑ_i = z_empty_i + w_i·(z_i − z_empty_i)` applied
/// to the input of block `inject_block` (1-based; `num_blocks + 1` blends the
/// final block's output).
///
/// The empty prompt is `[SOS, EOS]` padded with the EOS id to the prompt's
/// length. The embedding is read at the real prompt's EOS position.
pub fn encode_prompt_weighting<T: Scalar>(
    seq: &TokenSequence,
    weights: &[f64],
    model: &EncoderModel<T>,
    cfg: &EncoderConfig,
    inject_block: usize,
) -> Result<Embedding<T>> {
    cfg.validate()?;
    model.check_shapes(cfg)?;
    if !(1..=cfg.num_blocks + 1).contains(&inject_block) {
        return Err(Error::InvalidConfig(format!(
            "inject block {inject_block} outside 1..={}",
            cfg.num_blocks + 1
        )));
    }
    let w = prepare_weights::<T>(weights, seq.len())?;
    let ids = seq.ids();
    let (sos, eos) = (ids[0], ids[ids.len() - 1]);
    let mut empty_ids = vec![sos, eos];
    empty_ids.resize(ids.len(), eos);

    let stop = inject_block - 1;
    let z = run_blocks(embed(ids, model, cfg)?, 0, stop, None, model, cfg, None)?;
    let z_empty = run_blocks(embed(&empty_ids, model, cfg)?, 0, stop, None, model, cfg, None)?;
    let mut blended = Array2::zeros(z.dim());
    for (i, &wi) in w.iter().enumerate() {
        let row = &z_empty.row(i) + &((&z.row(i) - &z_empty.row(i)) * wi);
        blended.row_mut(i).assign(&row);
    }
    let x = run_blocks(blended, stop, cfg.num_blocks, None, model, cfg, None)?;
    Ok(project_eos(&x, seq.eos_position(), model, cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode_plain;
    use crate::synth;
    use crate::tokenizer::tokenize;

    #[test]
    fn ones_and_zeros_hit_the_endpoints() {
        let vocab = synth::toy_vocabulary(&["photo", "striped", "cat"]);
        let cfg = synth::toy_config(vocab.size(), 3, 16, 2);
        let model = synth::toy_model::<f64>(&cfg, 3);
        let seq = tokenize("a photo of a striped cat", &vocab).unwrap();
        let plain = encode_plain(&seq, &model, &cfg).unwrap();

        let mut empty_ids = vec![vocab.sos_id(), vocab.eos_id()];
        empty_ids.resize(seq.len(), vocab.eos_id());
        let x = embed(&empty_ids, &model, &cfg).unwrap();
        let x = run_blocks(x, 0, cfg.num_blocks, None, &model, &cfg, None).unwrap();
        let empty = project_eos(&x, seq.eos_position(), &model, &cfg).unwrap().0;

        for inject in 1..=cfg.num_blocks + 1 {
            let ones = encode_prompt_weighting(&seq, &vec![1.0; seq.len()], &model, &cfg, inject).unwrap();
            let zeros = encode_prompt_weighting(&seq, &vec![0.0; seq.len()], &model, &cfg, inject).unwrap();
            for i in 0..plain.len() {
                assert!((ones.vector[i] - plain.vector[i]).abs() <= 1e-12);
                assert!((zeros.vector[i] - empty.vector[i]).abs() <= 1e-12);
            }
        }
        assert!(encode_prompt_weighting(&seq, &vec![1.0; seq.len()], &model, &cfg, 0).is_err());
        assert!(encode_prompt_weighting(&seq, &vec![1.0; seq.len()], &model, &cfg, 5).is_err());
    }
}
