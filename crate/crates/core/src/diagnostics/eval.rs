//! Span-corruption validation loss with a clean or generator-noised encoder
//! context.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt_example, CorruptedBatch, CorruptionConfig};
use crate::error::{Error, Result};
use crate::model::{discriminator_decode, discriminator_encode, generator_forward, sample_replacements, ModelParams};
use crate::objectives::{loss_sc, Reduction};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tokenizer::{chunk_documents, TokenId, Vocabulary, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// Encoder reads the span-corrupted text.
    Clean,
    /// Encoder reads the span-corrupted text with MLM positions filled by
    /// generator samples.
    Noisy,
}

impl std::str::FromStr for ContextMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "clean" => Ok(ContextMode::Clean),
            "noisy" => Ok(ContextMode::Noisy),
            _ => Err(format!("expected `clean` or `noisy`, got `{s}`")),
        }
    }
}

/// Pre-corrupted validation batches. Spans and MLM positions are fixed by the
/// seed, so clean and noisy evaluations are paired example by example.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub batches: Vec<CorruptedBatch>,
}

/// Builds up to `max_batches` batches from the full-length rows of `docs` in
/// corpus order. Corruption always uses MLM so that noisy mode has positions
/// to fill; `r_mlm = 0` falls back to the default ratio.
pub fn build_eval_set(
    docs: &[Vec<TokenId>],
    vocab: &Vocabulary,
    corruption: &CorruptionConfig,
    input_len: usize,
    batch_size: usize,
    seed: u64,
    max_batches: Option<usize>,
) -> Result<EvalSet> {
    let mut rows = chunk_documents(docs, input_len);
    if rows.last().is_some_and(|r| r.last() == Some(&PAD_ID)) {
        rows.pop();
    }
    if rows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut cfg = *corruption;
    if cfg.r_mlm == 0.0 {
        cfg.r_mlm = CorruptionConfig::default().r_mlm;
    }
    let eval_seed = derive_seed(seed, 0xE7A1);
    let mut spans = stream_rng(eval_seed, Stream::Spans);
    let mut mlm = stream_rng(eval_seed, Stream::Mlm);
    let mut batches = Vec::new();
    for chunk in rows.chunks(batch_size) {
        if max_batches.is_some_and(|m| batches.len() >= m) {
            break;
        }
        let examples = chunk
            .iter()
            .map(|row| corrupt_example(row, &cfg, vocab, &mut spans, &mut mlm))
            .collect::<Result<Vec<_>>>()?;
        batches.push(CorruptedBatch::collate(&examples));
    }
    Ok(EvalSet { batches })
}

/// Token-weighted mean SC loss where `context` produces each batch's encoder
/// input.
pub fn eval_sc_loss_with<F: Scalar>(
    params: &ModelParams<F>,
    set: &EvalSet,
    mut context: impl FnMut(&CorruptedBatch) -> Result<Array2<TokenId>>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in &set.batches {
        let input = context(batch)?;
        let h = discriminator_encode(params, &input)?;
        let logits = discriminator_decode(params, &h, &input, &batch.target)?;
        let l = loss_sc(&logits, &batch.target, Reduction::Mean)?;
        total += l.value * l.count as f64;
        count += l.count;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean SC validation loss in `mode`. Noisy mode resamples replacements from
/// a stream fixed by `seed`.
pub fn eval_sc_loss<F: Scalar>(params: &ModelParams<F>, set: &EvalSet, mode: ContextMode, seed: u64) -> Result<f64> {
    match mode {
        ContextMode::Clean => eval_sc_loss_with(params, set, |b| Ok(b.sc_text.clone())),
        ContextMode::Noisy => {
            if !params.has_generator() {
                return Err(Error::MissingGenerator);
            }
            let mut rng: ChaCha8Rng = stream_rng(derive_seed(seed, 0xE7A1), Stream::Sampling);
            eval_sc_loss_with(params, set, |b| {
                let logits = generator_forward(params, &b.masked_text)?;
                Ok(sample_replacements(&logits, &b.masked_text, &b.mlm_positions, &mut rng))
            })
        }
    }
}

/// Replacement rule of a generator that always emits the original token.
pub fn perfect_generator(batch: &CorruptedBatch) -> Result<Array2<TokenId>> {
    let mut out = batch.masked_text.clone();
    for (r, ps) in batch.mlm_positions.iter().enumerate() {
        for &p in ps {
            out[[r, p]] = batch.sc_text[[r, p]];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::tokenizer::{build_vocab, encode};

    fn setup() -> (ModelParams<f64>, EvalSet) {
        let words: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        let text: Vec<String> = (0..400).map(|i| words[(i * 7 + i / 3) % 20].clone()).collect();
        let text = text.join(" ");
        let vocab = build_vocab([text.as_str()], 32, 5).unwrap();
        let docs = vec![encode(&text, &vocab)];
        let cfg = ModelConfig {
            d_model: 8,
            vocab_size: 32,
            disc_layers: 1,
            disc_heads: 2,
            disc_mlp: 16,
            gen_layers: 1,
            gen_mlp: 8,
            rtd_mlp: 8,
            max_len: 33,
        };
        let params = init_params(&cfg, 0).unwrap();
        let set = build_eval_set(&docs, &vocab, &CorruptionConfig::default(), 32, 4, 9, Some(3)).unwrap();
        (params, set)
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let (p, set) = setup();
        let l = eval_sc_loss(&p, &set, ContextMode::Clean, 0).unwrap();
        let u = 32f64.ln();
        assert!((l - u).abs() < 0.05 * u, "{l} vs {u}");
    }

    #[test]
    fn reproducible_and_paired() {
        let (p, set) = setup();
        let a = eval_sc_loss(&p, &set, ContextMode::Clean, 0).unwrap();
        let b = eval_sc_loss(&p, &set, ContextMode::Clean, 0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let n1 = eval_sc_loss(&p, &set, ContextMode::Noisy, 4).unwrap();
        let n2 = eval_sc_loss(&p, &set, ContextMode::Noisy, 4).unwrap();
        assert_eq!(n1.to_bits(), n2.to_bits());
        let perfect = eval_sc_loss_with(&p, &set, perfect_generator).unwrap();
        assert_eq!(perfect.to_bits(), a.to_bits());
    }

    #[test]
    fn noisy_needs_generator() {
        let (p, set) = setup();
        let stripped = p.without_generator();
        assert!(matches!(eval_sc_loss(&stripped, &set, ContextMode::Noisy, 0), Err(Error::MissingGenerator)));
        assert!(eval_sc_loss(&stripped, &set, ContextMode::Clean, 0).is_ok());
    }
}
