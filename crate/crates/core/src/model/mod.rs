//! Generator encoder, discriminator encoder-decoder and RTD head.
//!
//! Both networks read the single shared `embedder`. The generator is an
//! encoder with its own vocabulary projection `gen.proj` (`[v x d]`); the
//! discriminator decoder's output layer is tied to the embedder. All blocks
//! are pre-norm (RMSNorm, no biases) with GELU MLPs; positions use fixed
//! sinusoidal encodings.

mod graph;
mod params;

pub use graph::{sinusoidal_positions, Graph};
pub use params::{init_params, ModelConfig, ModelParams, ParamGroup, ParamInfo};

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::TokenId;

fn to3<F: Scalar>(m: Array2<F>, b: usize, n: usize) -> Array3<F> {
    let w = m.ncols();
    m.into_shape_with_order((b, n, w)).expect("row-major [b*n, w]")
}

fn check_len(len: usize, max_len: usize) -> Result<()> {
    if len > max_len {
        Err(Error::LengthOverflow { len, max_len })
    } else {
        Ok(())
    }
}

/// Generator logits `[b, n, v]` for `masked_text` (softmax is left to the loss).
pub fn generator_forward<F: Scalar>(params: &ModelParams<F>, masked_text: &Array2<TokenId>) -> Result<Array3<F>> {
    check_len(masked_text.ncols(), params.config.max_len)?;
    let mut g = Graph::new(params);
    let logits = g.generator_logits(masked_text)?;
    let (b, n) = masked_text.dim();
    Ok(to3(g.tape.value(logits).clone(), b, n))
}

/// Discriminator encoder output `H^D` `[b, n, d]`.
pub fn discriminator_encode<F: Scalar>(params: &ModelParams<F>, tokens: &Array2<TokenId>) -> Result<Array3<F>> {
    check_len(tokens.ncols(), params.config.max_len)?;
    let mut g = Graph::new(params);
    let h = g.disc_encode(tokens);
    let (b, n) = tokens.dim();
    Ok(to3(g.tape.value(h).clone(), b, n))
}

/// Probability `[b, n]` that each position holds the original token.
pub fn rtd_head_forward<F: Scalar>(params: &ModelParams<F>, h: &Array3<F>) -> Result<Array2<F>> {
    let (b, n, d) = h.dim();
    let mut g = Graph::new(params);
    let hv = g.tape.constant(h.clone().into_shape_with_order((b * n, d)).expect("contiguous"));
    let z = g.rtd_logits(hv)?;
    let probs = g.tape.value(z).mapv(crate::autodiff::sigmoid);
    Ok(probs.into_shape_with_order((b, n)).expect("[b*n, 1]"))
}

/// Teacher-forced decoder logits `[b, t, v]`: position `i` sees `target[..i]`
/// (shifted right behind a start token) and `h`, with encoder pads masked.
pub fn discriminator_decode<F: Scalar>(
    params: &ModelParams<F>,
    h: &Array3<F>,
    enc_tokens: &Array2<TokenId>,
    target: &Array2<TokenId>,
) -> Result<Array3<F>> {
    let (b, n, d) = h.dim();
    if enc_tokens.dim() != (b, n) || target.nrows() != b {
        return Err(Error::ShapeMismatch(format!(
            "decode: h {:?}, enc_tokens {:?}, target {:?}",
            h.dim(),
            enc_tokens.dim(),
            target.dim()
        )));
    }
    check_len(target.ncols(), params.config.max_len)?;
    let mut g = Graph::new(params);
    let hv = g.tape.constant(h.clone().into_shape_with_order((b * n, d)).expect("contiguous"));
    let logits = g.decoder_logits(hv, enc_tokens, target);
    Ok(to3(g.tape.value(logits).clone(), b, target.ncols()))
}

/// Draws one token from `softmax(row)` at temperature 1.
pub fn sample_categorical<F: Scalar, R: Rng + ?Sized>(row: ndarray::ArrayView1<F>, rng: &mut R) -> TokenId {
    let m = row.iter().map(|x| x.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|x| (x.to_f64_lossy() - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i as TokenId;
        }
    }
    // u landed on the rounding tail; take the last positive-weight token
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) as TokenId
}

/// Replaces each MLM position of `masked_text` with a sample from the
/// generator distribution at that position. No gradient flows through this.
pub fn sample_replacements<F: Scalar, R: Rng + ?Sized>(
    logits: &Array3<F>,
    masked_text: &Array2<TokenId>,
    mlm_positions: &[Vec<usize>],
    rng: &mut R,
) -> Array2<TokenId> {
    let mut out = masked_text.clone();
    for (b, positions) in mlm_positions.iter().enumerate() {
        for &pos in positions {
            out[[b, pos]] = sample_categorical(logits.slice(ndarray::s![b, pos, ..]), rng);
        }
    }
    out
}
