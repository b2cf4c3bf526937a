//! Generator, replaced-token-detection and span-corruption losses, and their
//! weighted sum `L = L_G + lambda1 * L_RTD + lambda2 * L_SC`.
//!
//! Two reductions are supported. [`Reduction::Mean`] divides each term by its
//! own count of supervised tokens in the batch, so the weights do not depend
//! on batch size or sequence length. [`Reduction::Sum`] sums per example and
//! averages over examples.
//!
//! Value-level functions operate on plain arrays; the `build_*` functions
//! record the same quantities on a [`Graph`] for backpropagation.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Var};
use crate::corruption::{rtd_labels, CorruptedBatch};
use crate::error::{Error, Result};
use crate::model::{sample_categorical, Graph};
use crate::scalar::{c, Scalar};
use crate::tokenizer::{TokenId, PAD_ID};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    /// Multiplier applied to a summed loss with `count` supervised tokens over
    /// `batch` examples; zero when nothing is supervised.
    pub fn scale(self, count: usize, batch: usize) -> f64 {
        match self {
            _ if count == 0 => 0.0,
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0 / batch.max(1) as f64,
        }
    }
}

impl std::str::FromStr for Reduction {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            _ => Err(format!("expected `mean` or `sum`, got `{s}`")),
        }
    }
}

/// A reduced loss and the number of tokens it supervised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridLossBreakdown {
    pub l_g: f64,
    pub l_rtd: f64,
    pub l_sc: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// (MLM tokens, RTD positions, target tokens)
    pub token_counts: (usize, usize, usize),
}

/// Mean (or per-example sum) of `-log p_G(x_l)` over MLM positions only.
/// `originals` holds the ground-truth token at every MLM position (the
/// span-corrupted text does).
pub fn loss_generator<F: Scalar>(
    logits: &Array3<F>,
    mlm_positions: &[Vec<usize>],
    originals: &Array2<TokenId>,
    reduction: Reduction,
) -> Result<LossValue> {
    let (b, n, _) = logits.dim();
    if originals.dim() != (b, n) || mlm_positions.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "loss_generator: logits {:?}, originals {:?}, {} position rows",
            logits.dim(),
            originals.dim(),
            mlm_positions.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (r, positions) in mlm_positions.iter().enumerate() {
        for &pos in positions {
            let row = logits.slice(ndarray::s![r, pos, ..]);
            let t = originals[[r, pos]] as usize;
            total += (logsumexp(row) - row[t]).to_f64_lossy();
            count += 1;
        }
    }
    Ok(LossValue { value: total * reduction.scale(count, b), count })
}

/// Binary cross-entropy over valid positions; `probs` is the probability
/// that a token is original, `labels` is true where it was replaced.
pub fn loss_rtd<F: Scalar>(
    probs: &Array2<F>,
    labels: &Array2<bool>,
    valid: &Array2<bool>,
    reduction: Reduction,
) -> Result<LossValue> {
    if probs.dim() != labels.dim() || probs.dim() != valid.dim() {
        return Err(Error::ShapeMismatch(format!(
            "loss_rtd: probs {:?}, labels {:?}, valid {:?}",
            probs.dim(),
            labels.dim(),
            valid.dim()
        )));
    }
    let mut total = 0.0;
    let mut count = 0;
    for ((&p, &replaced), &ok) in probs.iter().zip(labels).zip(valid) {
        if ok {
            let p = p.to_f64_lossy();
            total -= if replaced { (1.0 - p).ln() } else { p.ln() };
            count += 1;
        }
    }
    Ok(LossValue { value: total * reduction.scale(count, probs.nrows()), count })
}

/// Token-level cross-entropy over every non-pad target position (sentinels,
/// span tokens and EOS).
pub fn loss_sc<F: Scalar>(logits: &Array3<F>, target: &Array2<TokenId>, reduction: Reduction) -> Result<LossValue> {
    let (b, t, _) = logits.dim();
    if target.dim() != (b, t) {
        return Err(Error::ShapeMismatch(format!("loss_sc: logits {:?}, target {:?}", logits.dim(), target.dim())));
    }
    let mut total = 0.0;
    let mut count = 0;
    for ((r, i), &tok) in target.indexed_iter() {
        if tok != PAD_ID {
            let row = logits.slice(ndarray::s![r, i, ..]);
            total += (logsumexp(row) - row[tok as usize]).to_f64_lossy();
            count += 1;
        }
    }
    Ok(LossValue { value: total * reduction.scale(count, b), count })
}

pub fn hybrid_loss(l_g: LossValue, l_rtd: LossValue, l_sc: LossValue, lambda1: f64, lambda2: f64) -> Result<HybridLossBreakdown> {
    if !(lambda1 >= 0.0) {
        return Err(Error::NegativeWeight { name: "lambda1", value: lambda1 });
    }
    if !(lambda2 >= 0.0) {
        return Err(Error::NegativeWeight { name: "lambda2", value: lambda2 });
    }
    Ok(HybridLossBreakdown {
        l_g: l_g.value,
        l_rtd: l_rtd.value,
        l_sc: l_sc.value,
        total: l_g.value + lambda1 * l_rtd.value + lambda2 * l_sc.value,
        lambda1,
        lambda2,
        token_counts: (l_g.count, l_rtd.count, l_sc.count),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 10.0, lambda2: 10.0, reduction: Reduction::Mean }
    }
}

/// Where the discriminator's encoder input comes from.
pub enum Replacements<'a, R: ?Sized> {
    /// Sample every MLM position from the generator.
    Sample(&'a mut R),
    /// Use a fixed replaced text (gradient checks, oracle generators).
    Fixed(&'a Array2<TokenId>),
}

/// Recorded hybrid objective for one batch.
pub struct HybridTerms {
    pub total: Var,
    pub l_g: Var,
    pub l_rtd: Var,
    pub l_sc: Var,
    pub replaced: Array2<TokenId>,
    pub labels: Array2<bool>,
    pub counts: (usize, usize, usize),
}

/// Replaces MLM positions of `masked` using flattened `[b*n, v]` logits.
pub fn sample_from_flat_logits<F: Scalar, R: Rng + ?Sized>(
    logits: &Array2<F>,
    masked: &Array2<TokenId>,
    mlm_positions: &[Vec<usize>],
    rng: &mut R,
) -> Array2<TokenId> {
    let n = masked.ncols();
    let mut out = masked.clone();
    for (r, positions) in mlm_positions.iter().enumerate() {
        for &pos in positions {
            out[[r, pos]] = sample_categorical(logits.row(r * n + pos), rng);
        }
    }
    out
}

fn sc_targets(target: &Array2<TokenId>) -> Vec<(usize, usize)> {
    let t = target.ncols();
    target
        .indexed_iter()
        .filter(|(_, &tok)| tok != PAD_ID)
        .map(|((r, i), &tok)| (r * t + i, tok as usize))
        .collect()
}

/// Records generator -> replacement -> discriminator for one batch and
/// returns all loss nodes. The generator only receives gradient from `L_G`;
/// the sampled tokens are constants to the discriminator.
pub fn build_hybrid<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<'_, F>,
    batch: &CorruptedBatch,
    replacements: Replacements<'_, R>,
    weights: &LossWeights,
) -> Result<HybridTerms> {
    if !(weights.lambda1 >= 0.0) {
        return Err(Error::NegativeWeight { name: "lambda1", value: weights.lambda1 });
    }
    if !(weights.lambda2 >= 0.0) {
        return Err(Error::NegativeWeight { name: "lambda2", value: weights.lambda2 });
    }
    let (b, n) = batch.sc_text.dim();

    let gen_logits = g.generator_logits(&batch.masked_text)?;
    let gen_targets: Vec<(usize, usize)> = batch
        .mlm_positions
        .iter()
        .enumerate()
        .flat_map(|(r, ps)| ps.iter().map(move |&p| (r, p)))
        .map(|(r, p)| (r * n + p, batch.sc_text[[r, p]] as usize))
        .collect();
    let n_mlm = gen_targets.len();
    let l_g = g.tape.cross_entropy(gen_logits, gen_targets, c(weights.reduction.scale(n_mlm, b)));

    let replaced = match replacements {
        Replacements::Sample(rng) => {
            sample_from_flat_logits(g.tape.value(gen_logits), &batch.masked_text, &batch.mlm_positions, rng)
        }
        Replacements::Fixed(t) => {
            if t.dim() != (b, n) {
                return Err(Error::ShapeMismatch(format!("fixed replacements {:?} vs batch {:?}", t.dim(), (b, n))));
            }
            t.clone()
        }
    };

    let mut labels = Array2::from_elem((b, n), false);
    let mut rtd_targets = Vec::new();
    for r in 0..b {
        let sc = batch.sc_text.row(r).to_vec();
        let lab = rtd_labels(&batch.masked_text.row(r).to_vec(), &replaced.row(r).to_vec(), &sc)?;
        for (i, (&l, &tok)) in lab.iter().zip(&sc).enumerate() {
            if tok != PAD_ID {
                labels[[r, i]] = l;
                rtd_targets.push((r * n + i, l));
            }
        }
    }
    let n_rtd = rtd_targets.len();

    let h = g.disc_encode(&replaced);
    let z = g.rtd_logits(h)?;
    let l_rtd = g.tape.bce_with_logits(z, rtd_targets, c(weights.reduction.scale(n_rtd, b)));

    let dec = g.decoder_logits(h, &replaced, &batch.target);
    let targets = sc_targets(&batch.target);
    let n_sc = targets.len();
    let l_sc = g.tape.cross_entropy(dec, targets, c(weights.reduction.scale(n_sc, b)));

    let total = g.tape.weighted_sum(vec![(l_g, F::one()), (l_rtd, c(weights.lambda1)), (l_sc, c(weights.lambda2))]);
    Ok(HybridTerms { total, l_g, l_rtd, l_sc, replaced, labels, counts: (n_mlm, n_rtd, n_sc) })
}

/// Records the plain span-corruption loss with `enc_input` as encoder input.
pub fn build_sc_only<F: Scalar>(
    g: &mut Graph<'_, F>,
    enc_input: &Array2<TokenId>,
    target: &Array2<TokenId>,
    reduction: Reduction,
) -> (Var, usize) {
    let h = g.disc_encode(enc_input);
    let dec = g.decoder_logits(h, enc_input, target);
    let targets = sc_targets(target);
    let count = targets.len();
    let loss = g.tape.cross_entropy(dec, targets, c(reduction.scale(count, target.nrows())));
    (loss, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    const V: usize = 8;

    fn ln(x: f64) -> f64 {
        x.ln()
    }

    #[test]
    fn generator_uniform_and_perfect() {
        let logits = Array3::<f64>::zeros((1, 3, V));
        let originals = Array2::from_elem((1, 3), 5u32);
        let l = loss_generator(&logits, &[vec![0, 2]], &originals, Reduction::Mean).unwrap();
        assert!((l.value - ln(8.0)).abs() < 1e-12);
        assert_eq!(l.count, 2);

        let mut perfect = Array3::<f64>::zeros((1, 3, V));
        perfect[[0, 1, 5]] = 20.0;
        let l = loss_generator(&perfect, &[vec![1]], &originals, Reduction::Mean).unwrap();
        assert!(l.value <= 1e-6 * 8.0 && l.value >= 0.0);

        let none = loss_generator(&logits, &[vec![]], &originals, Reduction::Mean).unwrap();
        assert_eq!((none.value, none.count), (0.0, 0));
    }

    #[test]
    fn generator_hand_fixture() {
        // p = 0.5 via logits ln(0.5) on target, rest share 0.5; p = 0.25 similarly.
        let mut logits = Array3::<f64>::zeros((1, 2, 4));
        // row 0: probs [0.5, 0.5/3, 0.5/3, 0.5/3]
        logits[[0, 0, 0]] = ln(0.5);
        for k in 1..4 {
            logits[[0, 0, k]] = ln(0.5 / 3.0);
        }
        // row 1: probs [0.25, 0.25, 0.25, 0.25] with target 2
        let originals = Array2::from_shape_vec((1, 2), vec![0u32, 2]).unwrap();
        let l = loss_generator(&logits, &[vec![0, 1]], &originals, Reduction::Mean).unwrap();
        assert!((l.value - (ln(2.0) + ln(4.0)) / 2.0).abs() < 1e-12);
        assert!((l.value - 1.0397207708399179).abs() < 1e-12);
    }

    #[test]
    fn rtd_values() {
        let probs = Array2::from_elem((2, 3), 0.5f64);
        let labels = Array2::from_shape_vec((2, 3), vec![true, false, true, false, false, true]).unwrap();
        let valid = Array2::from_elem((2, 3), true);
        let l = loss_rtd(&probs, &labels, &valid, Reduction::Mean).unwrap();
        assert!((l.value - ln(2.0)).abs() < 1e-12);

        let p = Array2::from_elem((1, 1), 0.2f64);
        let l = loss_rtd(&p, &Array2::from_elem((1, 1), true), &Array2::from_elem((1, 1), true), Reduction::Mean).unwrap();
        assert!((l.value - (-(0.8f64).ln())).abs() < 1e-12);
        assert!((l.value - 0.2231435513142097).abs() < 1e-12);

        let near = Array2::from_shape_vec((1, 2), vec![1.0 - 1e-12, 1e-12]).unwrap();
        let lab = Array2::from_shape_vec((1, 2), vec![false, true]).unwrap();
        let l = loss_rtd(&near, &lab, &Array2::from_elem((1, 2), true), Reduction::Mean).unwrap();
        assert!(l.value < 1e-9);

        assert!(loss_rtd(&probs, &Array2::from_elem((1, 3), true), &valid, Reduction::Mean).is_err());
    }

    #[test]
    fn rtd_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let probs = Array2::from_shape_fn((4, 6), |_| rng.random_range(0.01..0.99f64));
            let labels = Array2::from_shape_fn((4, 6), |_| rng.random_bool(0.3));
            let valid = Array2::from_shape_fn((4, 6), |_| rng.random_bool(0.8));
            let mut sum = 0.0;
            let mut count = 0;
            for r in 0..4 {
                for c in 0..6 {
                    if valid[[r, c]] {
                        let p: f64 = probs[[r, c]];
                        let y = if labels[[r, c]] { 0.0 } else { 1.0 };
                        sum += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                        count += 1;
                    }
                }
            }
            let l = loss_rtd(&probs, &labels, &valid, Reduction::Mean).unwrap();
            assert_eq!(l.count, count);
            assert!((l.value - sum / count as f64).abs() < 1e-14);
            assert!(l.value >= 0.0);
        }
    }

    #[test]
    fn sc_values_and_padding() {
        let logits = Array3::<f64>::zeros((1, 5, V));
        let target = Array2::from_shape_vec((1, 5), vec![4u32, 6, 7, 5, 1]).unwrap();
        let l = loss_sc(&logits, &target, Reduction::Mean).unwrap();
        assert!((l.value - ln(8.0)).abs() < 1e-12);

        // probability 0.5 on each correct token
        let mut half = Array3::<f64>::zeros((1, 5, V));
        for (i, &t) in target.iter().enumerate() {
            half[[0, i, t as usize]] = ln(0.5) - ln(0.5 / 7.0);
        }
        let l = loss_sc(&half, &target, Reduction::Mean).unwrap();
        assert!((l.value - ln(2.0)).abs() < 1e-12);

        let mut padded_logits = Array3::<f64>::zeros((1, 7, V));
        padded_logits.slice_mut(ndarray::s![.., ..5, ..]).assign(&half);
        padded_logits[[0, 6, 3]] = 9.0;
        let mut padded = Array2::from_elem((1, 7), PAD_ID);
        padded.slice_mut(ndarray::s![.., ..5]).assign(&target);
        let lp = loss_sc(&padded_logits, &padded, Reduction::Mean).unwrap();
        assert_eq!(lp, l);
    }

    #[test]
    fn weighted_sum() {
        let lv = |v| LossValue { value: v, count: 1 };
        let h = hybrid_loss(lv(1.0), lv(0.5), lv(2.0), 10.0, 10.0).unwrap();
        assert_eq!(h.total, 26.0);
        let h = hybrid_loss(lv(1.0), lv(0.5), lv(2.0), 0.0, 0.0).unwrap();
        assert_eq!(h.total, 1.0);
        assert!(matches!(hybrid_loss(lv(1.0), lv(0.5), lv(2.0), -1.0, 0.0), Err(Error::NegativeWeight { .. })));
        let d = LossWeights::default();
        assert_eq!((d.lambda1, d.lambda2), (10.0, 10.0));
    }

    #[test]
    fn sum_reduction_is_per_example() {
        let logits = Array3::<f64>::zeros((2, 2, V));
        let target = Array2::from_shape_vec((2, 2), vec![4u32, 1, 4, 0]).unwrap();
        let l = loss_sc(&logits, &target, Reduction::Sum).unwrap();
        assert!((l.value - 3.0 * ln(8.0) / 2.0).abs() < 1e-12);
    }

    mod graph {
        use super::super::*;
        use crate::corruption::{corrupt_example, CorruptedBatch, CorruptionConfig};
        use crate::model::{init_params, Graph, ModelConfig, ModelParams};
        use crate::rng::{stream_rng, Stream};
        use crate::tokenizer::build_vocab;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        fn cfg() -> ModelConfig {
            ModelConfig {
                d_model: 8,
                vocab_size: 32,
                disc_layers: 1,
                disc_heads: 2,
                disc_mlp: 16,
                gen_layers: 1,
                gen_mlp: 8,
                rtd_mlp: 16,
                max_len: 32,
            }
        }

        /// Two examples of 13 tokens: one span of two tokens each, corrupted
        /// length 12, MLM ratio raised so several positions are masked.
        fn batch() -> CorruptedBatch {
            let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
            let corpus = words.join(" ");
            let vocab = build_vocab([corpus.as_str()], 32, 3).unwrap();
            let content: Vec<u32> = vocab.content_ids().collect();
            let cc = CorruptionConfig { r_sc: 0.15, mu: 3.0, r_mlm: 0.3 };
            let mut spans = stream_rng(11, Stream::Spans);
            let mut mlm = stream_rng(11, Stream::Mlm);
            let exs: Vec<_> = (0..2)
                .map(|r| {
                    let x: Vec<u32> = (0..13).map(|i| content[(i * 7 + r * 3) % content.len()]).collect();
                    corrupt_example(&x, &cc, &vocab, &mut spans, &mut mlm).unwrap()
                })
                .collect();
            assert!(exs.iter().all(|e| e.n == 12));
            CorruptedBatch::collate(&exs)
        }

        fn fixed_replacements(b: &CorruptedBatch) -> Array2<TokenId> {
            let mut out = b.masked_text.clone();
            for (r, ps) in b.mlm_positions.iter().enumerate() {
                for (k, &p) in ps.iter().enumerate() {
                    // alternate between a correct guess and a wrong token
                    out[[r, p]] = if k % 2 == 0 { b.sc_text[[r, p]] } else { 20 + k as u32 };
                }
            }
            out
        }

        fn total(params: &ModelParams<f64>, b: &CorruptedBatch, fixed: &Array2<TokenId>, w: &LossWeights) -> f64 {
            let mut g = Graph::new(params);
            let t = build_hybrid::<f64, ChaCha8Rng>(&mut g, b, Replacements::Fixed(fixed), w).unwrap();
            g.tape.scalar(t.total)
        }

        #[test]
        fn graph_losses_match_value_functions() {
            let params = init_params::<f64>(&cfg(), 3).unwrap();
            let b = batch();
            let fixed = fixed_replacements(&b);
            let w = LossWeights::default();
            let mut g = Graph::new(&params);
            let t = build_hybrid::<f64, ChaCha8Rng>(&mut g, &b, Replacements::Fixed(&fixed), &w).unwrap();

            let gl = crate::model::generator_forward(&params, &b.masked_text).unwrap();
            let lg = loss_generator(&gl, &b.mlm_positions, &b.sc_text, Reduction::Mean).unwrap();
            let h = crate::model::discriminator_encode(&params, &fixed).unwrap();
            let probs = crate::model::rtd_head_forward(&params, &h).unwrap();
            let valid = b.sc_text.mapv(|x| x != PAD_ID);
            let lr = loss_rtd(&probs, &t.labels, &valid, Reduction::Mean).unwrap();
            let dl = crate::model::discriminator_decode(&params, &h, &fixed, &b.target).unwrap();
            let ls = loss_sc(&dl, &b.target, Reduction::Mean).unwrap();
            let hb = hybrid_loss(lg, lr, ls, 10.0, 10.0).unwrap();

            assert!((g.tape.scalar(t.l_g) - lg.value).abs() < 1e-10);
            assert!((g.tape.scalar(t.l_rtd) - lr.value).abs() < 1e-10);
            assert!((g.tape.scalar(t.l_sc) - ls.value).abs() < 1e-10);
            assert!((g.tape.scalar(t.total) - hb.total).abs() < 1e-9);
            assert_eq!(t.counts, hb.token_counts);
            assert_eq!(t.replaced, fixed);
        }

        #[test]
        fn embedder_gradient_is_sum_of_term_gradients() {
            let params = init_params::<f64>(&cfg(), 4).unwrap();
            let b = batch();
            let fixed = fixed_replacements(&b);
            let grad_of = |l1: f64, l2: f64, which: usize| {
                let w = LossWeights { lambda1: l1, lambda2: l2, reduction: Reduction::Mean };
                let mut g = Graph::new(&params);
                let t = build_hybrid::<f64, ChaCha8Rng>(&mut g, &b, Replacements::Fixed(&fixed), &w).unwrap();
                let v = [t.total, t.l_g, t.l_rtd, t.l_sc][which];
                g.param_grads(v).swap_remove(0)
            };
            let total = grad_of(10.0, 10.0, 0);
            let parts = grad_of(10.0, 10.0, 1) + grad_of(10.0, 10.0, 2) * 10.0 + grad_of(10.0, 10.0, 3) * 10.0;
            let diff = (&total - &parts).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-12, "{diff}");
            // each term reaches the shared table
            for k in 1..4 {
                assert!(grad_of(10.0, 10.0, k).iter().any(|&g| g != 0.0));
            }
        }

        #[test]
        fn generator_gradient_comes_from_generator_loss_only() {
            let params = init_params::<f64>(&cfg(), 5).unwrap();
            let b = batch();
            let fixed = fixed_replacements(&b);
            let w = LossWeights::default();
            let mut g = Graph::new(&params);
            let t = build_hybrid::<f64, ChaCha8Rng>(&mut g, &b, Replacements::Fixed(&fixed), &w).unwrap();
            let from_total = g.param_grads(t.total);
            let from_sc = g.param_grads(t.l_sc);
            let from_rtd = g.param_grads(t.l_rtd);
            for idx in params.group_indices(crate::model::ParamGroup::Generator) {
                assert!(from_sc[idx].iter().all(|&x| x == 0.0));
                assert!(from_rtd[idx].iter().all(|&x| x == 0.0));
                assert!(from_total[idx].iter().any(|&x| x != 0.0));
            }
        }

        #[test]
        fn finite_difference_gradient() {
            let mut params = init_params::<f64>(&cfg(), 6).unwrap();
            let b = batch();
            let fixed = fixed_replacements(&b);
            let w = LossWeights::default();
            let analytic = {
                let mut g = Graph::new(&params);
                let t = build_hybrid::<f64, ChaCha8Rng>(&mut g, &b, Replacements::Fixed(&fixed), &w).unwrap();
                g.param_grads(t.total)
            };
            let h = 1e-5;
            let mut worst = 0.0f64;
            for idx in 0..params.len() {
                for k in 0..params.values[idx].len() {
                    let orig = params.values[idx].as_slice().unwrap()[k];
                    params.values[idx].as_slice_mut().unwrap()[k] = orig + h;
                    let up = total(&params, &b, &fixed, &w);
                    params.values[idx].as_slice_mut().unwrap()[k] = orig - h;
                    let down = total(&params, &b, &fixed, &w);
                    params.values[idx].as_slice_mut().unwrap()[k] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic[idx].as_slice().unwrap()[k];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                    worst = worst.max(rel);
                }
            }
            assert!(worst < 1e-6, "max relative error {worst:e}");
        }

        #[test]
        fn finite_difference_gradient_f32() {
            // f32 analytic gradients against f64 central differences at the
            // same (f32-representable) parameter values
            let p32 = init_params::<f32>(&cfg(), 8).unwrap();
            let mut p64: ModelParams<f64> = p32.cast();
            let b = batch();
            let fixed = fixed_replacements(&b);
            let w = LossWeights::default();
            let analytic = {
                let mut g = Graph::new(&p32);
                let t = build_hybrid::<f32, ChaCha8Rng>(&mut g, &b, Replacements::Fixed(&fixed), &w).unwrap();
                g.param_grads(t.total)
            };
            let h = 1e-5;
            let mut worst = 0.0f64;
            for idx in 0..p64.len() {
                for k in 0..p64.values[idx].len() {
                    let orig = p64.values[idx].as_slice().unwrap()[k];
                    p64.values[idx].as_slice_mut().unwrap()[k] = orig + h;
                    let up = total(&p64, &b, &fixed, &w);
                    p64.values[idx].as_slice_mut().unwrap()[k] = orig - h;
                    let down = total(&p64, &b, &fixed, &w);
                    p64.values[idx].as_slice_mut().unwrap()[k] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = f64::from(analytic[idx].as_slice().unwrap()[k]);
                    worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
                }
            }
            assert!(worst < 1e-3, "max relative error {worst:e}");
        }

        #[test]
        fn sampled_replacements_are_seeded() {
            let params = init_params::<f64>(&cfg(), 7).unwrap();
            let b = batch();
            let w = LossWeights::default();
            let run = |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut g = Graph::new(&params);
                build_hybrid(&mut g, &b, Replacements::Sample(&mut rng), &w).unwrap().replaced
            };
            assert_eq!(run(1), run(1));
            let r = run(1);
            // only MLM positions may differ from the masked text
            for (row, ps) in b.mlm_positions.iter().enumerate() {
                for c in 0..b.masked_text.ncols() {
                    if !ps.contains(&c) {
                        assert_eq!(r[[row, c]], b.masked_text[[row, c]]);
                    }
                }
            }
        }

        #[test]
        fn negative_weights_rejected() {
            let params = init_params::<f64>(&cfg(), 7).unwrap();
            let b = batch();
            let fixed = fixed_replacements(&b);
            let w = LossWeights { lambda1: -1.0, ..Default::default() };
            let mut g = Graph::new(&params);
            assert!(build_hybrid::<f64, ChaCha8Rng>(&mut g, &b, Replacements::Fixed(&fixed), &w).is_err());
        }
    }
}
