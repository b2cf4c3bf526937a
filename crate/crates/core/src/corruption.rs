//! Span corruption followed by token-level masking, decoder-target layout and
//! replaced-token labels.
//!
//! For an input `x` of length `N`:
//!
//! 1. [`plan_spans`] picks `p` disjoint, non-adjacent spans covering
//!    `max(1, round(N * r_sc))` tokens; [`apply_span_corruption`] replaces span
//!    `k` by sentinel `[Sk]`, giving `sc_text` of length `n = N - sum(len_k - 1)`.
//! 2. [`plan_mlm`] picks `round(r_mlm * #non-sentinels)` further positions of
//!    `sc_text`; [`apply_mlm`] overwrites them with `[M]`.
//! 3. [`build_decoder_target`] lays out `[S0] span0 .. [S(p-1)] span(p-1) [EOS]`.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{decode, TokenId, Vocabulary, EOS_ID, MLM_ID, PAD_ID};

/// Inclusive `(start, end)` token ranges over the original sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpanSet {
    pub spans: Vec<(usize, usize)>,
}

impl SpanSet {
    pub fn new(spans: Vec<(usize, usize)>) -> Self {
        SpanSet { spans }
    }

    pub fn p(&self) -> usize {
        self.spans.len()
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.spans.iter().map(|&(s, e)| e - s + 1)
    }

    pub fn covered(&self) -> usize {
        self.lengths().sum()
    }

    /// Sorted, in bounds, non-empty, disjoint and separated by at least one token.
    pub fn validate(&self, len: usize) -> Result<()> {
        let mut prev_end: Option<usize> = None;
        for &(s, e) in &self.spans {
            if s > e || e >= len {
                return Err(Error::InvalidSpans(format!("span ({s},{e}) invalid for length {len}")));
            }
            if let Some(pe) = prev_end {
                if s <= pe + 1 {
                    return Err(Error::InvalidSpans(format!("span starting at {s} overlaps or touches previous")));
                }
            }
            prev_end = Some(e);
        }
        Ok(())
    }
}

/// Positions of `sc_text` overwritten with `[M]`, ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MlmSet {
    pub positions: Vec<usize>,
}

impl MlmSet {
    pub fn q(&self) -> usize {
        self.positions.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionConfig {
    pub r_sc: f64,
    pub mu: f64,
    pub r_mlm: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig { r_sc: 0.15, mu: 3.0, r_mlm: 0.15 }
    }
}

impl CorruptionConfig {
    /// Sentinel budget `K = ceil(len * r_sc) + 1`.
    pub fn sentinel_budget(&self, input_len: usize) -> usize {
        (input_len as f64 * self.r_sc).ceil() as usize + 1
    }

    /// `(B, p)` for a sequence of `n` tokens.
    pub fn budget(&self, n: usize) -> (usize, usize) {
        span_budget(n, self.r_sc, self.mu)
    }

    /// Longest decoder target producible from a sequence of `n` tokens.
    pub fn max_target_len(&self, n: usize) -> usize {
        let (b, p) = self.budget(n);
        b + p + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptedExample {
    pub original: Vec<TokenId>,
    pub sc_text: Vec<TokenId>,
    pub masked_text: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub span_set: SpanSet,
    pub mlm_set: MlmSet,
    pub n: usize,
}

/// `B = max(1, round(N r_sc))`, `p = clamp(round(B / mu), 1, B)`.
pub fn span_budget(n: usize, r_sc: f64, mu: f64) -> (usize, usize) {
    let budget = ((n as f64 * r_sc).round() as usize).max(1);
    let p = ((budget as f64 / mu).round() as usize).clamp(1, budget);
    (budget, p)
}

/// Sorted sample of `k` distinct values from `0..n`.
fn sorted_sample<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

pub fn plan_spans<R: Rng + ?Sized>(n: usize, r_sc: f64, mu: f64, rng: &mut R) -> Result<SpanSet> {
    if !(r_sc > 0.0 && r_sc < 1.0) {
        return Err(Error::InvalidSpans(format!("r_sc must lie in (0,1), got {r_sc}")));
    }
    if !(mu >= 1.0) {
        return Err(Error::InvalidSpans(format!("mu must be >= 1, got {mu}")));
    }
    let (budget, p) = span_budget(n, r_sc, mu);
    // p-1 mandatory separators plus at least one free token
    if n < budget + p {
        return Err(Error::SequenceTooShort { len: n, spans: p, budget });
    }

    // Span lengths: uniform composition of `budget` into `p` positive parts.
    let cuts = sorted_sample(rng, budget - 1, p - 1);
    let mut lengths = Vec::with_capacity(p);
    let mut last = 0;
    for c in cuts {
        lengths.push(c + 1 - last);
        last = c + 1;
    }
    lengths.push(budget - last);

    // Gaps: p+1 parts summing to n - budget with interior parts >= 1.
    let free = n - budget - (p - 1);
    let bars = sorted_sample(rng, free + p, p);
    let mut gaps = Vec::with_capacity(p + 1);
    let mut prev: isize = -1;
    for &b in &bars {
        gaps.push((b as isize - prev - 1) as usize);
        prev = b as isize;
    }
    gaps.push((free + p) - 1 - prev as usize);
    for g in gaps.iter_mut().take(p).skip(1) {
        *g += 1;
    }

    let mut spans = Vec::with_capacity(p);
    let mut pos = gaps[0];
    for k in 0..p {
        spans.push((pos, pos + lengths[k] - 1));
        pos += lengths[k] + gaps[k + 1];
    }
    debug_assert_eq!(pos, n);
    Ok(SpanSet { spans })
}

pub fn apply_span_corruption(x: &[TokenId], s: &SpanSet, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    s.validate(x.len())?;
    if s.p() > vocab.num_sentinels() {
        return Err(Error::SentinelBudgetExceeded { spans: s.p(), available: vocab.num_sentinels() });
    }
    let mut out = Vec::with_capacity(x.len());
    let mut cursor = 0;
    for (k, &(start, end)) in s.spans.iter().enumerate() {
        out.extend_from_slice(&x[cursor..start]);
        out.push(vocab.sentinel_id(k).expect("checked budget"));
        cursor = end + 1;
    }
    out.extend_from_slice(&x[cursor..]);
    Ok(out)
}

pub fn plan_mlm<R: Rng + ?Sized>(
    x_c: &[TokenId],
    r_mlm: f64,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<MlmSet> {
    if !(0.0..1.0).contains(&r_mlm) {
        return Err(Error::InvalidSpans(format!("r_mlm must lie in [0,1), got {r_mlm}")));
    }
    let candidates: Vec<usize> = x_c
        .iter()
        .enumerate()
        .filter(|&(_, &t)| !vocab.is_sentinel(t) && t != PAD_ID)
        .map(|(i, _)| i)
        .collect();
    let q = (r_mlm * candidates.len() as f64).round() as usize;
    let positions = sorted_sample(rng, candidates.len(), q).into_iter().map(|i| candidates[i]).collect();
    Ok(MlmSet { positions })
}

pub fn apply_mlm(x_c: &[TokenId], m: &MlmSet, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let mut out = x_c.to_vec();
    for &pos in &m.positions {
        let tok = *x_c
            .get(pos)
            .ok_or_else(|| Error::LengthMismatch(format!("MLM position {pos} beyond length {}", x_c.len())))?;
        if vocab.is_sentinel(tok) {
            return Err(Error::MlmOverSentinel(pos));
        }
        out[pos] = MLM_ID;
    }
    Ok(out)
}

pub fn build_decoder_target(x: &[TokenId], s: &SpanSet, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    s.validate(x.len())?;
    if s.p() > vocab.num_sentinels() {
        return Err(Error::SentinelBudgetExceeded { spans: s.p(), available: vocab.num_sentinels() });
    }
    let mut t = Vec::with_capacity(s.covered() + s.p() + 1);
    for (k, &(start, end)) in s.spans.iter().enumerate() {
        t.push(vocab.sentinel_id(k).expect("checked budget"));
        t.extend_from_slice(&x[start..=end]);
    }
    t.push(EOS_ID);
    Ok(t)
}

/// Span corruption, then token masking, then target layout. Spans and MLM
/// positions draw from separate streams.
pub fn corrupt_example<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    x: &[TokenId],
    cfg: &CorruptionConfig,
    vocab: &Vocabulary,
    spans_rng: &mut R1,
    mlm_rng: &mut R2,
) -> Result<CorruptedExample> {
    let span_set = plan_spans(x.len(), cfg.r_sc, cfg.mu, spans_rng)?;
    let sc_text = apply_span_corruption(x, &span_set, vocab)?;
    let mlm_set = if cfg.r_mlm > 0.0 { plan_mlm(&sc_text, cfg.r_mlm, vocab, mlm_rng)? } else { MlmSet::default() };
    let masked_text = apply_mlm(&sc_text, &mlm_set, vocab)?;
    let target = build_decoder_target(x, &span_set, vocab)?;
    let n = sc_text.len();
    Ok(CorruptedExample { original: x.to_vec(), sc_text, masked_text, target, span_set, mlm_set, n })
}

/// `label[l] = replaced[l] != sc[l]`: true marks a replaced token.
pub fn rtd_labels(masked_text: &[TokenId], replaced_text: &[TokenId], sc_text: &[TokenId]) -> Result<Vec<bool>> {
    if masked_text.len() != replaced_text.len() || sc_text.len() != replaced_text.len() {
        return Err(Error::LengthMismatch(format!(
            "rtd_labels: masked {}, replaced {}, sc {}",
            masked_text.len(),
            replaced_text.len(),
            sc_text.len()
        )));
    }
    Ok(replaced_text.iter().zip(sc_text).map(|(r, s)| r != s).collect())
}

/// Tab-separated decoded `original / sc_text / masked_text / target`.
pub fn dump_line(ex: &CorruptedExample, vocab: &Vocabulary) -> Result<String> {
    Ok(format!(
        "{}\t{}\t{}\t{}",
        decode(&ex.original, vocab)?,
        decode(&ex.sc_text, vocab)?,
        decode(&ex.masked_text, vocab)?,
        decode(&ex.target, vocab)?
    ))
}

/// A batch of corrupted examples padded with `PAD_ID` to common lengths.
#[derive(Clone, Debug)]
pub struct CorruptedBatch {
    pub sc_text: Array2<TokenId>,
    pub masked_text: Array2<TokenId>,
    pub target: Array2<TokenId>,
    pub mlm_positions: Vec<Vec<usize>>,
}

impl CorruptedBatch {
    pub fn collate(examples: &[CorruptedExample]) -> Self {
        let b = examples.len();
        let n = examples.iter().map(|e| e.n).max().unwrap_or(0);
        let t = examples.iter().map(|e| e.target.len()).max().unwrap_or(0);
        let mut sc_text = Array2::from_elem((b, n), PAD_ID);
        let mut masked_text = Array2::from_elem((b, n), PAD_ID);
        let mut target = Array2::from_elem((b, t), PAD_ID);
        for (r, e) in examples.iter().enumerate() {
            for (c, (&s, &m)) in e.sc_text.iter().zip(&e.masked_text).enumerate() {
                sc_text[[r, c]] = s;
                masked_text[[r, c]] = m;
            }
            for (c, &tok) in e.target.iter().enumerate() {
                target[[r, c]] = tok;
            }
        }
        let mlm_positions = examples.iter().map(|e| e.mlm_set.positions.clone()).collect();
        CorruptedBatch { sc_text, masked_text, target, mlm_positions }
    }

    pub fn batch_size(&self) -> usize {
        self.sc_text.nrows()
    }
}
