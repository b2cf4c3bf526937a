//! Whitespace vocabulary with reserved specials, encoding, and batch packing.
//!
//! Ids `0..num_specials` are reserved, in this fixed order:
//! `[PAD]`, `[EOS]`, `[UNK]`, `[M]`, then sentinels `[S0]`..`[S{K-1}]`.
//! Content tokens follow, ranked by corpus frequency (ties broken
//! lexicographically). The vocabulary file stores one token per line with
//! line number equal to id.

use std::collections::HashMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;
pub const MLM_ID: TokenId = 3;
pub const FIRST_SENTINEL_ID: TokenId = 4;

const FIXED_SPECIALS: [&str; 4] = ["[PAD]", "[EOS]", "[UNK]", "[M]"];

pub fn sentinel_name(k: usize) -> String {
    format!("[S{k}]")
}

fn is_special_name(tok: &str) -> bool {
    FIXED_SPECIALS.contains(&tok)
        || (tok.starts_with("[S")
            && tok.ends_with(']')
            && tok.len() > 3
            && tok[2..tok.len() - 1].bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    num_sentinels: usize,
}

impl Vocabulary {
    fn from_tokens(id_to_token: Vec<String>, num_sentinels: usize) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { id_to_token, token_to_id, num_sentinels }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn num_specials(&self) -> usize {
        FIXED_SPECIALS.len() + self.num_sentinels
    }

    pub fn num_sentinels(&self) -> usize {
        self.num_sentinels
    }

    pub fn num_content(&self) -> usize {
        self.len() - self.num_specials()
    }

    pub fn sentinel_id(&self, k: usize) -> Option<TokenId> {
        (k < self.num_sentinels).then(|| FIRST_SENTINEL_ID + k as TokenId)
    }

    pub fn sentinel_ids(&self) -> Vec<TokenId> {
        (0..self.num_sentinels).map(|k| FIRST_SENTINEL_ID + k as TokenId).collect()
    }

    pub fn is_sentinel(&self, id: TokenId) -> bool {
        id >= FIRST_SENTINEL_ID && ((id - FIRST_SENTINEL_ID) as usize) < self.num_sentinels
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < self.num_specials()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn content_ids(&self) -> std::ops::Range<TokenId> {
        self.num_specials() as TokenId..self.len() as TokenId
    }

    /// One token per line, line number = id, trailing newline.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        let bad = |msg: String| Error::Checkpoint(format!("vocabulary file: {msg}"));
        if tokens.len() < FIXED_SPECIALS.len() {
            return Err(bad("missing reserved specials".into()));
        }
        for (i, name) in FIXED_SPECIALS.iter().enumerate() {
            if tokens[i] != *name {
                return Err(bad(format!("line {i} should be {name}, found {}", tokens[i])));
            }
        }
        let mut k = 0;
        while FIXED_SPECIALS.len() + k < tokens.len() && tokens[FIXED_SPECIALS.len() + k] == sentinel_name(k) {
            k += 1;
        }
        let vocab = Vocabulary::from_tokens(tokens, k);
        if vocab.token_to_id.len() != vocab.len() {
            return Err(bad("duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_str(&text)
    }
}

/// Builds a vocabulary from documents, keeping the `max_size - specials`
/// most frequent whitespace tokens.
pub fn build_vocab<'a, I>(corpus: I, max_size: usize, num_sentinels: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    let specials = FIXED_SPECIALS.len() + num_sentinels;
    let mut counts: HashMap<&'a str, u64> = HashMap::new();
    let mut any = false;
    for doc in corpus {
        for tok in doc.split_whitespace() {
            any = true;
            if !is_special_name(tok) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
    }
    if !any {
        return Err(Error::EmptyCorpus);
    }
    if max_size <= specials {
        return Err(Error::VocabTooSmall { max_size, specials });
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - specials);

    let mut tokens: Vec<String> = FIXED_SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..num_sentinels).map(sentinel_name));
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_owned()));
    Ok(Vocabulary::from_tokens(tokens, num_sentinels))
}

/// Whitespace tokenization; out-of-vocabulary and special-looking tokens map
/// to `UNK_ID`.
pub fn encode(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    text.split_whitespace()
        .map(|tok| match vocab.id(tok) {
            Some(id) if !vocab.is_special(id) => id,
            _ => UNK_ID,
        })
        .collect()
}

pub fn decode(ids: &[TokenId], vocab: &Vocabulary) -> Result<String> {
    let mut parts = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::IdOutOfRange { id, size: vocab.len() })?;
        parts.push(tok);
    }
    Ok(parts.join(" "))
}

/// Reads a corpus file: UTF-8, one document per line, blank lines skipped.
pub fn read_corpus(path: &std::path::Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect())
}

/// Joins documents with `EOS_ID` separators and cuts the stream into rows of
/// `input_len`; the last row is right-padded with `PAD_ID`.
pub fn chunk_documents(docs: &[Vec<TokenId>], input_len: usize) -> Vec<Vec<TokenId>> {
    let mut stream = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            stream.push(EOS_ID);
        }
        stream.extend_from_slice(doc);
    }
    stream
        .chunks(input_len)
        .map(|c| {
            let mut row = c.to_vec();
            row.resize(input_len, PAD_ID);
            row
        })
        .collect()
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xDA7A_0000 ^ epoch));
    order.shuffle(&mut rng);
    order
}

fn stack_rows(rows: &[&Vec<TokenId>], input_len: usize) -> Array2<TokenId> {
    let mut m = Array2::from_elem((rows.len(), input_len), PAD_ID);
    for (r, row) in rows.iter().enumerate() {
        for (c, &id) in row.iter().enumerate() {
            m[[r, c]] = id;
        }
    }
    m
}

/// One seeded pass over the chunked corpus: rows are shuffled by `seed` and
/// grouped into `[batch_size x input_len]` matrices. A trailing partial batch
/// is emitted with fewer rows.
pub fn pack_batches(
    docs: &[Vec<TokenId>],
    input_len: usize,
    batch_size: usize,
    seed: u64,
) -> Vec<Array2<TokenId>> {
    assert!(input_len >= 8, "input_len must be at least 8");
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let chunks = chunk_documents(docs, input_len);
    let order = epoch_order(chunks.len(), seed, 0);
    order
        .chunks(batch_size)
        .map(|idx| {
            let rows: Vec<&Vec<TokenId>> = idx.iter().map(|&i| &chunks[i]).collect();
            stack_rows(&rows, input_len)
        })
        .collect()
}

/// Endless, resumable batch stream for training: each epoch reshuffles the
/// chunk order from `(seed, epoch)`; only full batches of full-length rows
/// are emitted (a trailing padded row is dropped).
#[derive(Clone, Debug)]
pub struct DataStream {
    chunks: Vec<Vec<TokenId>>,
    input_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl DataStream {
    pub fn new(docs: &[Vec<TokenId>], input_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let mut chunks = chunk_documents(docs, input_len);
        if chunks.last().is_some_and(|c| c.last() == Some(&PAD_ID)) {
            chunks.pop();
        }
        if chunks.len() < batch_size {
            return Err(Error::Config {
                key: "batch_size".into(),
                message: format!("corpus yields {} rows, fewer than batch_size {batch_size}", chunks.len()),
            });
        }
        let order = epoch_order(chunks.len(), seed, 0);
        Ok(DataStream { chunks, input_len, batch_size, seed, epoch: 0, cursor: 0, order })
    }

    pub fn position(&self) -> (u64, usize) {
        (self.epoch, self.cursor)
    }

    pub fn seek(&mut self, epoch: u64, cursor: usize) {
        self.epoch = epoch;
        self.cursor = cursor;
        self.order = epoch_order(self.chunks.len(), self.seed, epoch);
    }

    pub fn num_rows(&self) -> usize {
        self.chunks.len()
    }

    pub fn next_batch(&mut self) -> Array2<TokenId> {
        if self.cursor + self.batch_size > self.order.len() {
            self.seek(self.epoch + 1, 0);
        }
        let rows: Vec<&Vec<TokenId>> = self.order[self.cursor..self.cursor + self.batch_size]
            .iter()
            .map(|&i| &self.chunks[i])
            .collect();
        self.cursor += self.batch_size;
        stack_rows(&rows, self.input_len)
    }
}

/// Strips the trailing `PAD_ID` suffix of a packed row.
pub fn unpad(row: &[TokenId]) -> &[TokenId] {
    let end = row.iter().rposition(|&t| t != PAD_ID).map_or(0, |p| p + 1);
    &row[..end]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture_vocab() -> Vocabulary {
        build_vocab(["a b a", "c a b"], 200, 4).unwrap()
    }

    #[test]
    fn specials_come_first_in_fixed_order() {
        let v = fixture_vocab();
        assert_eq!(v.token(PAD_ID), Some("[PAD]"));
        assert_eq!(v.token(EOS_ID), Some("[EOS]"));
        assert_eq!(v.token(UNK_ID), Some("[UNK]"));
        assert_eq!(v.token(MLM_ID), Some("[M]"));
        assert_eq!(v.sentinel_ids(), vec![4, 5, 6, 7]);
        assert_eq!(v.num_specials(), 8);
        // a:3, b:2, c:1
        assert_eq!(v.id("a"), Some(8));
        assert_eq!(v.id("b"), Some(9));
        assert_eq!(v.id("c"), Some(10));
    }

    #[test]
    fn distinct_ids_and_deterministic_file() {
        let v = build_vocab(["a b a"], 200, 3).unwrap();
        assert_ne!(v.id("a"), v.id("b"));
        let w = build_vocab(["a b a"], 200, 3).unwrap();
        assert_eq!(v.to_file_string(), w.to_file_string());
        let back = Vocabulary::from_file_str(&v.to_file_string()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn keeps_most_frequent_tokens() {
        // word i appears i+1 times, so the 10 most frequent are w40..w49.
        let mut doc = String::new();
        for i in 0..50 {
            for _ in 0..=i {
                doc.push_str(&format!("w{i} "));
            }
        }
        let specials = 4 + 5;
        let v = build_vocab([doc.as_str()], specials + 10, 5).unwrap();
        assert_eq!(v.num_content(), 10);
        let mut got: Vec<&str> = v.content_ids().map(|id| v.token(id).unwrap()).collect();
        got.sort();
        let mut want: Vec<String> = (40..50).map(|i| format!("w{i}")).collect();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn errors() {
        assert!(matches!(build_vocab(["", "  "], 100, 2), Err(Error::EmptyCorpus)));
        assert!(matches!(build_vocab(["a"], 6, 2), Err(Error::VocabTooSmall { .. })));
        let v = fixture_vocab();
        assert!(matches!(decode(&[v.len() as u32], &v), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn encode_decode_basics() {
        let v = fixture_vocab();
        assert!(encode("", &v).is_empty());
        assert_eq!(decode(&[], &v).unwrap(), "");
        assert_eq!(encode("a b unkword", &v), vec![8, 9, UNK_ID]);
        assert_eq!(decode(&[4], &v).unwrap(), "[S0]");
        assert_eq!(decode(&[MLM_ID, EOS_ID], &v).unwrap(), "[M] [EOS]");
        // special-looking raw text never yields special ids
        assert_eq!(encode("[S0] [M] [EOS]", &v), vec![UNK_ID; 3]);
    }

    #[test]
    fn packing_shapes() {
        let doc: Vec<TokenId> = (0..1000).map(|i| 100 + (i % 7)).collect();
        let batches = pack_batches(&[doc], 100, 2, 0);
        assert_eq!(batches.len(), 5);
        assert!(batches.iter().all(|b| b.dim() == (2, 100)));

        let short: Vec<TokenId> = vec![9; 90];
        let batches = pack_batches(&[short], 100, 1, 0);
        assert_eq!(batches.len(), 1);
        let row = batches[0].row(0);
        assert!(row.iter().take(90).all(|&t| t == 9));
        assert!(row.iter().skip(90).all(|&t| t == PAD_ID));
    }

    #[test]
    fn packing_is_seed_deterministic() {
        let docs: Vec<Vec<TokenId>> = (0..20).map(|d| (0..37).map(|i| 10 + d * 37 + i).collect()).collect();
        let a = pack_batches(&docs, 16, 3, 11);
        let b = pack_batches(&docs, 16, 3, 11);
        let c = pack_batches(&docs, 16, 3, 12);
        assert_eq!(a[0], b[0]);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn documents_joined_with_eos() {
        let rows = chunk_documents(&[vec![10, 11], vec![12]], 8);
        assert_eq!(rows, vec![vec![10, 11, EOS_ID, 12, 0, 0, 0, 0]]);
    }

    #[test]
    fn data_stream_seek_reproduces() {
        let docs: Vec<Vec<TokenId>> = (0..10).map(|d| (0..50).map(|i| 10 + d * 50 + i).collect()).collect();
        let mut s = DataStream::new(&docs, 16, 4, 5).unwrap();
        for _ in 0..9 {
            s.next_batch();
        }
        let (e, c) = s.position();
        let mut t = DataStream::new(&docs, 16, 4, 5).unwrap();
        t.seek(e, c);
        for _ in 0..5 {
            assert_eq!(s.next_batch(), t.next_batch());
        }
    }

    proptest! {
        #[test]
        fn decode_encode_fixed_point(idx in proptest::collection::vec(0usize..3, 0..20)) {
            let v = fixture_vocab();
            let ids: Vec<TokenId> = idx.iter().map(|&i| v.content_ids().start + i as TokenId).collect();
            let text = decode(&ids, &v).unwrap();
            prop_assert_eq!(encode(&text, &v), ids);
        }

        #[test]
        fn batches_valid_with_pad_suffix(
            lens in proptest::collection::vec(1usize..60, 1..8),
            input_len in 8usize..40,
            batch in 1usize..4,
            seed in 0u64..100,
        ) {
            let docs: Vec<Vec<TokenId>> = lens.iter().map(|&n| vec![20; n]).collect();
            for b in pack_batches(&docs, input_len, batch, seed) {
                for row in b.rows() {
                    let row: Vec<TokenId> = row.to_vec();
                    prop_assert!(row.iter().all(|&t| t < 21));
                    let real = unpad(&row).len();
                    prop_assert!(row[..real].iter().all(|&t| t != PAD_ID));
                }
            }
        }
    }
}
