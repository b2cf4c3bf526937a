#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spactor::config::{Config, Tau};

/// Documents from a first-order Markov chain over `types` word types. Each
/// word has four successors chosen with probabilities 0.55/0.25/0.12/0.08.
pub fn markov_corpus(types: usize, target_bytes: usize, seed: u64) -> Vec<String> {
    markov_corpus_with(types, target_bytes, seed, [0.55, 0.25, 0.12, 0.08])
}

/// As `markov_corpus` with explicit successor probabilities.
pub fn markov_corpus_with(types: usize, target_bytes: usize, seed: u64, probs: [f64; 4]) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..types).map(|i| format!("w{i}")).collect();
    let successors: Vec<[usize; 4]> = (0..types)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..types)))
        .collect();
    let mut docs = Vec::new();
    let mut bytes = 0;
    while bytes < target_bytes {
        let len = rng.random_range(40..160);
        let mut w = rng.random_range(0..types);
        let mut doc = Vec::with_capacity(len);
        for _ in 0..len {
            doc.push(words[w].as_str());
            let u: f64 = rng.random();
            let mut k = 0;
            let mut acc = probs[0];
            while u >= acc && k < 3 {
                k += 1;
                acc += probs[k];
            }
            w = successors[w][k];
        }
        let line = doc.join(" ");
        bytes += line.len() + 1;
        docs.push(line);
    }
    docs
}

pub fn write_corpus(dir: &Path, name: &str, docs: &[String]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, docs.join("\n") + "\n").unwrap();
    path
}

/// Small model that trains a step in a few milliseconds.
pub fn tiny_config(corpus: &Path, tau: Tau, total_steps: u64) -> Config {
    Config {
        d_model: 16,
        vocab_size: 128,
        disc_layers: 1,
        disc_heads: 2,
        disc_mlp: 32,
        gen_layers: 1,
        gen_mlp: 16,
        rtd_mlp: 16,
        input_len: 32,
        batch_size: 4,
        tau,
        total_steps,
        kappa: 1000,
        corpus: Some(corpus.to_path_buf()),
        ..Config::default()
    }
}

pub fn write_config(dir: &Path, name: &str, cfg: &Config) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_file_string()).unwrap();
    path
}

/// All files under `dir` with their bytes, keyed by relative path.
pub fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

/// Parsed metrics CSV: header and rows of raw fields.
pub fn read_metrics(run: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}
