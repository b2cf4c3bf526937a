//! The `pretrain` loop: data, steps, transition, checkpoints, metrics and
//! the run manifest.
//!
//! Run directory layout:
//!
//! ```text
//! config.cfg            config snapshot
//! vocab.txt             vocabulary
//! metrics.csv           one row per step
//! run_manifest.jsonl    start / resume / transition / complete events
//! checkpoints/step_NNNNNNNN/
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;
use sha2::{Digest, Sha256};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::{train_step, transition, StepMetrics, TrainState, METRICS_HEADER};
use crate::config::{Config, Stage};
use crate::error::{Error, Result};
use crate::rng::{stream_seed, Stream};
use crate::tokenizer::{build_vocab, encode, read_corpus, DataStream, TokenId, Vocabulary};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoint directory, or run directory whose latest checkpoint is used.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps instead of `total_steps`.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub final_step: u64,
    pub checkpoints: Vec<PathBuf>,
    /// Metrics of the steps executed by this call.
    pub metrics: Vec<StepMetrics>,
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:08}"))
}

/// Highest-step checkpoint under `run_dir/checkpoints`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let root = run_dir.join("checkpoints");
    if !root.is_dir() {
        return Ok(None);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs.pop())
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn append_event(out: &Path, event: serde_json::Value) -> Result<()> {
    let path = out.join("run_manifest.jsonl");
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{event}").map_err(|e| Error::io(&path, e))
}

fn file_inventory(out: &Path) -> Result<Vec<serde_json::Value>> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, files)?;
            } else {
                files.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(out, &mut files)?;
    files
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n != "run_manifest.jsonl"))
        .map(|p| {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rel = p.strip_prefix(out).unwrap_or(&p).display().to_string();
            Ok(json!({ "path": rel, "sha256": hex::encode(Sha256::digest(&bytes)) }))
        })
        .collect()
}

/// Metrics rows of `run_dir/metrics.csv` with step below `before`.
fn earlier_rows(run_dir: &Path, before: u64) -> Vec<String> {
    let Ok(text) = fs::read_to_string(run_dir.join("metrics.csv")) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < before))
        .map(str::to_owned)
        .collect()
}

fn load_corpus(cfg: &Config) -> Result<Vec<String>> {
    let path = cfg.corpus.as_ref().ok_or_else(|| Error::Config {
        key: "corpus".into(),
        message: "a training corpus path is required".into(),
    })?;
    let docs = read_corpus(path)?;
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(docs)
}

/// Trains under `cfg`, writing the run into `out`.
pub fn run(cfg: &Config, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let texts = load_corpus(cfg)?;

    let resume_dir = match &opts.resume {
        Some(p) if p.join("manifest.json").is_file() => Some(p.clone()),
        Some(p) => Some(latest_checkpoint(p)?.ok_or_else(|| Error::Checkpoint(format!("no checkpoint under {}", p.display())))?),
        None => None,
    };
    let (vocab, mut state) = match &resume_dir {
        Some(dir) => {
            let ckpt = load_checkpoint(dir, cfg)?;
            (ckpt.vocab, ckpt.state)
        }
        None => {
            let sentinels = cfg.corruption().sentinel_budget(cfg.input_len);
            let vocab = build_vocab(texts.iter().map(String::as_str), cfg.vocab_size, sentinels)?;
            let state = TrainState::new(cfg, vocab.len())?;
            (vocab, state)
        }
    };
    let docs: Vec<Vec<TokenId>> = texts.iter().map(|t| encode(t, &vocab)).collect();
    let mut data = DataStream::new(&docs, cfg.input_len, cfg.batch_size, stream_seed(cfg.seed, Stream::Data))?;
    data.seek(state.data_position.0, state.data_position.1);

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: &str| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("config.cfg", &cfg.to_file_string())?;
    write("vocab.txt", &vocab.to_file_string())?;

    // carry over the rows that precede the resume point
    let previous = match &resume_dir {
        Some(dir) => {
            let own = earlier_rows(out, state.step);
            let source_run = dir.parent().and_then(Path::parent);
            if own.len() as u64 == state.step {
                own
            } else {
                source_run.map(|r| earlier_rows(r, state.step)).unwrap_or_default()
            }
        }
        None => Vec::new(),
    };
    let mut csv = String::from(METRICS_HEADER) + "\n";
    for row in &previous {
        csv += row;
        csv.push('\n');
    }
    write("metrics.csv", &csv)?;

    let seeds: serde_json::Map<String, serde_json::Value> =
        Stream::ALL.iter().map(|&s| (s.name().to_string(), json!(stream_seed(cfg.seed, s)))).collect();
    let event = match &resume_dir {
        Some(dir) => json!({
            "event": "resume",
            "timestamp": now(),
            "step": state.step,
            "from": dir.display().to_string(),
        }),
        None => json!({
            "event": "start",
            "timestamp": now(),
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg.to_file_string(),
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "stream_seeds": seeds,
            "optimizer_state_at_transition": "retained parameters keep their accumulators",
            "transition_step": state.transition_step,
        }),
    };
    append_event(out, event)?;

    let metrics_path = out.join("metrics.csv");
    let mut metrics_file =
        OpenOptions::new().append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let end = opts.stop_at.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    let mut summary = RunSummary { final_step: state.step, checkpoints: Vec::new(), metrics: Vec::new() };
    let mut last_saved = resume_dir.as_ref().map(|_| state.step);

    while state.step < end {
        let before = state.clone();
        let raw = data.next_batch();
        state.data_position = data.position();
        let metrics = match train_step(&mut state, &raw, cfg, &vocab) {
            Ok(m) => m,
            Err(e @ Error::Divergence { .. }) => {
                save_checkpoint(&before, cfg, &vocab, &out.join("diverged"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(metrics_file, "{}", metrics.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        summary.metrics.push(metrics);

        if state.stage == Stage::Hybrid && !cfg.tau.is_hybrid(state.step) {
            transition(&mut state, cfg)?;
            append_event(out, json!({ "event": "transition", "timestamp": now(), "step": state.step }))?;
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            let dir = checkpoint_dir(out, state.step);
            save_checkpoint(&state, cfg, &vocab, &dir)?;
            summary.checkpoints.push(dir);
            last_saved = Some(state.step);
        }
    }
    if last_saved != Some(state.step) {
        let dir = checkpoint_dir(out, state.step);
        save_checkpoint(&state, cfg, &vocab, &dir)?;
        summary.checkpoints.push(dir);
    }
    metrics_file.flush().map_err(|e| Error::io(&metrics_path, e))?;
    summary.final_step = state.step;

    let event = if state.step >= cfg.total_steps { "complete" } else { "stopped" };
    append_event(
        out,
        json!({ "event": event, "timestamp": now(), "step": state.step, "files": file_inventory(out)? }),
    )?;
    Ok(summary)
}

/// Vocabulary and encoded documents of a corpus file under an existing vocabulary.
pub fn encode_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    Ok(read_corpus(path)?.iter().map(|t| encode(t, vocab)).collect())
}
