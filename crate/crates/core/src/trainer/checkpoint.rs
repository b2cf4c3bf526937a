//! Checkpoint directories:
//!
//! ```text
//! manifest.json   step, stage, config hash, RNG and data positions, tensor index
//! params.bin      every parameter, little-endian, in store order
//! optimizer.bin   every accumulator tensor, little-endian, in name order
//! config.cfg      canonical config snapshot
//! vocab.txt       vocabulary, one token per line
//! ```
//!
//! Writes are deterministic: the same state always produces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainState;
use crate::config::{Config, Stage};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ParamGroup};
use crate::optim::{Optimizer, OptimizerKind, Slot};
use crate::rng::{RngPosition, RngStreams};
use crate::scalar::Scalar;
use crate::tokenizer::Vocabulary;

const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in scalars from the start of the binary file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: (usize, usize),
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub step: u64,
    pub stage: Stage,
    pub transition_step: Option<u64>,
    pub config_hash: String,
    pub model: ModelConfig,
    pub dtype: String,
    pub rng: BTreeMap<String, RngPosition>,
    pub data_epoch: u64,
    pub data_cursor: usize,
    pub optimizer_kind: OptimizerKind,
    pub optimizer_t: u64,
    pub params: Vec<ParamEntry>,
    pub optimizer_slots: Vec<TensorEntry>,
    pub params_sha256: String,
    pub optimizer_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `state` (plus the config and vocabulary it belongs to) into `dir`.
pub fn save_checkpoint(state: &TrainState, cfg: &Config, vocab: &Vocabulary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let trainable = state.trainable();
    let mut params_bin = Vec::with_capacity(state.params.num_scalars() * f32::BYTES);
    let mut params = Vec::with_capacity(state.params.len());
    let mut offset = 0;
    for (i, (info, value)) in state.params.infos().iter().zip(&state.params.values).enumerate() {
        value.iter().for_each(|&x| x.write_le(&mut params_bin));
        params.push(ParamEntry {
            name: info.name.clone(),
            group: info.group,
            shape: info.shape,
            offset,
            trainable: trainable.contains(&i),
        });
        offset += value.len();
    }

    let mut opt_bin = Vec::new();
    let mut optimizer_slots = Vec::new();
    let mut offset = 0;
    for (name, slot) in &state.optimizer.slots {
        for (k, t) in slot.tensors().iter().enumerate() {
            t.iter().for_each(|&x| x.write_le(&mut opt_bin));
            optimizer_slots.push(TensorEntry { name: format!("{name}#{k}"), shape: vec![t.nrows(), t.ncols()], offset });
            offset += t.len();
        }
    }

    let rng = [
        ("spans", &state.rng.spans),
        ("mlm", &state.rng.mlm),
        ("sampling", &state.rng.sampling),
    ]
    .into_iter()
    .map(|(k, r)| (k.to_string(), RngPosition::capture(r)))
    .collect();

    let manifest = CheckpointManifest {
        format: FORMAT,
        step: state.step,
        stage: state.stage,
        transition_step: state.transition_step,
        config_hash: cfg.hash(),
        model: state.params.config.clone(),
        dtype: f32::DTYPE.into(),
        rng,
        data_epoch: state.data_position.0,
        data_cursor: state.data_position.1,
        optimizer_kind: state.optimizer.kind,
        optimizer_t: state.optimizer.t,
        params,
        optimizer_slots,
        params_sha256: sha256_hex(&params_bin),
        optimizer_sha256: sha256_hex(&opt_bin),
    };
    write(&dir.join("params.bin"), &params_bin)?;
    write(&dir.join("optimizer.bin"), &opt_bin)?;
    write(&dir.join("config.cfg"), cfg.to_file_string().as_bytes())?;
    write(&dir.join("vocab.txt"), vocab.to_file_string().as_bytes())?;
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    write(&dir.join("manifest.json"), json.as_bytes())
}

/// A checkpoint read back without reference to a run config.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub config: Config,
    pub vocab: Vocabulary,
    pub state: TrainState,
}

fn corrupt(dir: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", dir.display()))
}

fn read_tensor(bin: &[u8], offset: usize, shape: (usize, usize), dir: &Path) -> Result<Array2<f32>> {
    let start = offset * f32::BYTES;
    let end = start + shape.0 * shape.1 * f32::BYTES;
    let bytes = bin.get(start..end).ok_or_else(|| corrupt(dir, "tensor extends past end of file"))?;
    let values = bytes.chunks_exact(f32::BYTES).map(f32::read_le).collect();
    Array2::from_shape_vec(shape, values).map_err(|e| corrupt(dir, e))
}

/// Reads and verifies a checkpoint directory.
pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| Error::io(dir.join("manifest.json"), e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| corrupt(dir, format!("manifest.json: {e}")))?;
    if manifest.format != FORMAT || manifest.dtype != f32::DTYPE {
        return Err(corrupt(dir, "unsupported format or dtype"));
    }
    let config = Config::from_file(&dir.join("config.cfg"))?;
    if config.hash() != manifest.config_hash {
        return Err(corrupt(dir, "config snapshot does not match manifest hash"));
    }
    let vocab = Vocabulary::read_file(&dir.join("vocab.txt"))?;

    let params_bin = read(&dir.join("params.bin"))?;
    if sha256_hex(&params_bin) != manifest.params_sha256 {
        return Err(corrupt(dir, "params.bin hash mismatch"));
    }
    let opt_bin = read(&dir.join("optimizer.bin"))?;
    if sha256_hex(&opt_bin) != manifest.optimizer_sha256 {
        return Err(corrupt(dir, "optimizer.bin hash mismatch"));
    }

    let mut params = ModelParams::<f32>::zeros(&manifest.model, true, true);
    if params.len() != manifest.params.len() {
        return Err(corrupt(dir, "parameter list does not match the model config"));
    }
    for (i, entry) in manifest.params.iter().enumerate() {
        let info = &params.infos()[i];
        if info.name != entry.name || info.shape != entry.shape {
            return Err(corrupt(dir, format!("unexpected parameter {}", entry.name)));
        }
        params.values[i] = read_tensor(&params_bin, entry.offset, entry.shape, dir)?;
    }

    let mut optimizer = Optimizer::new(manifest.optimizer_kind);
    optimizer.t = manifest.optimizer_t;
    let mut grouped: BTreeMap<&str, Vec<Array2<f32>>> = BTreeMap::new();
    for entry in &manifest.optimizer_slots {
        let (name, _) = entry.name.rsplit_once('#').ok_or_else(|| corrupt(dir, "bad slot name"))?;
        let shape = match entry.shape[..] {
            [r, c] => (r, c),
            _ => return Err(corrupt(dir, "slot tensors must be 2-d")),
        };
        grouped.entry(name).or_default().push(read_tensor(&opt_bin, entry.offset, shape, dir)?);
    }
    for (name, tensors) in grouped {
        let shape = params
            .infos()
            .iter()
            .find(|i| i.name == name)
            .ok_or_else(|| corrupt(dir, format!("slot for unknown parameter {name}")))?
            .shape;
        optimizer.slots.insert(name.to_string(), Slot::from_tensors(shape, tensors)?);
    }

    let restore = |k: &str| {
        manifest.rng.get(k).and_then(RngPosition::restore).ok_or_else(|| corrupt(dir, format!("bad RNG state `{k}`")))
    };
    let rng = RngStreams { spans: restore("spans")?, mlm: restore("mlm")?, sampling: restore("sampling")? };

    let state = TrainState {
        step: manifest.step,
        stage: manifest.stage,
        params,
        optimizer,
        rng,
        data_position: (manifest.data_epoch, manifest.data_cursor),
        transition_step: manifest.transition_step,
    };
    Ok(Checkpoint { manifest, config, vocab, state })
}

/// Reads a checkpoint for resuming under `cfg`; the config hashes must agree.
pub fn load_checkpoint(dir: &Path, cfg: &Config) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(dir)?;
    let expected = cfg.hash();
    if ckpt.manifest.config_hash != expected {
        return Err(Error::ConfigHashMismatch { found: ckpt.manifest.config_hash, expected });
    }
    if ckpt.state.stage != cfg.tau.stage_at(ckpt.state.step) {
        return Err(corrupt(dir, "recorded stage disagrees with tau"));
    }
    Ok(ckpt)
}
