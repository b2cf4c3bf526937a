//! Two-stage training: the hybrid objective for steps `< tau`, then plain
//! span corruption with the generator and RTD head frozen.

mod checkpoint;
mod run;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};
pub use run::{checkpoint_dir, encode_corpus, latest_checkpoint, run, RunOptions, RunSummary};

use crate::config::{Config, Stage};
use crate::corruption::{corrupt_example, CorruptedBatch, CorruptionConfig};
use crate::diagnostics::{flops_per_step, FlopsInput};
use crate::error::{Error, Result};
use crate::model::{init_params, Graph, ModelConfig, ModelParams};
use crate::objectives::{build_hybrid, build_sc_only, Replacements};
use crate::optim::Optimizer;
use crate::rng::RngStreams;
use crate::tokenizer::{unpad, TokenId, Vocabulary};

/// `1 / sqrt(max(step, kappa))`.
pub fn lr(step: u64, kappa: u64) -> f64 {
    1.0 / (step.max(kappa) as f64).sqrt()
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    pub l_g: Option<f64>,
    pub l_rtd: Option<f64>,
    pub l_sc: f64,
    pub total: f64,
    pub tokens_per_step: usize,
    pub gflops_per_step: f64,
}

pub const METRICS_HEADER: &str = "step,stage,lr,l_g,l_rtd,l_sc,total,tokens_per_step,gflops_per_step";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.stage.name(),
            self.lr,
            opt(self.l_g),
            opt(self.l_rtd),
            self.l_sc,
            self.total,
            self.tokens_per_step,
            self.gflops_per_step
        )
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Number of completed updates.
    pub step: u64,
    pub stage: Stage,
    pub params: ModelParams<f32>,
    pub optimizer: Optimizer<f32>,
    pub rng: RngStreams,
    /// `(epoch, cursor)` of the training data stream.
    pub data_position: (u64, usize),
    /// Step at which the transition happened, if it has.
    pub transition_step: Option<u64>,
}

/// Model shape for a run: the config's sizes with the vocabulary actually
/// built from the corpus.
pub fn run_model_config(cfg: &Config, vocab_len: usize) -> ModelConfig {
    ModelConfig { vocab_size: vocab_len, ..cfg.model_config() }
}

impl TrainState {
    /// Fresh state at step 0. With `tau = 0` the state starts in the
    /// span-corruption stage.
    pub fn new(cfg: &Config, vocab_len: usize) -> Result<Self> {
        let params = init_params(&run_model_config(cfg, vocab_len), cfg.seed)?;
        let mut state = TrainState {
            step: 0,
            stage: Stage::Hybrid,
            params,
            optimizer: Optimizer::new(cfg.optimizer),
            rng: RngStreams::new(cfg.seed),
            data_position: (0, 0),
            transition_step: None,
        };
        if !cfg.tau.is_hybrid(0) {
            transition(&mut state, cfg)?;
        }
        Ok(state)
    }

    /// Parameter indices updated in the current stage.
    pub fn trainable(&self) -> Vec<usize> {
        self.params
            .infos()
            .iter()
            .enumerate()
            .filter(|(_, info)| self.stage == Stage::Hybrid || info.group.retained())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Switches to the span-corruption stage. Generator and RTD-head values are
/// kept but frozen; their optimizer accumulators are dropped. Accumulators of
/// the retained parameters carry over unchanged.
pub fn transition(state: &mut TrainState, cfg: &Config) -> Result<()> {
    if cfg.tau.0 != Some(state.step) || state.stage != Stage::Hybrid {
        return Err(Error::WrongTransitionStep { step: state.step, tau: cfg.tau.to_string() });
    }
    let keep: Vec<String> = state
        .params
        .infos()
        .iter()
        .filter(|i| i.group.retained())
        .map(|i| i.name.clone())
        .collect();
    state.optimizer.retain(keep.iter().map(String::as_str));
    state.stage = Stage::ScOnly;
    state.transition_step = Some(state.step);
    Ok(())
}

/// Corrupts every row of a packed `[batch, input_len]` matrix.
pub fn corrupt_batch(
    raw: &Array2<TokenId>,
    corruption: &CorruptionConfig,
    vocab: &Vocabulary,
    rng: &mut RngStreams,
) -> Result<CorruptedBatch> {
    let examples = raw
        .rows()
        .into_iter()
        .map(|row| {
            let row = row.to_vec();
            corrupt_example(unpad(&row), corruption, vocab, &mut rng.spans, &mut rng.mlm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorruptedBatch::collate(&examples))
}

/// Corruption settings for `stage`: no token masking after the transition.
pub fn stage_corruption(cfg: &Config, stage: Stage) -> CorruptionConfig {
    let mut c = cfg.corruption();
    if stage == Stage::ScOnly {
        c.r_mlm = 0.0;
    }
    c
}

/// One optimizer update on a packed batch of raw token rows.
pub fn train_step(state: &mut TrainState, raw: &Array2<TokenId>, cfg: &Config, vocab: &Vocabulary) -> Result<StepMetrics> {
    let expected = cfg.tau.stage_at(state.step);
    if state.stage != expected {
        return Err(Error::WrongTransitionStep { step: state.step, tau: cfg.tau.to_string() });
    }
    let stage = state.stage;
    let batch = corrupt_batch(raw, &stage_corruption(cfg, stage), vocab, &mut state.rng)?;
    let weights = cfg.loss_weights();

    let params = &state.params;
    let mut g = Graph::new(params);
    let (total, l_g, l_rtd, l_sc) = match stage {
        Stage::Hybrid => {
            let t = build_hybrid(&mut g, &batch, Replacements::Sample(&mut state.rng.sampling), &weights)?;
            (t.total, Some(t.l_g), Some(t.l_rtd), t.l_sc)
        }
        Stage::ScOnly => {
            let (l, _) = build_sc_only(&mut g, &batch.sc_text, &batch.target, weights.reduction);
            (l, None, None, l)
        }
    };
    let value = |v| f64::from(g.tape.scalar(v));
    let total_value = value(total);
    if !total_value.is_finite() {
        return Err(Error::Divergence { step: state.step, loss: total_value });
    }
    let metrics = StepMetrics {
        step: state.step,
        stage,
        lr: lr(state.step, cfg.kappa),
        l_g: l_g.map(value),
        l_rtd: l_rtd.map(value),
        l_sc: value(l_sc),
        total: total_value,
        tokens_per_step: raw.len(),
        gflops_per_step: step_gflops(cfg, &params.config, raw.nrows(), stage),
    };
    let grads = g.param_grads(total);
    drop(g);
    let trainable = state.trainable();
    state.optimizer.step(&mut state.params, &grads, &trainable, metrics.lr)?;
    state.step += 1;
    Ok(metrics)
}

fn step_gflops(cfg: &Config, model: &ModelConfig, batch_size: usize, stage: Stage) -> f64 {
    let corruption = cfg.corruption();
    flops_per_step(&FlopsInput { model, corruption: &corruption, input_len: cfg.input_len, batch_size }, stage)
}
