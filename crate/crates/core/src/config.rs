//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown or repeated keys are rejected. Relative paths are resolved
//! against the directory of the config file. Defaults are the Base-size
//! values; desk-scale runs override the sizes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corruption::CorruptionConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{LossWeights, Reduction};
use crate::optim::OptimizerKind;

/// Transition step; `None` keeps the hybrid objective for the whole run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tau(pub Option<u64>);

impl Tau {
    pub const INFINITE: Tau = Tau(None);

    /// True while `step` is trained with the hybrid objective.
    pub fn is_hybrid(self, step: u64) -> bool {
        self.0.is_none_or(|t| step < t)
    }

    pub fn stage_at(self, step: u64) -> Stage {
        if self.is_hybrid(step) {
            Stage::Hybrid
        } else {
            Stage::ScOnly
        }
    }
}

impl fmt::Display for Tau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(t) => write!(f, "{t}"),
            None => f.write_str("inf"),
        }
    }
}

impl FromStr for Tau {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "inf" {
            return Ok(Tau::INFINITE);
        }
        s.parse::<u64>().map(|t| Tau(Some(t))).map_err(|_| "expected a step count or `inf`".into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Hybrid,
    ScOnly,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Hybrid => "hybrid",
            Stage::ScOnly => "sc_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub d_model: usize,
    pub vocab_size: usize,
    pub disc_layers: usize,
    pub disc_heads: usize,
    pub disc_mlp: usize,
    pub gen_layers: usize,
    pub gen_mlp: usize,
    pub rtd_mlp: usize,
    pub input_len: usize,
    pub batch_size: usize,
    pub r_sc: f64,
    pub mu: f64,
    pub r_mlm: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: Tau,
    pub total_steps: u64,
    pub kappa: u64,
    pub seed: u64,
    pub loss_reduction: Reduction,
    pub optimizer: OptimizerKind,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub corpus: Option<PathBuf>,
    pub val_corpus: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            d_model: 768,
            vocab_size: 32000,
            disc_layers: 12,
            disc_heads: 12,
            disc_mlp: 3072,
            gen_layers: 4,
            gen_mlp: 1024,
            rtd_mlp: 3072,
            input_len: 512,
            batch_size: 2048,
            r_sc: 0.15,
            mu: 3.0,
            r_mlm: 0.15,
            lambda1: 10.0,
            lambda2: 10.0,
            tau: Tau(Some(250_000)),
            total_steps: 500_000,
            kappa: 10_000,
            seed: 0,
            loss_reduction: Reduction::Mean,
            optimizer: OptimizerKind::Adafactor,
            checkpoint_every: 0,
            corpus: None,
            val_corpus: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "d_model",
    "vocab_size",
    "disc_layers",
    "disc_heads",
    "disc_mlp",
    "gen_layers",
    "gen_mlp",
    "rtd_mlp",
    "input_len",
    "batch_size",
    "r_sc",
    "mu",
    "r_mlm",
    "lambda1",
    "lambda2",
    "tau",
    "total_steps",
    "kappa",
    "seed",
    "loss_reduction",
    "optimizer",
    "checkpoint_every",
    "corpus",
    "val_corpus",
];

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.to_owned(), message: message.into() }
}

fn parse_value<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value.parse().map_err(|_| config_err(key, format!("`{value}` is not {expected}")))
}

impl Config {
    /// Parses config text; relative paths resolve against `base_dir`.
    pub fn parse_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(line, format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(config_err(key, "given more than once"));
            }
            cfg.set(key, value, base_dir)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse_str(&text, path.parent())
    }

    fn set(&mut self, key: &str, value: &str, base_dir: Option<&Path>) -> Result<()> {
        const INT: &str = "a non-negative integer";
        const REAL: &str = "a number";
        let path = |v: &str| {
            let p = PathBuf::from(v);
            match base_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p,
            }
        };
        match key {
            "d_model" => self.d_model = parse_value(key, value, INT)?,
            "vocab_size" => self.vocab_size = parse_value(key, value, INT)?,
            "disc_layers" => self.disc_layers = parse_value(key, value, INT)?,
            "disc_heads" => self.disc_heads = parse_value(key, value, INT)?,
            "disc_mlp" => self.disc_mlp = parse_value(key, value, INT)?,
            "gen_layers" => self.gen_layers = parse_value(key, value, INT)?,
            "gen_mlp" => self.gen_mlp = parse_value(key, value, INT)?,
            "rtd_mlp" => self.rtd_mlp = parse_value(key, value, INT)?,
            "input_len" => self.input_len = parse_value(key, value, INT)?,
            "batch_size" => self.batch_size = parse_value(key, value, INT)?,
            "r_sc" => self.r_sc = parse_value(key, value, REAL)?,
            "mu" => self.mu = parse_value(key, value, REAL)?,
            "r_mlm" => self.r_mlm = parse_value(key, value, REAL)?,
            "lambda1" => self.lambda1 = parse_value(key, value, REAL)?,
            "lambda2" => self.lambda2 = parse_value(key, value, REAL)?,
            "tau" => self.tau = parse_value(key, value, "a step count or `inf`")?,
            "total_steps" => self.total_steps = parse_value(key, value, INT)?,
            "kappa" => self.kappa = parse_value(key, value, INT)?,
            "seed" => self.seed = parse_value(key, value, INT)?,
            "loss_reduction" => self.loss_reduction = parse_value(key, value, "`mean` or `sum`")?,
            "optimizer" => self.optimizer = parse_value(key, value, "`adafactor` or `sgd`")?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value, INT)?,
            "corpus" => self.corpus = Some(path(value)),
            "val_corpus" => self.val_corpus = Some(path(value)),
            _ => return Err(config_err(key, format!("unknown key; allowed keys: {}", KEYS.join(", ")))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let range = |ok: bool, key: &str, allowed: &str, value: &dyn fmt::Display| {
            if ok {
                Ok(())
            } else {
                Err(config_err(key, format!("{value} outside allowed range {allowed}")))
            }
        };
        range(self.r_sc > 0.0 && self.r_sc < 1.0, "r_sc", "(0, 1)", &self.r_sc)?;
        range(self.mu >= 1.0 && self.mu.is_finite(), "mu", "[1, inf)", &self.mu)?;
        range((0.0..1.0).contains(&self.r_mlm), "r_mlm", "[0, 1)", &self.r_mlm)?;
        range(self.lambda1 >= 0.0 && self.lambda1.is_finite(), "lambda1", "[0, inf)", &self.lambda1)?;
        range(self.lambda2 >= 0.0 && self.lambda2.is_finite(), "lambda2", "[0, inf)", &self.lambda2)?;
        range(self.tau.0.is_none_or(|t| t <= self.total_steps), "tau", "[0, total_steps] or inf", &self.tau)?;
        range(self.kappa >= 1, "kappa", "[1, inf)", &self.kappa)?;
        range(self.input_len >= 8, "input_len", "[8, inf)", &self.input_len)?;
        range(self.batch_size >= 1, "batch_size", "[1, inf)", &self.batch_size)?;
        range(self.d_model >= 1, "d_model", "[1, inf)", &self.d_model)?;
        range(self.disc_layers >= 1, "disc_layers", "[1, inf)", &self.disc_layers)?;
        range(self.disc_heads >= 1, "disc_heads", "[1, inf)", &self.disc_heads)?;
        range(self.disc_mlp >= 1, "disc_mlp", "[1, inf)", &self.disc_mlp)?;
        range(self.rtd_mlp >= 1, "rtd_mlp", "[1, inf)", &self.rtd_mlp)?;
        range(
            self.d_model % self.disc_heads == 0,
            "disc_heads",
            "divisors of d_model",
            &self.disc_heads,
        )?;
        let reserved = 4 + self.corruption().sentinel_budget(self.input_len);
        range(self.vocab_size > reserved, "vocab_size", &format!("({reserved}, inf)"), &self.vocab_size)?;
        self.model_config().validate().map_err(|e| config_err("gen_layers", e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            vocab_size: self.vocab_size,
            disc_layers: self.disc_layers,
            disc_heads: self.disc_heads,
            disc_mlp: self.disc_mlp,
            gen_layers: self.gen_layers,
            gen_mlp: self.gen_mlp,
            rtd_mlp: self.rtd_mlp,
            max_len: self.input_len + 1,
        }
    }

    pub fn corruption(&self) -> CorruptionConfig {
        CorruptionConfig { r_sc: self.r_sc, mu: self.mu, r_mlm: self.r_mlm }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, reduction: self.loss_reduction }
    }

    /// Canonical text with every key in a fixed order; parsing it back gives
    /// the same configuration.
    pub fn to_file_string(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let reduction = match self.loss_reduction {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        };
        let optimizer = match self.optimizer {
            OptimizerKind::Adafactor => "adafactor",
            OptimizerKind::Sgd => "sgd",
        };
        let mut lines = vec![
            format!("d_model = {}", self.d_model),
            format!("vocab_size = {}", self.vocab_size),
            format!("disc_layers = {}", self.disc_layers),
            format!("disc_heads = {}", self.disc_heads),
            format!("disc_mlp = {}", self.disc_mlp),
            format!("gen_layers = {}", self.gen_layers),
            format!("gen_mlp = {}", self.gen_mlp),
            format!("rtd_mlp = {}", self.rtd_mlp),
            format!("input_len = {}", self.input_len),
            format!("batch_size = {}", self.batch_size),
            format!("r_sc = {:?}", self.r_sc),
            format!("mu = {:?}", self.mu),
            format!("r_mlm = {:?}", self.r_mlm),
            format!("lambda1 = {:?}", self.lambda1),
            format!("lambda2 = {:?}", self.lambda2),
            format!("tau = {}", self.tau),
            format!("total_steps = {}", self.total_steps),
            format!("kappa = {}", self.kappa),
            format!("seed = {}", self.seed),
            format!("loss_reduction = {reduction}"),
            format!("optimizer = {optimizer}"),
            format!("checkpoint_every = {}", self.checkpoint_every),
        ];
        if let Some(p) = path(&self.corpus) {
            lines.push(format!("corpus = {p}"));
        }
        if let Some(p) = path(&self.val_corpus) {
            lines.push(format!("val_corpus = {p}"));
        }
        lines.join("\n") + "\n"
    }

    /// Hex SHA-256 of the settings that shape training. The step budget,
    /// checkpoint cadence and validation corpus are left out so a finished
    /// run can be extended or evaluated without invalidating its checkpoints.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.total_steps = 0;
        canonical.checkpoint_every = 0;
        canonical.val_corpus = None;
        hex::encode(Sha256::digest(canonical.to_file_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_defaults() {
        let text = "mu=3.0\nr_sc=0.15\nr_mlm=0.15\nlambda1=10\nlambda2=10\n";
        let cfg = Config::parse_str(text, None).unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!((cfg.d_model, cfg.disc_layers, cfg.disc_heads, cfg.disc_mlp), (768, 12, 12, 3072));
        assert_eq!((cfg.gen_layers, cfg.gen_mlp), (4, 1024));
        assert_eq!((cfg.input_len, cfg.batch_size, cfg.kappa), (512, 2048, 10_000));
        assert_eq!(cfg.loss_weights(), LossWeights::default());
    }

    #[test]
    fn range_errors_name_the_key() {
        for (text, key) in [
            ("r_sc = 1.5", "r_sc"),
            ("r_sc = 0", "r_sc"),
            ("mu = 0.5", "mu"),
            ("lambda1 = -1", "lambda1"),
            ("lambda2 = -0.1", "lambda2"),
            ("tau = 600000", "tau"),
            ("r_mlm = 1", "r_mlm"),
            ("kappa = 0", "kappa"),
            ("disc_heads = 7", "disc_heads"),
            ("gen_layers = 12\ngen_mlp = 3072", "gen_layers"),
            ("bogus = 1", "bogus"),
            ("d_model = big", "d_model"),
            ("seed = 1\nseed = 2", "seed"),
        ] {
            match Config::parse_str(text, None) {
                Err(Error::Config { key: k, message }) => {
                    assert_eq!(k, key, "{text}: {message}");
                    assert!(!message.is_empty());
                }
                other => panic!("{text}: expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn tau_infinite() {
        let cfg = Config::parse_str("tau = inf", None).unwrap();
        assert_eq!(cfg.tau, Tau::INFINITE);
        assert!(cfg.tau.is_hybrid(u64::MAX));
        let t = Tau(Some(100));
        assert!(t.is_hybrid(99) && !t.is_hybrid(100));
        assert!(!Tau(Some(0)).is_hybrid(0));
    }

    #[test]
    fn comments_paths_and_round_trip() {
        let dir = Path::new("/data/run");
        let text = "# tiny\nd_model = 16 # width\ndisc_heads = 2\ndisc_mlp = 32\ngen_mlp = 16\nrtd_mlp = 16\n\
                    vocab_size = 200\ninput_len = 32\nbatch_size = 4\ncorpus = train.txt\nloss_reduction = sum\n";
        let cfg = Config::parse_str(text, Some(dir)).unwrap();
        assert_eq!(cfg.corpus.as_deref(), Some(Path::new("/data/run/train.txt")));
        assert_eq!(cfg.loss_reduction, Reduction::Sum);
        let again = Config::parse_str(&cfg.to_file_string(), None).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn hash_tracks_training_settings() {
        let a = Config::default();
        let mut b = a.clone();
        b.total_steps = 600_000;
        b.checkpoint_every = 10;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
