use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scalar::{c, Scalar};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub vocab_size: usize,
    pub disc_layers: usize,
    pub disc_heads: usize,
    pub disc_mlp: usize,
    pub gen_layers: usize,
    pub gen_mlp: usize,
    pub rtd_mlp: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Base-size discriminator with its generator and RTD head.
    pub fn base(vocab_size: usize, max_len: usize) -> Self {
        ModelConfig {
            d_model: 768,
            vocab_size,
            disc_layers: 12,
            disc_heads: 12,
            disc_mlp: 3072,
            gen_layers: 4,
            gen_mlp: 1024,
            rtd_mlp: 3072,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModelConfig(m));
        if self.d_model == 0 || self.vocab_size == 0 || self.disc_heads == 0 || self.max_len == 0 {
            return bad("d_model, vocab_size, disc_heads and max_len must be positive".into());
        }
        if self.d_model % self.disc_heads != 0 {
            return bad(format!("d_model {} not divisible by disc_heads {}", self.d_model, self.disc_heads));
        }
        if self.disc_layers == 0 || self.disc_mlp == 0 {
            return bad("discriminator needs at least one layer and a non-empty MLP".into());
        }
        let smaller = self.gen_layers <= self.disc_layers
            && self.gen_mlp <= self.disc_mlp
            && (self.gen_layers < self.disc_layers || self.gen_mlp < self.disc_mlp);
        if !smaller {
            return bad(format!(
                "generator ({} layers, mlp {}) must be strictly smaller than the discriminator encoder ({} layers, mlp {})",
                self.gen_layers, self.gen_mlp, self.disc_layers, self.disc_mlp
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.disc_heads
    }

    pub fn encoder_layer_params(&self, mlp: usize) -> usize {
        let d = self.d_model;
        4 * d * d + 2 * d * mlp + 2 * d
    }

    pub fn decoder_layer_params(&self) -> usize {
        let d = self.d_model;
        8 * d * d + 2 * d * self.disc_mlp + 3 * d
    }

    pub fn generator_params(&self) -> usize {
        self.gen_layers * self.encoder_layer_params(self.gen_mlp) + self.d_model + self.vocab_size * self.d_model
    }

    pub fn rtd_head_params(&self) -> usize {
        self.d_model * self.rtd_mlp + 2 * self.rtd_mlp + 1
    }

    /// Closed-form parameter count for a model with generator and RTD head.
    pub fn param_count_formula(&self) -> usize {
        let d = self.d_model;
        let embedder = self.vocab_size * d;
        let encoder = self.disc_layers * self.encoder_layer_params(self.disc_mlp) + d;
        let decoder = self.disc_layers * self.decoder_layer_params() + d;
        embedder + self.generator_params() + encoder + decoder + self.rtd_head_params()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedder,
    Generator,
    DiscEncoder,
    DiscDecoder,
    RtdHead,
}

impl ParamGroup {
    /// Parameters kept trainable after the stage transition.
    pub fn retained(self) -> bool {
        matches!(self, ParamGroup::Embedder | ParamGroup::DiscEncoder | ParamGroup::DiscDecoder)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InitKind {
    Ones,
    Zeros,
    Normal { fan_in: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    pub shape: (usize, usize),
    init: InitKind,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayerIdx {
    pub ln1: usize,
    pub attn: AttnIdx,
    pub ln2: usize,
    pub wi: usize,
    pub wo: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayerIdx {
    pub ln1: usize,
    pub self_attn: AttnIdx,
    pub ln2: usize,
    pub cross: AttnIdx,
    pub ln3: usize,
    pub wi: usize,
    pub wo: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct GenIdx {
    pub layers: Vec<EncLayerIdx>,
    pub final_ln: usize,
    pub proj: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct RtdIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embedder: usize,
    pub generator: Option<GenIdx>,
    pub enc_layers: Vec<EncLayerIdx>,
    pub enc_final_ln: usize,
    pub dec_layers: Vec<DecLayerIdx>,
    pub dec_final_ln: usize,
    pub rtd: Option<RtdIdx>,
}

struct Builder {
    infos: Vec<ParamInfo>,
    d: usize,
}

impl Builder {
    fn add(&mut self, name: String, group: ParamGroup, shape: (usize, usize), init: InitKind) -> usize {
        self.infos.push(ParamInfo { name, group, shape, init });
        self.infos.len() - 1
    }

    fn norm(&mut self, name: String, group: ParamGroup) -> usize {
        let d = self.d;
        self.add(name, group, (1, d), InitKind::Ones)
    }

    fn mat(&mut self, name: String, group: ParamGroup, rows: usize, cols: usize, fan_in: usize) -> usize {
        self.add(name, group, (rows, cols), InitKind::Normal { fan_in })
    }

    fn attn(&mut self, prefix: &str, group: ParamGroup) -> AttnIdx {
        let d = self.d;
        AttnIdx {
            wq: self.mat(format!("{prefix}.wq"), group, d, d, d),
            wk: self.mat(format!("{prefix}.wk"), group, d, d, d),
            wv: self.mat(format!("{prefix}.wv"), group, d, d, d),
            wo: self.mat(format!("{prefix}.wo"), group, d, d, d),
        }
    }

    fn enc_layer(&mut self, prefix: &str, group: ParamGroup, mlp: usize) -> EncLayerIdx {
        let d = self.d;
        EncLayerIdx {
            ln1: self.norm(format!("{prefix}.ln1"), group),
            attn: self.attn(&format!("{prefix}.attn"), group),
            ln2: self.norm(format!("{prefix}.ln2"), group),
            wi: self.mat(format!("{prefix}.mlp.wi"), group, d, mlp, d),
            wo: self.mat(format!("{prefix}.mlp.wo"), group, mlp, d, mlp),
        }
    }

    fn dec_layer(&mut self, prefix: &str, mlp: usize) -> DecLayerIdx {
        let d = self.d;
        let g = ParamGroup::DiscDecoder;
        DecLayerIdx {
            ln1: self.norm(format!("{prefix}.ln1"), g),
            self_attn: self.attn(&format!("{prefix}.self"), g),
            ln2: self.norm(format!("{prefix}.ln2"), g),
            cross: self.attn(&format!("{prefix}.cross"), g),
            ln3: self.norm(format!("{prefix}.ln3"), g),
            wi: self.mat(format!("{prefix}.mlp.wi"), g, d, mlp, d),
            wo: self.mat(format!("{prefix}.mlp.wo"), g, mlp, d, mlp),
        }
    }
}

fn build_layout(cfg: &ModelConfig, with_generator: bool, with_rtd: bool) -> (Vec<ParamInfo>, Layout) {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let mut b = Builder { infos: Vec::new(), d };
    let embedder = b.mat("embedder".into(), ParamGroup::Embedder, v, d, d);
    let generator = with_generator.then(|| {
        let layers = (0..cfg.gen_layers)
            .map(|i| b.enc_layer(&format!("gen.layer{i}"), ParamGroup::Generator, cfg.gen_mlp))
            .collect();
        let final_ln = b.norm("gen.final_ln".into(), ParamGroup::Generator);
        let proj = b.mat("gen.proj".into(), ParamGroup::Generator, v, d, d);
        GenIdx { layers, final_ln, proj }
    });
    let enc_layers = (0..cfg.disc_layers)
        .map(|i| b.enc_layer(&format!("enc.layer{i}"), ParamGroup::DiscEncoder, cfg.disc_mlp))
        .collect();
    let enc_final_ln = b.norm("enc.final_ln".into(), ParamGroup::DiscEncoder);
    let dec_layers = (0..cfg.disc_layers).map(|i| b.dec_layer(&format!("dec.layer{i}"), cfg.disc_mlp)).collect();
    let dec_final_ln = b.norm("dec.final_ln".into(), ParamGroup::DiscDecoder);
    let rtd = with_rtd.then(|| {
        let r = cfg.rtd_mlp;
        let g = ParamGroup::RtdHead;
        RtdIdx {
            w1: b.mat("rtd.w1".into(), g, d, r, d),
            b1: b.add("rtd.b1".into(), g, (1, r), InitKind::Zeros),
            w2: b.mat("rtd.w2".into(), g, r, 1, r),
            b2: b.add("rtd.b2".into(), g, (1, 1), InitKind::Zeros),
        }
    });
    let layout = Layout { embedder, generator, enc_layers, enc_final_ln, dec_layers, dec_final_ln, rtd };
    (b.infos, layout)
}

/// Flat, named parameter store plus the index layout the forward passes use.
#[derive(Clone, Debug)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub(crate) layout: Layout,
    infos: Vec<ParamInfo>,
    pub values: Vec<Array2<F>>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.infos.iter().map(|i| i.shape).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.infos.iter().position(|i| i.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn has_generator(&self) -> bool {
        self.layout.generator.is_some()
    }

    pub fn has_rtd_head(&self) -> bool {
        self.layout.rtd.is_some()
    }

    /// Indices of all parameters in `group`.
    pub fn group_indices(&self, group: ParamGroup) -> Vec<usize> {
        self.infos.iter().enumerate().filter(|(_, i)| i.group == group).map(|(k, _)| k).collect()
    }

    /// Zero-valued store with the given components.
    pub fn zeros(config: &ModelConfig, with_generator: bool, with_rtd: bool) -> Self {
        let (infos, layout) = build_layout(config, with_generator, with_rtd);
        let values = infos.iter().map(|i| Array2::zeros(i.shape)).collect();
        ModelParams { config: config.clone(), layout, infos, values }
    }

    /// Copy of the embedder, encoder and decoder only (no generator, no RTD head).
    pub fn without_generator(&self) -> Self {
        let mut out = Self::zeros(&self.config, false, false);
        for (i, info) in out.infos.clone().iter().enumerate() {
            out.values[i] = self.get(&info.name).expect("retained parameter").clone();
        }
        out
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            infos: self.infos.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| G::from_f64_lossy(x.to_f64_lossy()))).collect(),
        }
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Deterministic init: truncated normal (std `1/sqrt(fan_in)`, cut at 2 std)
/// for matrices, ones for norm gains, zeros for biases.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, Stream::Init);
    let mut params = ModelParams::<F>::zeros(cfg, true, true);
    for (info, value) in params.infos.iter().zip(params.values.iter_mut()) {
        match info.init {
            InitKind::Ones => value.fill(F::one()),
            InitKind::Zeros => {}
            InitKind::Normal { fan_in } => {
                let std = 1.0 / (fan_in as f64).sqrt();
                value.mapv_inplace(|_| c(truncated_normal(&mut rng) * std));
            }
        }
    }
    Ok(params)
}
