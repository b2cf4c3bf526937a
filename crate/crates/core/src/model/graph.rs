use std::rc::Rc;

use ndarray::Array2;

use super::params::{AttnIdx, DecLayerIdx, EncLayerIdx, ModelParams};
use crate::autodiff::{AttentionLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tokenizer::{TokenId, PAD_ID};

/// `[len, d]` sinusoidal position table.
pub fn sinusoidal_positions<F: Scalar>(len: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        c(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// A tape bound to one parameter snapshot; parameters are registered on
/// first use so unused components never enter the graph.
pub struct Graph<'p, F: Scalar> {
    pub tape: Tape<F>,
    params: &'p ModelParams<F>,
    vars: Vec<Option<Var>>,
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ModelParams<F>) -> Self {
        Graph { tape: Tape::new(), params, vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ModelParams<F> {
        self.params
    }

    fn p(&mut self, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let v = self.tape.param(idx, &self.params.values[idx]);
        self.vars[idx] = Some(v);
        v
    }

    /// `sqrt(d) * E[tokens] + PE`, flattened to `[b*n, d]`.
    fn embed(&mut self, tokens: &Array2<TokenId>) -> Var {
        let (b, n) = tokens.dim();
        let d = self.params.config.d_model;
        let table = self.p(self.params.layout.embedder);
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = self.tape.gather(table, ids);
        let x = self.tape.scale(x, c((d as f64).sqrt()));
        let pe = sinusoidal_positions::<F>(n, d);
        let mut full = Array2::zeros((b * n, d));
        for r in 0..b {
            full.slice_mut(ndarray::s![r * n..(r + 1) * n, ..]).assign(&pe);
        }
        let pe = self.tape.constant(full);
        self.tape.add(x, pe)
    }

    fn attention_block(&mut self, idx: &AttnIdx, xq: Var, xkv: Var, layout: Rc<AttentionLayout>) -> Var {
        let (wq, wk, wv, wo) = (self.p(idx.wq), self.p(idx.wk), self.p(idx.wv), self.p(idx.wo));
        let q = self.tape.matmul(xq, wq);
        let k = self.tape.matmul(xkv, wk);
        let v = self.tape.matmul(xkv, wv);
        let a = self.tape.attention(q, k, v, layout);
        self.tape.matmul(a, wo)
    }

    fn mlp(&mut self, x: Var, wi: usize, wo: usize) -> Var {
        let (wi, wo) = (self.p(wi), self.p(wo));
        let h = self.tape.matmul(x, wi);
        let h = self.tape.gelu(h);
        self.tape.matmul(h, wo)
    }

    fn norm(&mut self, x: Var, gain: usize) -> Var {
        let g = self.p(gain);
        self.tape.rms_norm(x, g)
    }

    fn encoder_layer(&mut self, l: &EncLayerIdx, x: Var, layout: &Rc<AttentionLayout>) -> Var {
        let h = self.norm(x, l.ln1);
        let a = self.attention_block(&l.attn, h, h, layout.clone());
        let x = self.tape.add(x, a);
        let h = self.norm(x, l.ln2);
        let m = self.mlp(h, l.wi, l.wo);
        self.tape.add(x, m)
    }

    fn decoder_layer(
        &mut self,
        l: &DecLayerIdx,
        y: Var,
        enc: Var,
        self_layout: &Rc<AttentionLayout>,
        cross_layout: &Rc<AttentionLayout>,
    ) -> Var {
        let h = self.norm(y, l.ln1);
        let a = self.attention_block(&l.self_attn, h, h, self_layout.clone());
        let y = self.tape.add(y, a);
        let h = self.norm(y, l.ln2);
        let a = self.attention_block(&l.cross, h, enc, cross_layout.clone());
        let y = self.tape.add(y, a);
        let h = self.norm(y, l.ln3);
        let m = self.mlp(h, l.wi, l.wo);
        self.tape.add(y, m)
    }

    fn self_layout(&self, tokens: &Array2<TokenId>) -> Rc<AttentionLayout> {
        let (b, n) = tokens.dim();
        Rc::new(AttentionLayout {
            batch: b,
            q_len: n,
            k_len: n,
            heads: self.params.config.disc_heads,
            key_valid: tokens.iter().map(|&t| t != PAD_ID).collect(),
            causal: false,
        })
    }

    fn encoder_stack(&mut self, tokens: &Array2<TokenId>, layers: &[EncLayerIdx], final_ln: usize) -> Var {
        let layout = self.self_layout(tokens);
        let mut x = self.embed(tokens);
        for l in layers {
            x = self.encoder_layer(l, x, &layout);
        }
        self.norm(x, final_ln)
    }

    /// Generator logits `[b*n, v]`.
    pub fn generator_logits(&mut self, masked_text: &Array2<TokenId>) -> Result<Var> {
        let gen = self.params.layout.generator.as_ref().ok_or(Error::MissingGenerator)?;
        let h = self.encoder_stack(masked_text, &gen.layers, gen.final_ln);
        let proj = self.p(gen.proj);
        Ok(self.tape.matmul_t(h, proj))
    }

    /// Discriminator encoder output `[b*n, d]`.
    pub fn disc_encode(&mut self, tokens: &Array2<TokenId>) -> Var {
        let layout = &self.params.layout;
        self.encoder_stack(tokens, &layout.enc_layers, layout.enc_final_ln)
    }

    /// RTD logits `[b*n, 1]`; `sigmoid` of these is the probability that a
    /// position is unreplaced.
    pub fn rtd_logits(&mut self, h: Var) -> Result<Var> {
        let rtd = self
            .params
            .layout
            .rtd
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("model has no RTD head".into()))?;
        let (w1, b1, w2, b2) = (self.p(rtd.w1), self.p(rtd.b1), self.p(rtd.w2), self.p(rtd.b2));
        let z = self.tape.matmul(h, w1);
        let z = self.tape.add_row(z, b1);
        let z = self.tape.gelu(z);
        let z = self.tape.matmul(z, w2);
        Ok(self.tape.add_row(z, b2))
    }

    /// Teacher-forced decoder logits `[b*t, v]` against encoder states `enc`
    /// (`[b*n, d]`, pads of `enc_tokens` masked). Decoder input is `target`
    /// shifted right with `PAD_ID` as the start token.
    pub fn decoder_logits(&mut self, enc: Var, enc_tokens: &Array2<TokenId>, target: &Array2<TokenId>) -> Var {
        let (b, t) = target.dim();
        let n = enc_tokens.ncols();
        let cfg = &self.params.config;
        let mut input = Array2::from_elem((b, t), PAD_ID);
        for r in 0..b {
            for i in 1..t {
                input[[r, i]] = target[[r, i - 1]];
            }
        }
        let self_layout = Rc::new(AttentionLayout {
            batch: b,
            q_len: t,
            k_len: t,
            heads: cfg.disc_heads,
            key_valid: vec![true; b * t],
            causal: true,
        });
        let cross_layout = Rc::new(AttentionLayout {
            batch: b,
            q_len: t,
            k_len: n,
            heads: cfg.disc_heads,
            key_valid: enc_tokens.iter().map(|&tok| tok != PAD_ID).collect(),
            causal: false,
        });
        let scale = c(1.0 / (cfg.d_model as f64).sqrt());
        let layout = &self.params.layout;
        let mut y = self.embed(&input);
        for l in &layout.dec_layers {
            y = self.decoder_layer(l, y, enc, &self_layout, &cross_layout);
        }
        let y = self.norm(y, layout.dec_final_ln);
        let y = self.tape.scale(y, scale);
        let table = self.p(layout.embedder);
        self.tape.matmul_t(y, table)
    }

    /// Gradients for every parameter index (zero where none flowed).
    pub fn param_grads(&self, loss: Var) -> Vec<Array2<F>> {
        self.tape.backward(loss).param_grads(&self.params.shapes())
    }
}
