//! Analytic training FLOPs.
//!
//! Every weight matrix costs `6 * rows * cols` FLOPs per token it is applied
//! to (2 forward, 4 backward). Attention adds `12 * q_len * k_len * d` per
//! layer for the score and value products. Embedding lookups, norms,
//! activations and softmax are not counted.
//!
//! Sequence lengths follow the corruption budget: the encoder (and the
//! generator) see `n = N - B + p` tokens and the decoder sees `B + p + 1`.
//! The decoder's cross-attention key/value projections run over the `n`
//! encoder outputs. The generator projection is applied at every position.

use serde::{Deserialize, Serialize};

use crate::config::Stage;
use crate::corruption::CorruptionConfig;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsInput<'a> {
    pub model: &'a ModelConfig,
    pub corruption: &'a CorruptionConfig,
    pub input_len: usize,
    pub batch_size: usize,
}

/// Training steps that normalized compute is measured against.
pub const REFERENCE_STEPS: u64 = 500_000;

fn attention(q: f64, k: f64, d: f64) -> f64 {
    12.0 * q * k * d
}

/// FLOPs per example for the encoder-decoder alone.
fn discriminator_flops(m: &ModelConfig, n: f64, t: f64) -> f64 {
    let (d, mlp, v, layers) = (m.d_model as f64, m.disc_mlp as f64, m.vocab_size as f64, m.disc_layers as f64);
    let enc_weights = layers * (4.0 * d * d + 2.0 * d * mlp) * n;
    let dec_weights = layers * ((6.0 * d * d + 2.0 * d * mlp) * t + 2.0 * d * d * n) + v * d * t;
    let attn = layers * (attention(n, n, d) + attention(t, t, d) + attention(t, n, d));
    6.0 * (enc_weights + dec_weights) + attn
}

/// FLOPs per example for the generator and RTD head.
fn auxiliary_flops(m: &ModelConfig, n: f64) -> f64 {
    let (d, v, layers, r) = (m.d_model as f64, m.vocab_size as f64, m.gen_layers as f64, m.rtd_mlp as f64);
    let weights = layers * (4.0 * d * d + 2.0 * d * m.gen_mlp as f64) * n + v * d * n + (d * r + r) * n;
    6.0 * weights + layers * attention(n, n, d)
}

/// Training GFLOPs for one optimizer step in `stage`.
pub fn flops_per_step(input: &FlopsInput<'_>, stage: Stage) -> f64 {
    let (b, p) = input.corruption.budget(input.input_len);
    let n = (input.input_len - b + p) as f64;
    let t = (b + p + 1) as f64;
    let mut per_example = discriminator_flops(input.model, n, t);
    if stage == Stage::Hybrid && input.model.gen_layers + input.model.rtd_mlp > 0 {
        per_example += auxiliary_flops(input.model, n);
    }
    per_example * input.batch_size as f64 / 1e9
}

/// `(tau * ratio + (total - tau)) / REFERENCE_STEPS`; `tau = None` means the
/// hybrid objective runs for all `total_steps`.
pub fn normalized_cumulative_flops(tau: Option<u64>, total_steps: u64, ratio: f64) -> f64 {
    let tau = tau.unwrap_or(total_steps).min(total_steps) as f64;
    (tau * ratio + (total_steps as f64 - tau)) / REFERENCE_STEPS as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub baseline_gflops_per_step: f64,
    pub hybrid_gflops_per_step: f64,
    pub ratio: f64,
    /// `(tau, total_steps, normalized FLOPs)`
    pub cumulative: Vec<(Option<u64>, u64, f64)>,
}

impl FlopsReport {
    pub fn new(input: &FlopsInput<'_>, schedules: &[(Option<u64>, u64)]) -> Self {
        let baseline = flops_per_step(input, Stage::ScOnly);
        let hybrid = flops_per_step(input, Stage::Hybrid);
        let ratio = hybrid / baseline;
        let cumulative = schedules
            .iter()
            .map(|&(tau, total)| (tau, total, normalized_cumulative_flops(tau, total, ratio)))
            .collect();
        FlopsReport { baseline_gflops_per_step: baseline, hybrid_gflops_per_step: hybrid, ratio, cumulative }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,total_steps,baseline_gflops_per_step,hybrid_gflops_per_step,ratio,normalized_flops\n");
        for (tau, total, norm) in &self.cumulative {
            let tau = tau.map_or("inf".to_string(), |t| t.to_string());
            out += &format!(
                "{tau},{total},{:.6e},{:.6e},{:.6},{:.6}\n",
                self.baseline_gflops_per_step, self.hybrid_gflops_per_step, self.ratio, norm
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> (ModelConfig, CorruptionConfig) {
        (ModelConfig::base(32000, 513), CorruptionConfig::default())
    }

    #[test]
    fn degenerate_generator_has_unit_ratio() {
        let (mut m, c) = base();
        m.gen_layers = 0;
        m.rtd_mlp = 0;
        let input = FlopsInput { model: &m, corruption: &c, input_len: 512, batch_size: 8 };
        let hybrid = flops_per_step(&input, Stage::Hybrid);
        let baseline = flops_per_step(&input, Stage::ScOnly);
        assert_eq!(hybrid, baseline);
    }

    #[test]
    fn linear_in_batch() {
        let (m, c) = base();
        let one = flops_per_step(&FlopsInput { model: &m, corruption: &c, input_len: 512, batch_size: 1024 }, Stage::Hybrid);
        let two = flops_per_step(&FlopsInput { model: &m, corruption: &c, input_len: 512, batch_size: 2048 }, Stage::Hybrid);
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn hand_count_small_model() {
        // d=2, one layer, mlp 4, v=10, N=8: B=1, p=1, n=8, t=3
        let m = ModelConfig {
            d_model: 2,
            vocab_size: 10,
            disc_layers: 1,
            disc_heads: 1,
            disc_mlp: 4,
            gen_layers: 0,
            gen_mlp: 0,
            rtd_mlp: 0,
            max_len: 9,
        };
        let c = CorruptionConfig::default();
        let input = FlopsInput { model: &m, corruption: &c, input_len: 8, batch_size: 1 };
        // encoder: (16 + 16) * 8 = 256; decoder: (24 + 16) * 3 + 8 * 8 + 20 * 3 = 244
        // attention: 12 * 2 * (64 + 9 + 24) = 2328
        let expected = 6.0 * (256.0 + 244.0) + 2328.0;
        assert!((flops_per_step(&input, Stage::ScOnly) * 1e9 - expected).abs() < 1e-6);
    }

    #[test]
    fn cumulative_table() {
        assert!((normalized_cumulative_flops(Some(250_000), 500_000, 1.375) - 1.1875).abs() < 1e-12);
        assert!((normalized_cumulative_flops(Some(120_000), 500_000, 1.375) - 1.09).abs() < 1e-12);
        assert!((normalized_cumulative_flops(Some(60_000), 500_000, 1.375) - 1.045).abs() < 1e-12);
        assert_eq!(normalized_cumulative_flops(Some(0), 500_000, 1.375), 1.0);
        assert_eq!(normalized_cumulative_flops(Some(0), 1_000_000, 1.375), 2.0);
        assert_eq!(normalized_cumulative_flops(None, 500_000, 1.375), 1.375);
        let mut last = 0.0;
        for tau in (0..=500_000).step_by(50_000) {
            let x = normalized_cumulative_flops(Some(tau), 500_000, 1.3);
            assert!(x > last);
            last = x;
        }
    }
}
