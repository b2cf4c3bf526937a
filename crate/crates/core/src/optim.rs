//! Adafactor with factored second moments and no first moment, plus plain
//! SGD for gradient tests.
//!
//! Accumulators are keyed by parameter name so that dropping parameters at
//! the stage transition leaves the rest untouched.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::{c, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adafactor,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adafactor" => Ok(OptimizerKind::Adafactor),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(format!("expected `adafactor` or `sgd`, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdafactorConfig {
    /// Added to squared gradients.
    pub eps1: f64,
    /// Floor on the parameter scale used for relative steps.
    pub eps2: f64,
    /// Updates are rescaled so their RMS does not exceed this.
    pub clip_threshold: f64,
    /// `beta2_t = 1 - t^(-decay_rate)`.
    pub decay_rate: f64,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        AdafactorConfig { eps1: 1e-30, eps2: 1e-3, clip_threshold: 1.0, decay_rate: 0.8 }
    }
}

/// Second-moment state of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum Slot<F> {
    /// Row and column running means of `g^2` for matrices.
    Factored { row: Array1<F>, col: Array1<F> },
    /// Full running mean of `g^2` for vectors.
    Full(Array2<F>),
}

impl<F: Scalar> Slot<F> {
    fn new(shape: (usize, usize)) -> Self {
        if shape.0 >= 2 && shape.1 >= 2 {
            Slot::Factored { row: Array1::zeros(shape.0), col: Array1::zeros(shape.1) }
        } else {
            Slot::Full(Array2::zeros(shape))
        }
    }

    /// Tensors for serialization: `[rows, 1]` and `[1, cols]`, or the full matrix.
    pub fn tensors(&self) -> Vec<Array2<F>> {
        match self {
            Slot::Factored { row, col } => vec![
                row.clone().insert_axis(Axis(1)),
                col.clone().insert_axis(Axis(0)),
            ],
            Slot::Full(v) => vec![v.clone()],
        }
    }

    pub fn from_tensors(shape: (usize, usize), mut t: Vec<Array2<F>>) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("optimizer slot does not match parameter shape {shape:?}"));
        match Slot::<F>::new(shape) {
            Slot::Factored { .. } => {
                if t.len() != 2 || t[0].dim() != (shape.0, 1) || t[1].dim() != (1, shape.1) {
                    return Err(bad());
                }
                let col = t.pop().ok_or_else(bad)?.remove_axis(Axis(0));
                let row = t.pop().ok_or_else(bad)?.remove_axis(Axis(1));
                Ok(Slot::Factored { row, col })
            }
            Slot::Full(_) => {
                if t.len() != 1 || t[0].dim() != shape {
                    return Err(bad());
                }
                Ok(Slot::Full(t.pop().ok_or_else(bad)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<F> {
    pub kind: OptimizerKind,
    pub config: AdafactorConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub slots: BTreeMap<String, Slot<F>>,
}

fn rms<F: Scalar>(a: &Array2<F>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    (a.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, config: AdafactorConfig::default(), t: 0, slots: BTreeMap::new() }
    }

    /// Forgets the accumulators of every parameter not named in `keep`.
    pub fn retain<'a>(&mut self, keep: impl IntoIterator<Item = &'a str>) {
        let keep: std::collections::HashSet<&str> = keep.into_iter().collect();
        self.slots.retain(|name, _| keep.contains(name.as_str()));
    }

    /// Applies one update with learning rate `lr` to the parameters whose
    /// indices are listed in `trainable`; others are left bit-identical.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &[Array2<F>], trainable: &[usize], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.t += 1;
        let beta2 = 1.0 - (self.t as f64).powf(-self.config.decay_rate);
        for &idx in trainable {
            let info = &params.infos()[idx];
            let grad = &grads[idx];
            if grad.dim() != info.shape {
                return Err(Error::ShapeMismatch(format!("gradient for {} has shape {:?}", info.name, grad.dim())));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let value = &mut params.values[idx];
                    value.scaled_add(c::<F>(-lr), grad);
                }
                OptimizerKind::Adafactor => {
                    let name = info.name.clone();
                    let shape = info.shape;
                    let slot = self.slots.entry(name).or_insert_with(|| Slot::new(shape));
                    let update = adafactor_direction(slot, grad, beta2, &self.config);
                    let value = &mut params.values[idx];
                    let scale = lr * rms(value).max(self.config.eps2);
                    value.scaled_add(c::<F>(-scale), &update);
                }
            }
        }
        Ok(())
    }
}

/// Updates the slot and returns the clipped, unscaled update direction.
fn adafactor_direction<F: Scalar>(slot: &mut Slot<F>, grad: &Array2<F>, beta2: f64, cfg: &AdafactorConfig) -> Array2<F> {
    let b2: F = c(beta2);
    let one_minus: F = c(1.0 - beta2);
    let eps1: F = c(cfg.eps1);
    let sq = grad.mapv(|g| g * g + eps1);
    let mut u = match slot {
        Slot::Factored { row, col } => {
            let row_mean = sq.mean_axis(Axis(1)).expect("non-empty rows");
            let col_mean = sq.mean_axis(Axis(0)).expect("non-empty cols");
            *row = &*row * b2 + &(row_mean * one_minus);
            *col = &*col * b2 + &(col_mean * one_minus);
            let row_avg = row.mean().expect("non-empty");
            Array2::from_shape_fn(grad.dim(), |(i, j)| {
                let v = row[i] * col[j] / row_avg;
                grad[[i, j]] / v.sqrt()
            })
        }
        Slot::Full(v) => {
            *v = &*v * b2 + &(sq * one_minus);
            ndarray::Zip::from(grad).and(&*v).map_collect(|&g, &v| g / v.sqrt())
        }
    };
    let denom = (rms(&u) / cfg.clip_threshold).max(1.0);
    u.mapv_inplace(|x| x / c(denom));
    u
}
