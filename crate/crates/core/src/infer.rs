//! Saliency maps from a prediction set.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::heads::PredictionSet;
use crate::model::AmuletNet;
use crate::tensor::{ParamStore, Real, Tape, Tensor};

/// Ranges at or below this are treated as constant maps.
pub const CONSTANT_RANGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InferMode {
    /// Mean level contrast plus fused contrast, min-max normalised.
    #[default]
    Full,
    /// Foreground excitation of the fused prediction.
    FusedOnly,
}

impl fmt::Display for InferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferMode::Full => "full",
            InferMode::FusedOnly => "fused-only",
        })
    }
}

impl FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(InferMode::Full),
            "fused-only" => Ok(InferMode::FusedOnly),
            _ => Err(Error::Config(format!("unknown inference mode `{s}`"))),
        }
    }
}

/// `relu(mean_l(fe_l − be_l) + (fe_f − be_f))` from softmax pairs `[N,2,H,W]`,
/// before normalisation. Returns `[N,1,H,W]`.
pub fn raw_saliency<T: Real>(levels: &[&Tensor<T>], fused: &Tensor<T>) -> Tensor<T> {
    let s = fused.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros([s.n, 1, s.h, s.w]);
    let inv = if levels.is_empty() {
        0.0
    } else {
        1.0 / levels.len() as f64
    };
    for n in 0..s.n {
        let dst = out.item_mut(n);
        for (j, d) in dst.iter_mut().enumerate() {
            let contrast = |t: &Tensor<T>| {
                let item = t.item(n);
                item[plane + j].to_f64().unwrap_or(f64::NAN) - item[j].to_f64().unwrap_or(f64::NAN)
            };
            let mean: f64 = levels.iter().map(|t| contrast(t)).sum::<f64>() * inv;
            *d = T::from_f64_lossy((mean + contrast(fused)).max(0.0));
        }
    }
    out
}

/// Per-image min-max scaling to [0, 1]; constant images become zeros.
pub fn normalize_per_image<T: Real>(map: &Tensor<T>) -> Tensor<T> {
    let mut out = map.clone();
    let n = map.shape().n;
    for i in 0..n {
        let item = out.item_mut(i);
        let (lo, hi) = item
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        for v in item.iter_mut() {
            *v = if range > CONSTANT_RANGE {
                T::from_f64_lossy(((v.to_f64().unwrap_or(f64::NAN) - lo) / range).clamp(0.0, 1.0))
            } else {
                T::zero()
            };
        }
    }
    out
}

/// Full inference over the active levels.
pub fn infer<T: Real>(tape: &Tape<T>, predictions: &PredictionSet) -> Tensor<T> {
    let levels: Vec<&Tensor<T>> = predictions
        .excitations
        .iter()
        .flatten()
        .map(|&v| tape.value(v))
        .collect();
    let raw = raw_saliency(&levels, tape.value(predictions.fused_excitation));
    normalize_per_image(&raw)
}

/// Foreground channel of the fused softmax pair.
pub fn infer_fused_only<T: Real>(tape: &Tape<T>, predictions: &PredictionSet) -> Tensor<T> {
    tape.value(predictions.fused_excitation).channel(1)
}

/// Forward pass plus inference for a batch `[N,3,H,W]`.
pub fn predict<T: Real>(
    net: &AmuletNet,
    store: &ParamStore<T>,
    images: Tensor<T>,
    mode: InferMode,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let fwd = net.forward(&mut tape, store, x)?;
    Ok(match mode {
        InferMode::Full => infer(&tape, &fwd.predictions),
        InferMode::FusedOnly => infer_fused_only(&tape, &fwd.predictions),
    })
}
