//! Recursive per-level prediction, boundary refinement and fusion.
//!
//! Predictions carry two channels, background then foreground score.

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec};
use crate::rfc::IntegratedFeature;
use crate::tensor::{ParamStore, Real, Tape, Var};

pub const PRED_CHANNELS: usize = 2;

/// One link of the recursive prediction chain.
#[derive(Clone, Debug)]
pub struct LevelHead {
    pub level: usize,
    /// Upsampling of the integrated feature to input resolution; its bias is
    /// the additive term `b`.
    pub deconv: Conv,
    /// Weight on the coarser prediction, absent at the top level.
    pub recur: Option<Conv>,
    /// Recursive output weight, absent at the top level.
    pub out: Option<Conv>,
}

impl LevelHead {
    pub fn register<T: Real>(
        level: usize,
        top: usize,
        feature_channels: usize,
        store: &mut ParamStore<T>,
    ) -> Self {
        let name = format!("head{level}");
        let deconv = if level == 0 {
            ConvSpec::pointwise(feature_channels, PRED_CHANNELS)
        } else {
            ConvSpec::upsample(feature_channels, PRED_CHANNELS, 1 << level)
        }
        .register(store, &format!("{name}.deconv"));
        let (recur, out) = if level < top {
            (
                Some(
                    ConvSpec::pointwise(PRED_CHANNELS, PRED_CHANNELS)
                        .without_bias()
                        .register(store, &format!("{name}.recur")),
                ),
                Some(
                    ConvSpec::pointwise(PRED_CHANNELS, PRED_CHANNELS)
                        .register(store, &format!("{name}.out")),
                ),
            )
        } else {
            (None, None)
        };
        LevelHead {
            level,
            deconv,
            recur,
            out,
        }
    }

    /// `P^L = deconv(F) + b` at the top level, otherwise
    /// `P^l = W_r * relu(deconv(F) + b + W_P * P^{l+1})`.
    pub fn predict_level<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        feature: &IntegratedFeature,
        next: Option<Var>,
    ) -> Result<Var> {
        let lifted = self.deconv.forward(tape, store, feature.map)?;
        match (&self.recur, &self.out, next) {
            (None, None, None) => Ok(lifted),
            (Some(recur), Some(out), Some(next)) => {
                let (a, b) = (tape.shape(lifted), tape.shape(next));
                if (a.h, a.w) != (b.h, b.w) {
                    return Err(Error::geometry(
                        "predict_level",
                        format!(
                            "level {} prediction is {}x{} but the coarser one is {}x{}",
                            self.level, a.h, a.w, b.h, b.w
                        ),
                    ));
                }
                let carried = recur.forward(tape, store, next)?;
                let sum = tape.add(lifted, carried)?;
                let act = tape.relu(sum);
                out.forward(tape, store, act)
            }
            (_, _, next) => Err(Error::geometry(
                "predict_level",
                format!(
                    "level {} {} a coarser prediction",
                    self.level,
                    if next.is_some() {
                        "does not take"
                    } else {
                        "requires"
                    }
                ),
            )),
        }
    }
}

/// Boundary refinement for one level: `P_b = W_b * relu(B + P)` with `B` a
/// 1×1 projection of the level-0 features.
#[derive(Clone, Debug)]
pub struct Refiner {
    pub boundary: Conv,
    pub refine: Conv,
}

impl Refiner {
    pub fn register<T: Real>(
        level: usize,
        fine_channels: usize,
        store: &mut ParamStore<T>,
    ) -> Self {
        Refiner {
            boundary: ConvSpec::pointwise(fine_channels, PRED_CHANNELS)
                .register(store, &format!("bpr{level}.boundary")),
            refine: ConvSpec::pointwise(PRED_CHANNELS, PRED_CHANNELS)
                .register(store, &format!("bpr{level}.refine")),
        }
    }

    pub fn refine_boundary<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fine: Var,
        raw: Var,
    ) -> Result<Var> {
        let (f, r) = (tape.shape(fine), tape.shape(raw));
        if (f.h, f.w) != (r.h, r.w) {
            return Err(Error::geometry(
                "refine_boundary",
                format!(
                    "features are {}x{} but the prediction is {}x{}",
                    f.h, f.w, r.h, r.w
                ),
            ));
        }
        let b = self.boundary.forward(tape, store, fine)?;
        let sum = tape.add(b, raw)?;
        let act = tape.relu(sum);
        self.refine.forward(tape, store, act)
    }
}

/// 1×1 convolution over the concatenated refined predictions.
#[derive(Clone, Debug)]
pub struct Fuser {
    pub levels: usize,
    pub conv: Conv,
}

impl Fuser {
    pub fn register<T: Real>(levels: usize, store: &mut ParamStore<T>) -> Self {
        Fuser {
            levels,
            conv: ConvSpec::pointwise(PRED_CHANNELS * levels, PRED_CHANNELS)
                .register(store, "fuse"),
        }
    }

    pub fn fuse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        refined: &[Var],
    ) -> Result<Var> {
        if refined.len() != self.levels {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                dim: "predictions",
                expected: self.levels,
                found: refined.len(),
            });
        }
        let cat = tape.concat_channels(refined)?;
        self.conv.forward(tape, store, cat)
    }
}

/// Everything the heads produce for one forward pass. Levels masked out by a
/// variant hold `None`.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    pub raw: Vec<Option<Var>>,
    pub refined: Vec<Option<Var>>,
    pub fused: Var,
    /// Softmax pair of each refined prediction.
    pub excitations: Vec<Option<Var>>,
    pub fused_excitation: Var,
}

impl PredictionSet {
    pub fn active_levels(&self) -> impl Iterator<Item = usize> + '_ {
        self.refined
            .iter()
            .enumerate()
            .filter_map(|(l, p)| p.map(|_| l))
    }

    /// Number of supervised outputs: active levels plus the fused one.
    pub fn supervised(&self) -> usize {
        self.active_levels().count() + 1
    }
}
