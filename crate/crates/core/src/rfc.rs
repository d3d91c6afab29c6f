//! Resolution-based feature combination: every backbone level is resized to
//! one target resolution, concatenated and mixed by a 1×1 convolution.

use crate::backbone::{BackboneConfig, FeatureSet};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec};
use crate::tensor::{ParamStore, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfcConfig {
    pub per_level_channels: usize,
    pub combined_channels: usize,
}

impl Default for RfcConfig {
    fn default() -> Self {
        RfcConfig {
            per_level_channels: 16,
            combined_channels: 16,
        }
    }
}

impl RfcConfig {
    pub fn full_scale() -> Self {
        RfcConfig {
            per_level_channels: 64,
            combined_channels: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_level_channels == 0 || self.combined_channels == 0 {
            return Err(Error::Config("rfc: channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// How one source level reaches the target resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Shrink(usize),
    Same,
    Extend(usize),
}

impl Resize {
    pub fn between(source: usize, target: usize) -> Self {
        use std::cmp::Ordering::*;
        match source.cmp(&target) {
            Less => Resize::Shrink(1 << (target - source)),
            Equal => Resize::Same,
            Greater => Resize::Extend(1 << (source - target)),
        }
    }
}

/// Strided convolution with kernel = stride = `factor`.
pub fn shrink_spec(in_channels: usize, out_channels: usize, factor: usize) -> ConvSpec {
    ConvSpec::conv(in_channels, out_channels, factor, factor, 0)
}

/// Transposed convolution with kernel `2·factor`, stride `factor`, pad `factor/2`.
pub fn extend_spec(in_channels: usize, out_channels: usize, factor: usize) -> ConvSpec {
    ConvSpec::upsample(in_channels, out_channels, factor)
}

/// Applies a shrink layer after checking the input divides evenly.
pub fn shrink<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &Conv,
    feature: Var,
) -> Result<Var> {
    let n = layer.spec.stride;
    let s = tape.shape(feature);
    if n < 2 || !s.h.is_multiple_of(n) || !s.w.is_multiple_of(n) {
        return Err(Error::geometry(
            "shrink",
            format!("extent {}x{} is not divisible by factor {n}", s.h, s.w),
        ));
    }
    layer.forward(tape, store, feature)
}

pub fn extend<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &Conv,
    feature: Var,
) -> Result<Var> {
    if layer.spec.stride < 2 {
        return Err(Error::geometry(
            "extend",
            format!("factor {} is below 2", layer.spec.stride),
        ));
    }
    layer.forward(tape, store, feature)
}

/// Output of one RFC on a tape.
#[derive(Clone, Copy, Debug)]
pub struct IntegratedFeature {
    pub map: Var,
    /// Concatenation of the resized levels before the combining convolution.
    pub concat: Var,
    pub level: usize,
}

/// The RFC for one target level. Sources are held in level order 0..=L,
/// which puts the largest shrink first and the largest extend last.
#[derive(Clone, Debug)]
pub struct Rfc {
    pub level: usize,
    pub sources: Vec<(Resize, Conv)>,
    pub combine: Conv,
}

impl Rfc {
    pub fn register<T: Real>(
        backbone: &BackboneConfig,
        cfg: &RfcConfig,
        level: usize,
        store: &mut ParamStore<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.per_level_channels;
        let sources = backbone
            .channels_per_level
            .iter()
            .enumerate()
            .map(|(s, &c)| {
                let resize = Resize::between(s, level);
                let name = format!("rfc{level}.from{s}");
                let spec = match resize {
                    Resize::Shrink(n) => shrink_spec(c, p, n),
                    Resize::Same => ConvSpec::pointwise(c, p),
                    Resize::Extend(m) => extend_spec(c, p, m),
                };
                (resize, spec.register(store, &name))
            })
            .collect();
        let combine = ConvSpec::pointwise(backbone.levels * p, cfg.combined_channels)
            .register(store, &format!("rfc{level}.combine"));
        Ok(Rfc {
            level,
            sources,
            combine,
        })
    }

    pub fn integrate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &FeatureSet,
    ) -> Result<IntegratedFeature> {
        if features.maps.len() != self.sources.len() {
            return Err(Error::ShapeMismatch {
                op: "integrate",
                dim: "levels",
                expected: self.sources.len(),
                found: features.maps.len(),
            });
        }
        let mut resized = Vec::with_capacity(self.sources.len());
        for (&map, (resize, layer)) in features.maps.iter().zip(&self.sources) {
            resized.push(match resize {
                Resize::Shrink(_) => shrink(tape, store, layer, map)?,
                Resize::Same => layer.forward(tape, store, map)?,
                Resize::Extend(_) => extend(tape, store, layer, map)?,
            });
        }
        let concat = tape.concat_channels(&resized)?;
        let map = self.combine.forward(tape, store, concat)?;
        Ok(IntegratedFeature {
            map,
            concat,
            level: self.level,
        })
    }
}
