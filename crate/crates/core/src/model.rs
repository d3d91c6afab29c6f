//! The full network: backbone, one RFC and head per level, refinement and
//! fusion, with ablation variants expressed as level masks.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{Backbone, BackboneConfig, FeatureSet};
use crate::error::{Error, Result};
use crate::heads::{Fuser, LevelHead, PredictionSet, Refiner, PRED_CHANNELS};
use crate::rfc::{IntegratedFeature, Rfc, RfcConfig};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

/// `amulet-1/n`: only targets whose stride is at least `n` are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub min_stride: usize,
}

impl Default for Variant {
    fn default() -> Self {
        Variant { min_stride: 1 }
    }
}

impl Variant {
    pub fn is_active(&self, level: usize) -> bool {
        (1usize << level) >= self.min_stride
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "amulet-1/{}", self.min_stride)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n = s
            .strip_prefix("amulet-1/")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|n| n.is_power_of_two())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}`, expected amulet-1/n with n a power of two"
                ))
            })?;
        Ok(Variant { min_stride: n })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadsConfig {
    pub variant: Variant,
    /// When false the refinement is bypassed and `P_b = P`.
    pub bpr: bool,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            variant: Variant::default(),
            bpr: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rfc: RfcConfig,
    pub heads: HeadsConfig,
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig {
            backbone: BackboneConfig::full_scale(),
            rfc: RfcConfig::full_scale(),
            heads: HeadsConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.rfc.validate()?;
        let top_stride = 1usize << self.backbone.top();
        if self.heads.variant.min_stride > top_stride {
            return Err(Error::Config(format!(
                "variant {} leaves no level active (deepest stride is {top_stride})",
                self.heads.variant
            )));
        }
        Ok(())
    }

    pub fn active_levels(&self) -> Vec<usize> {
        (0..self.backbone.levels)
            .filter(|&l| self.heads.variant.is_active(l))
            .collect()
    }
}

/// Tape handles from one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub features: FeatureSet,
    pub integrated: Vec<Option<IntegratedFeature>>,
    pub predictions: PredictionSet,
}

#[derive(Clone, Debug)]
pub struct AmuletNet {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub rfcs: Vec<Rfc>,
    pub heads: Vec<LevelHead>,
    pub refiners: Vec<Refiner>,
    pub fuser: Fuser,
}

impl AmuletNet {
    /// Registers every parameter in `store`. All variants share one layout,
    /// so a checkpoint from any variant loads into any other.
    pub fn new<T: Real>(config: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let bb = &config.backbone;
        let backbone = Backbone::register(bb, store)?;
        let top = bb.top();
        let mut rfcs = Vec::with_capacity(bb.levels);
        let mut heads = Vec::with_capacity(bb.levels);
        let mut refiners = Vec::with_capacity(bb.levels);
        for l in 0..bb.levels {
            rfcs.push(Rfc::register(bb, &config.rfc, l, store)?);
            heads.push(LevelHead::register(
                l,
                top,
                config.rfc.combined_channels,
                store,
            ));
            refiners.push(Refiner::register(l, bb.channels_per_level[0], store));
        }
        let fuser = Fuser::register(bb.levels, store);
        Ok(AmuletNet {
            config,
            backbone,
            rfcs,
            heads,
            refiners,
            fuser,
        })
    }

    pub fn levels(&self) -> usize {
        self.config.backbone.levels
    }

    /// Image batch `[N, 3, H, W]` with values in [0, 1].
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<Forward> {
        let s = tape.shape(image);
        let [h, w] = self.config.backbone.input_size;
        if s.c != 3 || s.h != h || s.w != w {
            return Err(Error::geometry(
                "forward",
                format!("expected images of shape [N, 3, {h}, {w}], got {s}"),
            ));
        }
        let features = self.backbone.extract_features(tape, store, image)?;
        let levels = self.levels();
        let variant = self.config.heads.variant;

        let mut integrated = vec![None; levels];
        let mut raw = vec![None; levels];
        let mut next = None;
        for l in (0..levels).rev().filter(|&l| variant.is_active(l)) {
            let f = self.rfcs[l].integrate(tape, store, &features)?;
            let p = self.heads[l].predict_level(tape, store, &f, next)?;
            integrated[l] = Some(f);
            raw[l] = Some(p);
            next = Some(p);
        }

        let fine = features.maps[0];
        let mut refined = vec![None; levels];
        let mut excitations = vec![None; levels];
        let mut fuse_inputs = Vec::with_capacity(levels);
        for l in 0..levels {
            match raw[l] {
                Some(p) => {
                    let pb = if self.config.heads.bpr {
                        self.refiners[l].refine_boundary(tape, store, fine, p)?
                    } else {
                        p
                    };
                    refined[l] = Some(pb);
                    excitations[l] = Some(tape.softmax_pair(pb)?);
                    fuse_inputs.push(pb);
                }
                None => fuse_inputs.push(tape.constant(Tensor::zeros([s.n, PRED_CHANNELS, h, w]))),
            }
        }
        let fused = self.fuser.fuse(tape, store, &fuse_inputs)?;
        let fused_excitation = tape.softmax_pair(fused)?;
        Ok(Forward {
            features,
            integrated,
            predictions: PredictionSet {
                raw,
                refined,
                fused,
                excitations,
                fused_excitation,
            },
        })
    }
}

/// Parameter group used in gradient-check reports: the layer name without
/// the `.weight` / `.bias` suffix.
pub fn param_group(name: &str) -> String {
    name.rsplit_once('.')
        .map_or(name, |(layer, _)| layer)
        .to_owned()
}
