//! VGG-style feature extractor with one block per stride 1, 2, 4, ….

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec};
use crate::tensor::{ParamStore, Real, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub levels: usize,
    pub convs_per_level: Vec<usize>,
    pub channels_per_level: Vec<usize>,
    pub kernel_size: usize,
    /// `[height, width]`
    pub input_size: [usize; 2],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            levels: 5,
            convs_per_level: vec![2; 5],
            channels_per_level: vec![16, 24, 32, 48, 48],
            kernel_size: 3,
            input_size: [64, 64],
        }
    }
}

impl BackboneConfig {
    pub fn full_scale() -> Self {
        BackboneConfig {
            levels: 5,
            convs_per_level: vec![2, 2, 3, 3, 3],
            channels_per_level: vec![64, 128, 256, 512, 512],
            kernel_size: 3,
            input_size: [256, 256],
        }
    }

    /// Index of the deepest level, `L`.
    pub fn top(&self) -> usize {
        self.levels - 1
    }

    pub fn extent(&self, level: usize) -> [usize; 2] {
        [self.input_size[0] >> level, self.input_size[1] >> level]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("backbone: {msg}")));
        if self.levels < 2 {
            return fail(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.channels_per_level.len() != self.levels {
            return fail(format!(
                "channels_per_level has {} entries for {} levels",
                self.channels_per_level.len(),
                self.levels
            ));
        }
        if self.convs_per_level.len() != self.levels {
            return fail(format!(
                "convs_per_level has {} entries for {} levels",
                self.convs_per_level.len(),
                self.levels
            ));
        }
        if self.convs_per_level.contains(&0) || self.channels_per_level.contains(&0) {
            return fail("every level needs at least one convolution and one channel".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        let div = 1usize << self.top();
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return fail(format!(
                "input size {h}x{w} is not divisible by 2^{} = {div}",
                self.top()
            ));
        }
        Ok(())
    }
}

/// Per-level feature maps on a tape; level `l` has stride `2^l`.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub maps: Vec<Var>,
}

impl FeatureSet {
    pub fn strides(&self) -> Vec<usize> {
        (0..self.maps.len()).map(|l| 1 << l).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub blocks: Vec<Vec<Conv>>,
}

impl Backbone {
    pub fn register<T: Real>(cfg: &BackboneConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let mut cin = 3;
        let mut blocks = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let cout = cfg.channels_per_level[l];
            let block = (0..cfg.convs_per_level[l])
                .map(|i| {
                    let spec = ConvSpec::conv(if i == 0 { cin } else { cout }, cout, k, 1, k / 2);
                    spec.register(store, &format!("backbone.level{l}.conv{i}"))
                })
                .collect();
            blocks.push(block);
            cin = cout;
        }
        Ok(Backbone { blocks })
    }

    /// Runs the blocks, pooling between levels but not after the last one.
    pub fn extract_features<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<FeatureSet> {
        let mut maps = Vec::with_capacity(self.blocks.len());
        let mut x = image;
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                x = tape.maxpool2(x)?;
            }
            for conv in block {
                let y = conv.forward(tape, store, x)?;
                x = tape.relu(y);
            }
            maps.push(x);
        }
        Ok(FeatureSet { maps })
    }
}
