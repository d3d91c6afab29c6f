//! End-to-end gradient check of a miniature network on the joint loss.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::model::{param_group, AmuletNet, HeadsConfig, ModelConfig};
use crate::rfc::RfcConfig;
use crate::tensor::gradcheck::{gradcheck_params, GradcheckConfig, GradcheckReport, ParamSample};
use crate::tensor::{BetaConvention, ParamStore, Primitive, Tape, Tensor};
use crate::train::init::init_msra;
use crate::train::loss::joint_loss;

#[derive(Clone, Debug)]
pub struct NetworkCheck {
    pub model: ModelConfig,
    pub batch: usize,
    /// Coordinates compared per parameter tensor.
    pub samples_per_param: usize,
    pub seed: u64,
    pub beta: BetaConvention,
    pub log_eps: f64,
    /// Deliberately wrong backward for one primitive.
    pub fault: Option<Primitive>,
}

/// Three levels on an 8×8 input with a few channels per layer.
pub fn miniature(heads: HeadsConfig) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            levels: 3,
            convs_per_level: vec![1, 1, 1],
            channels_per_level: vec![3, 4, 4],
            kernel_size: 3,
            input_size: [8, 8],
        },
        rfc: RfcConfig {
            per_level_channels: 3,
            combined_channels: 3,
        },
        heads,
    }
}

impl NetworkCheck {
    pub fn new(seed: u64) -> Self {
        NetworkCheck {
            model: miniature(HeadsConfig::default()),
            batch: 2,
            samples_per_param: 3,
            seed,
            beta: BetaConvention::default(),
            log_eps: Tape::<f64>::DEFAULT_LOG_EPS,
            fault: None,
        }
    }

    /// Runs the check; groups are parameter names without the
    /// `.weight`/`.bias` suffix.
    pub fn run(&self, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
        let mut store = ParamStore::<f64>::new();
        let net = AmuletNet::new(self.model.clone(), &mut store)?;
        init_msra(&mut store, self.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        // Biases start at zero; give them values so their gradients are exercised
        // away from symmetric points.
        for p in store.iter_mut() {
            if p.name.ends_with(".bias") {
                for v in p.value.data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        let [h, w] = self.model.backbone.input_size;
        let n = self.batch;
        let image: Vec<f64> = (0..n * 3 * h * w).map(|_| rng.random::<f64>()).collect();
        let image = Tensor::from_vec([n, 3, h, w], image)?;
        let mut mask = vec![0.0; n * h * w];
        for item in mask.chunks_exact_mut(h * w) {
            // At least one pixel of each class per image.
            for (j, m) in item.iter_mut().enumerate() {
                *m = if j == 0 || (j + 1 < h * w && rng.random_bool(0.3)) {
                    1.0
                } else {
                    0.0
                };
            }
        }
        let gt = Tensor::from_vec([n, 1, h, w], mask)?;

        let samples: Vec<ParamSample> = store
            .ids()
            .map(|id| {
                let len = store.get(id).value.len();
                let k = self.samples_per_param.min(len);
                let mut indices = sample(&mut rng, len, k).into_vec();
                indices.sort_unstable();
                ParamSample { id, indices }
            })
            .collect();

        let loss = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            *tape = Tape::new()
                .with_beta_convention(self.beta)
                .with_log_eps(self.log_eps);
            if let Some(p) = self.fault {
                tape.inject_fault(p);
            }
            let x = tape.constant(image.clone());
            let fwd = net.forward(tape, store, x)?;
            Ok(joint_loss(tape, &fwd.predictions, &gt, 1.0, 1.0)?.total)
        };
        gradcheck_params(loss, &store, &samples, param_group, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miniature_is_valid() {
        miniature(HeadsConfig::default()).validate().unwrap();
    }
}
