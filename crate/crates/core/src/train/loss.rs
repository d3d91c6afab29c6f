use crate::error::Result;
use crate::heads::PredictionSet;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Joint loss node and its components (`None` for masked levels).
#[derive(Clone, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub fused: Var,
    pub levels: Vec<Option<Var>>,
}

impl JointLoss {
    /// Component values `(fused, per level)`.
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> (f64, Vec<Option<f64>>) {
        (
            tape.scalar(self.fused),
            self.levels
                .iter()
                .map(|l| l.map(|v| tape.scalar(v)))
                .collect(),
        )
    }
}

/// `α_f·L_f + Σ_l α_l·L_l` over the fused and every active refined prediction.
pub fn joint_loss<T: Real>(
    tape: &mut Tape<T>,
    predictions: &PredictionSet,
    gt: &Tensor<T>,
    alpha_f: f64,
    alpha_l: f64,
) -> Result<JointLoss> {
    let fused = tape.balanced_bce_loss(predictions.fused_excitation, gt)?;
    let mut terms = vec![(fused, T::from_f64_lossy(alpha_f))];
    let mut levels = Vec::with_capacity(predictions.excitations.len());
    for e in &predictions.excitations {
        levels.push(match *e {
            Some(p) => {
                let l = tape.balanced_bce_loss(p, gt)?;
                terms.push((l, T::from_f64_lossy(alpha_l)));
                Some(l)
            }
            None => None,
        });
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(JointLoss {
        total,
        fused,
        levels,
    })
}
