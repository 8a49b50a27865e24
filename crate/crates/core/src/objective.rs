//! Negative-guidance erasure objective.
//!
//! The frozen denoiser provides a classifier-free-guidance style target that
//! steers *away* from the concept:
//!
//! ```text
//! target = eps(z, t, empty) - gamma * (eps(z, t, e_c) - eps(z, t, empty))
//! ```
//!
//! and the trainable denoiser regresses its conditional prediction onto it.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backend::Denoiser;
use crate::error::{Error, Result};
use crate::fusion::FusedLatent;

#[derive(Debug, Clone)]
pub struct GuidanceSpec {
    pub gamma: f64,
    /// `(L, d)` embedding of the empty prompt.
    pub uncond_embedding: Tensor,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Mean over all elements.
    #[default]
    Mean,
    /// Sum over all elements (the plain squared norm).
    Sum,
}

/// Trainable prediction and its (detached) regression target.
#[derive(Debug, Clone)]
pub struct NoisePredictionPair {
    pub trainable_pred: Tensor,
    pub target: Tensor,
}

impl NoisePredictionPair {
    pub fn new(trainable_pred: Tensor, target: &Tensor) -> Result<Self> {
        if trainable_pred.dims() != target.dims() {
            return Err(Error::contract(format!(
                "prediction {:?} and target {:?} differ in shape",
                trainable_pred.dims(),
                target.dims()
            )));
        }
        Ok(Self {
            trainable_pred,
            target: target.detach(),
        })
    }

    pub fn loss(&self, reduction: LossReduction) -> Result<Tensor> {
        let sq = (&self.trainable_pred - &self.target)?.sqr()?;
        Ok(match reduction {
            LossReduction::Mean => sq.mean_all()?,
            LossReduction::Sum => sq.sum_all()?,
        })
    }
}

/// Repeats an `(L, d)` embedding across a batch; `(B, L, d)` passes through.
pub fn batch_embedding(embedding: &Tensor, batch: usize) -> Result<Tensor> {
    match embedding.rank() {
        2 => {
            let (l, d) = embedding.dims2()?;
            Ok(embedding
                .unsqueeze(0)?
                .broadcast_as((batch, l, d))?
                .contiguous()?)
        }
        3 if embedding.dim(0)? == batch => Ok(embedding.clone()),
        _ => Err(Error::contract(format!(
            "embedding {:?} incompatible with batch {batch}",
            embedding.dims()
        ))),
    }
}

/// Guidance target from the frozen model; two forward passes, no gradient.
pub fn build_target(
    frozen: &dyn Denoiser,
    z_fused: &FusedLatent,
    timestep: usize,
    concept_embedding: &Tensor,
    spec: &GuidanceSpec,
) -> Result<Tensor> {
    if spec.uncond_embedding.dims() != concept_embedding.dims() {
        return Err(Error::contract(format!(
            "unconditional embedding {:?} does not match conditional {:?}",
            spec.uncond_embedding.dims(),
            concept_embedding.dims()
        )));
    }
    let z = z_fused.values.detach();
    let batch = z.dim(0)?;
    let cond = frozen.predict_noise(&z, timestep, &batch_embedding(concept_embedding, batch)?)?;
    let uncond = frozen.predict_noise(
        &z,
        timestep,
        &batch_embedding(&spec.uncond_embedding, batch)?,
    )?;
    if cond.dims() != uncond.dims() || cond.dims() != z.dims() {
        return Err(Error::Backend(format!(
            "frozen predictions {:?} / {:?} do not match latent {:?}",
            cond.dims(),
            uncond.dims(),
            z.dims()
        )));
    }
    let guidance = ((cond - &uncond)? * spec.gamma)?;
    Ok((uncond - guidance)?.detach())
}

/// Squared error between the trainable conditional prediction and `target`.
/// Gradients reach the trainable denoiser and, through `z_fused`, whatever
/// produced the fused latent.
pub fn erasure_loss(
    trainable: &dyn Denoiser,
    z_fused: &FusedLatent,
    timestep: usize,
    concept_embedding: &Tensor,
    target: &Tensor,
    reduction: LossReduction,
) -> Result<Tensor> {
    let batch = z_fused.values.dim(0)?;
    let pred = trainable.predict_noise(
        &z_fused.values,
        timestep,
        &batch_embedding(concept_embedding, batch)?,
    )?;
    NoisePredictionPair::new(pred, target)?.loss(reduction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{to_scalar, to_vec};
    use candle_core::{DType, Device};
    use std::cell::Cell;

    /// `eps = a * z + b * mean(cond)` with a call counter.
    struct Affine {
        a: f64,
        b: f64,
        calls: Cell<usize>,
    }

    impl Denoiser for Affine {
        fn predict_noise(&self, latent: &Tensor, _t: usize, cond: &Tensor) -> Result<Tensor> {
            self.calls.set(self.calls.get() + 1);
            let bias = (cond.mean_all()? * self.b)?;
            Ok(((latent * self.a)?.broadcast_add(&bias))?)
        }
    }

    fn setup() -> (FusedLatent, Tensor, Tensor) {
        let dev = Device::Cpu;
        let z = Tensor::arange(0f64, 8.0, &dev)
            .unwrap()
            .reshape((2, 1, 2, 2))
            .unwrap();
        let cond = Tensor::full(2.0f64, (3, 4), &dev).unwrap();
        let uncond = Tensor::full(-1.0f64, (3, 4), &dev).unwrap();
        (
            FusedLatent {
                values: z,
                lambda_used: 0.5,
            },
            cond,
            uncond,
        )
    }

    #[test]
    fn zero_gamma_gives_unconditional_prediction() {
        let (z, cond, uncond) = setup();
        let model = Affine {
            a: 0.3,
            b: 1.7,
            calls: Cell::new(0),
        };
        let spec = GuidanceSpec {
            gamma: 0.0,
            uncond_embedding: uncond.clone(),
        };
        let target = build_target(&model, &z, 3, &cond, &spec).unwrap();
        let expected = model
            .predict_noise(&z.values, 3, &batch_embedding(&uncond, 2).unwrap())
            .unwrap();
        assert_eq!(to_vec(&target).unwrap(), to_vec(&expected).unwrap());
    }

    #[test]
    fn target_uses_exactly_two_frozen_passes() {
        let (z, cond, uncond) = setup();
        let model = Affine {
            a: 0.3,
            b: 1.7,
            calls: Cell::new(0),
        };
        let spec = GuidanceSpec {
            gamma: 1.0,
            uncond_embedding: uncond,
        };
        build_target(&model, &z, 3, &cond, &spec).unwrap();
        assert_eq!(model.calls.get(), 2);
    }

    #[test]
    fn condition_blind_model_ignores_gamma() {
        let (z, cond, uncond) = setup();
        let model = Affine {
            a: 0.3,
            b: 0.0,
            calls: Cell::new(0),
        };
        let plain = to_vec(&(&z.values * 0.3).unwrap()).unwrap();
        for gamma in [0.0, 1.0, 7.5, -2.0] {
            let spec = GuidanceSpec {
                gamma,
                uncond_embedding: uncond.clone(),
            };
            let target = build_target(&model, &z, 0, &cond, &spec).unwrap();
            assert_eq!(to_vec(&target).unwrap(), plain);
        }
    }

    #[test]
    fn target_is_affine_in_gamma() {
        let (z, cond, uncond) = setup();
        let model = Affine {
            a: 0.3,
            b: 1.7,
            calls: Cell::new(0),
        };
        let at = |gamma: f64| {
            let spec = GuidanceSpec {
                gamma,
                uncond_embedding: uncond.clone(),
            };
            to_vec(&build_target(&model, &z, 0, &cond, &spec).unwrap()).unwrap()
        };
        let (t0, t1, t3) = (at(0.0), at(1.0), at(3.0));
        for i in 0..t0.len() {
            let slope = t1[i] - t0[i];
            assert!((t3[i] - (t0[i] + 3.0 * slope)).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_uncond_shape_is_contract_error() {
        let (z, cond, _) = setup();
        let model = Affine {
            a: 1.0,
            b: 1.0,
            calls: Cell::new(0),
        };
        let spec = GuidanceSpec {
            gamma: 1.0,
            uncond_embedding: Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap(),
        };
        assert!(matches!(
            build_target(&model, &z, 0, &cond, &spec),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn loss_matches_hand_arithmetic() {
        let dev = Device::Cpu;
        let target = Tensor::new(&[[[[0.5f64, -1.0], [2.0, 0.0]]]], &dev).unwrap();
        let pair = NoisePredictionPair::new((&target + 1.0).unwrap(), &target).unwrap();
        assert_eq!(
            to_scalar(&pair.loss(LossReduction::Sum).unwrap()).unwrap(),
            4.0
        );
        assert_eq!(
            to_scalar(&pair.loss(LossReduction::Mean).unwrap()).unwrap(),
            1.0
        );
        let exact = NoisePredictionPair::new(target.clone(), &target).unwrap();
        assert_eq!(
            to_scalar(&exact.loss(LossReduction::Sum).unwrap()).unwrap(),
            0.0
        );
        let bad = NoisePredictionPair::new(target.flatten_all().unwrap(), &target);
        assert!(matches!(bad, Err(Error::Contract(_))));
    }
}
