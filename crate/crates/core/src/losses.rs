//! Training objectives: L1 reconstruction on all three generator outputs,
//! least-squares adversarial terms and the dark-region rectification that
//! feeds the shadow discriminator.

use alloc::format;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Intensity ceiling applied before the shadow discriminator: 15/255.
pub const SHADOW_THRESHOLD: f64 = 15.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub recon_scene: f64,
    pub recon_shadow: f64,
    pub recon_final: f64,
    pub adv_scene: f64,
    pub adv_shadow: f64,
    pub shadow_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon_scene: 1.0,
            recon_shadow: 1.0,
            recon_final: 1.0,
            adv_scene: 0.01,
            adv_shadow: 0.01,
            shadow_threshold: SHADOW_THRESHOLD,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("recon_scene", self.recon_scene),
            ("recon_shadow", self.recon_shadow),
            ("recon_final", self.recon_final),
            ("adv_scene", self.adv_scene),
            ("adv_shadow", self.adv_shadow),
        ];
        for (name, w) in named {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid("loss weight", format!("{name} = {w} must be finite and non-negative")));
            }
        }
        check_threshold(self.shadow_threshold)
    }

    /// The same weights with both adversarial terms switched off.
    pub fn without_adversarial(mut self) -> Self {
        self.adv_scene = 0.0;
        self.adv_shadow = 0.0;
        self
    }

    pub fn has_adversarial(&self) -> bool {
        self.adv_scene > 0.0 || self.adv_shadow > 0.0
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("shadow threshold", format!("{t} outside [0, 1]")));
    }
    Ok(())
}

/// Maps `[-1, 1]` images to `[0, 1]`.
pub fn to_unit<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let half = T::from_f64(0.5);
    tape.affine(x, half, half)
}

/// Clamps every channel of a `[0, 1]` image from above at `threshold`, so
/// only dark regions keep their detail.
pub fn shadow_rectify<T: Scalar>(tape: &mut Tape<T>, image: Var, threshold: f64) -> Result<Var> {
    check_threshold(threshold)?;
    tape.min_const(image, T::from_f64(threshold))
}

/// Plain-value version of [`shadow_rectify`].
pub fn shadow_rectify_tensor<T: Scalar>(image: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    check_threshold(threshold)?;
    let t = T::from_f64(threshold);
    Ok(image.map(|v| if v > t { t } else { v }))
}

fn mean_sq_offset<T: Scalar>(tape: &mut Tape<T>, scores: Var, target: f64) -> Result<Var> {
    let t = tape.constant(Tensor::full(tape.shape(scores), T::from_f64(target)));
    tape.mse_loss(scores, t)
}

/// Least-squares discriminator loss `½·mean((real−1)²) + ½·mean(fake²)`.
pub fn discriminator_loss<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let (rs, fs) = (tape.shape(real), tape.shape(fake));
    if rs != fs {
        return Err(Error::shape("adversarial loss", format!("real scores {rs} vs fake scores {fs}")));
    }
    let r = mean_sq_offset(tape, real, 1.0)?;
    let f = mean_sq_offset(tape, fake, 0.0)?;
    let half = T::from_f64(0.5);
    let r = tape.affine(r, half, T::zero());
    tape.add_scaled(r, f, half)
}

/// Least-squares generator loss `mean((fake−1)²)`.
pub fn generator_adv_loss<T: Scalar>(tape: &mut Tape<T>, fake: Var) -> Result<Var> {
    mean_sq_offset(tape, fake, 1.0)
}

/// Both least-squares objectives on one pair of score maps.
pub fn adversarial_losses<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<(Var, Var)> {
    let d = discriminator_loss(tape, real, fake)?;
    let g = generator_adv_loss(tape, fake)?;
    Ok((d, g))
}
