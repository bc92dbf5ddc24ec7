//! One optimization step of the full model: an optional discriminator
//! update followed by a generator update, each with its own Adam state.

use alloc::format;

use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::net::ModelBundle;
use crate::optim::{AdamConfig, AdamState};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Images of one batch, all `(n, 3, r, r)` in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
    pub shadow_free: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(input: Tensor<T>, target: Tensor<T>, shadow_free: Tensor<T>) -> Result<Self> {
        let s = input.shape();
        for (name, t) in [("target", &target), ("shadow-free", &shadow_free)] {
            if t.shape() != s {
                return Err(Error::shape("batch", format!("{name} images are {}, inputs are {s}", t.shape())));
            }
        }
        Ok(Batch {
            input,
            target,
            shadow_free,
        })
    }
}

/// Loss values of one step, in log order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l1_scene: f64,
    pub l1_shadow: f64,
    pub l1_final: f64,
    /// Weighted sum of the three reconstruction terms.
    pub l1_total: f64,
    pub g_adv_scene: f64,
    pub g_adv_shadow: f64,
    pub d_scene: f64,
    pub d_shadow: f64,
    /// Full generator objective.
    pub total: f64,
}

impl StepLosses {
    pub fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("l1_scene", self.l1_scene),
            ("l1_shadow", self.l1_shadow),
            ("l1_final", self.l1_final),
            ("l1_total", self.l1_total),
            ("g_adv_scene", self.g_adv_scene),
            ("g_adv_shadow", self.g_adv_shadow),
            ("d_scene", self.d_scene),
            ("d_shadow", self.d_shadow),
            ("total", self.total),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub bundle: ModelBundle<T>,
    pub gen_adam: AdamState<T>,
    pub disc_adam: AdamState<T>,
    pub weights: LossWeights,
}

fn finite(name: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::invalid("non-finite loss", format!("{name} = {v}")))
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(bundle: ModelBundle<T>, adam: AdamConfig, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        Ok(Trainer {
            bundle,
            gen_adam: AdamState::new(adam),
            disc_adam: AdamState::new(adam),
            weights,
        })
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.gen_adam.step_count()
    }

    pub fn step(&mut self, batch: &Batch<T>) -> Result<StepLosses> {
        let w = self.weights;
        let net = self.bundle.network().clone();
        let mut tape = Tape::new();
        let gp = self.bundle.generator.bind(&mut tape, true);
        let x = tape.constant(batch.input.clone());
        let out = net.forward(&mut tape, &gp, x)?;
        let target = tape.constant(batch.target.clone());
        let shadow_free = tape.constant(batch.shadow_free.clone());

        let l1_scene = tape.l1_loss(out.shadow_free, shadow_free)?;
        let l1_shadow = tape.l1_loss(out.relit, target)?;
        let l1_final = tape.l1_loss(out.y_hat, target)?;
        let zero = tape.constant(Tensor::scalar(T::zero()));
        let mut recon = tape.add_scaled(zero, l1_scene, T::from_f64(w.recon_scene))?;
        recon = tape.add_scaled(recon, l1_shadow, T::from_f64(w.recon_shadow))?;
        recon = tape.add_scaled(recon, l1_final, T::from_f64(w.recon_final))?;

        let mut losses = StepLosses {
            l1_scene: tape.value(l1_scene).item().as_f64(),
            l1_shadow: tape.value(l1_shadow).item().as_f64(),
            l1_final: tape.value(l1_final).item().as_f64(),
            l1_total: finite("l1_total", tape.value(recon).item().as_f64())?,
            ..Default::default()
        };

        let mut total = recon;
        if w.has_adversarial() {
            let fake_scene = tape.value(out.shadow_free).clone();
            let relit = tape.value(out.relit).clone();
            let (d_scene, d_shadow) = self.discriminator_step(batch, fake_scene, relit)?;
            losses.d_scene = d_scene;
            losses.d_shadow = d_shadow;

            let dp = self.bundle.discriminators.bind(&mut tape, false);
            let fake = net.disc_scene.forward(&mut tape, &dp, out.shadow_free)?;
            let g_scene = losses::generator_adv_loss(&mut tape, fake)?;
            let relit01 = losses::to_unit(&mut tape, out.relit);
            let rect = losses::shadow_rectify(&mut tape, relit01, w.shadow_threshold)?;
            let fake = net.disc_shadow.forward(&mut tape, &dp, rect)?;
            let g_shadow = losses::generator_adv_loss(&mut tape, fake)?;
            losses.g_adv_scene = tape.value(g_scene).item().as_f64();
            losses.g_adv_shadow = tape.value(g_shadow).item().as_f64();
            total = tape.add_scaled(total, g_scene, T::from_f64(w.adv_scene))?;
            total = tape.add_scaled(total, g_shadow, T::from_f64(w.adv_shadow))?;
        }
        losses.total = finite("total", tape.value(total).item().as_f64())?;

        tape.backward(total)?;
        self.bundle.generator.collect_grads(&tape, &gp)?;
        // Releases the tape's shared references so the update writes in place.
        drop(tape);
        self.gen_adam.step(&mut self.bundle.generator)?;
        Ok(losses)
    }

    /// Updates both discriminators on real images versus the given fakes.
    fn discriminator_step(&mut self, batch: &Batch<T>, fake_scene: Tensor<T>, relit: Tensor<T>) -> Result<(f64, f64)> {
        let net = self.bundle.network();
        let w = self.weights;
        let mut tape = Tape::new();
        let dp = self.bundle.discriminators.bind(&mut tape, true);

        let real = tape.constant(batch.shadow_free.clone());
        let fake = tape.constant(fake_scene);
        let real_s = net.disc_scene.forward(&mut tape, &dp, real)?;
        let fake_s = net.disc_scene.forward(&mut tape, &dp, fake)?;
        let d_scene = losses::discriminator_loss(&mut tape, real_s, fake_s)?;

        let rect = |tape: &mut Tape<T>, img: Tensor<T>| -> Result<Var> {
            let v = tape.constant(img);
            let v = losses::to_unit(tape, v);
            losses::shadow_rectify(tape, v, w.shadow_threshold)
        };
        let real = rect(&mut tape, batch.target.clone())?;
        let fake = rect(&mut tape, relit)?;
        let real_s = net.disc_shadow.forward(&mut tape, &dp, real)?;
        let fake_s = net.disc_shadow.forward(&mut tape, &dp, fake)?;
        let d_shadow = losses::discriminator_loss(&mut tape, real_s, fake_s)?;

        let total = tape.add(d_scene, d_shadow)?;
        let values = (
            finite("d_scene", tape.value(d_scene).item().as_f64())?,
            finite("d_shadow", tape.value(d_shadow).item().as_f64())?,
        );
        tape.backward(total)?;
        self.bundle.discriminators.collect_grads(&tape, &dp)?;
        drop(tape);
        self.disc_adam.step(&mut self.bundle.discriminators)?;
        Ok(values)
    }
}

/// Runs the generator without recording gradients and returns
/// `(y_hat, shadow_free, relit)`.
pub fn predict<T: Scalar>(bundle: &ModelBundle<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let out = bundle.forward(&mut tape, x)?;
    Ok((
        tape.value(out.y_hat).clone(),
        tape.value(out.shadow_free).clone(),
        tape.value(out.relit).clone(),
    ))
}
