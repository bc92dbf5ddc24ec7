//! Central finite-difference gradient checking.
//!
//! The analytic side runs the graph once with `backward`; the numeric side
//! only ever evaluates forward values, so the two routes share nothing but
//! the forward definition.
//!
//! A stencil point on the far side of a ReLU-type kink measures a different
//! smooth piece than the one the gradient belongs to. Such points are
//! detected through [`Tape::branch_signature`]; the coordinate then falls
//! back to a second-order one-sided difference (steps `eps` and `2·eps`) on
//! the unbroken side, or is skipped when no such side exists.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const DEFAULT_EPS: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub coords_per_tensor: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: DEFAULT_EPS,
            coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub coords: usize,
    /// Coordinates compared with a one-sided difference.
    pub one_sided: usize,
    /// Coordinates whose stencil crossed a kink on both sides.
    pub skipped: usize,
    /// Per-tensor largest relative error, in name order.
    pub per_tensor: Vec<(String, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

impl GradCheck {
    pub fn with_coords(mut self, n: usize) -> Self {
        self.coords_per_tensor = Some(n);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Compares `backward` against central differences for every tensor
    /// in `params`. `f` must build a scalar from the bound parameters.
    pub fn run<F>(&self, params: &ParamStore<f64>, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let root = f(&mut tape, &bound)?;
        tape.backward(root)?;
        let analytic: Vec<(String, Tensor<f64>)> = params
            .names()
            .map(|n| {
                let g = tape.grad(bound.get(n)?).cloned().expect("leaf gradient");
                Ok((n.to_string(), g))
            })
            .collect::<Result<_>>()?;
        drop(tape);

        let eval = |p: &ParamStore<f64>| -> Result<(f64, u64)> {
            let mut t = Tape::new();
            let b = p.bind(&mut t, false);
            let r = f(&mut t, &b)?;
            Ok((t.value(r).item(), t.branch_signature()))
        };
        let (center, base) = eval(params)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work = params.clone();
        let mut report = GradCheckReport::default();
        for (name, grad) in &analytic {
            let len = grad.len();
            let idx: Vec<usize> = match self.coords_per_tensor {
                Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
                _ => (0..len).collect(),
            };
            let mut worst_here = 0.0f64;
            for i in idx {
                let orig = work.get(name)?.data()[i];
                work.get_mut(name)?.data_mut()[i] = orig + self.eps;
                let (up, up_sig) = eval(&work)?;
                work.get_mut(name)?.data_mut()[i] = orig - self.eps;
                let (down, down_sig) = eval(&work)?;
                work.get_mut(name)?.data_mut()[i] = orig;
                let numeric = match (up_sig == base, down_sig == base) {
                    (true, true) => (up - down) / (2.0 * self.eps),
                    (false, false) => {
                        report.skipped += 1;
                        continue;
                    }
                    (smooth_up, _) => {
                        // Second-order one-sided stencil on the unbroken side.
                        let dir = if smooth_up { 1.0 } else { -1.0 };
                        let near = if smooth_up { up } else { down };
                        work.get_mut(name)?.data_mut()[i] = orig + 2.0 * dir * self.eps;
                        let (far, far_sig) = eval(&work)?;
                        work.get_mut(name)?.data_mut()[i] = orig;
                        if far_sig != base {
                            report.skipped += 1;
                            continue;
                        }
                        report.one_sided += 1;
                        dir * (4.0 * near - 3.0 * center - far) / (2.0 * self.eps)
                    }
                };
                let a = grad.data()[i];
                let rel = relative_error(a, numeric);
                report.coords += 1;
                worst_here = worst_here.max(rel);
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = rel.max(report.max_rel_err);
                    report.worst = Some(Mismatch {
                        name: name.clone(),
                        index: i,
                        analytic: a,
                        numeric,
                        rel_err: rel,
                    });
                }
            }
            report.per_tensor.push((name.clone(), worst_here));
        }
        Ok(report)
    }
}

impl core::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "{} coords ({} one-sided, {} skipped), max rel err {:.3e}",
            self.coords, self.one_sided, self.skipped, self.max_rel_err
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                w.name, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// `sum(x * r)` for a fixed random `r`, which turns any tensor output into a
/// scalar whose gradient with respect to `x` is `r`.
pub fn random_projection(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a0d);
    let r = Tensor::randn(tape.shape(x), 0.0, 1.0, &mut rng);
    let r = tape.constant(r);
    let prod = tape.mul(x, r)?;
    Ok(tape.sum(prod))
}

/// Describes a report for assertion messages.
pub fn describe(label: &str, report: &GradCheckReport) -> String {
    format!("{label}: {report}")
}
