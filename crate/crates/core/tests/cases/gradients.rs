//! Central finite-difference checks (f64, step 1e-4) of every tape
//! operation and every composite block, each over five seeds. Stencils that
//! cross a ReLU kink fall back to one-sided differences (see `gradcheck`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relight_core::blocks::{BlockConfig, Discriminator, DownBlock, Recalibration, ResBlocks, UpBlock};
use relight_core::gradcheck::{describe, random_projection, GradCheck};
use relight_core::net::{Rerenderer, SceneReconversion, ShadowEstimation};
use relight_core::losses::{self, LossWeights};
use relight_core::{Activation, ArchConfig, Bound, Network, Norm, ParamStore, Result, Shape, Tape, Tensor, Var};

const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];
const TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
    Tensor::rand_uniform(s, -1.0, 1.0, r)
}

/// Uniform values kept at least `gap` away from `at`, so kinks are never
/// straddled by the finite-difference step.
fn away_from(r: &mut ChaCha8Rng, s: Shape, at: f64, gap: f64) -> Tensor<f64> {
    let data = (0..s.numel())
        .map(|_| {
            let m: f64 = r.random_range(gap..1.0);
            if r.random_bool(0.5) { at + m } else { at - m }
        })
        .collect();
    Tensor::from_vec(s, data).unwrap()
}

fn store(items: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (k, v) in items {
        p.insert(k, v).unwrap();
    }
    p
}

/// Re-draws weights with fan-in scaling and biases with a small spread,
/// so signals keep a useful magnitude through deep stacks.
fn reinit(p: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed ^ 0xabc);
    for (name, t) in p.iter_mut() {
        let s = t.shape();
        let std = if name.ends_with(".bias") {
            0.1
        } else {
            1.0 / ((s.numel() / s.n) as f64).sqrt()
        };
        *t = Tensor::randn(s, 0.0, std, &mut r);
    }
}

fn run(label: &str, params: &ParamStore<f64>, coords: Option<usize>, seed: u64, f: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var>) {
    let mut gc = GradCheck::default().with_seed(seed);
    if let Some(k) = coords {
        gc = gc.with_coords(k);
    }
    let report = gc.run(params, f).unwrap();
    assert!(report.coords > 0, "{label}: nothing checked");
    assert!(
        report.skipped * 10 <= report.coords,
        "{}",
        describe(&format!("{label} seed {seed}: too many kinked stencils"), &report)
    );
    assert!(report.max_rel_err < TOL, "{}", describe(&format!("{label} seed {seed}"), &report));
}

fn projected(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    random_projection(tape, y, seed)
}

pub fn conv_and_deconv() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let p = store(vec![
            ("x", uniform(&mut r, Shape::new(2, 2, 7, 6))),
            ("w", uniform(&mut r, Shape::new(3, 2, 3, 3))),
            ("b", uniform(&mut r, Shape::new(1, 3, 1, 1))),
            ("dw", uniform(&mut r, Shape::new(2, 3, 4, 4))),
        ]);
        run("conv2d s2 p1", &p, None, seed, |t, b| {
            let y = t.conv2d(b.get("x")?, b.get("w")?, Some(b.get("b")?), 2, 1)?;
            projected(t, y, seed)
        });
        run("deconv2d s2 p1", &p, None, seed, |t, b| {
            let y = t.deconv2d(b.get("x")?, b.get("dw")?, Some(b.get("b")?), 2, 1)?;
            projected(t, y, seed)
        });
    }
}

pub fn large_kernel_conv() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let p = store(vec![
            ("x", uniform(&mut r, Shape::new(1, 2, 9, 9))),
            ("w", uniform(&mut r, Shape::new(2, 2, 13, 13))),
            ("b", uniform(&mut r, Shape::new(1, 2, 1, 1))),
        ]);
        run("conv2d k13 p6", &p, Some(60), seed, |t, b| {
            let y = t.conv2d(b.get("x")?, b.get("w")?, Some(b.get("b")?), 1, 6)?;
            projected(t, y, seed)
        });
    }
}

pub fn elementwise_and_reductions() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let s = Shape::new(2, 3, 4, 4);
        let p = store(vec![("a", uniform(&mut r, s)), ("b", uniform(&mut r, s))]);
        run("add", &p, None, seed, |t, b| {
            let y = t.add(b.get("a")?, b.get("b")?)?;
            projected(t, y, seed)
        });
        run("mul", &p, None, seed, |t, b| {
            let y = t.mul(b.get("a")?, b.get("b")?)?;
            projected(t, y, seed)
        });
        run("affine", &p, None, seed, |t, b| {
            let y = t.affine(b.get("a")?, -1.7, 0.3);
            projected(t, y, seed)
        });
        run("add_scaled", &p, None, seed, |t, b| {
            let y = t.add_scaled(b.get("a")?, b.get("b")?, 0.37)?;
            projected(t, y, seed)
        });
        run("sum", &p, None, seed, |t, b| {
            let m = t.mul(b.get("a")?, b.get("b")?)?;
            Ok(t.sum(m))
        });
        run("mean", &p, None, seed, |t, b| {
            let m = t.mul(b.get("a")?, b.get("a")?)?;
            Ok(t.mean(m))
        });
        run("mse_loss", &p, None, seed, |t, b| t.mse_loss(b.get("a")?, b.get("b")?));
        run("global_avg_pool", &p, None, seed, |t, b| {
            let y = t.global_avg_pool(b.get("a")?);
            projected(t, y, seed)
        });
        run("concat_channels", &p, None, seed, |t, b| {
            let y = t.concat_channels(&[b.get("a")?, b.get("b")?, b.get("a")?])?;
            projected(t, y, seed)
        });
    }
}

pub fn activations() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let p = store(vec![("x", away_from(&mut r, Shape::new(2, 3, 3, 3), 0.0, 0.05))]);
        for (name, kind) in [
            ("sigmoid", Activation::Sigmoid),
            ("tanh", Activation::Tanh),
            ("relu", Activation::Relu),
            ("leaky_relu", Activation::LeakyRelu(0.2)),
        ] {
            run(name, &p, None, seed, |t, b| {
                let y = t.activation(b.get("x")?, kind);
                projected(t, y, seed)
            });
        }
    }
}

pub fn kinked_losses_and_clamp() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let s = Shape::new(1, 3, 4, 4);
        let a = uniform(&mut r, s);
        let gap = away_from(&mut r, s, 0.0, 0.05);
        let b: Vec<f64> = a.data().iter().zip(gap.data()).map(|(x, g)| x + g).collect();
        let p = store(vec![
            ("a", a),
            ("b", Tensor::from_vec(s, b).unwrap()),
            ("x", away_from(&mut r, s, 0.3, 0.05)),
        ]);
        run("l1_loss", &p, None, seed, |t, b| t.l1_loss(b.get("a")?, b.get("b")?));
        run("min_const", &p, None, seed, |t, b| {
            let y = t.min_const(b.get("x")?, 0.3)?;
            projected(t, y, seed)
        });
    }
}

pub fn normalization_and_channel_scaling() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let p = store(vec![
            ("x", uniform(&mut r, Shape::new(2, 3, 4, 5))),
            ("s", uniform(&mut r, Shape::new(2, 3, 1, 1))),
        ]);
        run("instance_norm", &p, None, seed, |t, b| {
            let y = t.instance_norm(b.get("x")?, 1e-5);
            projected(t, y, seed)
        });
        run("scale_channels", &p, None, seed, |t, b| {
            let y = t.scale_channels(b.get("x")?, b.get("s")?)?;
            projected(t, y, seed)
        });
    }
}

/// Parameters of a block plus its input `x`, all re-drawn per seed.
fn block_params(seed: u64, x: Shape, register: impl Fn(&mut ParamStore<f64>, &mut ChaCha8Rng)) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut p = ParamStore::new();
    register(&mut p, &mut r);
    reinit(&mut p, seed);
    p.insert("x", uniform(&mut r, x)).unwrap();
    p
}

pub fn down_block() {
    for (i, seed) in SEEDS.into_iter().enumerate() {
        let norm = if i % 2 == 0 { Norm::Instance } else { Norm::None };
        for calibrate in [true, false] {
            let blk = DownBlock::new("d", BlockConfig::down(2, norm, calibrate).unwrap());
            let p = block_params(seed, Shape::new(1, 2, 8, 8), |p, r| blk.register(p, r).unwrap());
            run("down block", &p, Some(40), seed, |t, b| {
                let y = blk.forward(t, b, b.get("x")?)?;
                projected(t, y, seed)
            });
        }
    }
}

pub fn up_block() {
    for (i, seed) in SEEDS.into_iter().enumerate() {
        let norm = if i % 2 == 0 { Norm::Instance } else { Norm::None };
        for calibrate in [true, false] {
            let blk = UpBlock::new("u", BlockConfig::up(4, norm, calibrate).unwrap());
            let p = block_params(seed, Shape::new(1, 4, 4, 4), |p, r| blk.register(p, r).unwrap());
            run("up block", &p, Some(40), seed, |t, b| {
                let y = blk.forward(t, b, b.get("x")?)?;
                projected(t, y, seed)
            });
        }
    }
}

pub fn residual_blocks() {
    for seed in SEEDS {
        for count in [1, 2] {
            let blk = ResBlocks::new("res", 3, count, Norm::Instance);
            let p = block_params(seed, Shape::new(1, 3, 5, 5), |p, r| blk.register(p, r).unwrap());
            run("residual blocks", &p, Some(40), seed, |t, b| {
                let y = blk.forward(t, b, b.get("x")?)?;
                projected(t, y, seed)
            });
        }
    }
}

pub fn recalibration() {
    for seed in SEEDS {
        let blk = Recalibration::new("recal", 4, 2).unwrap();
        let p = block_params(seed, Shape::new(1, 4, 3, 3), |p, r| blk.register(p, r).unwrap());
        run("recalibration", &p, None, seed, |t, b| {
            let y = blk.forward(t, b, b.get("x")?)?;
            projected(t, y, seed)
        });
    }
}

pub fn discriminator() {
    for seed in SEEDS {
        let d = Discriminator::new("disc", 3, 2);
        let p = block_params(seed, Shape::new(1, 3, 16, 16), |p, r| d.register(p, r).unwrap());
        run("discriminator", &p, Some(20), seed, |t, b| {
            let y = d.forward(t, b, b.get("x")?)?;
            projected(t, y, seed)
        });
    }
}

/// Generator parameters under `prefix` at C0 = 4, 16 x 16, re-drawn.
fn subnetwork_params(arch: &ArchConfig, prefix: &str, seed: u64) -> ParamStore<f64> {
    let (g, _) = Network::new(arch).unwrap().init::<f64>(seed).unwrap();
    let mut p = ParamStore::new();
    for (k, v) in g.iter().filter(|(k, _)| k.starts_with(prefix)) {
        p.insert(k, v.clone()).unwrap();
    }
    reinit(&mut p, seed);
    p
}

fn small_arch(seed: u64) -> ArchConfig {
    let mut a = ArchConfig::with_size(4, 16);
    a.multiscale = seed % 2 == 1;
    a
}

/// Per seed; the five seeds draw independent samples, so every generator
/// tensor gets twenty coordinates across the suite.
const NET_COORDS: usize = 4;

pub fn scene_reconversion() {
    for seed in SEEDS {
        let arch = small_arch(seed);
        let net = SceneReconversion::new(&arch).unwrap();
        let p = subnetwork_params(&arch, "scene.", seed);
        let x = uniform(&mut rng(seed + 100), Shape::new(1, 3, 16, 16));
        run("scene reconversion", &p, Some(NET_COORDS), seed, |t, b| {
            let x = t.constant(x.clone());
            let tr = net.forward(t, b, x)?;
            let a = projected(t, tr.image, seed)?;
            let f = projected(t, tr.feature, seed + 1)?;
            t.add(a, f)
        });
    }
}

pub fn shadow_estimation() {
    for seed in SEEDS {
        let arch = small_arch(seed);
        let net = ShadowEstimation::new(&arch).unwrap();
        let p = subnetwork_params(&arch, "shadow.", seed);
        let x = uniform(&mut rng(seed + 200), Shape::new(1, 3, 16, 16));
        run("shadow estimation", &p, Some(NET_COORDS), seed, |t, b| {
            let x = t.constant(x.clone());
            let tr = net.forward(t, b, x)?;
            let a = projected(t, tr.image, seed)?;
            let f = projected(t, tr.feature, seed + 1)?;
            t.add(a, f)
        });
    }
}

pub fn rerenderer() {
    for seed in SEEDS {
        let arch = small_arch(seed);
        let net = Rerenderer::new(&arch).unwrap();
        let mut p = subnetwork_params(&arch, "render.", seed);
        let mut r = rng(seed + 300);
        p.insert("scene_feature", uniform(&mut r, Shape::new(1, 4, 16, 16))).unwrap();
        p.insert("shadow_feature", uniform(&mut r, Shape::new(1, 4, 16, 16))).unwrap();
        run("re-renderer", &p, Some(NET_COORDS), seed, |t, b| {
            let y = net.forward(t, b, b.get("scene_feature")?, b.get("shadow_feature")?)?;
            projected(t, y, seed)
        });
    }
}

/// The whole generator under the full training objective: reconstruction on
/// all three outputs plus both adversarial terms through narrow critics.
pub fn end_to_end_objective() {
    for seed in SEEDS {
        let mut arch = small_arch(seed);
        arch.disc_channels = 4;
        let net = Network::new(&arch).unwrap();
        let (g, d) = net.init::<f64>(seed).unwrap();
        let mut p = ParamStore::new();
        for (k, v) in g.iter().chain(d.iter()) {
            p.insert(k, v.clone()).unwrap();
        }
        reinit(&mut p, seed);
        let mut r = rng(seed + 400);
        let s = Shape::new(1, 3, 16, 16);
        let (x, target, free) = (uniform(&mut r, s), uniform(&mut r, s), uniform(&mut r, s));
        let w = LossWeights {
            adv_scene: 0.5,
            adv_shadow: 0.5,
            ..LossWeights::default()
        };
        run("end to end", &p, Some(1), seed, |t, b| {
            let x = t.constant(x.clone());
            let out = net.forward(t, b, x)?;
            let (target, free) = (t.constant(target.clone()), t.constant(free.clone()));
            let mut total = t.l1_loss(out.shadow_free, free)?;
            let l = t.l1_loss(out.relit, target)?;
            total = t.add_scaled(total, l, w.recon_shadow)?;
            let l = t.l1_loss(out.y_hat, target)?;
            total = t.add_scaled(total, l, w.recon_final)?;
            let fake = net.disc_scene.forward(t, b, out.shadow_free)?;
            let l = losses::generator_adv_loss(t, fake)?;
            total = t.add_scaled(total, l, w.adv_scene)?;
            let unit = losses::to_unit(t, out.relit);
            let dark = losses::shadow_rectify(t, unit, w.shadow_threshold)?;
            let fake = net.disc_shadow.forward(t, b, dark)?;
            let l = losses::generator_adv_loss(t, fake)?;
            t.add_scaled(total, l, w.adv_shadow)
        });
    }
}

/// Every case above, in order.
pub const CASES: &[(&str, fn())] = &[
    ("conv_and_deconv", conv_and_deconv),
    ("large_kernel_conv", large_kernel_conv),
    ("elementwise_and_reductions", elementwise_and_reductions),
    ("activations", activations),
    ("kinked_losses_and_clamp", kinked_losses_and_clamp),
    ("normalization_and_channel_scaling", normalization_and_channel_scaling),
    ("down_block", down_block),
    ("up_block", up_block),
    ("residual_blocks", residual_blocks),
    ("recalibration", recalibration),
    ("discriminator", discriminator),
    ("scene_reconversion", scene_reconversion),
    ("shadow_estimation", shadow_estimation),
    ("rerenderer", rerenderer),
    ("end_to_end_objective", end_to_end_objective),
];
