//! Behavior of the blocks and the assembled model under hand-picked
//! parameters, plus the optimizer against a hand-written update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relight_core::blocks::{BlockConfig, Discriminator, DownBlock, Recalibration, ResBlocks, UpBlock, NORM_EPS};
use relight_core::losses::{self, LossWeights};
use relight_core::optim::{AdamConfig, AdamState};
use relight_core::train::{predict, Batch, Trainer};
use relight_core::{ArchConfig, ModelBundle, Norm, ParamStore, Shape, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fill(p: &mut ParamStore<f64>, name: &str, v: f64) {
    p.get_mut(name).unwrap().data_mut().fill(v);
}

fn scale_all(p: &mut ParamStore<f64>, k: f64) {
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= k);
    }
}

fn max_diff(tape: &Tape<f64>, a: Var, b: Var) -> f64 {
    tape.value(a).max_abs_diff(tape.value(b))
}

/// `norm(conv(scale · v))` with a named layer's weights, written out op by op.
fn remap_of(tape: &mut Tape<f64>, p: &ParamStore<f64>, layer: &str, v: Var, scale: f64, transposed: bool) -> Var {
    let w = tape.constant(p.get(&format!("{layer}.weight")).unwrap().clone());
    let s = tape.affine(v, scale, 0.0);
    let y = if transposed {
        tape.deconv2d(s, w, None, 2, 1).unwrap()
    } else {
        tape.conv2d(s, w, None, 2, 1).unwrap()
    };
    tape.instance_norm(y, NORM_EPS)
}

fn block_input(c: usize, h: usize, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(Shape::new(2, c, h, h), -1.0, 1.0, &mut rng(seed))
}

#[test]
fn neutral_gate_halves_the_high_path() {
    let down = DownBlock::new("d", BlockConfig::down(3, Norm::Instance, true).unwrap());
    let up = UpBlock::new("u", BlockConfig::up(4, Norm::Instance, true).unwrap());
    let mut p = ParamStore::<f64>::new();
    down.register(&mut p, &mut rng(1)).unwrap();
    up.register(&mut p, &mut rng(2)).unwrap();
    scale_all(&mut p, 25.0);
    for g in ["d.gate", "u.gate"] {
        fill(&mut p, &format!("{g}.weight"), 0.0);
        fill(&mut p, &format!("{g}.bias"), 0.0);
    }

    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let x = tape.constant(block_input(3, 8, 3));
    let tr = down.trace(&mut tape, &b, x).unwrap();
    assert!(tape.value(tr.weight.unwrap()).data().iter().all(|&w| w == 0.5));
    let r = remap_of(&mut tape, &p, "d.remap", tr.high, 0.5, false);
    let want = tape.add(r, tr.low).unwrap();
    assert!(max_diff(&tape, tr.output, want) < 1e-12);

    let x = tape.constant(block_input(4, 4, 4));
    let tr = up.trace(&mut tape, &b, x).unwrap();
    assert!(tape.value(tr.weight.unwrap()).data().iter().all(|&w| w == 0.5));
    let r = remap_of(&mut tape, &p, "u.remap", tr.low, 0.5, true);
    let want = tape.add(r, tr.high).unwrap();
    assert!(max_diff(&tape, tr.output, want) < 1e-12);
}

/// Distance of the down and up block outputs from their saturation limits
/// when every gate pre-activation equals `pre`.
fn gate_gaps(base: &ParamStore<f64>, down: &DownBlock, up: &UpBlock, pre: f64) -> (f64, f64) {
    let mut p = base.clone();
    for g in ["d.gate", "u.gate"] {
        fill(&mut p, &format!("{g}.weight"), 0.0);
        fill(&mut p, &format!("{g}.bias"), pre);
    }
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);

    let x = tape.constant(block_input(2, 8, 7));
    let tr = down.trace(&mut tape, &b, x).unwrap();
    let want = if pre > 0.0 {
        let r = remap_of(&mut tape, &p, "d.remap", tr.high, 1.0, false);
        tape.add(r, tr.low).unwrap()
    } else {
        tr.low
    };
    let down_gap = max_diff(&tape, tr.output, want);

    let x = tape.constant(block_input(4, 4, 8));
    let tr = up.trace(&mut tape, &b, x).unwrap();
    let want = if pre > 0.0 {
        let r = remap_of(&mut tape, &p, "u.remap", tr.low, 1.0, true);
        tape.add(r, tr.high).unwrap()
    } else {
        tr.high
    };
    (down_gap, max_diff(&tape, tr.output, want))
}

#[test]
fn saturated_gates_select_a_path() {
    let down = DownBlock::new("d", BlockConfig::down(2, Norm::Instance, true).unwrap());
    let up = UpBlock::new("u", BlockConfig::up(4, Norm::Instance, true).unwrap());
    let mut base = ParamStore::<f64>::new();
    down.register(&mut base, &mut rng(5)).unwrap();
    up.register(&mut base, &mut rng(6)).unwrap();
    scale_all(&mut base, 25.0);

    for sign in [1.0, -1.0] {
        let gaps: Vec<_> = [2.0, 5.0, 10.0, 20.0].iter().map(|&m| gate_gaps(&base, &down, &up, sign * m)).collect();
        for w in gaps.windows(2) {
            assert!(w[1].0 < w[0].0 && w[1].1 < w[0].1, "gaps do not shrink: {gaps:?}");
        }
        // The closed gate leaves sigmoid(-20)/sqrt(eps) of the gated path,
        // about 6.5e-7 per unit of feature.
        let (d, u) = gaps[3];
        assert!(d < 1e-5 && u < 1e-5, "at {}: {gaps:?}", sign * 20.0);
    }
}

#[test]
fn calibration_weights_stay_open() {
    for seed in 0..5 {
        let down = DownBlock::new("d", BlockConfig::down(3, Norm::Instance, true).unwrap());
        let mut p = ParamStore::<f64>::new();
        down.register(&mut p, &mut rng(seed)).unwrap();
        scale_all(&mut p, 100.0);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(block_input(3, 6, seed + 10));
        let w = down.trace(&mut tape, &b, x).unwrap().weight.unwrap();
        assert!(tape.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn ungated_blocks_have_no_weight() {
    let down = DownBlock::new("d", BlockConfig::down(2, Norm::None, false).unwrap());
    assert!(down.gate_layer().is_none());
    let mut p = ParamStore::<f64>::new();
    down.register(&mut p, &mut rng(1)).unwrap();
    assert!(!p.names().any(|n| n.contains("gate")));
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let x = tape.constant(block_input(2, 4, 2));
    assert!(down.trace(&mut tape, &b, x).unwrap().weight.is_none());
}

#[test]
fn odd_inputs_are_rejected() {
    let down = DownBlock::new("d", BlockConfig::down(2, Norm::None, true).unwrap());
    let mut p = ParamStore::<f64>::new();
    down.register(&mut p, &mut rng(1)).unwrap();
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 5, 6)));
    assert!(down.forward(&mut tape, &b, x).is_err());
    let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 6, 6)));
    assert!(down.forward(&mut tape, &b, x).is_err());
    assert!(BlockConfig::up(3, Norm::None, true).is_err());
}

#[test]
fn zeroed_residual_stack_is_identity() {
    for norm in [Norm::Instance, Norm::None] {
        let res = ResBlocks::new("r", 3, 4, norm);
        let mut p = ParamStore::<f64>::new();
        res.register(&mut p, &mut rng(1)).unwrap();
        scale_all(&mut p, 0.0);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = block_input(3, 5, 9);
        let v = tape.constant(x.clone());
        let y = res.forward(&mut tape, &b, v).unwrap();
        assert_eq!(tape.value(y), &x);
    }
}

#[test]
fn closed_recalibration_halves_features() {
    let recal = Recalibration::new("s", 8, 4).unwrap();
    let mut p = ParamStore::<f64>::new();
    recal.register(&mut p, &mut rng(2)).unwrap();
    scale_all(&mut p, 50.0);
    fill(&mut p, &recal.fc2().weight_name(), 0.0);
    fill(&mut p, &recal.fc2().bias_name(), 0.0);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let x = block_input(8, 3, 4);
    let v = tape.constant(x.clone());
    let (y, s) = recal.forward_with_scale(&mut tape, &b, v).unwrap();
    assert_eq!(tape.shape(s), Shape::new(2, 8, 1, 1));
    assert!(tape.value(s).data().iter().all(|&v| v == 0.5));
    assert_eq!(tape.value(y), &x.map(|v| 0.5 * v));
    assert!(Recalibration::new("s", 8, 3).is_err());
}

#[test]
fn discriminator_sees_its_input() {
    let d = Discriminator::new("d", 3, 4);
    assert_eq!(Discriminator::score_size(32), 2);
    assert_eq!(Discriminator::score_size(64), 4);
    let mut p = ParamStore::<f64>::new();
    d.register(&mut p, &mut rng(3)).unwrap();
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let x = tape.variable(block_input(3, 32, 5));
    let s = d.forward(&mut tape, &b, x).unwrap();
    assert_eq!(tape.shape(s), Shape::new(2, 1, 2, 2));
    let loss = losses::generator_adv_loss(&mut tape, s).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    assert!(g.all_finite() && g.data().iter().any(|&v| v != 0.0));

    let small = tape.constant(Tensor::zeros(Shape::new(1, 3, 8, 8)));
    assert!(d.forward(&mut tape, &b, small).is_err());
}

fn small_arch() -> ArchConfig {
    let mut a = ArchConfig::with_size(4, 32);
    a.disc_channels = 4;
    a
}

fn images(n: usize, r: usize, seed: u64) -> Tensor<f32> {
    Tensor::rand_uniform(Shape::new(n, 3, r, r), -1.0, 1.0, &mut rng(seed))
}

#[test]
fn silent_head_renders_its_bias() {
    let arch = small_arch();
    let mut bundle = ModelBundle::<f64>::new(&arch, 3).unwrap();
    let head = bundle.network().render.head().clone();
    fill(&mut bundle.generator, &head.weight_name(), 0.0);
    bundle
        .generator
        .set(&head.bias_name(), Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.3, -0.7, 0.0]).unwrap())
        .unwrap();
    let (y, _, _) = predict(&bundle, &images(2, 32, 4).cast()).unwrap();
    let plane = 32 * 32;
    for (i, &v) in y.data().iter().enumerate() {
        let want = [0.3f64.tanh(), (-0.7f64).tanh(), 0.0][(i / plane) % 3];
        assert!((v - want).abs() < 1e-15);
    }
}

#[test]
fn outputs_stay_inside_the_open_range() {
    let arch = small_arch();
    for seed in 0..3 {
        let bundle = ModelBundle::<f32>::new(&arch, seed).unwrap();
        let (y, free, relit) = predict(&bundle, &images(2, 32, seed + 20)).unwrap();
        for img in [&y, &free, &relit] {
            assert_eq!(img.shape(), Shape::new(2, 3, 32, 32));
            assert!(img.data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }
}

#[test]
fn every_parameter_learns() {
    for arch in [small_arch(), ArchConfig::desk()] {
        let r = arch.resolution;
        let bundle = ModelBundle::<f32>::new(&arch, 5).unwrap();
        let net = bundle.network();
        let mut tape = Tape::new();
        let gp = bundle.generator.bind(&mut tape, true);
        let dp = bundle.discriminators.bind(&mut tape, true);
        let x = tape.constant(images(2, r, 6));
        let target = tape.constant(images(2, r, 7));
        let out = net.forward(&mut tape, &gp, x).unwrap();
        let mut total = tape.l1_loss(out.y_hat, target).unwrap();
        for img in [out.shadow_free, out.relit] {
            let l = tape.l1_loss(img, target).unwrap();
            total = tape.add(total, l).unwrap();
        }
        let w = LossWeights::default();
        let s = net.disc_scene.forward(&mut tape, &dp, out.shadow_free).unwrap();
        let unit = losses::to_unit(&mut tape, out.relit);
        let rect = losses::shadow_rectify(&mut tape, unit, w.shadow_threshold).unwrap();
        let t = net.disc_shadow.forward(&mut tape, &dp, rect).unwrap();
        for scores in [s, t] {
            let l = losses::generator_adv_loss(&mut tape, scores).unwrap();
            total = tape.add(total, l).unwrap();
        }
        tape.backward(total).unwrap();
        for (name, v) in gp.iter().chain(dp.iter()) {
            let g = tape.grad(v).unwrap_or_else(|| panic!("{name}: no gradient"));
            assert!(g.all_finite(), "{name}");
            assert!(g.data().iter().any(|&v| v != 0.0), "{name}: zero gradient at C0={}", arch.base_channels);
        }
    }
}

#[test]
fn full_width_parameter_count_is_frozen() {
    let arch = ArchConfig::with_size(32, 64);
    let bundle = ModelBundle::<f32>::new(&arch, 0).unwrap();
    assert_eq!(arch.generator_param_count(), bundle.generator.num_scalars());
    assert_eq!(bundle.generator.num_scalars(), FROZEN_GENERATOR_PARAMS);
}

const FROZEN_GENERATOR_PARAMS: usize = 113_850_573;

#[test]
fn same_seed_same_model() {
    let arch = small_arch();
    let a = ModelBundle::<f32>::new(&arch, 9).unwrap();
    let b = ModelBundle::<f32>::new(&arch, 9).unwrap();
    assert_eq!(a.generator, b.generator);
    assert_eq!(a.discriminators, b.discriminators);
    assert_ne!(a.generator, ModelBundle::<f32>::new(&arch, 10).unwrap().generator);

    let x = images(2, 32, 1);
    let (ya, fa, ra) = predict(&a, &x).unwrap();
    let (yb, fb, rb) = predict(&b, &x).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ya), bits(&yb));
    assert_eq!(bits(&fa), bits(&fb));
    assert_eq!(bits(&ra), bits(&rb));

    let batch = Batch::new(images(2, 32, 2), images(2, 32, 3), images(2, 32, 4)).unwrap();
    let mut ta = Trainer::new(a, AdamConfig::default(), LossWeights::default()).unwrap();
    let mut tb = Trainer::new(b, AdamConfig::default(), LossWeights::default()).unwrap();
    for _ in 0..2 {
        assert_eq!(ta.step(&batch).unwrap(), tb.step(&batch).unwrap());
    }
    assert_eq!(ta.bundle.generator, tb.bundle.generator);
    assert_eq!(ta.bundle.discriminators, tb.bundle.discriminators);
    assert_eq!(ta.gen_adam, tb.gen_adam);
}

#[test]
fn adam_matches_hand_update() {
    let cfg = AdamConfig::default();
    assert_eq!((cfg.lr, cfg.beta1, cfg.beta2, cfg.eps), (2e-4, 0.5, 0.999, 1e-8));
    let cfg = AdamConfig { lr: 0.1, ..cfg };
    let grads = [[0.5, -2.0], [-0.2, -1.0], [0.1, 3.0], [0.0, 0.25]];

    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -1.0]).unwrap()).unwrap();
    let mut adam = AdamState::new(cfg);

    let (mut p, mut m, mut v) = ([1.0f64, -1.0], [0.0f64; 2], [0.0f64; 2]);
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        for i in 0..2 {
            m[i] = 0.5 * m[i] + 0.5 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let m_hat = m[i] / (1.0 - 0.5f64.powi(t));
            let v_hat = v[i] / (1.0 - 0.999f64.powi(t));
            p[i] -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        }
        store
            .set_grad("w", Tensor::from_vec(Shape::new(1, 1, 1, 2), g.to_vec()).unwrap())
            .unwrap();
        adam.step(&mut store).unwrap();
        let got = store.get("w").unwrap().data();
        for i in 0..2 {
            assert!((got[i] - p[i]).abs() < 1e-14, "step {t}: {} vs {}", got[i], p[i]);
        }
        assert!(store.grad("w").is_none());
    }
    assert_eq!(adam.step_count(), 4);
    assert!(adam.step(&mut store).is_err(), "a missing gradient is an error");
}

#[test]
fn first_adam_step_is_sign_like() {
    let one = Shape::new(1, 1, 1, 1);
    for g in [1e-3, 0.5, -40.0, 0.0] {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full(one, 2.0)).unwrap();
        store.set_grad("w", Tensor::full(one, g)).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut store).unwrap();
        let moved = 2.0 - store.get("w").unwrap().item();
        if g == 0.0 {
            assert_eq!(moved, 0.0);
        } else {
            assert!((moved - 2e-4 * g.signum()).abs() < 2e-4 * 1e-4, "g = {g}: moved {moved}");
        }
    }
}
