//! Shape and structure checks: every intermediate of the scene ladder at
//! C0 = 32, 64 x 64, the decoder/encoder round trip and the four ablation
//! variants end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relight_core::blocks::{BlockConfig, DownBlock, UpBlock};
use relight_core::net::{scene_stage_shapes, Rerenderer, SceneReconversion, ShadowEstimation};
use relight_core::{ArchConfig, ModelBundle, Norm, ParamStore, Shape, Tape, Tensor, Variant};

fn input(n: usize, r: usize, seed: u64) -> Tensor<f32> {
    Tensor::rand_uniform(Shape::new(n, 3, r, r), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn scene_ladder_shapes_at_full_width() {
    let arch = ArchConfig::with_size(32, 64);
    let net = SceneReconversion::new(&arch).unwrap();
    let (g, _) = relight_core::Network::new(&arch).unwrap().init::<f32>(1).unwrap();
    let mut tape = Tape::new();
    let p = g.bind(&mut tape, false);
    let x = tape.constant(input(1, 64, 2));
    let tr = net.forward(&mut tape, &p, x).unwrap();
    let s = |v| tape.shape(v);

    assert_eq!(s(tr.ladder.shallow), Shape::new(1, 32, 64, 64));
    let enc: Vec<_> = tr.ladder.encoder_stages.iter().map(|&v| s(v)).collect();
    assert_eq!(
        enc,
        [
            Shape::new(1, 64, 32, 32),
            Shape::new(1, 128, 16, 16),
            Shape::new(1, 256, 8, 8),
            Shape::new(1, 512, 4, 4)
        ]
    );
    assert_eq!(s(tr.ladder.encoder()), Shape::new(1, 512, 4, 4));
    assert_eq!(s(tr.ladder.residual), Shape::new(1, 512, 4, 4));
    let dec: Vec<_> = tr.ladder.decoder_stages.iter().map(|&v| s(v)).collect();
    assert_eq!(
        dec,
        [
            Shape::new(1, 256, 8, 8),
            Shape::new(1, 128, 16, 16),
            Shape::new(1, 64, 32, 32),
            Shape::new(1, 32, 64, 64)
        ]
    );
    let (want_enc, want_dec) = scene_stage_shapes(&arch, 1);
    assert_eq!(enc, want_enc);
    assert_eq!(dec, want_dec);

    assert_eq!(tr.upsampled.len(), 3);
    for &u in &tr.upsampled {
        assert_eq!(s(u), Shape::new(1, 32, 64, 64));
    }
    assert_eq!(s(tr.fused.expect("multi-scale fusion present")), Shape::new(1, 32, 64, 64));
    assert_eq!(s(tr.feature), Shape::new(1, 32, 64, 64));
    assert_eq!(s(tr.image), Shape::new(1, 3, 64, 64));
}

pub fn shadow_and_render_shapes_at_full_width() {
    let arch = ArchConfig::with_size(32, 64);
    let shadow = ShadowEstimation::new(&arch).unwrap();
    let render = Rerenderer::new(&arch).unwrap();
    let (g, _) = relight_core::Network::new(&arch).unwrap().init::<f32>(1).unwrap();
    let mut tape = Tape::new();
    let p = g.bind(&mut tape, false);
    let x = tape.constant(input(1, 64, 3));
    let tr = shadow.forward(&mut tape, &p, x).unwrap();
    assert_eq!(tape.shape(tr.feature), Shape::new(1, 32, 64, 64));
    assert_eq!(tape.shape(tr.image), Shape::new(1, 3, 64, 64));
    let y = render.forward(&mut tape, &p, tr.feature, tr.feature).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 3, 64, 64));
    assert!(g.num_scalars_with_prefix("shadow.") < g.num_scalars_with_prefix("scene."));
}

/// `up(down(x))` keeps the shape of `x` for random channel counts, sizes,
/// normalization and gating choices.
pub fn encoder_decoder_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for i in 0..20 {
        let c = rng.random_range(1..=6);
        let (h, w) = (2 * rng.random_range(1..=8), 2 * rng.random_range(1..=8));
        let n = rng.random_range(1..=2);
        let norm = if rng.random_bool(0.5) { Norm::Instance } else { Norm::None };
        let calibrate = rng.random_bool(0.7);
        let down = DownBlock::new("d", BlockConfig::down(c, norm, calibrate).unwrap());
        let up = UpBlock::new("u", BlockConfig::up(2 * c, norm, calibrate).unwrap());
        let mut p = ParamStore::<f64>::new();
        down.register(&mut p, &mut rng).unwrap();
        up.register(&mut p, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let s = Shape::new(n, c, h, w);
        let x = tape.constant(Tensor::rand_uniform(s, -1.0, 1.0, &mut rng));
        let mid = down.forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.shape(mid), Shape::new(n, 2 * c, h / 2, w / 2), "config {i}");
        let y = up.forward(&mut tape, &b, mid).unwrap();
        assert_eq!(tape.shape(y), s, "config {i}");
    }
}

/// Every ablation variant of the desk preset builds, runs forward and
/// backward, and sends a finite gradient to every generator parameter.
pub fn ablation_variants_run() {
    let full = ArchConfig::desk();
    let full_count = full.generator_param_count();
    for v in Variant::ALL {
        let arch = v.apply(&full);
        let bundle = ModelBundle::<f32>::new(&arch, 7).unwrap();
        let count = bundle.generator.num_scalars();
        assert_eq!(count, arch.generator_param_count(), "{v:?}");
        if v == Variant::Full {
            assert_eq!(count, full_count);
        } else {
            assert!(count < full_count, "{v:?} has {count} parameters, full model {full_count}");
        }

        let mut tape = Tape::new();
        let p = bundle.generator.bind(&mut tape, true);
        let x = tape.constant(input(2, arch.resolution, 5));
        let out = bundle.network().forward(&mut tape, &p, x).unwrap();
        for img in [out.y_hat, out.shadow_free, out.relit] {
            assert_eq!(tape.shape(img), Shape::new(2, 3, arch.resolution, arch.resolution));
        }
        let target = tape.constant(input(2, arch.resolution, 6));
        let a = tape.l1_loss(out.y_hat, target).unwrap();
        let b = tape.l1_loss(out.shadow_free, target).unwrap();
        let c = tape.l1_loss(out.relit, target).unwrap();
        let ab = tape.add(a, b).unwrap();
        let total = tape.add(ab, c).unwrap();
        tape.backward(total).unwrap();
        for (name, var) in p.iter() {
            let g = tape.grad(var).unwrap_or_else(|| panic!("{v:?}: no gradient for {name}"));
            assert!(g.all_finite(), "{v:?}: non-finite gradient for {name}");
        }
    }
}

/// Every case above, in order.
pub const CASES: &[(&str, fn())] = &[
    ("scene_ladder_shapes_at_full_width", scene_ladder_shapes_at_full_width),
    ("shadow_and_render_shapes_at_full_width", shadow_and_render_shapes_at_full_width),
    ("encoder_decoder_round_trip", encoder_decoder_round_trip),
    ("ablation_variants_run", ablation_variants_run),
];
