//! Exactly checkable formula values: the published score pairs, the dark
//! threshold, SSIM self-similarity and the PSNR closed form.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relight_core::losses::{shadow_rectify, shadow_rectify_tensor, SHADOW_THRESHOLD};
use relight_core::metrics::{mps, psnr, psnr_from_mse, ssim};
use relight_core::{Shape, Tape, Tensor};

pub fn published_score_pairs() {
    for (s, l, want) in [(0.6487, 0.3794, 0.6347), (0.6088, 0.3920, 0.6084)] {
        let got = mps(s, l).unwrap();
        assert!((got - want).abs() <= 5e-5, "mps({s}, {l}) = {got}, expected {want}");
    }
}

pub fn dark_threshold_is_exact() {
    assert_eq!(SHADOW_THRESHOLD, 15.0 / 255.0);
    assert!((SHADOW_THRESHOLD - 0.059).abs() < 5e-4);
    let t = SHADOW_THRESHOLD;
    let s = Shape::new(1, 3, 2, 2);

    let half = Tensor::<f64>::full(s, 0.5);
    assert!(shadow_rectify_tensor(&half, t).unwrap().data().iter().all(|&v| v == t));
    let black = Tensor::<f64>::zeros(s);
    assert_eq!(shadow_rectify_tensor(&black, t).unwrap(), black);

    // Just below, at and just above the threshold, through the tape.
    let below = t - 1e-12;
    let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![below, t, t + 1e-12]).unwrap();
    let mut tape = Tape::<f64>::new();
    let v = tape.variable(x);
    let y = shadow_rectify(&mut tape, v, t).unwrap();
    assert_eq!(tape.value(y).data(), &[below, t, t]);
    let total = tape.sum(y);
    tape.backward(total).unwrap();
    // The tie passes the gradient through.
    assert_eq!(tape.grad(v).unwrap().data(), &[1.0, 1.0, 0.0]);

    assert!(shadow_rectify_tensor(&half, 1.5).is_err());
    assert!(shadow_rectify_tensor(&half, -0.1).is_err());
}

pub fn ssim_of_identical_images_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (n, h, w) in [(1, 11, 11), (2, 16, 24), (1, 64, 64)] {
        let a = Tensor::<f64>::rand_uniform(Shape::new(n, 3, h, w), 0.0, 1.0, &mut rng);
        let v = ssim(&a, &a).unwrap();
        assert!((v - 1.0).abs() <= 1e-9, "ssim(a, a) = {v} at {n}x{h}x{w}");
    }
}

pub fn psnr_closed_form() {
    assert_eq!(psnr_from_mse(0.01), 20.0);
    let a = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
    let b = Tensor::<f64>::full(Shape::new(1, 3, 4, 4), 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
}

/// Every case above, in order.
pub const CASES: &[(&str, fn())] = &[
    ("published_score_pairs", published_score_pairs),
    ("dark_threshold_is_exact", dark_threshold_is_exact),
    ("ssim_of_identical_images_is_one", ssim_of_identical_images_is_one),
    ("psnr_closed_form", psnr_closed_form),
];
