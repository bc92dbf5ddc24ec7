//! Physical plausibility of rendered scenes: opposite lights cast mirrored
//! shadows and warmer light is redder.

use relight_core::synth::{Direction, LightSetting, SceneSpec, TEMPERATURES};
use relight_core::Tensor;

/// Largest allowed distance, in pixels, between a shadow centroid and the
/// mirror image of the opposite light's shadow centroid.
pub const MIRROR_TOLERANCE: f64 = 2.0;

fn channel_mean(img: &Tensor<f32>, c: usize) -> f64 {
    let plane = img.shape().plane();
    img.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64
}

/// Blue-to-red ratio of the channel means.
pub fn blue_red_ratio(img: &Tensor<f32>) -> f64 {
    channel_mean(img, 2) / channel_mean(img, 0)
}

/// Checks the mirror property for every object and direction pair.
/// Returns the largest centroid mismatch seen.
pub fn check_shadow_mirror(scene: &SceneSpec) -> Result<f64, String> {
    let maps: Vec<_> = Direction::ALL.iter().map(|&d| scene.shadow_map(d)).collect();
    let mut worst: f64 = 0.0;
    for (i, d) in Direction::ALL.iter().enumerate() {
        let j = Direction::ALL.iter().position(|&o| o == d.opposite()).unwrap();
        for (k, obj) in scene.objects.iter().enumerate() {
            let (cx, cy) = obj.center;
            match (maps[i].centroid(k), maps[j].centroid(k)) {
                (Some(a), Some(b)) => {
                    let mirrored = (2.0 * cx - b.0, 2.0 * cy - b.1);
                    let dist = ((a.0 - mirrored.0).powi(2) + (a.1 - mirrored.1).powi(2)).sqrt();
                    worst = worst.max(dist);
                    if dist > MIRROR_TOLERANCE {
                        return Err(format!(
                            "scene {}: object {k} under {d} casts its shadow {dist:.2} px from the mirrored {} shadow",
                            scene.seed,
                            d.opposite()
                        ));
                    }
                }
                (None, None) => {}
                (a, b) => {
                    return Err(format!(
                        "scene {}: object {k} casts a shadow under only one of {d}/{} ({a:?} vs {b:?})",
                        scene.seed,
                        d.opposite()
                    ))
                }
            }
        }
    }
    Ok(worst)
}

/// Checks that the blue/red ratio strictly grows with temperature for every
/// direction.
pub fn check_temperature_order(scene: &SceneSpec) -> Result<(), String> {
    for d in Direction::ALL {
        let ratios: Vec<f64> = TEMPERATURES
            .iter()
            .map(|&k| blue_red_ratio(&scene.render(LightSetting::new(d, k).unwrap())))
            .collect();
        if !ratios.windows(2).all(|w| w[0] < w[1]) {
            return Err(format!("scene {}: blue/red ratios under {d} are {ratios:?}", scene.seed));
        }
    }
    Ok(())
}

pub fn opposite_lights_mirror_shadows() {
    for seed in 0..12 {
        let scene = SceneSpec::generate(seed, 64).unwrap();
        check_shadow_mirror(&scene).unwrap();
        // Every object casts some shadow at this elevation.
        for k in 0..scene.objects.len() {
            assert!(scene.shadow_map(Direction::E).centroid(k).is_some(), "seed {seed} object {k}");
        }
    }
}

pub fn warmer_light_is_redder() {
    for seed in 0..6 {
        check_temperature_order(&SceneSpec::generate(seed, 32).unwrap()).unwrap();
    }
}

pub fn shadow_free_is_never_darker() {
    for seed in 0..6 {
        let scene = SceneSpec::generate(seed, 32).unwrap();
        let free = scene.render_shadow_free();
        let neutral = Direction::ALL.map(|d| scene.render(LightSetting::new(d, 4500).unwrap()));
        let plane = free.shape().plane();
        let r = scene.resolution;
        for (d, lit) in Direction::ALL.iter().zip(&neutral) {
            let shadows = scene.shadow_map(*d);
            for py in 0..r {
                for px in 0..r {
                    if !shadows.is_shadowed(px, py) {
                        continue;
                    }
                    for c in 0..3 {
                        let i = c * plane + py * r + px;
                        assert!(free.data()[i] >= lit.data()[i], "seed {seed} {d} pixel ({px},{py})");
                    }
                }
            }
        }
    }
}

pub fn flat_scene_is_shadowless() {
    let scene = SceneSpec::flat(3, 32).unwrap();
    for d in Direction::ALL {
        assert_eq!(scene.shadow_map(d).count(), 0);
    }
    // Same light, same ground tone, same value everywhere on each tone.
    let img = scene.render(LightSetting::TARGET);
    let mut tones: Vec<[u32; 3]> = Vec::new();
    let plane = img.shape().plane();
    for p in 0..plane {
        let v = [0, 1, 2].map(|c| img.data()[c * plane + p].to_bits());
        if !tones.contains(&v) {
            tones.push(v);
        }
    }
    assert!(tones.len() <= 2, "{} distinct colors on a flat scene", tones.len());
}

pub fn scenes_are_reproducible() {
    let a = SceneSpec::generate(99, 32).unwrap();
    let b = SceneSpec::generate(99, 32).unwrap();
    assert_eq!(a, b);
    let (ra, rb) = (a.render_all(), b.render_all());
    assert_eq!(ra.len(), 40);
    assert_eq!(ra, rb);
    assert_ne!(a, SceneSpec::generate(100, 32).unwrap());
}

/// Every case above, in order.
pub const CASES: &[(&str, fn())] = &[
    ("opposite_lights_mirror_shadows", opposite_lights_mirror_shadows),
    ("warmer_light_is_redder", warmer_light_is_redder),
    ("shadow_free_is_never_darker", shadow_free_is_never_darker),
    ("flat_scene_is_shadowless", flat_scene_is_shadowless),
    ("scenes_are_reproducible", scenes_are_reproducible),
];
