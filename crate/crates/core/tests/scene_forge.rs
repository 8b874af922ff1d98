use cba_core::scene::render_original_patch_detailed;
use cba_core::{generate_scene, generate_scene_detailed, render_original_patch, Error, SceneSpec};
use proptest::prelude::*;

fn luminance(img: &cba_core::Tensor, plane: usize, i: usize) -> f64 {
    let d = img.data();
    (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0
}

#[test]
fn same_seed_same_scene() {
    let spec = SceneSpec::default();
    assert_eq!(generate_scene(17, &spec).unwrap(), generate_scene(17, &spec).unwrap());
    assert_ne!(generate_scene(17, &spec).unwrap().image, generate_scene(18, &spec).unwrap().image);
}

#[test]
fn aircraft_count_follows_spec() {
    let spec = SceneSpec { min_aircraft: 2, max_aircraft: 2, ..SceneSpec::default() };
    for seed in 0..20 {
        assert_eq!(generate_scene(seed, &spec).unwrap().targets.len(), 2);
    }
}

#[test]
fn boxes_inside_image_and_pixels_in_range() {
    let spec = SceneSpec { width: 128, height: 96, max_aircraft: 3, ..SceneSpec::default() };
    for seed in 0..30 {
        let s = generate_scene(seed, &spec).unwrap();
        assert_eq!(s.image.shape(), &[3, 96, 128]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for t in &s.targets {
            assert!(t.bbox.is_valid() && t.bbox.inside(128.0, 96.0));
        }
    }
}

#[test]
fn boxes_are_tight() {
    let spec = SceneSpec::default();
    let w = spec.width;
    for seed in 0..40 {
        let (scene, silhouettes) = generate_scene_detailed(seed, &spec).unwrap();
        for (t, sil) in scene.targets.iter().zip(&silhouettes) {
            let b = t.bbox;
            let inside = |x1: f64, y1: f64, x2: f64, y2: f64| {
                sil.iter().enumerate().filter(|&(_, &s)| s).all(|(i, _)| {
                    let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                    x > x1 && x < x2 && y > y1 && y < y2
                })
            };
            assert!(inside(b.x1, b.y1, b.x2, b.y2), "box must cover its silhouette");
            assert!(!inside(b.x1 + 3.0, b.y1, b.x2, b.y2));
            assert!(!inside(b.x1, b.y1 + 3.0, b.x2, b.y2));
            assert!(!inside(b.x1, b.y1, b.x2 - 3.0, b.y2));
            assert!(!inside(b.x1, b.y1, b.x2, b.y2 - 3.0));
        }
    }
}

#[test]
fn target_histogram_differs_from_background() {
    // two-sample chi-squared over 16 luminance bins, 500 scenes
    let spec = SceneSpec::default();
    let bins = 16;
    let (mut fg, mut bg) = (vec![0.0f64; bins], vec![0.0f64; bins]);
    for seed in 0..500 {
        let s = generate_scene(seed, &spec).unwrap();
        let (h, w) = (s.height(), s.width());
        for i in 0..h * w {
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            let bin = ((luminance(&s.image, h * w, i) * bins as f64) as usize).min(bins - 1);
            let in_box = s.targets.iter().any(|t| x > t.bbox.x1 && x < t.bbox.x2 && y > t.bbox.y1 && y < t.bbox.y2);
            if in_box {
                fg[bin] += 1.0;
            } else {
                bg[bin] += 1.0;
            }
        }
    }
    let (nf, nb): (f64, f64) = (fg.iter().sum(), bg.iter().sum());
    let (kf, kb) = ((nb / nf).sqrt(), (nf / nb).sqrt());
    let chi2: f64 = fg
        .iter()
        .zip(&bg)
        .filter(|(a, b)| **a + **b > 0.0)
        .map(|(a, b)| (kf * a - kb * b).powi(2) / (a + b))
        .sum();
    // df = 15; 0.1% critical value is about 37.7
    assert!(chi2 > 37.7, "chi2 = {chi2}");
}

#[test]
fn infeasible_spec_is_generation_error() {
    let spec = SceneSpec { min_aircraft: 4, max_aircraft: 4, min_size: 46.0, max_size: 48.0, max_retries: 20, ..SceneSpec::default() };
    assert!(matches!(generate_scene(3, &spec), Err(Error::Generation(_))));
}

#[test]
fn invalid_spec_is_config_error() {
    let spec = SceneSpec { width: 64, ..SceneSpec::default() };
    assert!(matches!(generate_scene(0, &spec), Err(Error::Config(_))));
}

#[test]
fn original_patch_contract() {
    for seed in 0..20 {
        let side = 48 + (seed as usize % 3) * 16;
        let op = render_original_patch_detailed(seed, side).unwrap();
        let plane = side * side;
        let lum = |i: usize| luminance(&op.image, plane, i);
        for corner in [0, side - 1, plane - side, plane - 1] {
            assert!(lum(corner) <= 0.05);
        }
        let centre = (side / 2) * side + side / 2;
        assert!(lum(centre) > 0.2, "seed {seed}: centre luminance {}", lum(centre));
        let frac = op.silhouette.iter().filter(|&&s| s).count() as f64 / plane as f64;
        assert!((0.4..=0.6).contains(&frac), "seed {seed}: coverage {frac}");
        assert!(op.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn original_patch_too_small_is_rejected() {
    assert!(matches!(render_original_patch(0, 31), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn original_patch_is_deterministic(seed in 0u64..1000) {
        prop_assert_eq!(render_original_patch(seed, 32).unwrap(), render_original_patch(seed, 32).unwrap());
    }
}
