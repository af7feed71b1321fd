use attfd::saliency::{bms_saliency, oracle_saliency, BmsConfig, SaliencyMap};
use attfd::synthdata::{generate_scene, SceneConfig};
use attfd::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Tensor {
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data.push(f(c, y, x));
            }
        }
    }
    Tensor::new(vec![3, h, w], data).unwrap()
}

fn flip(t: &Tensor) -> Tensor {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    image(h, w, |c, y, x| t.at(&[c, y, w - 1 - x]))
}

fn mean_over(s: &SaliencyMap, pixels: &[(usize, usize)]) -> f64 {
    pixels.iter().map(|&(y, x)| s.get(y, x)).sum::<f64>() / pixels.len() as f64
}

#[test]
fn constant_image_has_zero_saliency() {
    for v in [0.0, 0.37, 1.0] {
        let s = bms_saliency(&image(20, 24, |_, _, _| v), &BmsConfig::default()).unwrap();
        assert!(s.values().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn interior_disk_beats_background() {
    let (h, w) = (40, 40);
    let inside = |y: usize, x: usize| (y as f64 - 20.0).powi(2) + (x as f64 - 18.0).powi(2) <= 49.0;
    let img = image(h, w, |c, y, x| if inside(y, x) { [0.9, 0.8, 0.7][c] } else { 0.1 });
    let s = bms_saliency(&img, &BmsConfig::default()).unwrap();
    // Rim spurs narrower than the opening element are removed with the
    // ground, so the comparison uses pixels whose 3x3 block is inside.
    let core = |y: usize, x: usize| (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| inside(yy, xx)));
    let mut disk = vec![];
    let mut ground = vec![];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if core(y, x) {
                disk.push(s.get(y, x));
            } else if !inside(y, x) {
                ground.push(s.get(y, x));
            }
        }
    }
    let min_disk = disk.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_ground = ground.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(disk.len() > 50);
    assert!(min_disk > max_ground, "{min_disk} <= {max_ground}");
}

#[test]
fn identical_objects_are_equally_salient() {
    let (h, w) = (48, 56);
    let in_a = |y: usize, x: usize| (8..16).contains(&y) && (10..20).contains(&x);
    let in_b = |y: usize, x: usize| (27..35).contains(&y) && (38..48).contains(&x);
    let img = image(h, w, |c, y, x| if in_a(y, x) || in_b(y, x) { [0.2, 0.9, 0.4][c] } else { 0.55 });
    let s = bms_saliency(&img, &BmsConfig::default()).unwrap();
    let a: Vec<_> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| in_a(y, x)).collect();
    let b: Vec<_> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| in_b(y, x)).collect();
    let (ma, mb) = (mean_over(&s, &a), mean_over(&s, &b));
    assert!(ma > 0.0);
    assert!((ma - mb).abs() < 1e-9);
}

#[test]
fn synthetic_scene_maps_are_valid_and_deterministic() {
    let cfg = SceneConfig::default();
    for seed in 0..5 {
        let scene = generate_scene(seed, &cfg).unwrap();
        let a = bms_saliency(&scene.image, &BmsConfig::default()).unwrap();
        let b = bms_saliency(&scene.image, &BmsConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (64, 64));
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let o = oracle_saliency(&scene, 2).unwrap();
        assert!(o.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn oracle_blur_zero_is_the_mask_union() {
    let scene = generate_scene(3, &SceneConfig::default()).unwrap();
    let s = oracle_saliency(&scene, 0).unwrap();
    for y in 0..64 {
        for x in 0..64 {
            let covered = scene.objects.iter().any(|o| o.mask.get(y, x));
            assert_eq!(s.get(y, x), if covered { 1.0 } else { 0.0 });
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn horizontal_flip_commutes(seed in any::<u64>(), h in 4usize..20, w in 4usize..20, levels in 2u32..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = image(h, w, |_, _, _| rng.gen_range(0..levels) as f64 / (levels - 1) as f64);
        let cfg = BmsConfig { thresholds_per_channel: 4, opening_radius: 1 };
        let s = bms_saliency(&img, &cfg).unwrap();
        let f = bms_saliency(&flip(&img), &cfg).unwrap();
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(s.get(y, x), f.get(y, w - 1 - x));
            }
        }
    }

    #[test]
    fn downscale_stays_in_unit_range(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..64 * 64).map(|_| rng.gen::<f64>()).collect();
        let s = SaliencyMap::new(64, 64, vals).unwrap().downscale(h, w);
        prop_assert!(s.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
