use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn noise_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn vacuous_overlap_accepts_first_draw() {
    let cfg = SamplerConfig { min_overlap_side: 0.0, ..SamplerConfig::desk() };
    for seed in 0..2_000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = sample_view_pair(&mut rng, 200, 200, &cfg).unwrap();
        assert_eq!(pair.attempts, 1);
    }
}

#[test]
fn view_pairs_satisfy_overlap_constraint() {
    let cfg = SamplerConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let (w, h) = (rng.random_range(64..400), rng.random_range(64..400));
        let pair = sample_view_pair(&mut rng, w, h, &cfg).unwrap();
        let ov = overlap_in_view(&pair.key, &pair.query).unwrap();
        assert!(ov.width() >= cfg.min_overlap_side && ov.height() >= cfg.min_overlap_side);
        for t in [pair.query, pair.key] {
            let s = t.source_rect;
            assert!(s.x1 >= 0.0 && s.y1 >= 0.0 && s.x2 <= w as f64 + 1e-9 && s.y2 <= h as f64 + 1e-9);
        }
    }
}

#[test]
fn crop_area_bounds_on_small_image() {
    let cfg = SamplerConfig { min_overlap_side: 0.0, ..SamplerConfig::desk() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let total = 64.0 * 64.0;
    let (mut lo, mut hi) = (f64::MAX, 0.0f64);
    for _ in 0..10_000 {
        let t = random_resized_crop(&mut rng, 64, 64, &cfg);
        let a = t.source_rect.area();
        lo = lo.min(a);
        hi = hi.max(a);
        assert!(a >= 0.2 * total * (1.0 - 1e-12) && a <= total * (1.0 + 1e-12));
    }
    // ~28.6 px square equivalent at the low end, the full image at the top
    assert!(lo < 0.21 * total, "smallest crop {lo}");
    assert!(hi > 0.98 * total, "largest crop {hi}");
}

#[test]
fn region_samples_hold_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for cfg in [SamplerConfig::desk(), SamplerConfig::default()] {
        for _ in 0..2_000 {
            let (w, h) = (rng.random_range(96..640), rng.random_range(96..640));
            let pair = sample_view_pair(&mut rng, w, h, &cfg).unwrap();
            let r = sample_region_boxes(&mut rng, &pair.query, &pair.key, &cfg).unwrap();
            assert_eq!(r.neg_boxes.len(), cfg.num_neg_boxes);
            assert!(r.violations(&cfg).is_empty(), "{:?}", r.violations(&cfg));
        }
    }
}

#[test]
fn tiny_overlap_is_rejected() {
    let cfg = SamplerConfig::desk();
    let q = ViewTransform::new(BBox::from_xywh(0.0, 0.0, 100.0, 100.0), 96, 96, false);
    let k = ViewTransform::new(BBox::from_xywh(95.0, 0.0, 100.0, 100.0), 96, 96, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = sample_region_boxes(&mut rng, &q, &k, &cfg).unwrap_err();
    assert!(matches!(err, Error::SamplingExhausted { .. }));
}

#[test]
fn vacuous_negative_constraint() {
    // Every candidate equals the positive box, so only a vacuous bound passes.
    let t = ViewTransform::new(BBox::from_xywh(0.0, 0.0, 96.0, 96.0), 96, 96, false);
    let cfg = SamplerConfig { box_size_range: [96.0, 96.0], neg_iou_max: 1.0, ..SamplerConfig::desk() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = sample_region_boxes(&mut rng, &t, &t, &cfg).unwrap();
    assert!(r.neg_boxes.iter().all(|b| iou(b, &r.pos_box) == 1.0));
    let strict = SamplerConfig { neg_iou_max: 0.99, ..cfg };
    assert!(sample_region_boxes(&mut rng, &t, &t, &strict).is_err());
}

#[test]
fn mask_examples() {
    let ones = Tensor::<f64>::full(&[1, 4, 4], 1.0);
    let m = apply_mask(&ones, &BBox::from_xywh(0.0, 0.0, 2.0, 2.0)).unwrap();
    let expect = [0., 0., 1., 1., 0., 0., 1., 1., 1., 1., 1., 1., 1., 1., 1., 1.];
    assert_eq!(m.data(), &expect);
    let full = apply_mask(&Tensor::<f64>::full(&[3, 5, 7], 2.0), &BBox::from_xywh(0.0, 0.0, 7.0, 5.0)).unwrap();
    assert!(full.data().iter().all(|&v| v == 0.0));
}

#[test]
fn mask_conserves_unmasked_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let t = Tensor::<f64>::from_fn(&[2, h, w], |_| rng.random_range(-1.0..1.0));
        let b = BBox::from_xywh(
            rng.random_range(-3.0..w as f64),
            rng.random_range(-3.0..h as f64),
            rng.random_range(0.1..10.0),
            rng.random_range(0.1..10.0),
        );
        let m = apply_mask(&t, &b).unwrap();
        let mut inside = 0.0;
        for c in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                    let v = t.data()[(c * h + i) * w + j];
                    let mv = m.data()[(c * h + i) * w + j];
                    if x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2 {
                        inside += v;
                        assert_eq!(mv, 0.0);
                    } else {
                        assert_eq!(mv.to_bits(), v.to_bits());
                    }
                }
            }
        }
        let lhs: f64 = m.data().iter().sum();
        let rhs: f64 = t.data().iter().sum::<f64>() - inside;
        assert!((lhs - rhs).abs() < 1e-9);
    }
}

fn images(seed: u64, n: usize) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| noise_image(&mut rng, 120, 100)).collect()
}

#[test]
fn batches_are_deterministic() {
    let imgs = images(1, 3);
    let refs: Vec<&Image> = imgs.iter().collect();
    let cfg = SamplerConfig::desk();
    let a: PretrainBatch<f32> = build_batch(&refs, &mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
    let b: PretrainBatch<f32> = build_batch(&refs, &mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
    assert_eq!(a, b);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.queries), bits(&b.queries));
}

fn zero_pixels_in(t: &Tensor<f32>, item: usize, v: usize, b: &BBox) -> (usize, usize) {
    let data = t.item(item);
    let (mut zero, mut total) = (0, 0);
    for i in covered_range(b.y1, b.y2, v) {
        for j in covered_range(b.x1, b.x2, v) {
            total += 1;
            zero += (0..3).all(|c| data[(c * v + i) * v + j] == 0.0) as usize;
        }
    }
    (zero, total)
}

#[test]
fn masked_region_is_exactly_zero() {
    let imgs = images(2, 4);
    let refs: Vec<&Image> = imgs.iter().collect();
    let cfg = SamplerConfig::desk();
    let batch: PretrainBatch<f32> = build_batch(&refs, &mut ChaCha8Rng::seed_from_u64(4), &cfg).unwrap();
    for (n, s) in batch.samples.iter().enumerate() {
        let (zero, total) = zero_pixels_in(&batch.queries, n, cfg.view_size, &s.masked_box);
        assert!(total > 0);
        assert_eq!(zero, total);
        let (kz, _) = zero_pixels_in(&batch.keys, n, cfg.view_size, &s.pos_box);
        assert_eq!(kz, 0, "key view must not be masked");
    }
}

#[test]
fn disabled_mask_leaves_query_intact() {
    let imgs = images(3, 4);
    let refs: Vec<&Image> = imgs.iter().collect();
    let cfg = SamplerConfig { mask_enabled: false, ..SamplerConfig::desk() };
    let batch: PretrainBatch<f32> = build_batch(&refs, &mut ChaCha8Rng::seed_from_u64(4), &cfg).unwrap();
    for (n, s) in batch.samples.iter().enumerate() {
        let (zero, _) = zero_pixels_in(&batch.queries, n, cfg.view_size, &s.masked_box);
        assert_eq!(zero, 0);
    }
}

#[test]
fn full_scale_batch_shapes() {
    let imgs = vec![Image::filled(320, 280, [0.3, 0.5, 0.7]), Image::filled(256, 256, [0.9, 0.1, 0.2])];
    let refs: Vec<&Image> = imgs.iter().collect();
    let cfg = SamplerConfig::default();
    let batch: PretrainBatch<f32> = build_batch(&refs, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
    assert_eq!(batch.queries.shape(), &[2, 3, 224, 224]);
    assert_eq!(batch.keys.shape(), &[2, 3, 224, 224]);
    assert_eq!(batch.key_boxes().shape(), &[2, 17, 4]);
}

#[test]
fn hopeless_images_are_skipped() {
    let cfg = SamplerConfig { min_overlap_side: 1000.0, max_attempts: 3, image_retries: 2, ..SamplerConfig::desk() };
    let imgs = images(4, 2);
    let refs: Vec<&Image> = imgs.iter().collect();
    let batch: PretrainBatch<f32> = build_batch(&refs, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
    assert_eq!(batch.skipped, 2);
    assert!(batch.is_empty());
}

#[test]
fn blur_preserves_constant_images() {
    let mut img = Image::filled(9, 7, [0.25, 0.5, 0.75]);
    augment::gaussian_blur(&mut img, 1.5);
    for px in img.data().chunks_exact(3) {
        assert!((px[0] - 0.25).abs() < 1e-6 && (px[1] - 0.5).abs() < 1e-6 && (px[2] - 0.75).abs() < 1e-6);
    }
}

#[test]
fn view_rendering_follows_flip() {
    // Left half black, right half white; a flipped full view swaps them.
    let mut data = Vec::new();
    for _ in 0..8 {
        for j in 0..8 {
            let v = if j < 4 { 0.0 } else { 1.0 };
            data.extend_from_slice(&[v, v, v]);
        }
    }
    let img = Image::new(8, 8, data).unwrap();
    let t = ViewTransform::new(BBox::from_xywh(0.0, 0.0, 8.0, 8.0), 8, 8, true);
    let v = img.render_view(&t);
    assert_eq!(v.pixel(0, 0), [1.0; 3]);
    assert_eq!(v.pixel(7, 0), [0.0; 3]);
}
