use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{BackboneSpec, ModelConfig, MphConfig};
use crate::sampling::augment::{IMAGENET_MEAN, IMAGENET_STD};
use crate::sampling::Image;

fn tiny_net(seed: u64) -> (MaskCoNet, ParamSet<f64>, ParamSet<f64>) {
    let cfg = ModelConfig {
        backbone: BackboneSpec::tiny(),
        mph: MphConfig { num_blocks: 2, zero_init_last: false },
        embed_dim: 8,
        hidden_dim: Some(8),
        ..ModelConfig::default()
    };
    MaskCoNet::build(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn norm() -> (&'static [f32; 3], &'static [f32; 3]) {
    (&IMAGENET_MEAN, &IMAGENET_STD)
}

fn vec_tensor(v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(&[v.len()], v).unwrap()
}

#[test]
fn distance_examples() {
    let v = vec_tensor(vec![0.3, -1.0, 2.0]);
    assert_eq!(feature_distance(&v, &v).unwrap(), 0.0);
    let neg = v.map(|x| -x);
    assert!((feature_distance(&v, &neg).unwrap() - 4.0).abs() < 1e-12);
    let e1 = vec_tensor(vec![1.0, 0.0]);
    let e2 = vec_tensor(vec![0.0, 3.0]);
    assert!((feature_distance(&e1, &e2).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn distance_pools_maps_before_normalizing() {
    // Channel 0 averages to 1, channel 1 to 0: the pooled vector is (1, 0).
    let a = Tensor::from_vec(&[2, 2, 1], vec![2.0, 0.0, 1.0, -1.0]).unwrap();
    let b = Tensor::from_vec(&[2, 2, 1], vec![5.0, 5.0, 0.0, 0.0]).unwrap();
    assert!(feature_distance(&a, &b).unwrap().abs() < 1e-12);
}

#[test]
fn distance_errors() {
    let z = vec_tensor(vec![0.0, 0.0]);
    let v = vec_tensor(vec![1.0, 0.0]);
    assert_eq!(feature_distance(&z, &v), Err(Error::ZeroVector));
    let w = vec_tensor(vec![1.0, 0.0, 0.0]);
    assert!(matches!(feature_distance(&v, &w), Err(Error::ShapeMismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn distance_properties(seed in any::<u64>(), c in 1usize..12, hw in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = || Tensor::from_fn(&[c, hw, hw], |_| rng.random_range(-1.0..1.0));
        let (a, b) = (map(), map());
        let (Ok(ab), Ok(ba)) = (feature_distance(&a, &b), feature_distance(&b, &a)) else {
            return Ok(());
        };
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=4.0 + 1e-12).contains(&ab));
        prop_assert!(feature_distance(&a, &a).unwrap().abs() < 1e-15);
        // Positive rescaling of one map does not move its normalized vector.
        let a2 = a.map(|x| 3.5 * x);
        prop_assert!(feature_distance(&a2, &a).unwrap() < 1e-12);
    }
}

fn textured(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn identical_crops_scan_to_zero() {
    let (net, params, stats) = tiny_net(1);
    let enc = FrozenBackbone::new(&net.backbone, &params, &stats);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images: Vec<Image> = (0..4).map(|_| textured(&mut rng, 48, 48)).collect();
    // Full-image crops of square images with no flips are identical.
    let cfg = SamplerConfig { view_size: 32, min_crop_area_frac: 1.0, crop_ratio: [1.0, 1.0], flip_prob: 0.0, ..SamplerConfig::default() };
    let report = dataset_distance_scan("toy", images.as_slice(), &enc, &cfg, &mut rng, 5).unwrap();
    assert_eq!(report.num_pairs, 5);
    assert_eq!(report.mean, 0.0);
    assert!(report.is_consistent());
}

#[test]
fn scan_is_reproducible() {
    let (net, params, stats) = tiny_net(3);
    let enc = FrozenBackbone::new(&net.backbone, &params, &stats);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images: Vec<Image> = (0..6).map(|_| textured(&mut rng, 60, 40)).collect();
    let cfg = SamplerConfig { view_size: 32, ..SamplerConfig::default() };
    let run = |seed| dataset_distance_scan("toy", images.as_slice(), &enc, &cfg, &mut ChaCha8Rng::seed_from_u64(seed), 20).unwrap();
    let (a, b) = (run(9), run(9));
    assert_eq!(a, b);
    assert!(a.is_consistent());
    assert!(a.mean > 0.0);
    assert_ne!(a.distances, run(10).distances);
}

#[test]
fn scan_rejects_empty_dataset() {
    let (net, params, stats) = tiny_net(5);
    let enc = FrozenBackbone::new(&net.backbone, &params, &stats);
    let empty: Vec<Image> = Vec::new();
    let r = dataset_distance_scan("none", empty.as_slice(), &enc, &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0), 3);
    assert_eq!(r, Err(Error::EmptyDataset));
}

fn brightness_set(rng: &mut ChaCha8Rng, n: usize) -> Vec<(Image, usize)> {
    (0..n)
        .map(|i| {
            let label = i % 2;
            let base = if label == 0 { 0.25 } else { 0.75 };
            let data = (0..40 * 40 * 3).map(|_| base + rng.random_range(-0.15..0.15)).collect();
            (Image::new(40, 40, data).unwrap(), label)
        })
        .collect()
}

fn small_probe() -> ProbeConfig {
    ProbeConfig { epochs: 30, milestones: vec![20], batch_size: 16, view_size: 32, ..ProbeConfig::default() }
}

#[test]
fn probe_separates_brightness_classes_with_random_backbone() {
    let (net, params, stats) = tiny_net(6);
    let enc = FrozenBackbone::new(&net.backbone, &params, &stats);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (train, test) = (brightness_set(&mut rng, 60), brightness_set(&mut rng, 40));
    let (p0, s0) = (params.clone(), stats.clone());
    let res = train_linear_probes(&enc, train.as_slice(), test.as_slice(), &["conv4", "conv5"], &small_probe(), norm(), &mut rng).unwrap();
    assert_eq!(params, p0);
    assert_eq!(stats, s0);
    assert_eq!(res.len(), 2);
    for r in &res {
        assert!(r.top1 >= 0.95, "{}: {}", r.layer, r.top1);
    }
}

#[test]
fn single_class_probe_is_perfect() {
    let (net, params, stats) = tiny_net(8);
    let enc = FrozenBackbone::new(&net.backbone, &params, &stats);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut set = brightness_set(&mut rng, 12);
    set.iter_mut().for_each(|p| p.1 = 0);
    let res = train_linear_probes(&enc, &set[..8], &set[8..], &["conv5"], &small_probe(), norm(), &mut rng).unwrap();
    assert_eq!(res[0].top1, 1.0);
}

#[test]
fn probe_rejects_unknown_layer_and_unlabeled_data() {
    let (net, params, stats) = tiny_net(10);
    let enc = FrozenBackbone::new(&net.backbone, &params, &stats);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let set = brightness_set(&mut rng, 4);
    let r = train_linear_probes(&enc, set.as_slice(), set.as_slice(), &["conv6"], &small_probe(), norm(), &mut rng);
    assert_eq!(r, Err(Error::LayerNotFound("conv6".into())));
    let unlabeled: Vec<Image> = set.iter().map(|p| p.0.clone()).collect();
    let r = train_linear_probes(&enc, unlabeled.as_slice(), set.as_slice(), &["conv5"], &small_probe(), norm(), &mut rng);
    assert!(matches!(r, Err(Error::Dataset(_))));
}

#[test]
fn probe_schedule_drops_tenfold() {
    let cfg = ProbeConfig::default();
    assert_eq!(cfg.lr_at(0), 0.1);
    assert!((cfg.lr_at(30) - 0.01).abs() < 1e-15);
    assert!((cfg.lr_at(89) - 0.001).abs() < 1e-15);
    assert_eq!(ProbeConfig::desk().milestones, vec![10, 20]);
}

#[test]
fn eval_transform_is_centered() {
    let t = eval_transform(128, 64, 96);
    let s = t.source_rect;
    assert!((s.width() - 56.0).abs() < 1e-12 && (s.height() - 56.0).abs() < 1e-12);
    assert!((s.x1 + s.x2 - 128.0).abs() < 1e-12 && (s.y1 + s.y2 - 64.0).abs() < 1e-12);
}

#[test]
fn zero_view_gives_zero_response_maps() {
    let (net, params, stats) = tiny_net(12);
    let view = Tensor::zeros(&[3, 64, 64]);
    let r = mph_response_maps(&net, &params, &stats, &view, response_mask_side(64)).unwrap();
    for maps in [&r.unmasked, &r.masked] {
        assert!(maps.conv5.data().iter().all(|&v| v == 0.0));
        assert!(maps.mph.data().iter().all(|&v| v == 0.0));
        assert_eq!(maps.conv5_ratio, None);
    }
}

#[test]
fn response_maps_shapes_and_mask() {
    let (net, params, stats) = tiny_net(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let view = Tensor::from_fn(&[3, 64, 64], |_| rng.random_range(-1.0..1.0));
    let r = mph_response_maps(&net, &params, &stats, &view, response_mask_side(64)).unwrap();
    assert_eq!(r.unmasked.conv5.shape(), &[64, 64]);
    assert_eq!(r.masked.mph.shape(), &[64, 64]);
    let side = r.mask.width();
    assert!((side - 64.0 * 64.0 / 224.0).abs() < 1e-12);
    assert!((r.mask.x1 + r.mask.x2 - 64.0).abs() < 1e-12);
    assert!(r.unmasked.conv5_ratio.unwrap() > 0.0);
}

#[test]
fn upsample_preserves_constants_and_ramps() {
    let c = upsample(&[2.0; 9], 3, 3, 12);
    assert!(c.iter().all(|&v| (v - 2.0).abs() < 1e-15));
    // A linear ramp in cell centers stays linear between interior centers.
    let ramp: Vec<f64> = (0..4).map(|j| j as f64).collect();
    let up = upsample(&ramp, 1, 4, 8);
    for j in 1..7 {
        let expected = ((j as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 3.0);
        assert!((up[j] - expected).abs() < 1e-12);
    }
}

#[test]
fn region_ratio_counts_pixel_centers() {
    // 4x4 map: 3 inside the central 2x2, 1 outside.
    let mut map = vec![1.0; 16];
    for (i, j) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        map[i * 4 + j] = 3.0;
    }
    let r = region_ratio(&map, 4, &center_mask_box(4, 2.0)).unwrap();
    assert!((r - 3.0).abs() < 1e-12);
    assert_eq!(region_ratio(&vec![0.0; 16], 4, &center_mask_box(4, 2.0)), None);
}
