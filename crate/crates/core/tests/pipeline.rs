use std::collections::BTreeSet;
use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use minet::data::synthetic::{generate_synthetic_scene, random_scene, SensorSpec};
use minet::data::{Label, Point, PointCloud, PointLabels, IGNORE};
use minet::eval::ConfusionMatrix;
use minet::postprocess::{knn_refine, KnnConfig};
use minet::projection::{project, unproject_labels, ProjectionConfig};

/// One point through the centre of every pixel.
fn pixel_centred_cloud(cfg: &ProjectionConfig, seed: u64) -> PointCloud {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    for v in 0..cfg.h {
        for u in 0..cfg.w {
            let yaw = PI * (1.0 - 2.0 * (u as f64 + 0.5) / cfg.w as f64);
            let pitch = (1.0 - (v as f64 + 0.5) / cfg.h as f64) * cfg.fov() - cfg.fov_down;
            let d = r.gen_range(2.0..30.0);
            pts.push(Point::new(
                (d * pitch.cos() * yaw.cos()) as f32,
                (d * pitch.cos() * yaw.sin()) as f32,
                (d * pitch.sin()) as f32,
                0.5,
            ));
        }
    }
    PointCloud::new(pts).unwrap()
}

#[test]
fn point_and_pixel_evaluation_agree_on_a_bijective_projection() {
    let cfg = ProjectionConfig::with_size(8, 32);
    let cloud = pixel_centred_cloud(&cfg, 1);
    let img = project(&cloud, &cfg).unwrap();
    assert_eq!(img.valid_count(), cloud.len());
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let gt = PointLabels::new((0..cloud.len()).map(|_| r.gen_range(0..4)).collect());
    let pixel_pred: Vec<Label> = (0..cfg.h * cfg.w).map(|_| r.gen_range(0..4)).collect();
    let pixel_gt = img.pixel_labels(&gt).unwrap();

    let point_pred = unproject_labels(&pixel_pred, &img).unwrap();
    let mut by_point = ConfusionMatrix::new(4);
    by_point.accumulate(gt.labels(), point_pred.labels()).unwrap();
    let mut by_pixel = ConfusionMatrix::new(4);
    by_pixel.accumulate(&pixel_gt, &pixel_pred).unwrap();
    assert_eq!(by_point, by_pixel);
    assert_eq!(by_point.miou().unwrap(), by_pixel.miou().unwrap());
}

#[test]
fn ground_truth_pixel_labels_score_high_on_points() {
    let sensor = SensorSpec::new(16, 128);
    let (cloud, labels) = generate_synthetic_scene(3, &random_scene(3, sensor)).unwrap();
    let img = project(&cloud, &ProjectionConfig::for_sensor(&sensor)).unwrap();
    let pixel = img.pixel_labels(&labels).unwrap();
    let pred = knn_refine(&cloud, &img, &pixel, &KnnConfig::default()).unwrap();
    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(labels.labels(), unproject_labels(&pixel, &img).unwrap().labels()).unwrap();
    let exact = cm.miou().unwrap().mean;
    cm = ConfusionMatrix::new(4);
    cm.accumulate(labels.labels(), pred.labels()).unwrap();
    // Points hidden behind a pixel winner inherit its label, so even ground
    // truth pixel labels are not perfect at the point level.
    assert!(exact > 0.95, "{exact}");
    assert!(cm.miou().unwrap().mean > 0.95);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn knn_output_labels_come_from_the_image(seed in 0u64..10_000, k in 1usize..10, window in 0usize..4, cutoff in 0.1f64..5.0) {
        let sensor = SensorSpec::new(16, 64);
        let cfg = ProjectionConfig::for_sensor(&sensor);
        let (cloud, _) = generate_synthetic_scene(seed, &random_scene(seed, sensor)).unwrap();
        let img = project(&cloud, &cfg).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pixel: Vec<Label> = (0..cfg.h * cfg.w).map(|_| if r.gen_bool(0.1) { IGNORE } else { r.gen_range(0..6) }).collect();
        let window = 2 * window + 1;
        let kc = KnnConfig { k: k.min(window * window), window, range_cutoff: cutoff };
        let out = knn_refine(&cloud, &img, &pixel, &kc).unwrap();
        let mut allowed: BTreeSet<Label> = pixel.iter().copied().collect();
        allowed.insert(IGNORE);
        prop_assert!(out.labels().iter().all(|l| allowed.contains(l)));
        prop_assert_eq!(&out, &knn_refine(&cloud, &img, &pixel, &kc).unwrap());
    }

    #[test]
    fn knn_is_idempotent_on_uniform_labels(seed in 0u64..10_000, label in 0u16..5) {
        let sensor = SensorSpec::new(16, 64);
        let cfg = ProjectionConfig::for_sensor(&sensor);
        let (cloud, _) = generate_synthetic_scene(seed, &random_scene(seed, sensor)).unwrap();
        let img = project(&cloud, &cfg).unwrap();
        let pixel = vec![label as Label; cfg.h * cfg.w];
        let out = knn_refine(&cloud, &img, &pixel, &KnnConfig::default()).unwrap();
        prop_assert_eq!(out, unproject_labels(&pixel, &img).unwrap());
    }
}
