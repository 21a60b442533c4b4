//! Corrupts pixel labels of a synthetic scan and shows how k-NN refinement
//! recovers point labels compared with plain unprojection.
//!
//! Usage: `cargo run --example knn_refine -- [noise] [k] [window] [cutoff]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use minet::data::synthetic::{generate_synthetic_scene, random_scene, SensorSpec};
use minet::eval::miou;
use minet::postprocess::{knn_refine, KnnConfig};
use minet::projection::{project, unproject_labels, ProjectionConfig};

fn main() -> minet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let noise = arg(0, 0.2);
    let cfg = KnnConfig {
        k: arg(1, 7.0) as usize,
        window: arg(2, 7.0) as usize,
        range_cutoff: arg(3, 1.0),
    };
    let sensor = SensorSpec::new(32, 512);
    let pcfg = ProjectionConfig::for_sensor(&sensor);
    let (cloud, gt) = generate_synthetic_scene(1, &random_scene(1, sensor))?;
    let img = project(&cloud, &pcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pixel: Vec<_> = img
        .pixel_labels(&gt)?
        .into_iter()
        .map(|l| if rng.gen_bool(noise) { rng.gen_range(0..4) } else { l })
        .collect();

    let plain = unproject_labels(&pixel, &img)?;
    let refined = knn_refine(&cloud, &img, &pixel, &cfg)?;
    let changed = plain.labels().iter().zip(refined.labels()).filter(|(a, b)| a != b).count();
    println!("{} points, {} pixels valid, pixel noise {noise}", cloud.len(), img.valid_count());
    println!("{cfg:?}");
    println!("unprojection mIoU  {:.4}", miou(gt.labels(), plain.labels(), 4)?.mean);
    println!("k-NN refined mIoU  {:.4}", miou(gt.labels(), refined.labels(), 4)?.mean);
    println!("{changed} point labels changed by refinement");
    Ok(())
}
