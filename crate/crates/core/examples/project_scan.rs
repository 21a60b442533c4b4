//! Projects synthetic scans to range images, reports channel statistics and
//! writes the depth channel of the first scan as a PGM.
//!
//! Usage: `cargo run --example project_scan -- [beams] [steps] [scenes] [out.pgm]`

use minet::data::synthetic::SensorSpec;
use minet::projection::{channel_stats, depth_pgm, project, ProjectionConfig};
use minet::trainer::synthetic_scans;

fn main() -> minet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let sensor = SensorSpec::new(arg(0, 16), arg(1, 256));
    let scenes = arg(2, 20);
    let out = args.get(3).map_or("depth.pgm", String::as_str);

    let cfg = ProjectionConfig::for_sensor(&sensor);
    let scans = synthetic_scans(scenes, 0, sensor)?;
    let images = scans
        .iter()
        .map(|(cloud, _)| project(cloud, &cfg))
        .collect::<minet::Result<Vec<_>>>()?;
    for (i, img) in images.iter().enumerate().take(3) {
        println!(
            "scan {i}: {} points, {} of {} pixels valid",
            img.num_points(),
            img.valid_count(),
            img.height() * img.width()
        );
    }
    let (mean, std) = channel_stats(&images)?;
    let fmt = |v: [f64; 5]| v.map(|x| format!("{x:.4}")).join(", ");
    println!("channel_mean = [{}]", fmt(mean));
    println!("channel_std = [{}]", fmt(std));
    minet::data::io::write_atomic(std::path::Path::new(out), &depth_pgm(&images[0]))?;
    println!("wrote {out}");
    Ok(())
}
