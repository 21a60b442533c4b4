//! Overfits the reference network on a handful of synthetic scenes.
//!
//! Usage: `cargo run --release --example train_synthetic -- [iterations] [lambda] [scenes]`

use std::time::Instant;

use minet::data::synthetic::SensorSpec;
use minet::losses::LossConfig;
use minet::model::{Minet, ModelConfig};
use minet::trainer::{synthetic_dataset, train_with, TrainConfig};

fn main() -> minet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let iterations = arg(0, 200.0) as usize;
    let lambda = arg(1, 0.1);
    let scenes = arg(2, 20.0) as usize;

    let (dataset, _, _) = synthetic_dataset(scenes, 7, SensorSpec::new(16, 256))?;
    let mut model = Minet::build(&ModelConfig::new(4), 0)?;
    let loss = LossConfig { lambda, ..LossConfig::default() };
    let cfg = TrainConfig { iterations, ..TrainConfig::default() };
    println!("{} scenes, {} parameters, λ = {lambda}", dataset.len(), model.count_params());

    let start = Instant::now();
    let history = train_with(&mut model, &dataset, &loss, &cfg, |s| {
        if s.iteration % 10 == 0 || s.batch_miou.is_some() {
            let miou = s.batch_miou.map_or(String::new(), |m| format!("  batch mIoU {m:.3}"));
            println!(
                "{:>4}  total {:.4}  fs {:.4}  ls {:.4}  edge {:.4}{miou}",
                s.iteration,
                s.total,
                s.terms.fs,
                s.terms.ls,
                s.terms.edge.unwrap_or(0.0),
            );
        }
    })?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    println!("final training mIoU {:.4}", history.final_miou);
    println!("final training loss (fs + ls + edge) {:.4}", history.final_terms.main());
    Ok(())
}
