//! Trains the same model with and without booster supervision over several
//! seeds and compares final training loss and mIoU.
//!
//! Usage: `cargo run --release --example booster_ablation -- [seeds] [iterations] [batch] [lr]`

use minet::data::synthetic::SensorSpec;
use minet::losses::LossConfig;
use minet::model::{Minet, ModelConfig};
use minet::trainer::{synthetic_dataset, train, TrainConfig};

fn main() -> minet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let seeds = arg(0, 3.0) as u64;
    let cfg = TrainConfig {
        iterations: arg(1, 200.0) as usize,
        batch_size: arg(2, 2.0) as usize,
        learning_rate: arg(3, 0.05),
        ..TrainConfig::default()
    };
    let (dataset, _, _) = synthetic_dataset(20, 7, SensorSpec::new(16, 256))?;
    println!("seed  loss(λ=0.1)  loss(λ=0)  mIoU(λ=0.1)  mIoU(λ=0)");
    let mut wins = 0;
    for seed in 0..seeds {
        let run = |lambda: f64| {
            let mut model = Minet::build(&ModelConfig::new(4), seed)?;
            let loss = LossConfig { lambda, ..LossConfig::default() };
            train(&mut model, &dataset, &loss, &TrainConfig { seed, ..cfg.clone() })
        };
        let (b, p) = (run(0.1)?, run(0.0)?);
        let (lb, lp) = (b.final_terms.main(), p.final_terms.main());
        wins += usize::from(lb <= lp);
        println!("{seed:>4}  {lb:>11.4}  {lp:>9.4}  {:>11.4}  {:>9.4}", b.final_miou, p.final_miou);
    }
    println!("booster loss no higher in {wins} of {seeds} seeds");
    Ok(())
}
