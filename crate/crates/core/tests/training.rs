use minet::data::synthetic::SensorSpec;
use minet::losses::LossConfig;
use minet::model::{Minet, ModelConfig};
use minet::trainer::{synthetic_dataset, train_with, TrainConfig};

// Red at the default learning rate: with batches of two scenes the average
// ticks up in a few windows while falling overall.
#[test]
fn overfit_loss_moving_average_is_non_increasing() {
    let (dataset, _, _) = synthetic_dataset(20, 7, SensorSpec::new(16, 256)).unwrap();
    let mut model = Minet::build(&ModelConfig::new(4), 0).unwrap();
    let cfg = TrainConfig { iterations: 50, ..TrainConfig::default() };
    let mut totals = Vec::new();
    train_with(&mut model, &dataset, &LossConfig::default(), &cfg, |s| {
        let sum = s.terms.fs + s.terms.ls + s.terms.edge.unwrap_or(0.0) + s.terms.lambda * s.terms.aux_sum();
        assert!((s.total - sum).abs() < 1e-9, "iteration {}", s.iteration);
        totals.push(s.total);
    })
    .unwrap();
    let ma: Vec<f64> = totals.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, pair) in ma.windows(2).enumerate() {
        assert!(pair[1] <= pair[0], "moving average rises at window {i}: {} -> {}", pair[0], pair[1]);
    }
}
