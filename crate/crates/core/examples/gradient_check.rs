//! Compares backpropagated gradients of the combined loss with central
//! finite differences on randomly chosen parameters.
//!
//! Usage: `cargo run --release --example gradient_check -- [samples] [seed]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use minet::data::Label;
use minet::losses::{combined_loss, LossConfig, Targets};
use minet::model::{Minet, ModelConfig};
use minet::nn::{backward, Tensor};

fn main() -> minet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let samples: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (16, 64);
    let mut model = Minet::build(&ModelConfig::new(3), seed)?;
    let x = Tensor::from_fn(&[1, 5, h, w], |_| rng.gen_range(-1.0..1.0));
    let labels: Vec<Label> = (0..h * w).map(|i| ((i % w) / 16 % 3) as Label).collect();
    let targets = Targets::new(1, h, w, labels, vec![true; h * w])?;
    let cfg = LossConfig::default();
    let weights = [1.0; 3];
    let loss_at = |m: &Minet| -> minet::Result<f64> {
        let (out, _) = m.forward_train(&x)?;
        Ok(combined_loss(&out, &targets, &m.config().heads, &weights, &cfg)?.1.total())
    };

    let (out, _) = model.forward_train(&x)?;
    let (loss, _) = combined_loss(&out, &targets, &model.config().heads, &weights, &cfg)?;
    let grads = backward(&loss)?;
    drop(out);

    let ids = model.store().trainable_ids();
    let step = 1e-7;
    println!("{:<40} {:>14} {:>14} {:>10}", "parameter", "analytic", "numeric", "rel err");
    for _ in 0..samples {
        let id = ids[rng.gen_range(0..ids.len())];
        let j = rng.gen_range(0..model.store().value(id).len());
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
        let orig = model.store().value(id).data()[j];
        model.store_mut().value_mut(id).data_mut()[j] = orig + step;
        let up = loss_at(&model)?;
        model.store_mut().value_mut(id).data_mut()[j] = orig - step;
        let down = loss_at(&model)?;
        model.store_mut().value_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        let name = format!("{}[{j}]", model.store().get(id).name);
        println!("{name:<40} {analytic:>14.6e} {numeric:>14.6e} {rel:>10.2e}");
    }
    Ok(())
}
