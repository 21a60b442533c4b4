//! Parameter and FLOP breakdown of the reference network and the path
//! variants of the block ablation.
//!
//!     cargo run --example cost_report

use minet::model::{Minet, ModelConfig};
use minet::nn::BlockKind::{Basic, Mobile};

fn main() -> minet::Result<()> {
    let model = Minet::build(&ModelConfig::new(19), 0)?;
    for (h, w) in [(64, 2048), (64, 1024), (64, 512)] {
        let r = model.cost_report(h, w);
        println!("{h}x{w}");
        for m in &r.modules {
            let tag = if m.training_only { " (training only)" } else { "" };
            println!(
                "  {:<14} {:>9} params {:>8.3} GFLOP{tag}",
                m.module,
                m.cost.params,
                m.cost.flops() as f64 / 1e9
            );
        }
        println!(
            "  {:<14} {:>9} params {:>8.3} GFLOP",
            "total",
            r.params(),
            r.inference_flops() as f64 / 1e9
        );
    }

    println!("\npath variants at 64x2048");
    let variants = [
        ((Mobile, 3), (Mobile, 5), (Basic, 3)),
        ((Mobile, 5), (Mobile, 5), (Basic, 3)),
        ((Mobile, 7), (Mobile, 5), (Basic, 3)),
        ((Mobile, 9), (Mobile, 5), (Basic, 3)),
        ((Mobile, 3), (Mobile, 3), (Basic, 3)),
        ((Mobile, 3), (Mobile, 7), (Basic, 3)),
        ((Mobile, 3), (Mobile, 9), (Basic, 3)),
        ((Mobile, 3), (Mobile, 5), (Basic, 5)),
        ((Mobile, 3), (Mobile, 5), (Basic, 7)),
        ((Mobile, 3), (Mobile, 5), (Basic, 9)),
        ((Mobile, 3), (Mobile, 3), (Mobile, 3)),
        ((Mobile, 5), (Mobile, 5), (Mobile, 5)),
        ((Basic, 3), (Basic, 3), (Basic, 3)),
    ];
    for (top, mid, bot) in variants {
        let cfg = ModelConfig::new(19).with_paths(top, mid, bot);
        let m = Minet::build(&cfg, 0)?;
        let r = m.cost_report(64, 2048);
        println!(
            "  {:<16} {:>5.2} M {:>6.2} GFLOP",
            cfg.describe_paths(),
            r.params() as f64 / 1e6,
            r.inference_flops() as f64 / 1e9
        );
    }
    Ok(())
}
