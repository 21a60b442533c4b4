//! Builds a confusion matrix from label files or a random example and prints
//! per-class IoU.
//!
//! Usage: `cargo run --example evaluate_miou -- [pred.label gt.label classes]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use minet::data::class_map::ClassMap;
use minet::data::io::read_labels;
use minet::data::{Label, IGNORE};
use minet::eval::ConfusionMatrix;

fn main() -> minet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (gt, pred, n) = if let [pred, gt, n] = args.as_slice() {
        let n: usize = n.parse().map_err(|_| minet::Error::Config {
            path: "classes".into(),
            message: format!("`{n}` is not a number"),
        })?;
        let map = ClassMap::identity(n);
        let read = |p: &String| read_labels(p.as_ref(), &map).map(|l| l.into_inner());
        (read(gt)?, read(pred)?, n)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt: Vec<Label> = (0..10_000).map(|_| if rng.gen_bool(0.05) { IGNORE } else { rng.gen_range(0..4) }).collect();
        let pred = gt.iter().map(|&g| if g == IGNORE || rng.gen_bool(0.8) { g.min(3) } else { rng.gen_range(0..4) }).collect();
        (gt, pred, 4)
    };
    let mut cm = ConfusionMatrix::new(n);
    cm.accumulate(&gt, &pred)?;
    let report = cm.miou()?;
    println!("{} labelled points", cm.total());
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("  class {c:>2}  IoU {v:.4}"),
            None => println!("  class {c:>2}  IoU undefined"),
        }
    }
    println!("mIoU {:.4} (strict {:.4})", report.mean, cm.miou_strict()?.mean);
    Ok(())
}
