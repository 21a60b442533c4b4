use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use minet::data::{Label, IGNORE};
use minet::losses::{combined_loss, weighted_ce, LossConfig, LossTerms, Targets};
use minet::model::{Heads, Minet, ModelConfig, ModelOutputs};
use minet::nn::Tensor;

fn setup(seed: u64) -> (Minet, Tensor, Targets) {
    let mut cfg = ModelConfig::new(3);
    cfg.heads = Heads::parse("top,mid,bottom,edge").unwrap();
    let m = Minet::build(&cfg, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[1, 5, 16, 64], |_| r.gen_range(-1.0..1.0));
    let labels: Vec<Label> = (0..16 * 64).map(|i| if i % 13 == 0 { IGNORE } else { ((i % 64) / 20 % 3) as Label }).collect();
    let valid = labels.iter().map(|&l| l != IGNORE).collect();
    (m, x, Targets::new(1, 16, 64, labels, valid).unwrap())
}

#[test]
fn disabling_a_head_removes_exactly_its_term() {
    let (m, x, t) = setup(1);
    let cfg = LossConfig::default();
    let w = [0.8, 1.0, 1.2];
    let (out, _) = m.forward_train(&x).unwrap();
    let all = m.config().heads;
    let (_, full) = combined_loss(&out, &t, &all, &w, &cfg).unwrap();
    let aux = |t: &LossTerms, f: fn(&LossTerms) -> Option<f64>| f(t).unwrap();

    let mut o = out.clone();
    o.edge_prob = None;
    let (_, terms) = combined_loss(&o, &t, &Heads { edge: false, ..all }, &w, &cfg).unwrap();
    assert!((full.total() - terms.total() - full.edge.unwrap()).abs() < 1e-12);

    type Case = (fn(&mut ModelOutputs), Heads, fn(&LossTerms) -> Option<f64>);
    let cases: [Case; 3] = [
        (|o| o.aux_top = None, Heads { top: false, ..all }, |t| t.aux_top),
        (|o| o.aux_mid = None, Heads { middle: false, ..all }, |t| t.aux_mid),
        (|o| o.aux_bottom = None, Heads { bottom: false, ..all }, |t| t.aux_bottom),
    ];
    for (drop, heads, term) in cases {
        let mut o = out.clone();
        drop(&mut o);
        let (_, terms) = combined_loss(&o, &t, &heads, &w, &cfg).unwrap();
        assert!((full.total() - terms.total() - cfg.lambda * aux(&full, term)).abs() < 1e-12);
        assert_eq!(terms.fs, full.fs);
        assert_eq!(terms.ls, full.ls);
    }
}

#[test]
fn head_flag_mismatch_names_the_head() {
    let (m, x, t) = setup(2);
    let (mut out, _) = m.forward_train(&x).unwrap();
    out.aux_mid = None;
    let err = combined_loss(&out, &t, &m.config().heads, &[1.0; 3], &LossConfig::default()).unwrap_err();
    assert!(err.to_string().contains("model.heads.middle"), "{err}");
}

#[test]
fn lambda_zero_drops_aux_from_total() {
    let (m, x, t) = setup(3);
    let (out, _) = m.forward_train(&x).unwrap();
    let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
    let (var, terms) = combined_loss(&out, &t, &m.config().heads, &[1.0; 3], &cfg).unwrap();
    assert!((var.value().data()[0] - terms.main()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn ce_scales_with_weights(seed in 0u64..1000, scale in 0.1f64..10.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[2, 4, 3, 5], |_| r.gen_range(-3.0..3.0));
        let labels: Vec<Label> = (0..30).map(|_| if r.gen_bool(0.1) { IGNORE } else { r.gen_range(0..4) }).collect();
        prop_assume!(labels.iter().any(|&l| l != IGNORE));
        let w: Vec<f64> = (0..4).map(|_| r.gen_range(0.2..3.0)).collect();
        let ws: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let (a, ga) = weighted_ce(&logits, &labels, &w, 1e-7).unwrap();
        let (b, gb) = weighted_ce(&logits, &labels, &ws, 1e-7).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((b - scale * a).abs() <= 1e-10 * b.abs().max(1.0));
        for (x, y) in ga.data().iter().zip(gb.data()) {
            prop_assert!((y - scale * x).abs() <= 1e-10 * y.abs().max(1e-3));
        }
    }
}
