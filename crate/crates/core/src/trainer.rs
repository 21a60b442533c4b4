//! Deterministic SGD training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synthetic::{generate_synthetic_scene, random_scene, SensorSpec};
use crate::data::{Label, PointCloud, PointLabels};
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::losses::{class_frequencies, class_weights, combined_loss, LossConfig, LossTerms, Targets};
use crate::model::Minet;
use crate::nn::{backward, Tensor};
use crate::projection::{channel_stats, normalize, project, to_network_input, ProjectionConfig, RangeImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Record batch mIoU every this many iterations; 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_size: 2,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and ≥ 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// One projected, normalized, labeled scan.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `1 × 5 × h × w`.
    pub input: Tensor,
    /// `h × w`, IGNORE at invalid pixels.
    pub labels: Vec<Label>,
    pub valid: Vec<bool>,
}

impl Sample {
    pub fn from_image(img: &RangeImage, labels: &PointLabels, cfg: &ProjectionConfig) -> Result<Self> {
        Ok(Self {
            input: to_network_input(&normalize(img, cfg))?,
            labels: img.pixel_labels(labels)?,
            valid: img.valid_mask(),
        })
    }
}

/// A point cloud with its per-point labels.
pub type Scan = (PointCloud, PointLabels);

#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<Sample>,
    h: usize,
    w: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("dataset is empty".into()))?;
        let (_, _, h, w) = first.input.dims4()?;
        for (i, s) in samples.iter().enumerate() {
            if s.input.shape() != [1, crate::projection::CHANNELS, h, w] || s.labels.len() != h * w || s.valid.len() != h * w {
                return Err(Error::shape(format!("sample {i} does not match {h}×{w}")));
            }
            if let Some(l) = s.labels.iter().find(|&&l| l != crate::data::IGNORE && l as usize >= num_classes) {
                return Err(Error::Data(format!("sample {i} has label {l} for {num_classes} classes")));
            }
        }
        Ok(Self { samples, h, w, num_classes })
    }

    /// Projects labeled scans with `cfg`.
    pub fn from_scans(scans: &[Scan], cfg: &ProjectionConfig, num_classes: usize) -> Result<Self> {
        let samples = scans
            .iter()
            .map(|(cloud, labels)| Sample::from_image(&project(cloud, cfg)?, labels, cfg))
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, num_classes)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_frequencies(&self) -> Vec<f64> {
        class_frequencies(self.samples.iter().flat_map(|s| &s.labels), self.num_classes)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Targets)> {
        let inputs: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].input).collect();
        let x = Tensor::stack(&inputs)?;
        let labels = indices.iter().flat_map(|&i| self.samples[i].labels.iter().copied()).collect();
        let valid = indices.iter().flat_map(|&i| self.samples[i].valid.iter().copied()).collect();
        Ok((x, Targets::new(indices.len(), self.h, self.w, labels, valid)?))
    }
}

/// `count` random four-class scenes seen by `sensor`; scene `i` of a seed
/// does not depend on `count`.
pub fn synthetic_scans(count: usize, seed: u64, sensor: SensorSpec) -> Result<Vec<Scan>> {
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i);
            generate_synthetic_scene(s, &random_scene(s, sensor))
        })
        .collect()
}

/// [`synthetic_scans`] projected with channel statistics measured on the
/// scenes themselves. Returns the dataset, the raw scans and the projection
/// configuration used.
pub fn synthetic_dataset(
    count: usize,
    seed: u64,
    sensor: SensorSpec,
) -> Result<(Dataset, Vec<Scan>, ProjectionConfig)> {
    let scans = synthetic_scans(count, seed, sensor)?;
    let mut cfg = ProjectionConfig::for_sensor(&sensor);
    let images = scans.iter().map(|(c, _)| project(c, &cfg)).collect::<Result<Vec<_>>>()?;
    let (mean, std) = channel_stats(&images)?;
    cfg.channel_mean = mean;
    cfg.channel_std = std;
    let samples = images
        .iter()
        .zip(&scans)
        .map(|(img, (_, labels))| Sample::from_image(img, labels, &cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset::new(samples, 4)?, scans, cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub total: f64,
    pub terms: LossTerms,
    /// mIoU of the batch's training-mode predictions, when recorded.
    pub batch_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub class_weights: Vec<f64>,
    /// Eval-mode pixel mIoU over the whole training set after training.
    pub final_miou: f64,
    /// Eval-mode loss terms over the whole training set after training.
    pub final_terms: LossTerms,
}

fn resolve_weights(dataset: &Dataset, cfg: &LossConfig) -> Result<Vec<f64>> {
    if cfg.class_weights.is_empty() {
        class_weights(&dataset.class_frequencies(), cfg.epsilon_freq, cfg.weighting)
    } else {
        Ok(cfg.class_weights.clone())
    }
}

/// Per-pixel class of `n × N × h × w` logits; the smaller id wins ties.
pub fn predict_labels(logits: &Tensor) -> Result<Vec<Label>> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for i in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * hw + i] > d[(b * c + best) * hw + i] {
                    best = k;
                }
            }
            out.push(best as Label);
        }
    }
    Ok(out)
}

/// Eval-mode mIoU and mean loss terms of `model` over `dataset`.
pub fn evaluate(model: &Minet, dataset: &Dataset, loss_cfg: &LossConfig, weights: &[f64]) -> Result<(f64, LossTerms)> {
    let mut cm = ConfusionMatrix::new(dataset.num_classes);
    let mut mean = LossTerms {
        lambda: loss_cfg.lambda,
        ..LossTerms::default()
    };
    let n = dataset.len() as f64;
    let add = |acc: &mut Option<f64>, v: Option<f64>| {
        if let Some(v) = v {
            *acc = Some(acc.unwrap_or(0.0) + v / n);
        }
    };
    for i in 0..dataset.len() {
        let (x, t) = dataset.batch(&[i])?;
        let out = model.eval_outputs(&x)?;
        cm.accumulate(&t.labels, &predict_labels(out.logits.value())?)?;
        let (_, terms) = combined_loss(&out, &t, &model.config().heads, weights, loss_cfg)?;
        mean.fs += terms.fs / n;
        mean.ls += terms.ls / n;
        add(&mut mean.edge, terms.edge);
        add(&mut mean.aux_top, terms.aux_top);
        add(&mut mean.aux_mid, terms.aux_mid);
        add(&mut mean.aux_bottom, terms.aux_bottom);
    }
    Ok((cm.miou()?.mean, mean))
}

pub fn train(model: &mut Minet, dataset: &Dataset, loss_cfg: &LossConfig, cfg: &TrainConfig) -> Result<History> {
    train_with(model, dataset, loss_cfg, cfg, |_| {})
}

/// Trains in place, calling `on_step` after every iteration. Running batch
/// norm statistics are recalibrated over the training set at the end.
pub fn train_with(
    model: &mut Minet,
    dataset: &Dataset,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<History> {
    cfg.validate()?;
    loss_cfg.validate(dataset.num_classes)?;
    if model.config().num_classes != dataset.num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!("model has {} classes, dataset {}", model.config().num_classes, dataset.num_classes),
        ));
    }
    let weights = resolve_weights(dataset, loss_cfg)?;
    let ids = model.store().trainable_ids();
    let mut velocity: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(model.store().value(id).shape())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut steps = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (x, targets) = dataset.batch(&batch)?;
        let (out, updates) = model.forward_train(&x)?;
        let (loss, terms) = combined_loss(&out, &targets, &model.config().heads, &weights, loss_cfg)?;
        for (term, v) in terms.named().into_iter().chain([("total", terms.total())]) {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term: term.into(), iteration });
            }
        }
        let batch_miou = if cfg.eval_every > 0 && (iteration + 1) % cfg.eval_every == 0 {
            let mut cm = ConfusionMatrix::new(dataset.num_classes);
            cm.accumulate(&targets.labels, &predict_labels(out.logits.value())?)?;
            cm.miou().ok().map(|r| r.mean)
        } else {
            None
        };
        let grads = backward(&loss)?;
        drop(out);
        let store = model.store_mut();
        store.apply_bn_updates(&updates, crate::nn::params::BN_MOMENTUM);
        for (&id, v) in ids.iter().zip(&mut velocity) {
            let theta = store.value_mut(id);
            let g = grads.get(id);
            for (j, (vj, t)) in v.data_mut().iter_mut().zip(theta.data_mut()).enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                *vj = cfg.momentum * *vj + gj + cfg.weight_decay * *t;
                *t -= cfg.learning_rate * *vj;
            }
        }
        let record = StepRecord {
            iteration,
            total: terms.total(),
            terms,
            batch_miou,
        };
        on_step(&record);
        steps.push(record);
    }
    if cfg.iterations > 0 {
        let inputs: Vec<Tensor> = dataset.samples.iter().map(|s| s.input.clone()).collect();
        model.recalibrate_bn(&inputs)?;
    }
    let (final_miou, final_terms) = evaluate(model, dataset, loss_cfg, &weights)?;
    Ok(History {
        steps,
        class_weights: weights,
        final_miou,
        final_terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> (Minet, Dataset) {
        let (ds, _, _) = synthetic_dataset(2, 1, SensorSpec::new(16, 256)).unwrap();
        let mut cfg = ModelConfig::new(4);
        cfg.mim.top.truncate(1);
        cfg.mim.middle.truncate(1);
        cfg.mim.bottom.truncate(1);
        (Minet::build(&cfg, 0).unwrap(), ds)
    }

    fn short() -> TrainConfig {
        TrainConfig {
            iterations: 2,
            batch_size: 1,
            eval_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let (mut m, ds) = tiny();
        let before = m.store().clone();
        let cfg = TrainConfig { learning_rate: 0.0, ..short() };
        train(&mut m, &ds, &LossConfig::default(), &cfg).unwrap();
        for id in before.trainable_ids() {
            assert_eq!(before.value(id), m.store().value(id));
        }
    }

    #[test]
    fn total_is_sum_of_terms() {
        let (mut m, ds) = tiny();
        let h = train(&mut m, &ds, &LossConfig::default(), &short()).unwrap();
        for s in &h.steps {
            let sum: f64 = s.terms.fs + s.terms.ls + s.terms.edge.unwrap_or(0.0) + s.terms.lambda * s.terms.aux_sum();
            assert!((s.total - sum).abs() < 1e-9);
            assert!(s.batch_miou.is_some());
        }
    }

    #[test]
    fn class_count_mismatch_is_a_config_error() {
        let (_, ds) = tiny();
        let mut m = Minet::build(&ModelConfig::new(3), 0).unwrap();
        assert!(matches!(
            train(&mut m, &ds, &LossConfig::default(), &short()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn invalid_train_config() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    }
}
