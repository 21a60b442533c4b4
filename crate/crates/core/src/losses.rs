//! Booster training objective: weighted cross-entropy, semantic edge BCE,
//! Lovász-Softmax, and their combination with auxiliary path supervision.
//!
//! Every loss returns its value together with the gradient with respect to
//! its input tensor; [`combined_loss`] attaches those gradients to the graph
//! through [`Var::loss`].

use serde::{Deserialize, Serialize};

use crate::data::{Label, IGNORE};
use crate::error::{Error, Result};
use crate::model::{Heads, ModelOutputs};
use crate::nn::{Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `1 / (f + eps)`.
    #[default]
    InverseFrequency,
    /// `1 / ln(1.02 + f)`.
    InverseLog,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LovaszClasses {
    /// Average over classes present in the ground truth.
    #[default]
    Present,
    /// Average over all classes.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the auxiliary path losses.
    pub lambda: f64,
    /// Per-class weights; empty means "derive from training frequencies".
    pub class_weights: Vec<f64>,
    pub weighting: Weighting,
    pub epsilon_freq: f64,
    pub prob_clip: f64,
    pub lovasz_classes: LovaszClasses,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            class_weights: Vec::new(),
            weighting: Weighting::InverseFrequency,
            epsilon_freq: 1e-3,
            prob_clip: 1e-7,
            lovasz_classes: LovaszClasses::Present,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("loss.lambda", "must be finite and ≥ 0"));
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return Err(Error::config("loss.prob_clip", "must lie in (0, 0.5)"));
        }
        if !(self.epsilon_freq >= 0.0 && self.epsilon_freq.is_finite()) {
            return Err(Error::config("loss.epsilon_freq", "must be finite and ≥ 0"));
        }
        if !self.class_weights.is_empty() {
            if self.class_weights.len() != num_classes {
                return Err(Error::config(
                    "loss.class_weights",
                    format!("{} weights for {num_classes} classes", self.class_weights.len()),
                ));
            }
            if let Some(i) = self.class_weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(Error::config(
                    format!("loss.class_weights[{i}]"),
                    "weights must be positive",
                ));
            }
        }
        Ok(())
    }
}

/// Relative class frequencies among non-IGNORE labels.
pub fn class_frequencies<'a>(labels: impl IntoIterator<Item = &'a Label>, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    for &l in labels {
        if l != IGNORE && (l as usize) < num_classes {
            counts[l as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Weights inversely related to class frequency, normalized to mean 1.
pub fn class_weights(frequencies: &[f64], eps: f64, weighting: Weighting) -> Result<Vec<f64>> {
    if let Some(i) = frequencies.iter().position(|f| f.is_nan() || *f < 0.0) {
        return Err(Error::Data(format!(
            "class {i} has frequency {}",
            frequencies[i]
        )));
    }
    let raw: Vec<f64> = frequencies
        .iter()
        .map(|&f| match weighting {
            Weighting::InverseFrequency => 1.0 / (f + eps),
            Weighting::InverseLog => 1.0 / (1.02 + f).ln(),
        })
        .collect();
    if raw.iter().any(|w| !w.is_finite()) {
        return Err(Error::Data(
            "a zero frequency needs a positive epsilon".into(),
        ));
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// Softmax over the class axis of an `n × N × h × w` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let mut p = logits.clone();
    let d = p.data_mut();
    for b in 0..n {
        let base = b * c * hw;
        for i in 0..hw {
            let idx = |k: usize| base + k * hw + i;
            let m = (0..c).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..c {
                let e = (d[idx(k)] - m).exp();
                d[idx(k)] = e;
                s += e;
            }
            for k in 0..c {
                d[idx(k)] /= s;
            }
        }
    }
    Ok(p)
}

/// Pulls a gradient with respect to probabilities back through the softmax:
/// `dz_j = p_j (dp_j − Σ_k p_k dp_k)`.
pub fn softmax_backward(p: &Tensor, dp: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = p.dims4()?;
    if dp.shape() != p.shape() {
        return Err(Error::shape(format!(
            "gradient {:?} does not match probabilities {:?}",
            dp.shape(),
            p.shape()
        )));
    }
    let hw = h * w;
    let mut dz = Tensor::zeros(p.shape());
    let (pd, gd) = (p.data(), dp.data());
    let out = dz.data_mut();
    for b in 0..n {
        let base = b * c * hw;
        for i in 0..hw {
            let dot: f64 = (0..c).map(|k| pd[base + k * hw + i] * gd[base + k * hw + i]).sum();
            for k in 0..c {
                let j = base + k * hw + i;
                out[j] = pd[j] * (gd[j] - dot);
            }
        }
    }
    Ok(dz)
}

fn check_labels(labels: &[Label], n: usize, c: usize, hw: usize) -> Result<()> {
    if labels.len() != n * hw {
        return Err(Error::shape(format!(
            "{} labels for {n} maps of {hw} pixels",
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l != IGNORE && l as usize >= c) {
        return Err(Error::Data(format!("label {l} out of range for {c} classes")));
    }
    Ok(())
}

/// `−(1/|I|) Σ_i w_{y_i} log max(p̂_i^{y_i}, clip)` over non-IGNORE pixels,
/// with its gradient with respect to the logits.
pub fn weighted_ce(
    logits: &Tensor,
    labels: &[Label],
    weights: &[f64],
    prob_clip: f64,
) -> Result<(f64, Tensor)> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    check_labels(labels, n, c, hw)?;
    if weights.len() != c {
        return Err(Error::shape(format!("{} class weights for {c} classes", weights.len())));
    }
    let count = labels.iter().filter(|&&l| l != IGNORE).count();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let p = softmax(logits)?;
    let mut grad = Tensor::zeros(logits.shape());
    let (pd, gd) = (p.data(), grad.data_mut());
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for b in 0..n {
        for i in 0..hw {
            let y = labels[b * hw + i];
            if y == IGNORE {
                continue;
            }
            let y = y as usize;
            let base = b * c * hw + i;
            let py = pd[base + y * hw];
            loss -= weights[y] * py.max(prob_clip).ln();
            if py > prob_clip {
                let s = weights[y] * inv;
                for k in 0..c {
                    gd[base + k * hw] = s * pd[base + k * hw];
                }
                gd[base + y * hw] -= s;
            }
        }
    }
    Ok((loss * inv, grad))
}

/// Binary semantic boundaries of a batch of label maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    pub edges: Vec<bool>,
    /// Valid, labeled pixels; the loss averages over these.
    pub valid: Vec<bool>,
}

/// A valid pixel is an edge when one of its 4-neighbours is valid and carries
/// a different label. Pixels with IGNORE labels count as invalid. Maps are
/// `n × h × w` row-major.
pub fn edge_gt(labels: &[Label], valid: &[bool], h: usize, w: usize) -> Result<EdgeMap> {
    let hw = h * w;
    if hw == 0 || !labels.len().is_multiple_of(hw) || valid.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} labels and {} mask entries for {h}×{w} maps",
            labels.len(),
            valid.len()
        )));
    }
    let ok: Vec<bool> = labels
        .iter()
        .zip(valid)
        .map(|(&l, &v)| v && l != IGNORE)
        .collect();
    let mut edges = vec![false; labels.len()];
    for b in 0..labels.len() / hw {
        for y in 0..h {
            for x in 0..w {
                let i = b * hw + y * w + x;
                if !ok[i] {
                    continue;
                }
                let mut nb = [None; 4];
                if y > 0 {
                    nb[0] = Some(i - w);
                }
                if y + 1 < h {
                    nb[1] = Some(i + w);
                }
                if x > 0 {
                    nb[2] = Some(i - 1);
                }
                if x + 1 < w {
                    nb[3] = Some(i + 1);
                }
                edges[i] = nb.iter().flatten().any(|&j| ok[j] && labels[j] != labels[i]);
            }
        }
    }
    Ok(EdgeMap { edges, valid: ok })
}

/// Clipped binary cross-entropy over valid pixels, with its gradient with
/// respect to the probabilities (zero where the clip is active).
pub fn edge_bce(prob: &Tensor, gt: &EdgeMap, prob_clip: f64) -> Result<(f64, Tensor)> {
    if prob.len() != gt.edges.len() {
        return Err(Error::shape(format!(
            "edge probabilities {:?} for {} ground-truth pixels",
            prob.shape(),
            gt.edges.len()
        )));
    }
    let count = gt.valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let inv = 1.0 / count as f64;
    let mut grad = Tensor::zeros(prob.shape());
    let mut loss = 0.0;
    for (i, &p) in prob.data().iter().enumerate() {
        if !gt.valid[i] {
            continue;
        }
        let q = p.clamp(prob_clip, 1.0 - prob_clip);
        let inside = q == p;
        if gt.edges[i] {
            loss -= q.ln();
            if inside {
                grad.data_mut()[i] = -inv / q;
            }
        } else {
            loss -= (1.0 - q).ln();
            if inside {
                grad.data_mut()[i] = inv / (1.0 - q);
            }
        }
    }
    Ok((loss * inv, grad))
}

/// Lovász extension of the Jaccard loss for one class: returns the loss and
/// the per-element gradient with respect to the errors, in input order.
pub fn lovasz_jaccard(errors: &[f64], fg: &[bool]) -> (f64, Vec<f64>) {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let gts = fg.iter().filter(|&&f| f).count() as f64;
    let mut grad = vec![0.0; errors.len()];
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    let mut loss = 0.0;
    for &i in &order {
        if fg[i] {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        let g = jac - prev;
        prev = jac;
        grad[i] = g;
        loss += errors[i] * g;
    }
    (loss, grad)
}

/// Lovász-Softmax over all non-IGNORE pixels of the batch, with its gradient
/// with respect to `probs` (`n × N × h × w`).
pub fn lovasz_softmax(probs: &Tensor, labels: &[Label], classes: LovaszClasses) -> Result<(f64, Tensor)> {
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    check_labels(labels, n, c, hw)?;
    let pd = probs.data();
    let pixels: Vec<(usize, usize)> = (0..n)
        .flat_map(|b| (0..hw).map(move |i| (b, i)))
        .filter(|&(b, i)| labels[b * hw + i] != IGNORE)
        .collect();
    if pixels.is_empty() {
        return Err(Error::EmptyLoss);
    }
    for &(b, i) in &pixels {
        let s: f64 = (0..c).map(|k| pd[(b * c + k) * hw + i]).sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Data(format!(
                "probabilities at pixel {i} of map {b} sum to {s}"
            )));
        }
    }
    let mut grad = Tensor::zeros(probs.shape());
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut errors = vec![0.0; pixels.len()];
    let mut fg = vec![false; pixels.len()];
    for k in 0..c {
        for (j, &(b, i)) in pixels.iter().enumerate() {
            fg[j] = labels[b * hw + i] as usize == k;
            let p = pd[(b * c + k) * hw + i];
            errors[j] = if fg[j] { 1.0 - p } else { p };
        }
        if classes == LovaszClasses::Present && !fg.iter().any(|&f| f) {
            continue;
        }
        let (l, g) = lovasz_jaccard(&errors, &fg);
        total += l;
        counted += 1;
        let gd = grad.data_mut();
        for (j, &(b, i)) in pixels.iter().enumerate() {
            gd[(b * c + k) * hw + i] = if fg[j] { -g[j] } else { g[j] };
        }
    }
    let inv = 1.0 / counted as f64;
    grad.scale(inv);
    Ok((total * inv, grad))
}

/// Nearest-neighbour label subsampling: the top-left sample of each
/// `fh × fw` cell.
pub fn downsample_labels(labels: &[Label], n: usize, h: usize, w: usize, factor: (usize, usize)) -> Result<Vec<Label>> {
    let (fh, fw) = factor;
    if fh == 0 || fw == 0 || !h.is_multiple_of(fh) || !w.is_multiple_of(fw) || labels.len() != n * h * w {
        return Err(Error::shape(format!(
            "cannot subsample {n}×{h}×{w} labels by {factor:?}"
        )));
    }
    let (ho, wo) = (h / fh, w / fw);
    let mut out = Vec::with_capacity(n * ho * wo);
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                out.push(labels[b * h * w + y * fh * w + x * fw]);
            }
        }
    }
    Ok(out)
}

/// Ground truth of one batch at full resolution.
#[derive(Clone, Debug)]
pub struct Targets {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    /// `n × h × w` labels, IGNORE at unlabeled or invalid pixels.
    pub labels: Vec<Label>,
    /// `n × h × w` projection validity.
    pub valid: Vec<bool>,
}

impl Targets {
    pub fn new(n: usize, h: usize, w: usize, labels: Vec<Label>, valid: Vec<bool>) -> Result<Self> {
        if labels.len() != n * h * w || valid.len() != labels.len() {
            return Err(Error::shape(format!(
                "targets need {} entries, got {} labels and {} mask values",
                n * h * w,
                labels.len(),
                valid.len()
            )));
        }
        Ok(Self { n, h, w, labels, valid })
    }
}

/// Values of every term of one evaluation of the combined loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub fs: f64,
    pub ls: f64,
    pub edge: Option<f64>,
    pub aux_top: Option<f64>,
    pub aux_mid: Option<f64>,
    pub aux_bottom: Option<f64>,
    pub lambda: f64,
}

impl LossTerms {
    /// `L_fs + L_ls + L_e`.
    pub fn main(&self) -> f64 {
        self.fs + self.ls + self.edge.unwrap_or(0.0)
    }

    pub fn aux_sum(&self) -> f64 {
        [self.aux_top, self.aux_mid, self.aux_bottom].iter().flatten().sum()
    }

    pub fn total(&self) -> f64 {
        self.main() + self.lambda * self.aux_sum()
    }

    /// `(name, value)` of every present term.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("fs", self.fs), ("ls", self.ls)];
        for (name, t) in [
            ("edge", self.edge),
            ("aux_top", self.aux_top),
            ("aux_mid", self.aux_mid),
            ("aux_bottom", self.aux_bottom),
        ] {
            if let Some(t) = t {
                v.push((name, t));
            }
        }
        v
    }
}

/// `L = L_fs + L_ls + L_e + λ Σ_s L_s` as a differentiable scalar. Auxiliary
/// terms whose labels are all IGNORE at their resolution are skipped.
pub fn combined_loss(
    out: &ModelOutputs,
    targets: &Targets,
    heads: &Heads,
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<(Var, LossTerms)> {
    let check = |flag: bool, present: bool, name: &str| {
        if flag != present {
            Err(Error::config(
                format!("model.heads.{name}"),
                format!("head flag is {flag} but the output is {}", if present { "present" } else { "absent" }),
            ))
        } else {
            Ok(())
        }
    };
    check(heads.edge, out.edge_prob.is_some(), "edge")?;
    check(heads.top, out.aux_top.is_some(), "top")?;
    check(heads.middle, out.aux_mid.is_some(), "middle")?;
    check(heads.bottom, out.aux_bottom.is_some(), "bottom")?;
    let logits = out.logits.value();
    if logits.shape()[2..] != [targets.h, targets.w] || logits.shape()[0] != targets.n {
        return Err(Error::shape(format!(
            "logits {:?} do not match targets {}×{}×{}",
            logits.shape(),
            targets.n,
            targets.h,
            targets.w
        )));
    }
    let mut terms = LossTerms {
        lambda: cfg.lambda,
        ..LossTerms::default()
    };
    let (fs, mut g_logits) = weighted_ce(logits, &targets.labels, weights, cfg.prob_clip)?;
    terms.fs = fs;
    let probs = softmax(logits)?;
    let (ls, g_probs) = lovasz_softmax(&probs, &targets.labels, cfg.lovasz_classes)?;
    terms.ls = ls;
    g_logits.add_assign(&softmax_backward(&probs, &g_probs)?);
    let mut grads = vec![(out.logits.clone(), g_logits)];
    if let Some(e) = &out.edge_prob {
        let gt = edge_gt(&targets.labels, &targets.valid, targets.h, targets.w)?;
        let (l, g) = edge_bce(e.value(), &gt, cfg.prob_clip)?;
        terms.edge = Some(l);
        grads.push((e.clone(), g));
    }
    for (head, slot) in [
        (&out.aux_top, &mut terms.aux_top),
        (&out.aux_mid, &mut terms.aux_mid),
        (&out.aux_bottom, &mut terms.aux_bottom),
    ] {
        let Some(v) = head else { continue };
        let s = v.shape();
        let factor = (targets.h / s[2].max(1), targets.w / s[3].max(1));
        let labels = downsample_labels(&targets.labels, targets.n, targets.h, targets.w, factor)?;
        match weighted_ce(v.value(), &labels, weights, cfg.prob_clip) {
            Ok((l, mut g)) => {
                *slot = Some(l);
                g.scale(cfg.lambda);
                grads.push((v.clone(), g));
            }
            Err(Error::EmptyLoss) => {}
            Err(e) => return Err(e),
        }
    }
    let total = terms.total();
    Ok((Var::loss(total, grads)?, terms))
}
