//! k-NN label refinement: every in-view point votes among the depth-nearest
//! valid pixels of a window around its pixel.

use serde::{Deserialize, Serialize};

use crate::data::{Label, PointCloud, PointLabels, IGNORE};
use crate::error::{Error, Result};
use crate::projection::{unproject_labels, RangeImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    /// Odd side length of the search window.
    pub window: usize,
    /// Maximum depth difference in meters; may be infinite.
    pub range_cutoff: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 7,
            window: 7,
            range_cutoff: 1.0,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::config("knn.window", format!("{} is not an odd positive integer", self.window)));
        }
        if self.k == 0 || self.k > self.window * self.window {
            return Err(Error::config(
                "knn.k",
                format!("{} is outside 1..={}", self.k, self.window * self.window),
            ));
        }
        if self.range_cutoff.is_nan() || self.range_cutoff < 0.0 {
            return Err(Error::config("knn.range_cutoff", "must be ≥ 0"));
        }
        Ok(())
    }
}

/// Refines per-pixel predictions into per-point labels.
///
/// Candidates are the valid, labeled pixels of the window (clipped at the
/// image border), ranked by depth difference with row-major order breaking
/// ties. The first `k` within the cutoff vote; vote ties go to the smaller
/// class id. A point with no candidate keeps its unrefined label.
pub fn knn_refine(
    cloud: &PointCloud,
    img: &RangeImage,
    pixel_labels: &[Label],
    cfg: &KnnConfig,
) -> Result<PointLabels> {
    cfg.validate()?;
    if cloud.len() != img.num_points() {
        return Err(Error::shape(format!(
            "cloud of {} points for a projection of {}",
            cloud.len(),
            img.num_points()
        )));
    }
    let fallback = unproject_labels(pixel_labels, img)?;
    let (h, w) = (img.height(), img.width());
    let r = cfg.window / 2;
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(cfg.window * cfg.window);
    let mut votes: Vec<(Label, usize)> = Vec::with_capacity(cfg.k);
    let refined = cloud
        .points()
        .iter()
        .zip(img.point_pixel())
        .zip(fallback.labels())
        .map(|((p, px), &unrefined)| {
            let Some((u, v)) = *px else { return IGNORE };
            let d = p.range();
            candidates.clear();
            for y in v.saturating_sub(r)..(v + r + 1).min(h) {
                for x in u.saturating_sub(r)..(u + r + 1).min(w) {
                    let k = y * w + x;
                    if img.is_valid(x, y) && pixel_labels[k] != IGNORE {
                        let diff = (img.depth(x, y) - d).abs();
                        if diff <= cfg.range_cutoff {
                            candidates.push((diff, k));
                        }
                    }
                }
            }
            if candidates.is_empty() {
                return unrefined;
            }
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            votes.clear();
            for &(_, k) in candidates.iter().take(cfg.k) {
                let l = pixel_labels[k];
                match votes.iter_mut().find(|(c, _)| *c == l) {
                    Some((_, n)) => *n += 1,
                    None => votes.push((l, 1)),
                }
            }
            votes
                .iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map_or(unrefined, |(l, _)| *l)
        })
        .collect();
    Ok(PointLabels::new(refined))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Point;
    use crate::projection::{project, ProjectionConfig};

    fn scene() -> (PointCloud, RangeImage) {
        let cfg = ProjectionConfig::with_size(8, 32);
        let mut pts = Vec::new();
        for i in 0..200 {
            let yaw = i as f32 * 0.031;
            let r = 5.0 + (i % 7) as f32 * 0.3;
            pts.push(Point::new(r * yaw.cos(), r * yaw.sin(), -0.5 + (i % 5) as f32 * 0.2, 0.5));
        }
        let cloud = PointCloud::new(pts).unwrap();
        let img = project(&cloud, &cfg).unwrap();
        (cloud, img)
    }

    #[test]
    fn unanimous_window_assigns_its_label() {
        let (cloud, img) = scene();
        let labels = vec![3; img.height() * img.width()];
        let out = knn_refine(&cloud, &img, &labels, &KnnConfig::default()).unwrap();
        for (l, px) in out.labels().iter().zip(img.point_pixel()) {
            assert_eq!(*l, if px.is_some() { 3 } else { IGNORE });
        }
    }

    #[test]
    fn unit_window_equals_unprojection() {
        let (cloud, img) = scene();
        let labels: Vec<Label> = (0..img.height() * img.width()).map(|i| (i % 5) as Label).collect();
        let cfg = KnnConfig { k: 1, window: 1, range_cutoff: f64::INFINITY };
        let out = knn_refine(&cloud, &img, &labels, &cfg).unwrap();
        assert_eq!(out, unproject_labels(&labels, &img).unwrap());
    }

    #[test]
    fn winners_keep_their_pixel_label_with_k_one() {
        let (cloud, img) = scene();
        let labels: Vec<Label> = (0..img.height() * img.width()).map(|i| (i % 4) as Label).collect();
        let cfg = KnnConfig { k: 1, window: 5, range_cutoff: 1.0 };
        let out = knn_refine(&cloud, &img, &labels, &cfg).unwrap();
        for (k, winner) in img.pixel_point().iter().enumerate() {
            if let Some(i) = winner {
                assert_eq!(out.labels()[*i], labels[k]);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            KnnConfig { window: 4, ..KnnConfig::default() },
            KnnConfig { k: 0, ..KnnConfig::default() },
            KnnConfig { k: 50, ..KnnConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        }
    }
}
