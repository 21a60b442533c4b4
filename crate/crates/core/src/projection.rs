//! Spherical projection of a scan into an `h × w × 5` range image with
//! channels (x, y, z, depth, remission), and the index maps that carry pixel
//! predictions back to points.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SensorSpec;
use crate::data::{Label, Point, PointCloud, PointLabels, IGNORE};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const CHANNELS: usize = 5;
pub const DEPTH: usize = 3;

/// Row offset convention of the pitch-to-row mapping
/// `v = (1 − (pitch + offset)/fov)·h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitchOffset {
    /// `offset = fov_down`: rows 0..h span exactly `[fov_up, −fov_down]`.
    #[default]
    FovDown,
    /// `offset = fov_up`, the common range-image convention; only
    /// self-consistent for a symmetric field of view.
    FovUp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub h: usize,
    pub w: usize,
    /// Radians above the horizon.
    pub fov_up: f64,
    /// Radians below the horizon, positive.
    pub fov_down: f64,
    pub channel_mean: [f64; CHANNELS],
    pub channel_std: [f64; CHANNELS],
    pub pitch_offset: PitchOffset,
}

impl Default for ProjectionConfig {
    /// 64 × 2048 with a +3°/−25° field of view and SemanticKITTI channel
    /// statistics.
    fn default() -> Self {
        Self {
            h: 64,
            w: 2048,
            fov_up: 3f64.to_radians(),
            fov_down: 25f64.to_radians(),
            channel_mean: [10.88, 0.23, -1.04, 12.12, 0.21],
            channel_std: [11.47, 6.91, 0.86, 12.32, 0.16],
            pitch_offset: PitchOffset::FovDown,
        }
    }
}

impl ProjectionConfig {
    pub fn with_size(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            ..Self::default()
        }
    }

    /// A grid whose pixel centres coincide with the sensor's rays.
    pub fn for_sensor(sensor: &SensorSpec) -> Self {
        Self {
            h: sensor.beams,
            w: sensor.steps,
            fov_up: sensor.fov_up,
            fov_down: sensor.fov_down,
            ..Self::default()
        }
    }

    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::config("projection", "h and w must be ≥ 1"));
        }
        if !(self.fov().is_finite() && self.fov() > 0.0) {
            return Err(Error::config("projection", "fov_up + fov_down must be positive"));
        }
        for (c, &s) in self.channel_std.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::config(
                    format!("projection.channel_std[{c}]"),
                    format!("standard deviation must be positive, got {s}"),
                ));
            }
        }
        if self.channel_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("projection.channel_mean", "values must be finite"));
        }
        Ok(())
    }

    fn offset(&self) -> f64 {
        match self.pitch_offset {
            PitchOffset::FovDown => self.fov_down,
            PitchOffset::FovUp => self.fov_up,
        }
    }
}

/// Continuous image coordinates `(u, v)` of a point before discretization.
pub fn pixel_of_point(p: [f64; 3], cfg: &ProjectionConfig) -> Result<(f64, f64)> {
    let d = norm(p);
    if d == 0.0 {
        return Err(Error::DegenerateInput("point at the sensor origin".into()));
    }
    let u = 0.5 * (1.0 - p[1].atan2(p[0]) / PI) * cfg.w as f64;
    let v = (1.0 - ((p[2] / d).asin() + cfg.offset()) / cfg.fov()) * cfg.h as f64;
    Ok((u, v))
}

fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn coords(p: &Point) -> [f64; 3] {
    [f64::from(p.x), f64::from(p.y), f64::from(p.z)]
}

/// Discrete `(u, v)` pixel of a point, or `None` when its pitch lies outside
/// `[−fov_down, fov_up]` or it sits at the origin.
pub fn pixel_index(p: [f64; 3], cfg: &ProjectionConfig) -> Option<(usize, usize)> {
    let d = norm(p);
    if d == 0.0 {
        return None;
    }
    let pitch = (p[2] / d).asin();
    if pitch > cfg.fov_up || pitch < -cfg.fov_down {
        return None;
    }
    let (u, v) = pixel_of_point(p, cfg).ok()?;
    let clamp = |x: f64, n: usize| (x.floor().max(0.0) as usize).min(n - 1);
    Some((clamp(u, cfg.w), clamp(v, cfg.h)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    h: usize,
    w: usize,
    /// `h × w × 5`, row-major, zero at invalid pixels.
    channels: Tensor,
    /// Winning point per pixel, row-major `v·w + u`.
    pixel_point: Vec<Option<usize>>,
    /// `(u, v)` per point, `None` when out of view.
    point_pixel: Vec<Option<(usize, usize)>>,
}

impl RangeImage {
    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> &Tensor {
        &self.channels
    }

    pub fn pixel_point(&self) -> &[Option<usize>] {
        &self.pixel_point
    }

    pub fn point_pixel(&self) -> &[Option<(usize, usize)>] {
        &self.point_pixel
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.pixel_point[v * self.w + u].is_some()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.pixel_point.iter().map(Option::is_some).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.pixel_point.iter().filter(|p| p.is_some()).count()
    }

    pub fn depth(&self, u: usize, v: usize) -> f64 {
        self.channels.data()[(v * self.w + u) * CHANNELS + DEPTH]
    }

    pub fn num_points(&self) -> usize {
        self.point_pixel.len()
    }

    /// Labels of the winning points per pixel; IGNORE at invalid pixels.
    pub fn pixel_labels(&self, labels: &PointLabels) -> Result<Vec<Label>> {
        if labels.len() != self.point_pixel.len() {
            return Err(Error::shape(format!(
                "{} labels for a projection of {} points",
                labels.len(),
                self.point_pixel.len()
            )));
        }
        Ok(self
            .pixel_point
            .iter()
            .map(|p| p.map_or(IGNORE, |i| labels.labels()[i]))
            .collect())
    }
}

/// Nearest depth wins a pixel; exact ties go to the smaller point index.
pub fn project(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<RangeImage> {
    cfg.validate()?;
    let (h, w) = (cfg.h, cfg.w);
    if cloud.points().iter().all(|p| norm(coords(p)) == 0.0) {
        return Err(Error::EmptyProjection);
    }
    let mut pixel_point: Vec<Option<usize>> = vec![None; h * w];
    let mut best = vec![f64::INFINITY; h * w];
    let mut point_pixel = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points().iter().enumerate() {
        let c = coords(p);
        let px = pixel_index(c, cfg);
        if let Some((u, v)) = px {
            let k = v * w + u;
            let d = norm(c);
            if d < best[k] {
                best[k] = d;
                pixel_point[k] = Some(i);
            }
        }
        point_pixel.push(px);
    }
    let mut channels = Tensor::zeros(&[h, w, CHANNELS]);
    let data = channels.data_mut();
    for (k, winner) in pixel_point.iter().enumerate() {
        if let Some(i) = *winner {
            let p = &cloud.points()[i];
            let c = coords(p);
            data[k * CHANNELS..(k + 1) * CHANNELS]
                .copy_from_slice(&[c[0], c[1], c[2], norm(c), f64::from(p.remission)]);
        }
    }
    Ok(RangeImage {
        h,
        w,
        channels,
        pixel_point,
        point_pixel,
    })
}

/// `(value − mean)/std` per channel at valid pixels; invalid pixels stay 0.
/// Returns `h × w × 5`.
pub fn normalize(img: &RangeImage, cfg: &ProjectionConfig) -> Tensor {
    let mut t = img.channels.clone();
    for (k, px) in t.data_mut().chunks_exact_mut(CHANNELS).enumerate() {
        if img.pixel_point[k].is_some() {
            for ((v, m), s) in px.iter_mut().zip(&cfg.channel_mean).zip(&cfg.channel_std) {
                *v = (*v - m) / s;
            }
        }
    }
    t
}

/// Inverse of [`normalize`] at valid pixels; invalid pixels stay 0.
pub fn denormalize(t: &Tensor, img: &RangeImage, cfg: &ProjectionConfig) -> Result<Tensor> {
    if t.shape() != img.channels.shape() {
        return Err(Error::shape(format!(
            "tensor {:?} does not match image {:?}",
            t.shape(),
            img.channels.shape()
        )));
    }
    let mut out = t.clone();
    for (k, px) in out.data_mut().chunks_exact_mut(CHANNELS).enumerate() {
        if img.pixel_point[k].is_some() {
            for ((v, m), s) in px.iter_mut().zip(&cfg.channel_mean).zip(&cfg.channel_std) {
                *v = *v * s + m;
            }
        } else {
            px.fill(0.0);
        }
    }
    Ok(out)
}

/// `h × w × 5` to the network layout `1 × 5 × h × w`.
pub fn to_network_input(t: &Tensor) -> Result<Tensor> {
    let [h, w, c] = *t.shape() else {
        return Err(Error::shape(format!("expected h×w×c, got {:?}", t.shape())));
    };
    let src = t.data();
    Ok(Tensor::from_fn(&[1, c, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        src[rest * c + ch]
    }))
}

/// Every in-view point gets its pixel's label, including points that lost
/// the depth contest; out-of-view points get IGNORE.
pub fn unproject_labels(pixel_labels: &[Label], img: &RangeImage) -> Result<PointLabels> {
    if pixel_labels.len() != img.h * img.w {
        return Err(Error::shape(format!(
            "{} pixel labels for a {}×{} image",
            pixel_labels.len(),
            img.h,
            img.w
        )));
    }
    Ok(PointLabels::new(
        img.point_pixel
            .iter()
            .map(|px| px.map_or(IGNORE, |(u, v)| pixel_labels[v * img.w + u]))
            .collect(),
    ))
}

/// Per-channel mean and standard deviation over the valid pixels of a set of
/// images, for filling `channel_mean`/`channel_std`.
pub fn channel_stats<'a>(
    images: impl IntoIterator<Item = &'a RangeImage>,
) -> Result<([f64; CHANNELS], [f64; CHANNELS])> {
    let mut n = 0usize;
    let mut sum = [0.0; CHANNELS];
    let mut sq = [0.0; CHANNELS];
    for img in images {
        for (k, px) in img.channels.data().chunks_exact(CHANNELS).enumerate() {
            if img.pixel_point[k].is_some() {
                n += 1;
                for c in 0..CHANNELS {
                    sum[c] += px[c];
                    sq[c] += px[c] * px[c];
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyProjection);
    }
    let mean = sum.map(|s| s / n as f64);
    let mut std = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        std[c] = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6);
    }
    Ok((mean, std))
}

/// Binary PGM (P5) of the depth channel, nearer is brighter; invalid pixels
/// are black.
pub fn depth_pgm(img: &RangeImage) -> Vec<u8> {
    let max = (0..img.h * img.w)
        .filter(|&k| img.pixel_point[k].is_some())
        .map(|k| img.channels.data()[k * CHANNELS + DEPTH])
        .fold(0.0f64, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    for k in 0..img.h * img.w {
        out.push(if img.pixel_point[k].is_some() && max > 0.0 {
            let d = img.channels.data()[k * CHANNELS + DEPTH];
            (255.0 - 254.0 * d / max).round() as u8
        } else {
            0
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(pts: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point::new(p[0], p[1], p[2], 0.5)).collect()).unwrap()
    }

    #[test]
    fn yaw_axis_maps_to_centre_column() {
        let cfg = ProjectionConfig::default();
        assert_eq!(pixel_of_point([1.0, 0.0, 0.0], &cfg).unwrap().0, 1024.0);
        assert_eq!(pixel_of_point([0.0, 1.0, 0.0], &cfg).unwrap().0, 512.0);
    }

    #[test]
    fn fov_up_offset_formula() {
        let cfg = ProjectionConfig {
            pitch_offset: PitchOffset::FovUp,
            ..ProjectionConfig::default()
        };
        let v = pixel_of_point([1.0, 0.0, 0.0], &cfg).unwrap().1;
        assert!((v - (1.0 - 3.0 / 28.0) * 64.0).abs() < 1e-9);
        assert!((v - 57.142857).abs() < 1e-4);
    }

    #[test]
    fn horizon_row_with_fov_down_offset() {
        let v = pixel_of_point([1.0, 0.0, 0.0], &ProjectionConfig::default()).unwrap().1;
        assert!((v - (1.0 - 25.0 / 28.0) * 64.0).abs() < 1e-9);
    }

    #[test]
    fn origin_is_degenerate() {
        assert!(matches!(
            pixel_of_point([0.0; 3], &ProjectionConfig::default()),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            project(&cloud(&[[0.0; 3]]), &ProjectionConfig::default()),
            Err(Error::EmptyProjection)
        ));
    }

    #[test]
    fn single_point_occupies_its_pixel() {
        let cfg = ProjectionConfig::default();
        let img = project(&cloud(&[[1.0, 0.0, 0.0]]), &cfg).unwrap();
        let (u, v) = pixel_of_point([1.0, 0.0, 0.0], &cfg).unwrap();
        let px = (u.floor() as usize, v.floor() as usize);
        assert_eq!(img.valid_count(), 1);
        assert_eq!(img.point_pixel()[0], Some(px));
        assert!(img.is_valid(px.0, px.1));
    }

    #[test]
    fn nearer_point_wins() {
        let cfg = ProjectionConfig::default();
        let img = project(&cloud(&[[5.0, 0.0, 0.0], [3.0, 0.0, 0.0]]), &cfg).unwrap();
        assert_eq!(img.valid_count(), 1);
        let (u, v) = img.point_pixel()[0].unwrap();
        assert_eq!(img.point_pixel()[1], Some((u, v)));
        assert_eq!(img.pixel_point()[v * cfg.w + u], Some(1));
        assert!((img.depth(u, v) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn equal_depth_goes_to_smaller_index() {
        let cfg = ProjectionConfig::with_size(4, 8);
        let img = project(&cloud(&[[4.0, 0.0, 0.0], [4.0, 0.0, 0.0]]), &cfg).unwrap();
        assert_eq!(img.pixel_point().iter().flatten().collect::<Vec<_>>(), vec![&0]);
    }

    #[test]
    fn above_field_of_view_is_dropped() {
        let cfg = ProjectionConfig::default();
        let img = project(&cloud(&[[1.0, 0.0, 1.0], [1.0, 0.0, 0.0]]), &cfg).unwrap();
        assert_eq!(img.point_pixel()[0], None);
        assert_eq!(img.valid_count(), 1);
    }

    #[test]
    fn identity_and_arithmetic_normalization() {
        let mut cfg = ProjectionConfig::with_size(4, 8);
        cfg.channel_mean = [0.0; 5];
        cfg.channel_std = [1.0; 5];
        let img = project(&cloud(&[[10.0, 0.0, 0.0], [0.0, 6.0, -0.5]]), &cfg).unwrap();
        assert_eq!(normalize(&img, &cfg), *img.channels());
        cfg.channel_mean[DEPTH] = 12.0;
        cfg.channel_std[DEPTH] = 4.0;
        let t = normalize(&img, &cfg);
        let (u, v) = img.point_pixel()[0].unwrap();
        assert_eq!(t.data()[(v * 8 + u) * CHANNELS + DEPTH], -0.5);
    }

    #[test]
    fn normalized_invalid_pixels_are_zero() {
        let cfg = ProjectionConfig::with_size(4, 8);
        let img = project(&cloud(&[[10.0, 0.0, 0.0]]), &cfg).unwrap();
        let t = normalize(&img, &cfg);
        let nonzero = t.data().chunks_exact(CHANNELS).filter(|p| p.iter().any(|&x| x != 0.0)).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn unproject_shares_pixel_labels() {
        let cfg = ProjectionConfig::with_size(8, 16);
        let img = project(&cloud(&[[5.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 0.0, 5.0]]), &cfg).unwrap();
        let labels = unproject_labels(&vec![3; 8 * 16], &img).unwrap();
        assert_eq!(labels.labels(), &[3, 3, IGNORE]);
    }

    #[test]
    fn network_layout_transposes_channels() {
        let t = Tensor::from_fn(&[2, 3, 5], |i| i as f64);
        let n = to_network_input(&t).unwrap();
        assert_eq!(n.shape(), &[1, 5, 2, 3]);
        assert_eq!(n.at4(0, 4, 1, 2), t.data()[(3 + 2) * 5 + 4]);
    }

    #[test]
    fn pgm_header_and_size() {
        let cfg = ProjectionConfig::with_size(4, 8);
        let img = project(&cloud(&[[10.0, 0.0, 0.0]]), &cfg).unwrap();
        let pgm = depth_pgm(&img);
        assert!(pgm.starts_with(b"P5\n8 4\n255\n"));
        assert_eq!(pgm.len(), b"P5\n8 4\n255\n".len() + 32);
    }

    fn random_cloud() -> impl Strategy<Value = Vec<[f32; 3]>> {
        proptest::collection::vec(
            (1.0f32..40.0, -3.1f32..3.1, -0.4f32..0.04).prop_map(|(r, yaw, pitch)| {
                [r * pitch.cos() * yaw.cos(), r * pitch.cos() * yaw.sin(), r * pitch.sin()]
            }),
            1..60,
        )
    }

    proptest! {
        #[test]
        fn stored_pixels_recompute(pts in random_cloud()) {
            let cfg = ProjectionConfig::with_size(16, 64);
            let c = cloud(&pts);
            let img = project(&c, &cfg).unwrap();
            prop_assert!(img.valid_count() <= pts.len().min(16 * 64));
            for (p, px) in c.points().iter().zip(img.point_pixel()) {
                prop_assert_eq!(*px, pixel_index(coords(p), &cfg));
            }
            for (k, w) in img.pixel_point().iter().enumerate() {
                if w.is_some() {
                    let px = &img.channels().data()[k * CHANNELS..(k + 1) * CHANNELS];
                    let d = norm([px[0], px[1], px[2]]);
                    prop_assert!((px[DEPTH] - d).abs() <= 1e-5 * d);
                }
            }
        }

        #[test]
        fn normalize_round_trip(pts in random_cloud()) {
            let cfg = ProjectionConfig::with_size(16, 64);
            let img = project(&cloud(&pts), &cfg).unwrap();
            let back = denormalize(&normalize(&img, &cfg), &img, &cfg).unwrap();
            prop_assert!(back.max_abs_diff(img.channels()) < 1e-6);
        }

        #[test]
        fn yaw_rotation_shifts_columns(pts in random_cloud(), steps in -8i64..8) {
            let cfg = ProjectionConfig::with_size(16, 64);
            let c = cloud(&pts);
            let pitch = 2.0 * PI / cfg.w as f64;
            let rotated = c.rotated_z(steps as f64 * pitch);
            for (p, q) in c.points().iter().zip(rotated.points()) {
                let (Ok((u, v)), Some(a), Some(b)) = (
                    pixel_of_point(coords(p), &cfg),
                    pixel_index(coords(p), &cfg),
                    pixel_index(coords(q), &cfg),
                ) else { continue };
                // f32 rounding of the rotated point must not cross a pixel edge
                let away = |x: f64| (0.01..0.99).contains(&(x - x.floor()));
                if !away(u) || !away(v) {
                    continue;
                }
                let expected = (a.0 as i64 - steps).rem_euclid(cfg.w as i64) as usize;
                prop_assert_eq!(b.0, expected);
                prop_assert_eq!(b.1, a.1);
            }
        }
    }
}
