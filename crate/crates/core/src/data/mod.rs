//! Point clouds, labels, class maps, on-disk formats and synthetic scenes.

pub mod class_map;
pub mod io;
pub mod synthetic;

use crate::error::{Error, Result};

pub use class_map::ClassMap;

/// Training class id, or [`IGNORE`].
pub type Label = u32;

/// Reserved id outside `[0, N)`; contributes to no loss term and no
/// confusion-matrix cell.
pub const IGNORE: Label = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub remission: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, remission: f32) -> Self {
        Self { x, y, z, remission }
    }

    /// Euclidean distance from the sensor origin.
    pub fn range(&self) -> f64 {
        let (x, y, z) = (f64::from(self.x), f64::from(self.y), f64::from(self.z));
        (x * x + y * y + z * z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.remission.is_finite()
    }
}

/// A raw scan. Every stored value is finite.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::Data(format!("point {i} has a non-finite value")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rotation about the z axis by `theta` radians.
    pub fn rotated_z(&self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let points = self
            .points
            .iter()
            .map(|p| {
                let (x, y) = (f64::from(p.x), f64::from(p.y));
                Point::new((c * x - s * y) as f32, (s * x + c * y) as f32, p.z, p.remission)
            })
            .collect();
        Self { points }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PointLabels {
    labels: Vec<Label>,
}

impl PointLabels {
    pub fn new(labels: Vec<Label>) -> Self {
        Self { labels }
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn into_inner(self) -> Vec<Label> {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks that every non-IGNORE label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .position(|&l| l != IGNORE && l as usize >= num_classes)
        {
            Some(i) => Err(Error::Data(format!(
                "point {i} has label {} but there are {num_classes} classes",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}
