//! Ray-cast scenes from a simulated rotating multi-beam sensor.
//!
//! Beams sit at the pixel-row centres and azimuth steps at the pixel-column
//! centres of a range image with `beams × steps` pixels and the sensor's field
//! of view, so each return lands on its own pixel when projected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Label, Point, PointCloud, PointLabels};
use crate::error::{Error, Result};

const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorSpec {
    pub beams: usize,
    pub steps: usize,
    /// Radians above the horizon.
    pub fov_up: f64,
    /// Radians below the horizon, as a positive magnitude.
    pub fov_down: f64,
    /// Sensor height above the world origin.
    pub height: f64,
    pub max_range: f64,
}

impl SensorSpec {
    pub fn new(beams: usize, steps: usize) -> Self {
        Self {
            beams,
            steps,
            fov_up: 3f64.to_radians(),
            fov_down: 25f64.to_radians(),
            height: 1.73,
            max_range: f64::INFINITY,
        }
    }

    /// Unit direction of beam `i`, step `j` in the sensor frame.
    pub fn ray(&self, i: usize, j: usize) -> [f64; 3] {
        let fov = self.fov_up + self.fov_down;
        let pitch = self.fov_up - (i as f64 + 0.5) * fov / self.beams as f64;
        let yaw = std::f64::consts::PI * (1.0 - 2.0 * (j as f64 + 0.5) / self.steps as f64);
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        [cp * cy, cp * sy, sp]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Infinite horizontal plane at height `z`.
    Plane { z: f64 },
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Vertical capped cylinder.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
}

impl Shape {
    /// Smallest positive ray parameter at which `o + t·d` meets the shape.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Plane { z } => {
                if d[2] == 0.0 {
                    return None;
                }
                let t = (z - o[2]) / d[2];
                (t > HIT_EPS).then_some(t)
            }
            Shape::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut near, mut far) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if near > far {
                        std::mem::swap(&mut near, &mut far);
                    }
                    t0 = t0.max(near);
                    t1 = t1.min(far);
                }
                if t0 > t1 {
                    None
                } else if t0 > HIT_EPS {
                    Some(t0)
                } else {
                    (t1 > HIT_EPS).then_some(t1)
                }
            }
            Shape::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let (px, py) = (o[0] - center[0], o[1] - center[1]);
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > HIT_EPS && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                let a = d[0] * d[0] + d[1] * d[1];
                if a > 0.0 {
                    let b = 2.0 * (px * d[0] + py * d[1]);
                    let c = px * px + py * py - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                            let z = o[2] + t * d[2];
                            if (z_min..=z_max).contains(&z) {
                                consider(t);
                            }
                        }
                    }
                }
                if d[2] != 0.0 {
                    for zc in [z_min, z_max] {
                        let t = (zc - o[2]) / d[2];
                        let (x, y) = (px + t * d[0], py + t * d[1]);
                        if x * x + y * y <= radius * radius {
                            consider(t);
                        }
                    }
                }
                best
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub class: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub sensor: SensorSpec,
    /// World frame: the sensor sits at `(0, 0, sensor.height)`.
    pub primitives: Vec<Primitive>,
    /// Base remission per class id.
    pub class_remission: Vec<f32>,
    /// Half-width of the uniform remission noise.
    pub remission_noise: f32,
    /// Half-width of the uniform range noise in meters.
    pub range_noise: f64,
}

impl SceneSpec {
    pub fn new(sensor: SensorSpec, primitives: Vec<Primitive>) -> Self {
        Self {
            sensor,
            primitives,
            class_remission: vec![0.1, 0.5, 0.3, 0.8],
            remission_noise: 0.02,
            range_noise: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::config("scene.primitives", "at least one primitive is required"));
        }
        if self.sensor.beams == 0 || self.sensor.steps == 0 {
            return Err(Error::config("scene.sensor", "beams and steps must be positive"));
        }
        if self.sensor.fov_up + self.sensor.fov_down <= 0.0 {
            return Err(Error::config("scene.sensor", "field of view must be positive"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if p.class as usize >= self.class_remission.len() {
                return Err(Error::config(
                    format!("scene.primitives[{i}].class"),
                    format!("no remission defined for class {}", p.class),
                ));
            }
        }
        Ok(())
    }

    /// Nearest primitive hit along the ray from the sensor, as `(t, index)`.
    pub fn cast(&self, dir: [f64; 3]) -> Option<(f64, usize)> {
        let origin = [0.0, 0.0, self.sensor.height];
        let mut best: Option<(f64, usize)> = None;
        for (k, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.shape.intersect(origin, dir) {
                if t <= self.sensor.max_range && best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, k));
                }
            }
        }
        best
    }
}

/// Points in the sensor frame, beam-major; rays that hit nothing yield no
/// point. Pure in `(seed, spec)`.
pub fn generate_synthetic_scene(seed: u64, spec: &SceneSpec) -> Result<(PointCloud, PointLabels)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for i in 0..spec.sensor.beams {
        for j in 0..spec.sensor.steps {
            let d = spec.sensor.ray(i, j);
            let Some((t, k)) = spec.cast(d) else { continue };
            let class = spec.primitives[k].class;
            let t = if spec.range_noise > 0.0 {
                (t + rng.gen_range(-spec.range_noise..=spec.range_noise)).max(1e-3)
            } else {
                t
            };
            let noise = if spec.remission_noise > 0.0 {
                rng.gen_range(-spec.remission_noise..=spec.remission_noise)
            } else {
                0.0
            };
            let remission = (spec.class_remission[class as usize] + noise).clamp(0.0, 1.0);
            points.push(Point::new(
                (t * d[0]) as f32,
                (t * d[1]) as f32,
                (t * d[2]) as f32,
                remission,
            ));
            labels.push(class);
        }
    }
    Ok((PointCloud::new(points)?, PointLabels::new(labels)))
}

/// Random street-like layout with classes ground 0, vehicle 1, trunk 2 and
/// building 3.
pub fn random_scene(seed: u64, sensor: SensorSpec) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_e5ee_d000_0000);
    let mut prims = vec![Primitive {
        shape: Shape::Plane { z: 0.0 },
        class: 0,
    }];
    let polar = |rng: &mut ChaCha8Rng, r0: f64, r1: f64| {
        let r = rng.gen_range(r0..r1);
        let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        [r * a.cos(), r * a.sin()]
    };
    for _ in 0..rng.gen_range(2..=4) {
        let c = polar(&mut rng, 5.0, 18.0);
        let (hx, hy) = if rng.gen_bool(0.5) { (2.1, 0.9) } else { (0.9, 2.1) };
        prims.push(Primitive {
            shape: Shape::Box {
                min: [c[0] - hx, c[1] - hy, 0.0],
                max: [c[0] + hx, c[1] + hy, rng.gen_range(1.4..1.8)],
            },
            class: 1,
        });
    }
    for _ in 0..rng.gen_range(2..=4) {
        let c = polar(&mut rng, 3.0, 12.0);
        prims.push(Primitive {
            shape: Shape::Cylinder {
                center: c,
                radius: rng.gen_range(0.3..0.8),
                z_min: 0.0,
                z_max: rng.gen_range(3.0..6.0),
            },
            class: 2,
        });
    }
    for _ in 0..rng.gen_range(1..=2) {
        let c = polar(&mut rng, 14.0, 25.0);
        let long = rng.gen_range(6.0..14.0);
        let (hx, hy) = if c[0].abs() > c[1].abs() { (0.5, long) } else { (long, 0.5) };
        prims.push(Primitive {
            shape: Shape::Box {
                min: [c[0] - hx, c[1] - hy, 0.0],
                max: [c[0] + hx, c[1] + hy, rng.gen_range(4.0..9.0)],
            },
            class: 3,
        });
    }
    SceneSpec::new(sensor, prims)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ground_only(beams: usize, steps: usize) -> SceneSpec {
        SceneSpec::new(
            SensorSpec::new(beams, steps),
            vec![Primitive {
                shape: Shape::Plane { z: 0.0 },
                class: 0,
            }],
        )
    }

    #[test]
    fn every_ray_hits_the_ground() {
        let (cloud, labels) = generate_synthetic_scene(7, &ground_only(4, 8)).unwrap();
        assert_eq!(cloud.len(), 32);
        assert!(labels.labels().iter().all(|&l| l == 0));
        for p in cloud.points() {
            assert!((p.z + 1.73).abs() < 1e-5);
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let spec = random_scene(3, SensorSpec::new(16, 64));
        let a = generate_synthetic_scene(11, &spec).unwrap();
        let b = generate_synthetic_scene(11, &spec).unwrap();
        assert_eq!(
            crate::data::io::encode_scan(&a.0),
            crate::data::io::encode_scan(&b.0)
        );
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn empty_spec_is_config_error() {
        let mut spec = ground_only(4, 8);
        spec.primitives.clear();
        assert!(matches!(
            generate_synthetic_scene(0, &spec),
            Err(Error::Config { .. })
        ));
    }

    /// Face-by-face intersection, independent of the slab method.
    fn box_faces(min: [f64; 3], max: [f64; 3], o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let mut best: Option<f64> = None;
        for a in 0..3 {
            if d[a] == 0.0 {
                continue;
            }
            for plane in [min[a], max[a]] {
                let t = (plane - o[a]) / d[a];
                if t <= 0.0 {
                    continue;
                }
                let inside = (0..3).filter(|&b| b != a).all(|b| {
                    let x = o[b] + t * d[b];
                    x >= min[b] && x <= max[b]
                });
                if inside && best.is_none_or(|v| t < v) {
                    best = Some(t);
                }
            }
        }
        best
    }

    #[test]
    fn occluding_box_matches_brute_force() {
        let (min, max) = ([4.3, -1.1, 0.0], [6.7, 1.3, 1.9]);
        let mut spec = ground_only(32, 256);
        spec.primitives.push(Primitive {
            shape: Shape::Box { min, max },
            class: 1,
        });
        let (cloud, labels) = generate_synthetic_scene(1, &spec).unwrap();
        let o = [0.0, 0.0, spec.sensor.height];
        let mut expected = Vec::new();
        for i in 0..32 {
            for j in 0..256 {
                let d = spec.sensor.ray(i, j);
                let ground = (d[2] < 0.0).then(|| -o[2] / d[2]);
                let hit_box = box_faces(min, max, o, d);
                let hit = match (ground, hit_box) {
                    (Some(g), Some(b)) if b < g => Some((b, 1)),
                    (Some(g), _) => Some((g, 0)),
                    (None, Some(b)) => Some((b, 1)),
                    (None, None) => None,
                };
                if let Some((t, c)) = hit.filter(|&(t, _)| t <= spec.sensor.max_range) {
                    expected.push((t, c));
                }
            }
        }
        assert_eq!(expected.len(), cloud.len());
        let boxed = expected.iter().filter(|e| e.1 == 1).count();
        assert!(boxed > 20, "box should cover rays, got {boxed}");
        for ((t, c), (p, &l)) in expected.iter().zip(cloud.points().iter().zip(labels.labels())) {
            assert_eq!(*c, l);
            let r = (f64::from(p.x).powi(2) + f64::from(p.y).powi(2) + f64::from(p.z).powi(2)).sqrt();
            assert!((r - t).abs() < 1e-4 * t.max(1.0));
        }
    }

    #[test]
    fn cylinder_side_and_cap() {
        let c = Shape::Cylinder {
            center: [5.0, 0.0],
            radius: 1.0,
            z_min: 0.0,
            z_max: 2.0,
        };
        assert!((c.intersect([0.0, 0.0, 1.0], [1.0, 0.0, 0.0]).unwrap() - 4.0).abs() < 1e-12);
        assert!((c.intersect([5.0, 0.0, 5.0], [0.0, 0.0, -1.0]).unwrap() - 3.0).abs() < 1e-12);
        assert!(c.intersect([0.0, 0.0, 3.0], [1.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn random_scenes_use_all_classes() {
        let (_, labels) = generate_synthetic_scene(0, &random_scene(0, SensorSpec::new(16, 256))).unwrap();
        for c in 0..4 {
            assert!(labels.labels().contains(&c), "class {c} missing");
        }
    }
}
