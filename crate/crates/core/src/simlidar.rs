//! Raycasting LiDAR simulator over analytic primitives.
//!
//! Every cell draws its noise from its own ChaCha stream, so a scan is a pure
//! function of `(scene, pose, spec, seed)` regardless of evaluation order.

use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{OrderedPointCloud, Pose, RigidTransform};
use crate::projection::SphericalModel;

const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Rectangle in the local xy-plane, two-sided.
    Plane { half_x: f64, half_y: f64 },
    /// Box centered at the local origin.
    Box { half_extents: [f64; 3] },
    /// Capped cylinder along local z.
    Cylinder { radius: f64, half_height: f64 },
    Sphere { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Texture {
    /// 3D checkerboard in local coordinates.
    Checker { cell: f64, low: f64, high: f64 },
    /// Sawtooth ramp along a local axis.
    Gradient {
        axis: usize,
        period: f64,
        low: f64,
        high: f64,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrimitivePose {
    #[serde(default)]
    pub translation: [f64; 3],
    /// Rotation vector in radians.
    #[serde(default)]
    pub rotation: [f64; 3],
}

impl PrimitivePose {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_rotation_vector(
            &Vector3::from(self.rotation),
            Vector3::from(self.translation),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    #[serde(default)]
    pub pose: PrimitivePose,
    pub reflectivity: f64,
    #[serde(default)]
    pub texture: Option<Texture>,
}

/// A ray hit: distance along the unit direction and reflectivity there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub reflectivity: f64,
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let ok = match &self.shape {
            Shape::Plane { half_x, half_y } => positive(*half_x) && positive(*half_y),
            Shape::Box { half_extents } => half_extents.iter().all(|v| positive(*v)),
            Shape::Cylinder {
                radius,
                half_height,
            } => positive(*radius) && positive(*half_height),
            Shape::Sphere { radius } => positive(*radius),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "primitive {:?} needs positive extents",
                self.shape
            )));
        }
        if !(0.0..=1.0).contains(&self.reflectivity) {
            return Err(Error::InvalidArgument("reflectivity must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Nearest intersection of the ray `origin + t·dir` (world frame, unit dir).
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let pose = self.pose.transform();
        let rt = pose.rotation.transpose();
        let o = rt * (origin - pose.translation);
        let d = rt * dir;
        let t = match &self.shape {
            Shape::Plane { half_x, half_y } => intersect_plane(&o, &d, *half_x, *half_y),
            Shape::Box { half_extents } => intersect_box(&o, &d, half_extents),
            Shape::Cylinder {
                radius,
                half_height,
            } => intersect_cylinder(&o, &d, *radius, *half_height),
            Shape::Sphere { radius } => intersect_sphere(&o, &d, *radius),
        }?;
        let local = o + d * t;
        Some(Hit {
            distance: t,
            reflectivity: self.reflectivity_at(&local),
        })
    }

    fn reflectivity_at(&self, local: &Vector3<f64>) -> f64 {
        match &self.texture {
            None => self.reflectivity,
            Some(Texture::Checker { cell, low, high }) => {
                let parity = (local.x / cell).floor() + (local.y / cell).floor() + (local.z / cell).floor();
                if (parity as i64).rem_euclid(2) == 0 {
                    *low
                } else {
                    *high
                }
            }
            Some(Texture::Gradient {
                axis,
                period,
                low,
                high,
            }) => {
                let x = local[(*axis).min(2)] / period;
                low + (high - low) * (x - x.floor())
            }
        }
    }
}

fn smallest_positive(a: f64, b: f64) -> Option<f64> {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if lo > HIT_EPS {
        Some(lo)
    } else if hi > HIT_EPS {
        Some(hi)
    } else {
        None
    }
}

fn intersect_plane(o: &Vector3<f64>, d: &Vector3<f64>, hx: f64, hy: f64) -> Option<f64> {
    if d.z.abs() < 1e-15 {
        return None;
    }
    let t = -o.z / d.z;
    if t <= HIT_EPS {
        return None;
    }
    let p = o + d * t;
    (p.x.abs() <= hx && p.y.abs() <= hy).then_some(t)
}

fn intersect_sphere(o: &Vector3<f64>, d: &Vector3<f64>, r: f64) -> Option<f64> {
    let b = o.dot(d);
    let c = o.norm_squared() - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    smallest_positive(-b - s, -b + s)
}

fn intersect_box(o: &Vector3<f64>, d: &Vector3<f64>, h: &[f64; 3]) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > h[k] {
                return None;
            }
            continue;
        }
        let t1 = (-h[k] - o[k]) / d[k];
        let t2 = (h[k] - o[k]) / d[k];
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    if t_near > t_far {
        return None;
    }
    smallest_positive(t_near, t_far)
}

fn intersect_cylinder(o: &Vector3<f64>, d: &Vector3<f64>, r: f64, hh: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > HIT_EPS && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = o.x * d.x + o.y * d.y;
        let c = o.x * o.x + o.y * o.y - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let s = disc.sqrt();
            for t in [(-b - s) / a, (-b + s) / a] {
                if (o.z + t * d.z).abs() <= hh {
                    consider(t);
                }
            }
        }
    }
    if d.z.abs() > 1e-15 {
        for zc in [-hh, hh] {
            let t = (zc - o.z) / d.z;
            let p = o + d * t;
            if p.x * p.x + p.y * p.y <= r * r {
                consider(t);
            }
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    /// Nearest hit over all primitives.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .min_by(|a, b| a.distance.total_cmp(&b.distance))
    }

    /// Walled courtyard with textured floor, pillars and clutter; the region
    /// `|x|, |y| < 6` around the origin is free for the sensor.
    pub fn courtyard() -> Self {
        let checker = |cell: f64, low: f64, high: f64| Some(Texture::Checker { cell, low, high });
        let plane = |half_x: f64, half_y: f64, t: [f64; 3], r: [f64; 3], refl: f64, tex: Option<Texture>| Primitive {
            shape: Shape::Plane { half_x, half_y },
            pose: PrimitivePose {
                translation: t,
                rotation: r,
            },
            reflectivity: refl,
            texture: tex,
        };
        let h = PI / 2.0;
        let mut primitives = vec![
            plane(20.0, 20.0, [0.0, 0.0, -1.5], [0.0, 0.0, 0.0], 0.3, checker(1.3, 0.15, 0.45)),
            plane(14.0, 5.0, [0.0, 14.0, 2.0], [h, 0.0, 0.0], 0.5, checker(0.9, 0.2, 0.8)),
            plane(14.0, 5.0, [0.0, -14.0, 2.0], [h, 0.0, 0.0], 0.5, checker(1.7, 0.3, 0.9)),
            plane(5.0, 14.0, [14.0, 0.0, 2.0], [0.0, h, 0.0], 0.5, checker(1.1, 0.1, 0.7)),
            plane(5.0, 14.0, [-14.0, 0.0, 2.0], [0.0, h, 0.0], 0.5, Some(Texture::Gradient {
                axis: 1,
                period: 2.5,
                low: 0.1,
                high: 0.9,
            })),
        ];
        let pillars = [
            ([8.0, 8.0], 0.6, 0.9),
            ([-8.5, 7.0], 0.4, 0.2),
            ([7.5, -9.0], 0.8, 0.6),
            ([-9.0, -8.0], 0.5, 0.75),
            ([0.0, 10.0], 0.7, 0.35),
            ([10.5, 0.5], 0.45, 0.55),
        ];
        for ([x, y], r, refl) in pillars {
            primitives.push(Primitive {
                shape: Shape::Cylinder {
                    radius: r,
                    half_height: 3.0,
                },
                pose: PrimitivePose {
                    translation: [x, y, 1.5],
                    rotation: [0.0; 3],
                },
                reflectivity: refl,
                texture: checker(0.5, refl * 0.5, refl),
            });
        }
        let boxes = [
            ([-7.5, 0.5, -0.7], [0.8, 1.5, 0.8], 0.4, 0.6),
            ([4.0, -10.0, -0.5], [1.5, 0.6, 1.0], 1.1, 0.3),
            ([-3.0, 9.0, 0.0], [1.0, 1.0, 1.5], 0.2, 0.85),
            ([10.0, 9.5, -0.9], [1.2, 0.5, 0.6], 0.7, 0.5),
        ];
        for (t, he, yaw, refl) in boxes {
            primitives.push(Primitive {
                shape: Shape::Box { half_extents: he },
                pose: PrimitivePose {
                    translation: t,
                    rotation: [0.0, 0.0, yaw],
                },
                reflectivity: refl,
                texture: checker(0.6, 0.1, refl),
            });
        }
        for (t, r, refl) in [([-9.5, -3.0, 0.5], 1.0, 0.9), ([3.0, 11.0, 3.0], 0.8, 0.25), ([9.0, -4.0, -0.5], 0.9, 0.65)] {
            primitives.push(Primitive {
                shape: Shape::Sphere { radius: r },
                pose: PrimitivePose {
                    translation: t,
                    rotation: [0.0; 3],
                },
                reflectivity: refl,
                texture: None,
            });
        }
        Scene { primitives }
    }
}

/// Scanner geometry and measurement model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScannerSpec {
    pub elevation_angles: Vec<f64>,
    pub width: usize,
    #[serde(default)]
    pub azimuth_offset: f64,
    pub max_range: f64,
    #[serde(default)]
    pub range_noise_sigma: f64,
    /// Intensity is `reflectivity · (1/r)^falloff`.
    #[serde(default)]
    pub intensity_falloff: f64,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl ScannerSpec {
    /// Uniform beams over `±half_fov_deg`, noiseless.
    pub fn uniform(height: usize, width: usize, half_fov_deg: f64, max_range: f64) -> Self {
        let model = SphericalModel::uniform(
            height,
            width,
            half_fov_deg.to_radians(),
            -half_fov_deg.to_radians(),
        )
        .expect("uniform model");
        Self {
            elevation_angles: model.elevation_angles,
            width,
            azimuth_offset: 0.0,
            max_range,
            range_noise_sigma: 0.0,
            intensity_falloff: 0.0,
            dropout_rate: 0.0,
        }
    }

    /// 64 x 1024, ±16.6°.
    pub fn os1_64() -> Self {
        Self {
            range_noise_sigma: 0.01,
            dropout_rate: 0.02,
            ..Self::uniform(64, 1024, 16.6, 120.0)
        }
    }

    /// 128 x 1024, ±45°.
    pub fn os0_128() -> Self {
        Self {
            range_noise_sigma: 0.01,
            dropout_rate: 0.02,
            ..Self::uniform(128, 1024, 45.0, 50.0)
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "os1-64" => Some(Self::os1_64()),
            "os0-128" => Some(Self::os0_128()),
            _ => None,
        }
    }

    pub fn height(&self) -> usize {
        self.elevation_angles.len()
    }

    pub fn model(&self) -> Result<SphericalModel> {
        SphericalModel::new(self.elevation_angles.clone(), self.width, self.azimuth_offset)
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument("dropout_rate must lie in [0, 1)".into()));
        }
        if !(self.max_range > 0.0) || self.range_noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("bad range parameters".into()));
        }
        Ok(())
    }
}

/// Casts one ray per pixel from `pose`; points are returned in the scanner frame.
pub fn raycast(scene: &Scene, pose: &Pose, spec: &ScannerSpec, seed: u64) -> Result<OrderedPointCloud> {
    spec.validate()?;
    let model = spec.model()?;
    let (h, w) = (spec.height(), spec.width);
    let origin = pose.transform.translation;
    let rot = pose.transform.rotation;
    let noise = Normal::new(0.0, spec.range_noise_sigma.max(0.0)).expect("finite sigma");

    let rows: Vec<Vec<Option<(Vector3<f64>, f64)>>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((v * w + u) as u64);
                    let dir = model.direction(u, v);
                    let hit = scene.intersect(&origin, &(rot * dir))?;
                    if hit.distance > spec.max_range {
                        return None;
                    }
                    if spec.dropout_rate > 0.0 && rng.random::<f64>() < spec.dropout_rate {
                        return None;
                    }
                    let measured = if spec.range_noise_sigma > 0.0 {
                        hit.distance + noise.sample(&mut rng)
                    } else {
                        hit.distance
                    };
                    if measured <= 0.0 {
                        return None;
                    }
                    let intensity = hit.reflectivity * hit.distance.powf(-spec.intensity_falloff);
                    Some((dir * measured, intensity))
                })
                .collect()
        })
        .collect();

    let mut cloud = OrderedPointCloud::empty(h, w);
    for (v, row) in rows.into_iter().enumerate() {
        for (u, cell) in row.into_iter().enumerate() {
            if cell.is_some() {
                cloud.set(v, u, cell);
            }
        }
    }
    Ok(cloud)
}

/// Poses along the waypoint polyline: `steps` intervals per segment, linear in
/// translation and slerp in rotation. The last waypoint is included exactly.
pub fn interpolate_waypoints(waypoints: &[Pose], steps: usize) -> Result<Vec<Pose>> {
    if waypoints.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 waypoints".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be positive".into()));
    }
    let mut out = Vec::with_capacity((waypoints.len() - 1) * steps + 1);
    for seg in waypoints.windows(2) {
        let (a, b) = (&seg[0], &seg[1]);
        let qa = a.transform.quaternion();
        let qb = b.transform.quaternion();
        for s in 0..steps {
            let f = s as f64 / steps as f64;
            let t = a.transform.translation * (1.0 - f) + b.transform.translation * f;
            let q: UnitQuaternion<f64> = if s == 0 { qa } else { qa.slerp(&qb, f) };
            let transform = if s == 0 {
                a.transform
            } else {
                RigidTransform::from_quaternion(&q, t)
            };
            out.push(Pose::new(transform, a.timestamp * (1.0 - f) + b.timestamp * f));
        }
    }
    out.push(*waypoints.last().unwrap());
    Ok(out)
}

/// Per-scan seed derived from the run seed.
pub fn scan_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Interpolates the waypoints and raycasts every pose.
pub fn generate_trajectory(
    scene: &Scene,
    spec: &ScannerSpec,
    waypoints: &[Pose],
    steps: usize,
    seed: u64,
) -> Result<Vec<(Pose, OrderedPointCloud)>> {
    interpolate_waypoints(waypoints, steps)?
        .into_iter()
        .enumerate()
        .map(|(i, pose)| Ok((pose, raycast(scene, &pose, spec, scan_seed(seed, i))?)))
        .collect()
}

/// Waypoints of a closed square of side `side` centered at the origin, at
/// height `z`, heading along the direction of travel. First and last coincide.
pub fn square_loop_waypoints(side: f64, z: f64, seconds_per_side: f64) -> Vec<Pose> {
    let h = side / 2.0;
    let corners = [(-h, -h), (h, -h), (h, h), (-h, h), (-h, -h)];
    corners
        .iter()
        .enumerate()
        .map(|(k, &(x, y))| {
            let yaw = (k.min(3)) as f64 * PI / 2.0;
            let t = if k == 4 {
                RigidTransform::from_translation(Vector3::new(x, y, z))
            } else {
                let mut t = RigidTransform::from_axis_angle(&Vector3::z(), yaw);
                t.translation = Vector3::new(x, y, z);
                t
            };
            Pose::new(t, k as f64 * seconds_per_side)
        })
        .collect()
}
