//! Rigid-body types shared by every stage of the pipeline.
//!
//! Conventions: column vectors, rotations stored as 3x3 matrices, poses map
//! scanner coordinates into the world frame.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Proper rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation of `angle` radians about `axis` (normalized internally), no translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self::new(*rot.matrix(), Vector3::zeros())
    }

    /// Rotation vector (axis scaled by angle) plus translation.
    pub fn from_rotation_vector(rotvec: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(*Rotation3::new(*rotvec).matrix(), translation)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::new(*q.to_rotation_matrix().matrix(), translation)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let q = self.quaternion();
        2.0 * q.vector().norm().atan2(q.w.abs())
    }

    /// Checks orthonormality and `det = +1` within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        let det = self.rotation.determinant();
        ortho <= tol
            && (det - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major_3x4(m: &[f64]) -> Result<Self> {
        if m.len() != 12 {
            return Err(Error::Format(format!(
                "expected 12 transform entries, got {}",
                m.len()
            )));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        Ok(Self::new(rotation, translation))
    }

    /// Largest elementwise difference to `other` over rotation and translation.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation)
            .amax()
            .max((self.translation - other.translation).amax())
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// `a ∘ b`: applies `b` first.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

/// Scanner-to-world pose with a timestamp in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub transform: RigidTransform,
    pub timestamp: f64,
}

impl Pose {
    pub fn new(transform: RigidTransform, timestamp: f64) -> Self {
        Self {
            transform,
            timestamp,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.transform.translation
    }
}

/// Transform mapping points of scan `from` into the frame of scan `to`.
///
/// `inverse(to) ∘ from`, so that `transform_cloud(P_from, T)` overlays `P_to`
/// when the poses are exact.
pub fn relative_transform(from: &Pose, to: &Pose) -> RigidTransform {
    to.transform.inverse().compose(&from.transform)
}

/// H x W grid of scanner-frame points with intensities and a validity mask.
///
/// Invalid cells hold a zero point and zero intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderedPointCloud {
    height: usize,
    width: usize,
    points: Vec<Vector3<f64>>,
    intensities: Vec<f64>,
    valid: Vec<bool>,
}

impl OrderedPointCloud {
    /// All-invalid cloud.
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            points: vec![Vector3::zeros(); n],
            intensities: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    /// Builds a cloud, checking sizes and that valid points are finite with
    /// positive range. Invalid cells are canonicalized to zero.
    pub fn from_parts(
        height: usize,
        width: usize,
        mut points: Vec<Vector3<f64>>,
        mut intensities: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = height * width;
        if points.len() != n || intensities.len() != n || valid.len() != n {
            return Err(Error::Shape(format!(
                "cloud {height}x{width} needs {n} entries per channel"
            )));
        }
        for i in 0..n {
            if valid[i] {
                let p = points[i];
                if !p.iter().all(|v| v.is_finite()) || p.norm() <= 0.0 || !intensities[i].is_finite()
                {
                    return Err(Error::InvalidArgument(format!(
                        "valid cell {i} has a non-finite or zero-range point"
                    )));
                }
            } else {
                points[i] = Vector3::zeros();
                intensities[i] = 0.0;
            }
        }
        Ok(Self {
            height,
            width,
            points,
            intensities,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn point(&self, row: usize, col: usize) -> Vector3<f64> {
        self.points[self.index(row, col)]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[self.index(row, col)]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Iterator over `(flat index, point)` of valid cells.
    pub fn valid_points(&self) -> impl Iterator<Item = (usize, &Vector3<f64>)> + '_ {
        self.points
            .iter()
            .enumerate()
            .filter(move |(i, _)| self.valid[*i])
    }

    /// Writes a cell. Passing `None` invalidates it.
    pub fn set(&mut self, row: usize, col: usize, value: Option<(Vector3<f64>, f64)>) {
        let i = self.index(row, col);
        match value {
            Some((p, intensity)) => {
                self.points[i] = p;
                self.intensities[i] = intensity;
                self.valid[i] = true;
            }
            None => {
                self.points[i] = Vector3::zeros();
                self.intensities[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }
}

/// Applies `t` to every valid point; mask and intensities are unchanged.
pub fn transform_cloud(cloud: &OrderedPointCloud, t: &RigidTransform) -> OrderedPointCloud {
    let mut out = cloud.clone();
    for (p, &valid) in out.points.iter_mut().zip(cloud.valid.iter()) {
        if valid {
            *p = t.apply(p);
        }
    }
    out
}
