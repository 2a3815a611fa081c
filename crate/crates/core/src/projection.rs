//! Scan images and the spherical projection between ordered clouds and pixels.
//!
//! Pixel coordinates are `(u, v)` = (column, row) with pixel centers at
//! integer positions. Column `u` covers azimuths
//! `[u·res − offset, (u+1)·res − offset)`; row `v` is the beam whose elevation
//! is nearest.

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::OrderedPointCloud;

/// 2-channel (range, intensity) raster with validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanImage {
    pub height: usize,
    pub width: usize,
    pub range: Vec<f64>,
    pub intensity: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ScanImage {
    pub fn invalid(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            range: vec![0.0; n],
            intensity: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[self.index(u, v)]
    }

    #[inline]
    pub fn range_at(&self, u: usize, v: usize) -> f64 {
        self.range[self.index(u, v)]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Marks a pixel invalid and zeroes its channels.
    pub fn invalidate(&mut self, u: usize, v: usize) {
        let i = self.index(u, v);
        self.range[i] = 0.0;
        self.intensity[i] = 0.0;
        self.valid[i] = false;
    }

    /// Copy with all columns rotated right by `k` (wrapping).
    pub fn rotate_columns(&self, k: isize) -> ScanImage {
        let w = self.width as isize;
        let mut out = ScanImage::invalid(self.height, self.width);
        for v in 0..self.height {
            for u in 0..self.width {
                let src = (u as isize - k).rem_euclid(w) as usize;
                let (i, j) = (self.index(u, v), self.index(src, v));
                out.range[i] = self.range[j];
                out.intensity[i] = self.intensity[j];
                out.valid[i] = self.valid[j];
            }
        }
        out
    }
}

/// Beam table plus azimuth sampling of a spinning scanner.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalModel {
    pub azimuth_resolution: f64,
    /// Per-row elevation in radians, strictly decreasing from the top row.
    pub elevation_angles: Vec<f64>,
    pub azimuth_offset: f64,
}

impl SphericalModel {
    pub fn new(elevation_angles: Vec<f64>, width: usize, azimuth_offset: f64) -> Result<Self> {
        if elevation_angles.is_empty() || width == 0 {
            return Err(Error::InvalidArgument("empty spherical model".into()));
        }
        if elevation_angles.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::InvalidArgument(
                "elevation angles must be strictly decreasing".into(),
            ));
        }
        Ok(Self {
            azimuth_resolution: 2.0 * PI / width as f64,
            elevation_angles,
            azimuth_offset,
        })
    }

    /// Evenly spaced beams from `top` down to `bottom` (radians).
    pub fn uniform(height: usize, width: usize, top: f64, bottom: f64) -> Result<Self> {
        let elev = if height == 1 {
            vec![0.5 * (top + bottom)]
        } else {
            let step = (top - bottom) / (height - 1) as f64;
            (0..height).map(|i| top - step * i as f64).collect()
        };
        Self::new(elev, width, 0.0)
    }

    pub fn height(&self) -> usize {
        self.elevation_angles.len()
    }

    pub fn width(&self) -> usize {
        (2.0 * PI / self.azimuth_resolution).round() as usize
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height() != height || self.width() != width {
            return Err(Error::Shape(format!(
                "model is {}x{}, image is {height}x{width}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }

    /// Azimuth of the center of column `u`.
    #[inline]
    pub fn column_azimuth(&self, u: usize) -> f64 {
        (u as f64 + 0.5) * self.azimuth_resolution - self.azimuth_offset
    }

    /// Unit ray direction through the center of pixel `(u, v)`.
    #[inline]
    pub fn direction(&self, u: usize, v: usize) -> Vector3<f64> {
        let e = self.elevation_angles[v];
        let a = self.column_azimuth(u);
        Vector3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin())
    }

    /// Continuous column coordinate in `[0, W)` of an azimuth.
    #[inline]
    pub fn column_coord(&self, azimuth: f64) -> f64 {
        let w = self.width() as f64;
        let c = ((azimuth + self.azimuth_offset) / self.azimuth_resolution - 0.5).rem_euclid(w);
        // rem_euclid can round up to exactly w
        if c >= w {
            0.0
        } else {
            c
        }
    }

    /// Integer column of an azimuth: `floor((a + offset) / res) mod W`.
    #[inline]
    pub fn column_index(&self, azimuth: f64) -> usize {
        let w = self.width() as f64;
        let c = ((azimuth + self.azimuth_offset) / self.azimuth_resolution)
            .floor()
            .rem_euclid(w);
        (c as usize) % self.width()
    }

    /// Continuous row coordinate of an elevation: piecewise linear in the beam
    /// table, extrapolated with the edge spacing outside it.
    pub fn row_coord(&self, elevation: f64) -> f64 {
        let e = &self.elevation_angles;
        let h = e.len();
        if h == 1 {
            return 0.0;
        }
        if elevation >= e[0] {
            return (e[0] - elevation) / (e[0] - e[1]);
        }
        if elevation <= e[h - 1] {
            return (h - 1) as f64 + (e[h - 1] - elevation) / (e[h - 2] - e[h - 1]);
        }
        // first index whose angle is below the elevation
        let hi = e.partition_point(|&x| x >= elevation);
        let lo = hi - 1;
        lo as f64 + (e[lo] - elevation) / (e[lo] - e[hi])
    }

    /// Nearest beam row, or `None` when the elevation is outside the band.
    pub fn row_index(&self, elevation: f64) -> Option<usize> {
        let r = (self.row_coord(elevation) + 0.5).floor();
        if r >= 0.0 && r < self.height() as f64 {
            Some(r as usize)
        } else {
            None
        }
    }
}

/// Range image from an ordered cloud: `range = ‖p‖` on valid cells.
pub fn to_scan_image(cloud: &OrderedPointCloud) -> ScanImage {
    let mut img = ScanImage::invalid(cloud.height(), cloud.width());
    for (i, p) in cloud.valid_points() {
        img.range[i] = p.norm();
        img.intensity[i] = cloud.intensities()[i];
        img.valid[i] = true;
    }
    img
}

/// Bookkeeping from [`project`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProjectionReport {
    pub projected: usize,
    /// Points whose elevation is outside the beam table.
    pub out_of_band: usize,
    /// Points at the sensor origin or non-finite.
    pub degenerate: usize,
    /// Points discarded because a nearer point took the pixel.
    pub occluded: usize,
}

/// Spherical projection of an unordered point set.
///
/// Nearest point wins each pixel; equal ranges keep the lower input index.
pub fn project(
    points: &[Vector3<f64>],
    intensities: &[f64],
    model: &SphericalModel,
    height: usize,
    width: usize,
) -> Result<(ScanImage, ProjectionReport)> {
    model.check_dims(height, width)?;
    if points.len() != intensities.len() {
        return Err(Error::Shape("points and intensities differ in length".into()));
    }
    let mut img = ScanImage::invalid(height, width);
    let mut report = ProjectionReport::default();
    for (p, &intensity) in points.iter().zip(intensities) {
        let r = p.norm();
        if !(r > 0.0) || !r.is_finite() {
            report.degenerate += 1;
            continue;
        }
        let Some(v) = model.row_index((p.z / r).asin()) else {
            report.out_of_band += 1;
            continue;
        };
        let u = model.column_index(p.y.atan2(p.x));
        let i = img.index(u, v);
        if img.valid[i] {
            report.occluded += 1;
            if r >= img.range[i] {
                continue;
            }
        } else {
            report.projected += 1;
        }
        img.range[i] = r;
        img.intensity[i] = intensity;
        img.valid[i] = true;
    }
    Ok((img, report))
}

/// 3D point of pixel `(u, v)`: `range · (cos e cos a, cos e sin a, sin e)`.
pub fn lift(image: &ScanImage, model: &SphericalModel, u: usize, v: usize) -> Result<Vector3<f64>> {
    if u >= image.width || v >= image.height || !image.is_valid(u, v) {
        return Err(Error::InvalidPixel { u, v });
    }
    Ok(model.direction(u, v) * image.range_at(u, v))
}

/// Lifts every valid pixel, producing the ordered cloud of the image.
pub fn lift_cloud(image: &ScanImage, model: &SphericalModel) -> Result<OrderedPointCloud> {
    model.check_dims(image.height, image.width)?;
    let mut cloud = OrderedPointCloud::empty(image.height, image.width);
    for v in 0..image.height {
        for u in 0..image.width {
            if image.is_valid(u, v) && image.range_at(u, v) > 0.0 {
                let p = model.direction(u, v) * image.range_at(u, v);
                cloud.set(v, u, Some((p, image.intensity[image.index(u, v)])));
            }
        }
    }
    Ok(cloud)
}
