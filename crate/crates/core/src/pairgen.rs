//! Training and evaluation pairs: synthetic image warps with exact pixel flow,
//! and real pairs from posed scans gated by overlap.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{relative_transform, OrderedPointCloud, Pose, RigidTransform};
use crate::projection::{ScanImage, SphericalModel};
use crate::spatial::VoxelGrid;

/// Per-pixel correspondence `(u, v) -> (u', v')` into a second image.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    pub height: usize,
    pub width: usize,
    pub target_u: Vec<f64>,
    pub target_v: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowMap {
    pub fn invalid(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            target_u: vec![0.0; n],
            target_v: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        let mut f = Self::invalid(height, width);
        for v in 0..height {
            for u in 0..width {
                f.set(u, v, Some((u as f64, v as f64)));
            }
        }
        f
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<(f64, f64)> {
        let i = self.index(u, v);
        self.valid[i].then(|| (self.target_u[i], self.target_v[i]))
    }

    pub fn set(&mut self, u: usize, v: usize, target: Option<(f64, f64)>) {
        let i = self.index(u, v);
        match target {
            Some((tu, tv)) => {
                self.target_u[i] = tu;
                self.target_v[i] = tv;
                self.valid[i] = true;
            }
            None => {
                self.target_u[i] = 0.0;
                self.target_v[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Nearest integer pixel of a continuous target, wrapping columns.
#[inline]
pub fn target_pixel(u: f64, v: f64, width: usize) -> (usize, isize) {
    let ui = ((u + 0.5).floor() as i64).rem_euclid(width as i64) as usize;
    (ui, (v + 0.5).floor() as isize)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticTransformParams {
    /// Zoom factor, `>= 1`. Range values are divided by it.
    pub scale: f64,
    /// Column rotation in pixels, wrapped.
    pub u_shift: i64,
    /// Row translation in pixels.
    pub v_shift: i64,
    /// Vertical shear: row offset reaching `±tilt` px at the image edges.
    pub tilt: f64,
}

impl Default for SyntheticTransformParams {
    fn default() -> Self {
        Self {
            scale: 1.0,
            u_shift: 0,
            v_shift: 0,
            tilt: 0.0,
        }
    }
}

/// Sampling intervals for synthetic warps.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticRanges {
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_u_shift: i64,
    pub max_v_shift: i64,
    pub max_tilt: f64,
}

impl Default for SyntheticRanges {
    fn default() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.25,
            max_u_shift: 50,
            max_v_shift: 0,
            max_tilt: 20.0,
        }
    }
}

impl SyntheticRanges {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> SyntheticTransformParams {
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        let u_shift = rng.random_range(-self.max_u_shift..=self.max_u_shift);
        let v_shift = rng.random_range(-self.max_v_shift..=self.max_v_shift);
        let tilt = if self.max_tilt > 0.0 {
            rng.random_range(-self.max_tilt..=self.max_tilt)
        } else {
            0.0
        };
        SyntheticTransformParams {
            scale,
            u_shift,
            v_shift,
            tilt,
        }
    }
}

struct WarpGeometry {
    w: usize,
    h: usize,
    cu: f64,
    cv: f64,
    p: SyntheticTransformParams,
}

impl WarpGeometry {
    fn tilt_offset(&self, u: f64) -> f64 {
        if self.w < 2 {
            0.0
        } else {
            self.p.tilt * (2.0 * u / (self.w - 1) as f64 - 1.0)
        }
    }

    /// Source pixel `(u, v)` of `I` to its continuous position in `I'`.
    /// `None` when the zoom pushes it out horizontally.
    fn forward(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        let s = self.p.scale;
        let u1 = s * (u - self.cu) + self.cu;
        let v1 = s * (v - self.cv) + self.cv;
        if u1 < 0.0 || u1 > (self.w - 1) as f64 {
            return None;
        }
        // reducing the shift first keeps u_shift and u_shift + W bit-identical
        let shift = self.p.u_shift.rem_euclid(self.w as i64) as f64;
        let u2 = (u1 + shift).rem_euclid(self.w as f64);
        let u2 = if u2 >= self.w as f64 { 0.0 } else { u2 };
        let v2 = v1 + self.p.v_shift as f64;
        Some((u2, v2 + self.tilt_offset(u2)))
    }

    /// Output pixel of `I'` to the continuous source position in `I`.
    fn inverse(&self, u: usize, v: usize) -> (f64, f64) {
        let v1 = v as f64 - self.tilt_offset(u as f64);
        let u2 = (u as i64 - self.p.u_shift).rem_euclid(self.w as i64) as f64;
        let v2 = v1 - self.p.v_shift as f64;
        let s = self.p.scale;
        (snap((u2 - self.cu) / s + self.cu), snap((v2 - self.cv) / s + self.cv))
    }
}

/// Rounds coordinates within 1e-9 of an integer so lattice-aligned samples
/// read a single source pixel.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Bilinear sample over valid neighbors only; `None` if none are valid.
fn sample_valid(img: &ScanImage, u: f64, v: f64) -> Option<(f64, f64)> {
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let mut wsum = 0.0;
    let mut range = 0.0;
    let mut intensity = 0.0;
    for (dv, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
        for (du, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
            let wgt = wu * wv;
            if wgt == 0.0 {
                continue;
            }
            let (uu, vv) = (u0 + du, v0 + dv);
            if uu < 0.0 || vv < 0.0 || uu >= img.width as f64 || vv >= img.height as f64 {
                continue;
            }
            let i = img.index(uu as usize, vv as usize);
            if !img.valid[i] {
                continue;
            }
            wsum += wgt;
            range += wgt * img.range[i];
            intensity += wgt * img.intensity[i];
        }
    }
    (wsum > 0.0).then(|| (range / wsum, intensity / wsum))
}

/// Applies zoom, column rotation, row shift and shear to a scan image, in
/// that order, and returns the warped image with the exact pixel flow.
pub fn synth_pair(image: &ScanImage, params: &SyntheticTransformParams) -> Result<(ScanImage, FlowMap)> {
    if !(params.scale >= 1.0) || !params.scale.is_finite() || !params.tilt.is_finite() {
        return Err(Error::InvalidArgument(format!("bad synthetic params {params:?}")));
    }
    let (h, w) = (image.height, image.width);
    let geo = WarpGeometry {
        w,
        h,
        cu: (w as f64 - 1.0) / 2.0,
        cv: (h as f64 - 1.0) / 2.0,
        p: *params,
    };

    let mut warped = ScanImage::invalid(h, w);
    for v in 0..h {
        for u in 0..w {
            let (su, sv) = geo.inverse(u, v);
            if let Some((r, i)) = sample_valid(image, su, sv) {
                let k = warped.index(u, v);
                warped.range[k] = r / params.scale;
                warped.intensity[k] = i;
                warped.valid[k] = true;
            }
        }
    }

    let mut flow = FlowMap::invalid(h, w);
    for v in 0..h {
        for u in 0..w {
            if !image.is_valid(u, v) {
                continue;
            }
            let Some((tu, tv)) = geo.forward(u as f64, v as f64) else {
                continue;
            };
            if tv < 0.0 || tv > (geo.h - 1) as f64 {
                continue;
            }
            let (pu, pv) = target_pixel(tu, tv, w);
            if pv < 0 || pv as usize >= h || !warped.is_valid(pu, pv as usize) {
                continue;
            }
            flow.set(u, v, Some((tu, tv)));
        }
    }
    Ok((warped, flow))
}

/// Fraction of `a`'s valid points that, after `t`, have a neighbor in `b`
/// closer than `corr_dist`.
pub fn overlap(a: &OrderedPointCloud, b: &OrderedPointCloud, t: &RigidTransform, corr_dist: f64) -> Result<f64> {
    let total = a.valid_count();
    if total == 0 {
        return Err(Error::EmptyCloud);
    }
    if !(corr_dist > 0.0) {
        return Err(Error::InvalidArgument("corr_dist must be positive".into()));
    }
    let grid = VoxelGrid::new(b.valid_points().map(|(_, p)| *p).collect(), corr_dist);
    let inside = a
        .valid_points()
        .filter(|(_, p)| {
            grid.nearest_within(&t.apply(p), corr_dist)
                .is_some_and(|(_, d)| d < corr_dist)
        })
        .count();
    Ok(inside as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairSelectionConfig {
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub overlap_threshold: f64,
    pub correspondence_distance: f64,
    pub occlusion_margin: f64,
}

impl Default for PairSelectionConfig {
    fn default() -> Self {
        Self {
            inner_radius: 1.0,
            outer_radius: 5.0,
            overlap_threshold: 0.2,
            correspondence_distance: 0.2,
            occlusion_margin: 0.5,
        }
    }
}

impl PairSelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.inner_radius && self.inner_radius < self.outer_radius) {
            return Err(Error::InvalidArgument("need 0 < r_i < r_o".into()));
        }
        if !(0.0 < self.overlap_threshold && self.overlap_threshold <= 1.0) {
            return Err(Error::InvalidArgument("overlap threshold must be in (0, 1]".into()));
        }
        if !(self.correspondence_distance > 0.0) || self.occlusion_margin < 0.0 {
            return Err(Error::InvalidArgument("bad distance thresholds".into()));
        }
        Ok(())
    }
}

/// Random access to scans by index.
pub trait ScanAccess {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn scan(&self, index: usize) -> Result<Cow<'_, OrderedPointCloud>>;
}

impl ScanAccess for [OrderedPointCloud] {
    fn len(&self) -> usize {
        <[OrderedPointCloud]>::len(self)
    }
    fn scan(&self, index: usize) -> Result<Cow<'_, OrderedPointCloud>> {
        self.get(index)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::InvalidArgument(format!("scan {index} out of range")))
    }
}

impl ScanAccess for Vec<OrderedPointCloud> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn scan(&self, index: usize) -> Result<Cow<'_, OrderedPointCloud>> {
        self.as_slice().scan(index)
    }
}

/// An accepted real pair: anchor, partner and the anchor-to-partner transform.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanPair {
    pub anchor: usize,
    pub partner: usize,
    pub transform: RigidTransform,
    pub overlap: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSelection {
    pub pairs: Vec<ScanPair>,
    /// Anchors for which no candidate passed the overlap gate.
    pub skipped_anchors: usize,
}

/// Picks one partner per anchor from the spherical shell around it, trying
/// candidates in seeded random order until one exceeds the overlap threshold.
pub fn select_real_pairs<S: ScanAccess + ?Sized>(
    poses: &[Pose],
    scans: &S,
    cfg: &PairSelectionConfig,
    anchor_stride: usize,
    seed: u64,
) -> Result<PairSelection> {
    cfg.validate()?;
    if scans.len() != poses.len() {
        return Err(Error::Shape(format!(
            "{} poses vs {} scans",
            poses.len(),
            scans.len()
        )));
    }
    let stride = anchor_stride.max(1);
    let mut out = PairSelection::default();
    for anchor in (0..poses.len()).step_by(stride) {
        let center = poses[anchor].position();
        let mut candidates: Vec<usize> = (0..poses.len())
            .filter(|&j| {
                let d = (poses[j].position() - center).norm();
                j != anchor && d >= cfg.inner_radius && d <= cfg.outer_radius
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(anchor as u64);
        candidates.shuffle(&mut rng);

        let a = scans.scan(anchor)?;
        let mut accepted = None;
        for j in candidates {
            let t = relative_transform(&poses[anchor], &poses[j]);
            let b = scans.scan(j)?;
            let omega = match overlap(&a, &b, &t, cfg.correspondence_distance) {
                Ok(o) => o,
                Err(Error::EmptyCloud) => 0.0,
                Err(e) => return Err(e),
            };
            if omega > cfg.overlap_threshold {
                accepted = Some(ScanPair {
                    anchor,
                    partner: j,
                    transform: t,
                    overlap: omega,
                });
                break;
            }
        }
        match accepted {
            Some(p) => out.pairs.push(p),
            None => out.skipped_anchors += 1,
        }
    }
    Ok(out)
}

/// Pixel flow of a real pair: each valid pixel of `a` is transformed by `t`
/// and spherically projected into `b`, dropping targets that fall outside the
/// beam rows, on invalid pixels, or behind `b`'s surface by more than
/// `occlusion_margin`.
pub fn pixel_flow(
    a: &OrderedPointCloud,
    b_image: &ScanImage,
    t: &RigidTransform,
    model: &SphericalModel,
    occlusion_margin: f64,
) -> Result<FlowMap> {
    model.check_dims(b_image.height, b_image.width)?;
    let (hb, wb) = (b_image.height, b_image.width);
    let mut flow = FlowMap::invalid(a.height(), a.width());
    for v in 0..a.height() {
        for u in 0..a.width() {
            if !a.is_valid(v, u) {
                continue;
            }
            let p = t.apply(&a.point(v, u));
            let r = p.norm();
            if !(r > 0.0) {
                continue;
            }
            let tu = model.column_coord(p.y.atan2(p.x));
            let tv = model.row_coord((p.z / r).asin());
            if !(tv >= 0.0 && tv <= (hb - 1) as f64) {
                continue;
            }
            let (pu, pv) = target_pixel(tu, tv, wb);
            let pv = pv as usize;
            if !b_image.is_valid(pu, pv) {
                continue;
            }
            if r > b_image.range_at(pu, pv) + occlusion_margin {
                continue;
            }
            flow.set(u, v, Some((tu, tv)));
        }
    }
    Ok(flow)
}
