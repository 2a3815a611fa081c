//! Dense network outputs and their reduction to sparse 3D keypoints.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::OrderedPointCloud;

/// Per-pixel descriptors and score maps for one scan image.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Pixel-major: descriptor of pixel `i` is `descriptors[i*dim..(i+1)*dim]`.
    pub descriptors: Vec<f64>,
    pub reliability: Vec<f64>,
    pub repeatability: Vec<f64>,
    /// Validity of the source image pixels.
    pub valid: Vec<bool>,
}

impl DenseFeatureMap {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn descriptor(&self, pixel: usize) -> &[f64] {
        &self.descriptors[pixel * self.dim..(pixel + 1) * self.dim]
    }

    pub fn check(&self) -> Result<()> {
        let n = self.len();
        if self.descriptors.len() != n * self.dim
            || self.reliability.len() != n
            || self.repeatability.len() != n
            || self.valid.len() != n
        {
            return Err(Error::Shape("dense feature map buffers disagree".into()));
        }
        Ok(())
    }
}

/// Single keypoint score map: elementwise reliability × repeatability.
pub fn fuse_scores(maps: &DenseFeatureMap) -> Vec<f64> {
    maps.reliability
        .iter()
        .zip(&maps.repeatability)
        .map(|(r, q)| (r * q).clamp(0.0, 1.0))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    /// Column.
    pub u: usize,
    /// Row.
    pub v: usize,
    pub point: Vector3<f64>,
    pub score: f64,
}

/// Keypoints with index-aligned unit descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub keypoints: Vec<Keypoint>,
    /// Flattened, `keypoints.len() * dim` values.
    pub descriptors: Vec<f64>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            keypoints: Vec::new(),
            descriptors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    #[inline]
    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, kp: Keypoint, descriptor: &[f64]) {
        debug_assert_eq!(descriptor.len(), self.dim);
        self.keypoints.push(kp);
        self.descriptors.extend_from_slice(descriptor);
    }

    pub fn points(&self) -> Vec<Vector3<f64>> {
        self.keypoints.iter().map(|k| k.point).collect()
    }

    /// Keeps the `k` highest-scoring keypoints (the set is score-sorted).
    pub fn truncate(&mut self, k: usize) {
        self.keypoints.truncate(k);
        self.descriptors.truncate(k * self.dim);
    }
}

/// Chebyshev pixel distance with wrapping columns.
#[inline]
pub fn chebyshev_wrapped(a: (usize, usize), b: (usize, usize), width: usize) -> usize {
    let du = a.0.abs_diff(b.0);
    let du = du.min(width - du);
    du.max(a.1.abs_diff(b.1))
}

/// Whether candidate `q` suppresses `p`: higher score, or equal score and
/// smaller (row, column).
#[inline]
fn beats(sq: f64, q: (usize, usize), sp: f64, p: (usize, usize)) -> bool {
    sq > sp || (sq == sp && (q.1, q.0) < (p.1, p.0))
}

/// Thresholded square-window NMS on a row-major `height x width` score map.
///
/// A pixel survives when its score exceeds `threshold` and no other
/// candidate within Chebyshev distance `radius` (columns wrap) beats it.
/// Returns `(u, v)` pixels sorted by descending score.
pub fn nms(scores: &[f64], height: usize, width: usize, threshold: f64, radius: usize) -> Vec<(usize, usize)> {
    let is_candidate = |i: usize| scores[i] > threshold;
    let cols: Vec<isize> = if 2 * radius + 1 >= width {
        (0..width as isize).collect()
    } else {
        (-(radius as isize)..=radius as isize).collect()
    };
    let mut kept = Vec::new();
    for v in 0..height {
        for u in 0..width {
            let i = v * width + u;
            if !is_candidate(i) {
                continue;
            }
            let sp = scores[i];
            let rows = v.saturating_sub(radius)..=(v + radius).min(height - 1);
            let suppressed = rows.into_iter().any(|qv| {
                cols.iter().any(|&dc| {
                    let qu = if 2 * radius + 1 >= width {
                        dc as usize
                    } else {
                        (u as isize + dc).rem_euclid(width as isize) as usize
                    };
                    let j = qv * width + qu;
                    j != i && is_candidate(j) && beats(scores[j], (qu, qv), sp, (u, v))
                })
            });
            if !suppressed {
                kept.push((u, v));
            }
        }
    }
    sort_by_score(&mut kept, scores, width);
    kept
}

fn sort_by_score(px: &mut [(usize, usize)], scores: &[f64], width: usize) {
    px.sort_by(|a, b| {
        scores[b.1 * width + b.0]
            .total_cmp(&scores[a.1 * width + a.0])
            .then((a.1, a.0).cmp(&(b.1, b.0)))
    });
}

/// Score fusion, thresholding, NMS, invalid-point removal and 3D lifting.
pub fn extract(maps: &DenseFeatureMap, cloud: &OrderedPointCloud, score_threshold: f64, nms_radius: usize) -> Result<FeatureSet> {
    maps.check()?;
    if maps.height != cloud.height() || maps.width != cloud.width() {
        return Err(Error::Shape(format!(
            "maps {}x{} vs cloud {}x{}",
            maps.height,
            maps.width,
            cloud.height(),
            cloud.width()
        )));
    }
    let scores = fuse_scores(maps);
    let mut out = FeatureSet::new(maps.dim);
    for (u, v) in nms(&scores, maps.height, maps.width, score_threshold, nms_radius) {
        if !cloud.is_valid(v, u) {
            continue;
        }
        let i = v * maps.width + u;
        out.push(
            Keypoint {
                u,
                v,
                point: cloud.point(v, u),
                score: scores[i],
            },
            maps.descriptor(i),
        );
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExtractConfig {
    pub score_threshold: f64,
    pub nms_radius: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.7,
            nms_radius: 8,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat_maps(h: usize, w: usize, rel: f64, rep: f64) -> DenseFeatureMap {
        let n = h * w;
        DenseFeatureMap {
            height: h,
            width: w,
            dim: 2,
            descriptors: (0..n).flat_map(|_| [1.0, 0.0]).collect(),
            reliability: vec![rel; n],
            repeatability: vec![rep; n],
            valid: vec![true; n],
        }
    }

    #[test]
    fn fuse_product() {
        assert!(fuse_scores(&flat_maps(2, 2, 1.0, 1.0)).iter().all(|s| *s == 1.0));
        assert!(fuse_scores(&flat_maps(2, 2, 0.8, 0.5)).iter().all(|s| (*s - 0.4).abs() < 1e-15));
    }

    #[test]
    fn defaults() {
        let c = ExtractConfig::default();
        assert_eq!((c.score_threshold, c.nms_radius), (0.7, 8));
    }

    #[test]
    fn below_threshold_is_empty() {
        let maps = flat_maps(10, 20, 0.8, 0.8);
        let mut cloud = OrderedPointCloud::empty(10, 20);
        cloud.set(3, 3, Some((Vector3::new(1.0, 0.0, 0.0), 0.0)));
        let fs = extract(&maps, &cloud, 0.7, 8).unwrap();
        assert!(fs.is_empty());
    }

    #[test]
    fn suppression_keeps_the_stronger() {
        let (h, w) = (20, 40);
        let mut s = vec![0.0; h * w];
        s[10 * w + 10] = 0.9;
        s[10 * w + 15] = 0.8;
        assert_eq!(nms(&s, h, w, 0.7, 8), vec![(10, 10)]);
        // wrap: columns 1 and 38 are 3 apart
        let mut s = vec![0.0; h * w];
        s[5 * w + 1] = 0.8;
        s[5 * w + 38] = 0.9;
        assert_eq!(nms(&s, h, w, 0.7, 8), vec![(38, 5)]);
    }

    #[test]
    fn equal_scores_keep_lower_index() {
        let (h, w) = (10, 30);
        let mut s = vec![0.0; h * w];
        s[2 * w + 5] = 0.9;
        s[3 * w + 2] = 0.9;
        assert_eq!(nms(&s, h, w, 0.7, 8), vec![(5, 2)]);
    }

    #[test]
    fn invalid_cells_removed_after_nms() {
        let mut maps = flat_maps(10, 30, 0.0, 0.0);
        let w = 30;
        maps.reliability[4 * w + 4] = 1.0;
        maps.repeatability[4 * w + 4] = 0.95;
        maps.reliability[4 * w + 7] = 1.0;
        maps.repeatability[4 * w + 7] = 0.9;
        let mut cloud = OrderedPointCloud::empty(10, 30);
        cloud.set(4, 7, Some((Vector3::new(0.0, 3.0, 4.0), 0.0)));
        // the stronger pixel is invalid but still suppresses its neighbor
        let fs = extract(&maps, &cloud, 0.7, 8).unwrap();
        assert!(fs.is_empty());
        let fs = extract(&maps, &cloud, 0.7, 2).unwrap();
        assert_eq!(fs.len(), 1);
        assert_eq!((fs.keypoints[0].u, fs.keypoints[0].v), (7, 4));
        assert_eq!(fs.keypoints[0].point.norm(), 5.0);
        assert_eq!(fs.descriptor(0), &[1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds(seed in 0u64..500, lo in 0.3f64..0.7, extra in 0.0f64..0.3) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (16, 48);
            let s: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
            let a = nms(&s, h, w, lo, 3);
            let b = nms(&s, h, w, lo + extra, 3);
            for p in &b {
                prop_assert!(a.contains(p));
            }
            for (i, p) in a.iter().enumerate() {
                for q in &a[i + 1..] {
                    prop_assert!(chebyshev_wrapped(*p, *q, w) > 3);
                }
            }
        }
    }
}
