//! Descriptor matching and robust rigid registration between feature sets.

use nalgebra::{Matrix3, Vector3, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::geom::{OrderedPointCloud, RigidTransform};
use crate::spatial::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// Matches sorted by index into set A; each A index appears at most once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Lowe ratio; `None` is plain mutual nearest neighbors.
    pub ratio: Option<f64>,
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Nearest and second-nearest squared distances; ties keep the lower index.
fn two_nearest(query: &[f64], set: &FeatureSet) -> (usize, f64, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for j in 0..set.len() {
        let d = sq_dist(query, set.descriptor(j));
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0, best.1, second)
}

/// Mutual nearest neighbors in descriptor space (exact linear scan).
pub fn match_features(a: &FeatureSet, b: &FeatureSet) -> Result<MatchSet> {
    match_features_with(a, b, &MatchConfig::default())
}

pub fn match_features_with(a: &FeatureSet, b: &FeatureSet, cfg: &MatchConfig) -> Result<MatchSet> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    if a.dim != b.dim {
        return Err(Error::Shape(format!("descriptor dims {} vs {}", a.dim, b.dim)));
    }
    let back: Vec<usize> = (0..b.len()).map(|j| two_nearest(b.descriptor(j), a).0).collect();
    let mut pairs = Vec::new();
    for i in 0..a.len() {
        let (j, d1, d2) = two_nearest(a.descriptor(i), b);
        if back[j] != i {
            continue;
        }
        if let Some(ratio) = cfg.ratio {
            if d2.is_finite() && d1.sqrt() >= ratio * d2.sqrt() {
                continue;
            }
        }
        pairs.push(Match {
            a: i,
            b: j,
            distance: d1.sqrt(),
        });
    }
    Ok(MatchSet { pairs })
}

/// Least-squares rigid fit `dst ≈ R src + t` (Kabsch with reflection guard).
///
/// Returns `None` for fewer than 3 pairs or mismatched lengths.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<RigidTransform> {
    if src.len() != dst.len() || src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut fix = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let rotation = u * fix * vt;
    Some(RigidTransform::new(rotation, cd - rotation * cs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_dist: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_dist: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Maps set-A points into set-B's frame.
    pub transform: RigidTransform,
    pub inlier_count: usize,
    /// Indices into the match set.
    pub inlier_indices: Vec<usize>,
    pub converged: bool,
}

fn inliers_of(t: &RigidTransform, src: &[Vector3<f64>], dst: &[Vector3<f64>], dist: f64) -> Vec<usize> {
    src.iter()
        .zip(dst)
        .enumerate()
        .filter(|(_, (s, d))| (t.apply(s) - *d).norm() < dist)
        .map(|(i, _)| i)
        .collect()
}

fn collinear(p: &[Vector3<f64>; 3]) -> bool {
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    let scale = e1.norm_squared().max(e2.norm_squared());
    scale == 0.0 || e1.cross(&e2).norm() <= 1e-9 * scale
}

/// RANSAC over minimal 3-match samples with a Kabsch refit on the best
/// consensus set. Among equal consensus sizes the earliest iteration wins.
pub fn estimate_rigid(matches: &MatchSet, a: &FeatureSet, b: &FeatureSet, cfg: &RansacConfig) -> Result<RegistrationResult> {
    if matches.len() < 3 {
        return Err(Error::TooFewMatches(matches.len()));
    }
    let src: Vec<Vector3<f64>> = matches.pairs.iter().map(|m| a.keypoints[m.a].point).collect();
    let dst: Vec<Vector3<f64>> = matches.pairs.iter().map(|m| b.keypoints[m.b].point).collect();
    estimate_rigid_points(&src, &dst, cfg)
}

/// [`estimate_rigid`] on already-paired points.
pub fn estimate_rigid_points(src: &[Vector3<f64>], dst: &[Vector3<f64>], cfg: &RansacConfig) -> Result<RegistrationResult> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return Err(Error::TooFewMatches(n.min(dst.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, RigidTransform)> = None;
    for _ in 0..cfg.iterations {
        let idx = rand::seq::index::sample(&mut rng, n, 3);
        let s = [src[idx.index(0)], src[idx.index(1)], src[idx.index(2)]];
        if collinear(&s) {
            continue;
        }
        let d = [dst[idx.index(0)], dst[idx.index(1)], dst[idx.index(2)]];
        let Some(t) = kabsch(&s, &d) else { continue };
        let count = src
            .iter()
            .zip(dst)
            .filter(|(p, q)| (t.apply(p) - *q).norm() < cfg.inlier_dist)
            .count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, t));
        }
    }
    let Some((_, hypothesis)) = best else {
        return Err(Error::Degenerate(cfg.iterations));
    };
    let consensus = inliers_of(&hypothesis, src, dst, cfg.inlier_dist);
    let mut transform = hypothesis;
    let mut inliers = consensus.clone();
    if consensus.len() >= 3 {
        let s: Vec<_> = consensus.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = consensus.iter().map(|&i| dst[i]).collect();
        if let Some(refit) = kabsch(&s, &d) {
            let refit_inliers = inliers_of(&refit, src, dst, cfg.inlier_dist);
            if refit_inliers.len() >= consensus.len() {
                transform = refit;
                inliers = refit_inliers;
            }
        }
    }
    Ok(RegistrationResult {
        transform,
        inlier_count: inliers.len(),
        converged: inliers.len() >= 3,
        inlier_indices: inliers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iter: usize,
    pub corr_dist: f64,
    /// Use every n-th valid source point.
    pub source_stride: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iter: 30,
            corr_dist: 1.0,
            source_stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    pub registration: RegistrationResult,
    /// Mean truncated squared residual after each accepted iterate, starting
    /// with the initial transform.
    pub residuals: Vec<f64>,
}

struct IcpState {
    cost: f64,
    src: Vec<Vector3<f64>>,
    dst: Vec<Vector3<f64>>,
}

fn icp_state(t: &RigidTransform, source: &[Vector3<f64>], grid: &VoxelGrid, corr_dist: f64) -> IcpState {
    let c2 = corr_dist * corr_dist;
    let mut cost = 0.0;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for p in source {
        let q = t.apply(p);
        match grid.nearest_within(&q, corr_dist) {
            Some((j, d)) if d < corr_dist => {
                cost += d * d;
                src.push(*p);
                dst.push(grid.points()[j]);
            }
            _ => cost += c2,
        }
    }
    IcpState {
        cost: cost / source.len().max(1) as f64,
        src,
        dst,
    }
}

/// Point-to-point ICP from `result.transform`. The truncated cost
/// `mean(min(d², corr_dist²))` never increases between reported iterates.
pub fn refine_icp(
    result: &RegistrationResult,
    a_cloud: &OrderedPointCloud,
    b_cloud: &OrderedPointCloud,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    if !result.converged {
        return Err(Error::InvalidArgument("ICP needs a converged initial registration".into()));
    }
    if !(cfg.corr_dist > 0.0) {
        return Err(Error::InvalidArgument("corr_dist must be positive".into()));
    }
    let source: Vec<Vector3<f64>> = a_cloud
        .valid_points()
        .step_by(cfg.source_stride.max(1))
        .map(|(_, p)| *p)
        .collect();
    let grid = VoxelGrid::new(b_cloud.valid_points().map(|(_, p)| *p).collect(), cfg.corr_dist);

    let mut t = result.transform;
    let mut state = icp_state(&t, &source, &grid, cfg.corr_dist);
    if state.src.len() < 3 {
        return Err(Error::NoCorrespondences(cfg.corr_dist));
    }
    let mut residuals = vec![state.cost];
    for _ in 0..cfg.max_iter {
        let Some(next) = kabsch(&state.src, &state.dst) else { break };
        let next_state = icp_state(&next, &source, &grid, cfg.corr_dist);
        if next_state.cost > state.cost || next_state.src.len() < 3 {
            break;
        }
        let change = state.cost - next_state.cost;
        t = next;
        state = next_state;
        residuals.push(state.cost);
        if change < 1e-6 {
            break;
        }
    }
    let inliers: Vec<usize> = (0..state.src.len()).collect();
    Ok(IcpResult {
        registration: RegistrationResult {
            transform: t,
            inlier_count: inliers.len(),
            inlier_indices: inliers,
            converged: true,
        },
        residuals,
    })
}
