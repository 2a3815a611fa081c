//! Odometry chaining, bag-of-words loop proposals and pose-graph optimization.

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::geom::{OrderedPointCloud, RigidTransform};
use crate::register::{estimate_rigid, match_features, refine_icp, IcpConfig, RansacConfig, RegistrationResult};

/// Increment `(ω, v)` to a transform: rotation `Exp(ω)`, translation `v`.
pub fn se3_exp(delta: &Vector6<f64>) -> RigidTransform {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let v = Vector3::new(delta[3], delta[4], delta[5]);
    RigidTransform::from_rotation_vector(&w, v)
}

/// Inverse of [`se3_exp`]: rotation vector (small-angle safe) and translation.
pub fn se3_log(t: &RigidTransform) -> Vector6<f64> {
    let q = t.quaternion();
    let (w, xyz) = (q.w, q.imag());
    let s = xyz.norm();
    // keep the shorter arc
    let (w, xyz) = if w < 0.0 { (-w, -xyz) } else { (w, xyz) };
    let scale = if s < 1e-8 {
        // 2·atan2(s, w)/s ≈ 2/w · (1 - s²/(3w²))
        2.0 / w * (1.0 - s * s / (3.0 * w * w))
    } else {
        2.0 * s.atan2(w) / s
    };
    let r = xyz * scale;
    Vector6::new(r.x, r.y, r.z, t.translation.x, t.translation.y, t.translation.z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
}

impl Vocabulary {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Nearest word; ties resolve to the lower index.
    pub fn assign(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.k() {
            let d = sq_dist(x, self.centroid(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or 100 rounds. `descriptors` is row-major with `dim` columns.
pub fn build_vocabulary(descriptors: &[f64], dim: usize, k: usize, seed: u64) -> Result<Vocabulary> {
    if dim == 0 || descriptors.len() % dim != 0 {
        return Err(Error::Shape("descriptor buffer not a multiple of dim".into()));
    }
    if k < 2 {
        return Err(Error::InvalidArgument("vocabulary needs k >= 2".into()));
    }
    let n = descriptors.len() / dim;
    if n < k {
        return Err(Error::TooFewDescriptors { needed: k, got: n });
    }
    let row = |i: usize| &descriptors[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            let distinct = centroids.len() / dim;
            return Err(Error::TooFewDescriptors { needed: k, got: distinct });
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 && target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        while d2[pick] <= 0.0 {
            pick -= 1;
        }
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }

    let mut vocab = Vocabulary { dim, centroids };
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..100 {
        let next: Vec<usize> = (0..n).into_par_iter().map(|i| vocab.assign(row(i))).collect();
        if next == assignment {
            break;
        }
        assignment = next;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &j) in assignment.iter().enumerate() {
            counts[j] += 1;
            for (s, x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for j in 0..k {
            // empty clusters keep their previous centroid
            if counts[j] > 0 {
                for (c, s) in vocab.centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
    }
    Ok(vocab)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BowHistogram {
    /// Unit L2 norm, or all zero when `empty`.
    pub weights: Vec<f64>,
    pub empty: bool,
}

pub fn histogram(features: &FeatureSet, vocab: &Vocabulary) -> Result<BowHistogram> {
    if features.dim != vocab.dim {
        return Err(Error::Shape(format!("descriptor dim {} vs vocabulary {}", features.dim, vocab.dim)));
    }
    let mut counts = vec![0.0; vocab.k()];
    for i in 0..features.len() {
        counts[vocab.assign(features.descriptor(i))] += 1.0;
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(BowHistogram {
            weights: counts,
            empty: true,
        });
    }
    Ok(BowHistogram {
        weights: counts.iter().map(|c| c / norm).collect(),
        empty: false,
    })
}

pub fn histogram_distance(a: &BowHistogram, b: &BowHistogram) -> f64 {
    sq_dist(&a.weights, &b.weights).sqrt()
}

/// Pairs `(i, j)` with `j - i >= min_index_gap` and histogram distance
/// below `tau_h`. Empty histograms never propose.
pub fn propose_loops(histograms: &[BowHistogram], tau_h: f64, min_index_gap: usize) -> Vec<(usize, usize)> {
    let n = histograms.len();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let start = i + min_index_gap.max(1);
            (start..n)
                .filter(move |&j| {
                    !histograms[i].empty && !histograms[j].empty && histogram_distance(&histograms[i], &histograms[j]) < tau_h
                })
                .map(move |j| (i, j))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Odometry,
    Loop,
}

/// Constraint `measurement ≈ nodes[i]⁻¹ ∘ nodes[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub measurement: RigidTransform,
    pub kind: EdgeKind,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PoseGraph {
    pub nodes: Vec<RigidTransform>,
    pub edges: Vec<Edge>,
    /// Loop registrations rejected at build time.
    pub dropped_loops: usize,
}

fn edge_residual(e: &Edge, ti: &RigidTransform, tj: &RigidTransform) -> Vector6<f64> {
    se3_log(&e.measurement.inverse().compose(&ti.inverse().compose(tj)))
}

impl PoseGraph {
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        for e in &self.edges {
            if e.i >= n || e.j >= n || e.i == e.j {
                return Err(Error::InvalidArgument(format!("edge ({}, {}) out of range", e.i, e.j)));
            }
        }
        for k in 0..n.saturating_sub(1) {
            let linked = self
                .edges
                .iter()
                .any(|e| e.kind == EdgeKind::Odometry && e.i == k && e.j == k + 1);
            if !linked {
                return Err(Error::BrokenChain(k));
            }
        }
        Ok(())
    }

    pub fn residual(&self, e: &Edge) -> Vector6<f64> {
        edge_residual(e, &self.nodes[e.i], &self.nodes[e.j])
    }

    /// Σ weight · ‖log residual‖².
    pub fn total_residual(&self) -> f64 {
        cost(&self.edges, &self.nodes)
    }

    pub fn loop_count(&self) -> usize {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Loop).count()
    }
}

fn cost(edges: &[Edge], nodes: &[RigidTransform]) -> f64 {
    edges
        .iter()
        .map(|e| e.weight * edge_residual(e, &nodes[e.i], &nodes[e.j]).norm_squared())
        .sum()
}

/// `odometry[k].transform` maps scan `k+1` into scan `k`'s frame; a loop
/// `(i, j, r)` has `r.transform` mapping scan `j` into scan `i`'s frame.
/// Non-converged loops are dropped and counted.
pub fn build_graph(odometry: &[Option<RegistrationResult>], loops: &[(usize, usize, RegistrationResult)]) -> Result<PoseGraph> {
    let mut nodes = vec![RigidTransform::identity()];
    let mut edges = Vec::new();
    for (k, odo) in odometry.iter().enumerate() {
        let Some(r) = odo.as_ref().filter(|r| r.converged) else {
            return Err(Error::BrokenChain(k));
        };
        nodes.push(nodes[k].compose(&r.transform));
        edges.push(Edge {
            i: k,
            j: k + 1,
            measurement: r.transform,
            kind: EdgeKind::Odometry,
            weight: 1.0,
        });
    }
    let mut dropped = 0;
    for (i, j, r) in loops {
        if !r.converged || *i >= nodes.len() || *j >= nodes.len() || i == j {
            dropped += 1;
            continue;
        }
        edges.push(Edge {
            i: *i,
            j: *j,
            measurement: r.transform,
            kind: EdgeKind::Loop,
            weight: 1.0,
        });
    }
    Ok(PoseGraph {
        nodes,
        edges,
        dropped_loops: dropped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub max_iter: usize,
    pub lambda_init: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            lambda_init: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeResult {
    pub graph: PoseGraph,
    /// Total residual at the start and after every accepted step.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

const JAC_STEP: f64 = 1e-6;

/// Levenberg–Marquardt over right-multiplicative 6-dof increments with node 0
/// held fixed.
pub fn optimize(graph: &PoseGraph, cfg: &LmConfig) -> Result<OptimizeResult> {
    graph.validate()?;
    let n = graph.nodes.len();
    let free = n.saturating_sub(1);
    let dim = 6 * free;
    let mut nodes = graph.nodes.clone();
    let mut current = cost(&graph.edges, &nodes);
    let mut residuals = vec![current];
    let mut lambda = cfg.lambda_init;
    let mut iterations = 0;

    if dim == 0 {
        return Ok(OptimizeResult {
            graph: graph.clone(),
            residuals,
            iterations,
        });
    }

    // Jacobian and normal equations are rebuilt only after accepted steps
    let mut system: Option<(DMatrix<f64>, DVector<f64>)> = None;
    while iterations < cfg.max_iter {
        iterations += 1;
        let (h, g) = system.get_or_insert_with(|| normal_equations(&graph.edges, &nodes));
        if g.norm() < 1e-8 {
            break;
        }
        let mut damped = h.clone();
        for d in 0..dim {
            damped[(d, d)] += lambda;
        }
        let Some(chol) = damped.cholesky() else {
            return Err(Error::SingularSystem);
        };
        let step = chol.solve(&(-&*g));
        if !step.iter().all(|x| x.is_finite()) {
            return Err(Error::SingularSystem);
        }
        if step.norm() < 1e-10 {
            break;
        }
        let mut candidate = nodes.clone();
        for (k, node) in candidate.iter_mut().enumerate().skip(1) {
            let d = Vector6::from_iterator(step.rows(6 * (k - 1), 6).iter().copied());
            *node = node.compose(&se3_exp(&d));
        }
        let c = cost(&graph.edges, &candidate);
        if c < current {
            nodes = candidate;
            current = c;
            residuals.push(c);
            lambda = (lambda / 10.0).max(1e-12);
            system = None;
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
    }
    Ok(OptimizeResult {
        graph: PoseGraph {
            nodes,
            edges: graph.edges.clone(),
            dropped_loops: graph.dropped_loops,
        },
        residuals,
        iterations,
    })
}

/// Gauss–Newton system `(JᵀWJ, JᵀWr)` from central-difference Jacobians.
fn normal_equations(edges: &[Edge], nodes: &[RigidTransform]) -> (DMatrix<f64>, DVector<f64>) {
    let dim = 6 * (nodes.len() - 1);
    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    for e in edges {
        let (ti, tj) = (&nodes[e.i], &nodes[e.j]);
        let r = edge_residual(e, ti, tj);
        let mut blocks: Vec<(usize, nalgebra::Matrix6<f64>)> = Vec::with_capacity(2);
        for (node, is_i) in [(e.i, true), (e.j, false)] {
            if node == 0 {
                continue;
            }
            let mut jac = nalgebra::Matrix6::zeros();
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = JAC_STEP;
                let plus = se3_exp(&d);
                let minus = se3_exp(&-d);
                let (rp, rm) = if is_i {
                    (edge_residual(e, &ti.compose(&plus), tj), edge_residual(e, &ti.compose(&minus), tj))
                } else {
                    (edge_residual(e, ti, &tj.compose(&plus)), edge_residual(e, ti, &tj.compose(&minus)))
                };
                jac.set_column(k, &((rp - rm) / (2.0 * JAC_STEP)));
            }
            blocks.push((6 * (node - 1), jac));
        }
        for (oa, ja) in &blocks {
            let grad = ja.transpose() * r * e.weight;
            for k in 0..6 {
                g[oa + k] += grad[k];
            }
            for (ob, jb) in &blocks {
                let block = ja.transpose() * jb * e.weight;
                for a in 0..6 {
                    for b in 0..6 {
                        h[(oa + a, ob + b)] += block[(a, b)];
                    }
                }
            }
        }
    }
    (h, g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamConfig {
    pub ransac: RansacConfig,
    /// Refine odometry and loop registrations with ICP.
    pub icp: Option<IcpConfig>,
    pub loop_closure: bool,
    pub vocabulary_size: usize,
    pub tau_h: f64,
    pub min_index_gap: usize,
    pub min_loop_inliers: usize,
    pub lm: LmConfig,
    pub seed: u64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            icp: None,
            loop_closure: true,
            vocabulary_size: 180,
            tau_h: 0.8,
            min_index_gap: 10,
            min_loop_inliers: 15,
            lm: LmConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlamResult {
    /// Chained odometry poses, scan 0 at the origin.
    pub odometry: Vec<RigidTransform>,
    /// Pose-graph optimized poses when loop closure ran.
    pub optimized: Option<Vec<RigidTransform>>,
    pub proposals: Vec<(usize, usize)>,
    /// Proposals that passed geometric verification, with inlier counts.
    pub accepted_loops: Vec<(usize, usize, usize)>,
    pub residuals: Vec<f64>,
}

impl SlamResult {
    pub fn final_poses(&self) -> &[RigidTransform] {
        self.optimized.as_deref().unwrap_or(&self.odometry)
    }
}

fn stream_seed(seed: u64, a: usize, b: usize) -> u64 {
    seed ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Registers scan `src` into scan `dst`'s frame.
fn register_into(
    features: &[FeatureSet],
    clouds: Option<&[OrderedPointCloud]>,
    src: usize,
    dst: usize,
    cfg: &SlamConfig,
) -> Result<RegistrationResult> {
    let m = match_features(&features[src], &features[dst])?;
    let ransac = RansacConfig {
        seed: stream_seed(cfg.seed, src, dst),
        ..cfg.ransac
    };
    let r = estimate_rigid(&m, &features[src], &features[dst], &ransac)?;
    match (cfg.icp.as_ref(), clouds) {
        (Some(icp), Some(c)) if r.converged => {
            let refined = refine_icp(&r, &c[src], &c[dst], icp)?.registration;
            // keep the feature consensus count for loop gating
            Ok(RegistrationResult {
                transform: refined.transform,
                ..r
            })
        }
        _ => Ok(r),
    }
}

/// Scan-to-scan odometry, optional BoVW loop closure with geometric
/// verification, and pose-graph optimization.
pub fn run_slam(features: &[FeatureSet], clouds: Option<&[OrderedPointCloud]>, cfg: &SlamConfig) -> Result<SlamResult> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two scans".into()));
    }
    if let Some(c) = clouds {
        if c.len() != n {
            return Err(Error::LengthMismatch { est: n, gt: c.len() });
        }
    }
    let odometry: Vec<Option<RegistrationResult>> = (0..n - 1)
        .into_par_iter()
        .map(|k| register_into(features, clouds, k + 1, k, cfg).ok())
        .collect();
    let chain = build_graph(&odometry, &[])?;
    let odometry_poses = chain.nodes.clone();
    if !cfg.loop_closure {
        return Ok(SlamResult {
            odometry: odometry_poses,
            optimized: None,
            proposals: Vec::new(),
            accepted_loops: Vec::new(),
            residuals: Vec::new(),
        });
    }

    let dim = features[0].dim;
    let pooled: Vec<f64> = features.iter().flat_map(|f| f.descriptors.iter().copied()).collect();
    let vocab = build_vocabulary(&pooled, dim, cfg.vocabulary_size, cfg.seed)?;
    let hists = features
        .par_iter()
        .map(|f| histogram(f, &vocab))
        .collect::<Result<Vec<_>>>()?;
    let proposals = propose_loops(&hists, cfg.tau_h, cfg.min_index_gap);
    let verified: Vec<Option<(usize, usize, RegistrationResult)>> = proposals
        .par_iter()
        .map(|&(i, j)| {
            let r = register_into(features, clouds, j, i, cfg).ok()?;
            (r.converged && r.inlier_count >= cfg.min_loop_inliers).then_some((i, j, r))
        })
        .collect();
    let loops: Vec<_> = verified.into_iter().flatten().collect();
    let accepted_loops = loops.iter().map(|(i, j, r)| (*i, *j, r.inlier_count)).collect();
    let graph = build_graph(&odometry, &loops)?;
    let opt = optimize(&graph, &cfg.lm)?;
    Ok(SlamResult {
        odometry: odometry_poses,
        optimized: Some(opt.graph.nodes),
        proposals,
        accepted_loops,
        residuals: opt.residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn converged(t: RigidTransform) -> RegistrationResult {
        RegistrationResult {
            transform: t,
            inlier_count: 3,
            inlier_indices: vec![0, 1, 2],
            converged: true,
        }
    }

    fn square_steps() -> Vec<RigidTransform> {
        let step = RigidTransform::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2);
        let step = RigidTransform::new(step.rotation, Vector3::new(1.0, 0.0, 0.0));
        vec![step; 4]
    }

    #[test]
    fn log_exp_round_trip() {
        for v in [
            Vector6::new(0.0, 0.0, 0.0, 1.0, 2.0, 3.0),
            Vector6::new(1e-12, -2e-12, 0.0, 0.0, 0.0, 0.0),
            Vector6::new(0.3, -1.2, 2.0, -1.0, 0.5, 0.0),
        ] {
            assert!((se3_log(&se3_exp(&v)) - v).norm() < 1e-12);
        }
    }

    #[test]
    fn k_points_k_clusters() {
        let pts = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0];
        let v = build_vocabulary(&pts, 2, 4, 3).unwrap();
        let mut got: Vec<Vec<f64>> = (0..4).map(|j| v.centroid(j).to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<Vec<f64>> = pts.chunks(2).map(|c| c.to_vec()).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        assert!(matches!(build_vocabulary(&pts, 2, 5, 0), Err(Error::TooFewDescriptors { needed: 5, got: 4 })));
        assert!(build_vocabulary(&[1.0, 1.0, 1.0, 1.0], 2, 2, 0).is_err());
    }

    #[test]
    fn histogram_word_three() {
        let vocab = Vocabulary {
            dim: 1,
            centroids: vec![0.0, 10.0, 20.0, 30.0],
        };
        let mut fs = FeatureSet::new(1);
        let kp = crate::features::Keypoint {
            u: 0,
            v: 0,
            point: Vector3::zeros(),
            score: 1.0,
        };
        fs.push(kp, &[29.0]);
        fs.push(kp, &[31.0]);
        let h = histogram(&fs, &vocab).unwrap();
        assert_eq!(h.weights, vec![0.0, 0.0, 0.0, 1.0]);
        let mut doubled = fs.clone();
        doubled.push(kp, &[29.0]);
        doubled.push(kp, &[31.0]);
        assert_eq!(histogram(&doubled, &vocab).unwrap(), h);
        let empty = histogram(&FeatureSet::new(1), &vocab).unwrap();
        assert!(empty.empty && empty.weights.iter().all(|w| *w == 0.0));
    }

    #[test]
    fn loop_proposals() {
        let a = BowHistogram {
            weights: vec![1.0, 0.0],
            empty: false,
        };
        let b = BowHistogram {
            weights: vec![0.0, 1.0],
            empty: false,
        };
        let mut hs = vec![a.clone(); 12];
        hs[11] = b;
        let p = propose_loops(&hs, 0.8, 10);
        assert_eq!(p, vec![(0, 10)]);
    }

    #[test]
    fn square_init_and_optimize() {
        let odo: Vec<_> = square_steps().into_iter().take(3).map(|t| Some(converged(t))).collect();
        let close = converged(square_steps()[0]);
        let g = build_graph(&odo, &[(3, 0, close)]).unwrap();
        assert!(g.total_residual() < 1e-20);
        let r = optimize(&g, &LmConfig::default()).unwrap();
        assert_eq!(r.residuals.len(), 1);
        assert_eq!(r.graph.nodes, g.nodes);
    }

    #[test]
    fn drifted_gap_matches_hand_value() {
        // odometry says 1.1 m steps, closing edge says the true 1 m step
        let mut steps = square_steps();
        for s in steps.iter_mut().take(3) {
            s.translation.x = 1.1;
        }
        let odo: Vec<_> = steps.iter().take(3).map(|t| Some(converged(*t))).collect();
        let g = build_graph(&odo, &[(3, 0, converged(steps[3]))]).unwrap();
        // nodes: (0,0) → (1.1,0) → (1.1,1.1) → (0,1.1), heading 270°;
        // closing step from node 3 should land at (0,0): expected (0, 1.1) + R270·(1,0) = (0, 0.1)
        let predicted = g.nodes[3].compose(&steps[3]);
        let gap = predicted.translation;
        assert!((gap - Vector3::new(0.0, 0.1, 0.0)).norm() < 1e-12);
        assert!((g.total_residual() - 0.01).abs() < 1e-12);
        let r = optimize(&g, &LmConfig::default()).unwrap();
        assert!(r.residuals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn broken_chain() {
        let odo = vec![Some(converged(RigidTransform::identity())), None];
        assert!(matches!(build_graph(&odo, &[]), Err(Error::BrokenChain(1))));
        let mut bad = converged(RigidTransform::identity());
        bad.converged = false;
        let g = build_graph(&[Some(converged(RigidTransform::identity()))], &[(0, 1, bad)]).unwrap();
        assert_eq!(g.dropped_loops, 1);
    }
}
