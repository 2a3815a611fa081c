use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scanfeat_core::bench::{
    evaluate_pairs, match_inlier_ratio, registration_errors, repeatability, trajectory_errors, BenchmarkReport, PairEvaluation, Thresholds,
};
use scanfeat_core::features::{extract, nms};
use scanfeat_core::geom::relative_transform;
use scanfeat_core::handcrafted::{handcrafted_features, HandcraftedConfig};
use scanfeat_core::pairgen::ScanPair;
use scanfeat_core::projection::to_scan_image;
use scanfeat_core::register::{estimate_rigid_points, kabsch, refine_icp, IcpConfig, Match, MatchSet, RansacConfig, RegistrationResult};
use scanfeat_core::simlidar::{raycast, Scene, ScannerSpec};
use scanfeat_core::{FeatureSet, Keypoint, OrderedPointCloud, Pose, RigidTransform};

use crate::geometry::{random_transform, scan_pose};
use crate::{check, Outcome};

fn cheb(a: (usize, usize), b: (usize, usize), w: usize) -> usize {
    let du = a.0.abs_diff(b.0);
    a.1.abs_diff(b.1).max(du.min(w - du))
}

/// All-pairs suppression.
fn brute_nms(scores: &[f64], h: usize, w: usize, threshold: f64, radius: usize) -> Vec<(usize, usize)> {
    let cands: Vec<(usize, usize)> = (0..h)
        .flat_map(|v| (0..w).map(move |u| (u, v)))
        .filter(|&(u, v)| scores[v * w + u] > threshold)
        .collect();
    let s = |p: (usize, usize)| scores[p.1 * w + p.0];
    let mut kept: Vec<(usize, usize)> = cands
        .iter()
        .copied()
        .filter(|&p| {
            !cands.iter().any(|&q| {
                q != p && cheb(p, q, w) <= radius && (s(q) > s(p) || (s(q) == s(p) && (q.1, q.0) < (p.1, p.0)))
            })
        })
        .collect();
    kept.sort_by(|&a, &b| s(b).total_cmp(&s(a)).then((a.1, a.0).cmp(&(b.1, b.0))));
    kept
}

fn min_separation(px: &[(usize, usize)], w: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &a) in px.iter().enumerate() {
        for &b in &px[i + 1..] {
            best = best.min(cheb(a, b, w));
        }
    }
    best
}

fn sim_cloud(pose: &Pose, seed: u64) -> OrderedPointCloud {
    raycast(&Scene::courtyard(), pose, &ScannerSpec::os1_64(), seed).expect("raycast")
}

fn handcrafted(cloud: &OrderedPointCloud) -> FeatureSet {
    let maps = handcrafted_features(&to_scan_image(cloud), &HandcraftedConfig::default());
    extract(&maps, cloud, 0.7, 8).expect("extract")
}

pub fn extraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut disagreements = 0;
    let mut survivors = 0;
    for k in 0..100 {
        let h = rng.random_range(3..24);
        let w = rng.random_range(6..64);
        let radius = if k % 10 == 0 { w } else { rng.random_range(1..6) };
        // coarse levels force ties
        let scores: Vec<f64> = (0..h * w).map(|_| (rng.random_range(0..20) as f64) * 0.05).collect();
        let threshold = rng.random_range(0.0..0.6);
        let fast = nms(&scores, h, w, threshold, radius);
        if fast != brute_nms(&scores, h, w, threshold, radius) {
            disagreements += 1;
        }
        survivors += fast.len();
    }

    let mut separation = usize::MAX;
    let mut keypoints = 0;
    for k in 0..3u64 {
        let fs = handcrafted(&sim_cloud(&scan_pose(&mut rng), k));
        let px: Vec<(usize, usize)> = fs.keypoints.iter().map(|p| (p.u, p.v)).collect();
        keypoints += px.len();
        separation = separation.min(min_separation(&px, 1024));
    }
    for _ in 0..20 {
        let (h, w) = (64, 256);
        let scores: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let px = nms(&scores, h, w, 0.7, 8);
        keypoints += px.len();
        separation = separation.min(min_separation(&px, w));
    }
    check(
        disagreements == 0 && separation > 8 && keypoints > 0,
        format!("100 maps, {survivors} survivors, {disagreements} disagreements with brute force; min separation {separation} px over {keypoints} keypoints"),
    )
}

fn uniform_point(rng: &mut impl Rng, half: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half))
}

pub fn registration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut procrustes: f64 = 0.0;
    for _ in 0..100 {
        let t = random_transform(&mut rng, 10.0);
        let src: Vec<Vector3<f64>> = (0..50).map(|_| uniform_point(&mut rng, 20.0)).collect();
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| t.apply(p)).collect();
        let est = kabsch(&src, &dst).ok_or("kabsch failed")?;
        procrustes = procrustes.max(est.max_abs_diff(&t));
    }

    let mut successes = 0;
    for trial in 0..100u64 {
        let t = random_transform(&mut rng, 5.0);
        let n = 200;
        let outliers = n * 3 / 10;
        let src: Vec<Vector3<f64>> = (0..n).map(|_| uniform_point(&mut rng, 20.0)).collect();
        let dst: Vec<Vector3<f64>> = src
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i < outliers {
                    uniform_point(&mut rng, 25.0)
                } else {
                    t.apply(p) + uniform_point(&mut rng, 0.03)
                }
            })
            .collect();
        let cfg = RansacConfig {
            iterations: 1000,
            inlier_dist: 0.3,
            seed: trial,
        };
        let r = estimate_rigid_points(&src, &dst, &cfg).map_err(|e| e.to_string())?;
        let (te, re) = registration_errors(&r.transform, &t);
        if te < 0.05 && re < 1.0 {
            successes += 1;
        }
    }

    let mut icp_ok = true;
    let mut icp_drop = Vec::new();
    for k in 0..3u64 {
        let pa = scan_pose(&mut rng);
        let mut pb = pa;
        pb.transform.translation += Vector3::new(0.8, 0.3, 0.0);
        let (a, b) = (sim_cloud(&pa, 10 + k), sim_cloud(&pb, 20 + k));
        let gt = relative_transform(&pa, &pb);
        let nudge = RigidTransform::from_rotation_vector(&Vector3::new(0.0, 0.0, 0.03), Vector3::new(0.2, -0.1, 0.05));
        let init = RegistrationResult {
            transform: nudge.compose(&gt),
            inlier_count: 3,
            inlier_indices: vec![0, 1, 2],
            converged: true,
        };
        let cfg = IcpConfig {
            source_stride: 8,
            ..IcpConfig::default()
        };
        let out = refine_icp(&init, &a, &b, &cfg).map_err(|e| e.to_string())?;
        icp_ok &= out.residuals.windows(2).all(|w| w[1] <= w[0]);
        icp_drop.push(format!("{:.3}->{:.3}", out.residuals[0], out.residuals.last().unwrap()));
    }
    check(
        procrustes <= 1e-9 && successes >= 95 && icp_ok,
        format!(
            "Procrustes worst {procrustes:.1e}; RANSAC {successes}/100 within 0.05 m / 1 deg; ICP non-increasing {icp_ok} ({})",
            icp_drop.join(", ")
        ),
    )
}

fn h4(t: &RigidTransform) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.translation);
    m
}

fn apply4(m: &Matrix4<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    (m * Vector4::new(p.x, p.y, p.z, 1.0)).xyz()
}

fn angle_deg(m: &Matrix4<f64>) -> f64 {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

fn feature_set(points: &[Vector3<f64>]) -> FeatureSet {
    let mut fs = FeatureSet::new(1);
    for (i, p) in points.iter().enumerate() {
        fs.push(
            Keypoint {
                u: i,
                v: 0,
                point: *p,
                score: 1.0,
            },
            &[1.0],
        );
    }
    fs
}

struct Constructed {
    a: FeatureSet,
    b: FeatureSet,
    matches: MatchSet,
    gt: RigidTransform,
    est: RigidTransform,
}

fn construct(rng: &mut impl Rng) -> Constructed {
    let gt = random_transform(rng, 5.0);
    let g = h4(&gt);
    let na = rng.random_range(20..60);
    let a: Vec<Vector3<f64>> = (0..na).map(|_| uniform_point(rng, 15.0)).collect();
    let mut b = Vec::new();
    for p in &a {
        if rng.random::<f64>() < 0.6 {
            b.push(apply4(&g, p) + uniform_point(rng, 0.3));
        }
    }
    for _ in 0..rng.random_range(0..30) {
        b.push(uniform_point(rng, 20.0));
    }
    let mut pairs = Vec::new();
    for i in 0..na {
        if rng.random::<f64>() < 0.7 {
            pairs.push(Match {
                a: i,
                b: rng.random_range(0..b.len()),
                distance: 0.0,
            });
        }
    }
    let angle = rng.random_range(0.5..5.0f64).to_radians();
    let nudge = RigidTransform::from_axis_angle(&uniform_point(rng, 1.0), angle);
    let shift = RigidTransform::from_translation(uniform_point(rng, 0.4));
    Constructed {
        a: feature_set(&a),
        b: feature_set(&b),
        matches: MatchSet { pairs },
        est: gt.compose(&nudge).compose(&shift),
        gt,
    }
}

/// `(repeatability, inlier ratio, translation error, rotation error)` by direct loops.
fn oracle(c: &Constructed, tau1: f64) -> (f64, f64, f64, f64) {
    let g = h4(&c.gt);
    let mut repeated = 0usize;
    for ka in &c.a.keypoints {
        let q = apply4(&g, &ka.point);
        let mut best = f64::INFINITY;
        for kb in &c.b.keypoints {
            let d = q - kb.point;
            best = best.min((d.x * d.x + d.y * d.y + d.z * d.z).sqrt());
        }
        if best <= tau1 {
            repeated += 1;
        }
    }
    let rs = (repeated as f64 / c.a.len().min(c.b.len()) as f64).min(1.0);
    let mut correct = 0usize;
    for m in &c.matches.pairs {
        if (apply4(&g, &c.a.keypoints[m.a].point) - c.b.keypoints[m.b].point).norm() < tau1 {
            correct += 1;
        }
    }
    let ratio = if c.matches.is_empty() { 0.0 } else { correct as f64 / c.matches.len() as f64 };
    let d = g.try_inverse().unwrap() * h4(&c.est);
    let te = Vector3::new(d[(0, 3)], d[(1, 3)], d[(2, 3)]).norm();
    (rs, ratio, te, angle_deg(&d))
}

/// Kabsch alignment of positions written out from the SVD.
fn oracle_trajectory(est: &[Pose], gt: &[Pose]) -> (f64, f64) {
    let n = est.len() as f64;
    let src: Vec<Vector3<f64>> = est.iter().map(|p| p.transform.translation).collect();
    let dst: Vec<Vector3<f64>> = gt.iter().map(|p| p.transform.translation).collect();
    let cs = src.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(&dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sign = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * vt;
    let align = RigidTransform::new(r, cd - r * cs);
    let a = h4(&align);
    let (mut te, mut re) = (0.0, 0.0);
    for (e, g) in est.iter().zip(gt) {
        let aligned = a * h4(&e.transform);
        let gm = h4(&g.transform);
        te += (Vector3::new(aligned[(0, 3)], aligned[(1, 3)], aligned[(2, 3)]) - g.transform.translation).norm();
        re += angle_deg(&(gm.try_inverse().unwrap() * aligned));
    }
    (te / n, re / n)
}

pub fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let th = Thresholds::default();
    let mut worst: f64 = 0.0;
    let mut evals = Vec::new();
    let mut oracle_rows = Vec::new();
    for k in 0..20 {
        let c = construct(&mut rng);
        let rs = repeatability(&c.a, &c.b, &c.gt, th.tau1).map_err(|e| e.to_string())?;
        let (ratio, _) = match_inlier_ratio(&c.matches, &c.a, &c.b, &c.gt, th.tau1);
        let (te, re) = registration_errors(&c.est, &c.gt);
        let o = oracle(&c, th.tau1);
        worst = worst
            .max((rs - o.0).abs())
            .max((ratio - o.1).abs())
            .max((te - o.2).abs())
            .max((re - o.3).abs());
        evals.push(PairEvaluation {
            anchor: k,
            partner: k,
            repeatability: rs,
            inlier_match_ratio: ratio,
            match_count: c.matches.len(),
            registration_translation_error: te,
            registration_rotation_error: re,
            ransac_inliers: 0,
            error: None,
            extract_ms: 0.0,
            ransac_ms: 0.0,
        });
        oracle_rows.push(o);
    }
    let report = BenchmarkReport::from_pairs(evals, th);
    let n = oracle_rows.len() as f64;
    let ors = oracle_rows.iter().map(|o| o.0).sum::<f64>() / n * 100.0;
    let omr = oracle_rows.iter().filter(|o| o.1 > th.tau2).count() as f64 / n * 100.0;
    let orr = oracle_rows.iter().filter(|o| o.2 < th.tau3).count() as f64 / n * 100.0;
    let aggregate = (report.rs - ors).abs().max((report.mr - omr).abs()).max((report.rr - orr).abs());

    let mut traj: f64 = 0.0;
    for _ in 0..20 {
        let g = random_transform(&mut rng, 10.0);
        let gt: Vec<Pose> = (0..30)
            .map(|i| Pose::new(random_transform(&mut rng, 20.0), i as f64))
            .collect();
        let est: Vec<Pose> = gt
            .iter()
            .map(|p| {
                let noise = RigidTransform::from_rotation_vector(&(uniform_point(&mut rng, 0.05)), uniform_point(&mut rng, 0.3));
                Pose::new(g.compose(&p.transform).compose(&noise), p.timestamp)
            })
            .collect();
        let (te, re) = trajectory_errors(&est, &gt).map_err(|e| e.to_string())?;
        let (ote, ore) = oracle_trajectory(&est, &gt);
        traj = traj.max((te - ote).abs()).max((re - ore).abs());
    }

    // identity manifest and threshold sweep on simulated scans
    let clouds: Vec<OrderedPointCloud> = (0..4u64).map(|k| sim_cloud(&scan_pose(&mut rng), 30 + k)).collect();
    let feats: Vec<FeatureSet> = clouds.iter().map(handcrafted).collect();
    let identity: Vec<ScanPair> = (0..feats.len())
        .map(|k| ScanPair {
            anchor: k,
            partner: k,
            transform: RigidTransform::identity(),
            overlap: 1.0,
        })
        .collect();
    let source = |k: usize| Ok(feats[k].clone());
    let id = evaluate_pairs(&identity, &source, &RansacConfig::default(), &th).map_err(|e| e.to_string())?;
    let identity_ok = id.rs == 100.0 && id.mr == 100.0 && id.rr == 100.0;

    let mut monotone = true;
    for k in 0..3u64 {
        let pa = scan_pose(&mut rng);
        let mut pb = pa;
        pb.transform.translation += Vector3::new(1.0, 0.5, 0.0);
        let (a, b) = (handcrafted(&sim_cloud(&pa, 40 + k)), handcrafted(&sim_cloud(&pb, 50 + k)));
        let t = relative_transform(&pa, &pb);
        let sweep: Vec<f64> = (1..=10)
            .map(|i| repeatability(&a, &b, &t, 0.05 * i as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        monotone &= sweep.windows(2).all(|w| w[1] >= w[0]);
    }

    check(
        worst <= 1e-9 && aggregate <= 1e-9 && traj <= 1e-9 && identity_ok && monotone,
        format!(
            "20 pairs worst per-pair diff {worst:.1e}, aggregate {aggregate:.1e}; 20 trajectories worst {traj:.1e}; identity {:.0}/{:.0}/{:.0}; RS monotone in tau1 {monotone}",
            id.rs, id.mr, id.rr
        ),
    )
}
