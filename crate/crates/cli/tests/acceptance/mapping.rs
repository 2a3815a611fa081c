use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scanfeat_cli::commands::{simulate, slam_cmd, SlamSummary};
use scanfeat_cli::PipelineConfig;
use scanfeat_core::mapping::{optimize, Edge, EdgeKind, LmConfig, PoseGraph};
use scanfeat_core::RigidTransform;

use crate::geometry::random_transform;
use crate::{check, within, Outcome};

fn slam_error(cfg: &PipelineConfig, scans: &std::path::Path, out: &std::path::Path) -> Result<SlamSummary, String> {
    slam_cmd(cfg, scans, None, out, false).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(out.join("slam.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

/// 40-scan square loop with handcrafted features, through the CLI pipeline.
pub fn square_loop() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = PipelineConfig::default();
    let scans = dir.path().join("sim");
    simulate(&cfg, &scans).map_err(|e| e.to_string())?;
    let odo = slam_error(&cfg, &scans, &dir.path().join("odo"))?;
    cfg.slam.loop_closure = true;
    let lc = slam_error(&cfg, &scans, &dir.path().join("lc"))?;
    let (e0, e1) = (
        odo.mean_translation_error.ok_or("no ground truth")?,
        lc.mean_translation_error.ok_or("no ground truth")?,
    );
    let reduction = 1.0 - e1 / e0;
    check(
        odo.scans == 40 && e0 > 0.0 && reduction >= 0.5 && within(start.elapsed(), 300.0),
        format!(
            "{} scans, odometry {e0:.3} m, with loop closure {e1:.3} m ({:.0}% reduction, need 50%), {} proposals, {} accepted",
            odo.scans,
            reduction * 100.0,
            lc.proposals.len(),
            lc.accepted_loops.len()
        ),
    )
}

fn small_noise(rng: &mut impl Rng, rot: f64, trans: f64) -> RigidTransform {
    let r = Vector3::new(rng.random_range(-rot..rot), rng.random_range(-rot..rot), rng.random_range(-rot..rot));
    let t = Vector3::new(rng.random_range(-trans..trans), rng.random_range(-trans..trans), rng.random_range(-trans..trans));
    RigidTransform::from_rotation_vector(&r, t)
}

/// Ground-truth ring, drifted chained initial nodes and loop edges.
/// With `noise` the measurements disagree with each other.
fn ring_graph(rng: &mut ChaCha8Rng, n: usize, loops: usize, noise: f64) -> PoseGraph {
    let gt: Vec<RigidTransform> = (0..n)
        .map(|k| {
            let a = k as f64 / n as f64 * std::f64::consts::TAU;
            let r = RigidTransform::from_axis_angle(&Vector3::z(), a + std::f64::consts::FRAC_PI_2);
            RigidTransform::new(r.rotation, Vector3::new(10.0 * a.cos(), 10.0 * a.sin(), 0.0))
        })
        .collect();
    let measure = |i: usize, j: usize, rng: &mut ChaCha8Rng| {
        let z = gt[i].inverse().compose(&gt[j]);
        if noise > 0.0 {
            z.compose(&small_noise(rng, noise * 0.02, noise * 0.1))
        } else {
            z
        }
    };
    let mut edges = Vec::new();
    let mut nodes = vec![gt[0]];
    for k in 0..n - 1 {
        let z = measure(k, k + 1, rng);
        nodes.push(nodes[k].compose(&z).compose(&small_noise(rng, 0.02, 0.1)));
        edges.push(Edge {
            i: k,
            j: k + 1,
            measurement: z,
            kind: EdgeKind::Odometry,
            weight: 1.0,
        });
    }
    let mut pairs = vec![(0, n - 1)];
    while pairs.len() < loops {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i + 2 < j {
            pairs.push((i, j));
        }
    }
    for (i, j) in pairs {
        edges.push(Edge {
            i,
            j,
            measurement: measure(i, j, rng),
            kind: EdgeKind::Loop,
            weight: 1.0,
        });
    }
    PoseGraph {
        nodes,
        edges,
        dropped_loops: 0,
    }
}

pub fn pose_graph() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let lm = LmConfig::default();

    let drifted = ring_graph(&mut rng, 30, 3, 0.0);
    let solved = optimize(&drifted, &lm).map_err(|e| e.to_string())?;
    let (r0, r1) = (solved.residuals[0], *solved.residuals.last().unwrap());

    let mut gauge: f64 = 0.0;
    let mut gauge_opt: f64 = 0.0;
    let mut monotone = 0;
    for _ in 0..50 {
        let n = rng.random_range(5..25);
        let loops = rng.random_range(1..5);
        let g = ring_graph(&mut rng, n, loops, 1.0);
        let shift = random_transform(&mut rng, 20.0);
        let mut moved = g.clone();
        for x in &mut moved.nodes {
            *x = shift.compose(x);
        }
        let (a, b) = (g.total_residual(), moved.total_residual());
        gauge = gauge.max((a - b).abs() / a.max(1e-12));

        let ra = optimize(&g, &lm).map_err(|e| e.to_string())?;
        let rb = optimize(&moved, &lm).map_err(|e| e.to_string())?;
        if ra.residuals.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
        let (na, nb) = (&ra.graph.nodes, &rb.graph.nodes);
        for k in 1..na.len() {
            let da = na[0].inverse().compose(&na[k]);
            let db = nb[0].inverse().compose(&nb[k]);
            gauge_opt = gauge_opt.max(da.max_abs_diff(&db));
        }
    }
    check(
        r1 < 1e-6 * r0 && gauge <= 1e-9 && monotone == 50,
        format!(
            "drifted ring residual {r0:.2e} -> {r1:.2e} in {} iterations; gauge residual diff {gauge:.1e} (optimized relative poses {gauge_opt:.1e}); {monotone}/50 non-increasing",
            solved.iterations
        ),
    )
}
