use std::time::Instant;

use nalgebra::Vector3;

use scanfeat_core::features::extract;
use scanfeat_core::geom::relative_transform;
use scanfeat_core::pairgen::{pixel_flow, SyntheticRanges};
use scanfeat_core::projection::to_scan_image;
use scanfeat_core::simlidar::{raycast, Scene, ScannerSpec};
use scanfeat_core::{Pose, RigidTransform};
use scanfeat_net::gradcheck;
use scanfeat_net::train::evaluate;
use scanfeat_net::{normalize, synthetic_pairs, train, DatasetStats, Network, NetworkConfig, PairSample, TrainConfig, TrainSample};

use crate::{check, within, Outcome};

const GPU_REFERENCE_MS: f64 = 22.9;

pub fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let results = gradcheck::run_all(20);
    let failed: Vec<String> = results
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} err {:.1e} kinks {:.2}", c.name, c.worst_error, c.worst_kink_fraction))
        .collect();
    let worst = results.iter().map(|c| c.worst_error).fold(0.0, f64::max);
    let min_trials = results.iter().map(|c| c.trials).min().unwrap_or(0);
    check(
        failed.is_empty() && min_trials >= 20 && within(start.elapsed(), 120.0),
        format!(
            "{} checks x {min_trials} tensors, worst relative error {worst:.1e}{}",
            results.len(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

fn pose(x: f64, y: f64, yaw: f64) -> Pose {
    let r = RigidTransform::from_axis_angle(&Vector3::z(), yaw);
    Pose::new(RigidTransform::new(r.rotation, Vector3::new(x, y, 0.0)), 0.0)
}

/// Two stages on a handful of small crops, one of them a real pair.
fn toy_two_stage() -> Result<(usize, usize), String> {
    let spec = ScannerSpec::uniform(16, 128, 15.0, 40.0);
    let model = spec.model().map_err(|e| e.to_string())?;
    let (pa, pb) = (pose(0.5, -1.0, 0.0), pose(1.5, -0.5, 0.2));
    let a = raycast(&Scene::courtyard(), &pa, &spec, 1).map_err(|e| e.to_string())?;
    let b = raycast(&Scene::courtyard(), &pb, &spec, 2).map_err(|e| e.to_string())?;
    let (ia, ib) = (to_scan_image(&a), to_scan_image(&b));
    let stats = DatasetStats::compute([&ia, &ib]).map_err(|e| e.to_string())?;
    let ranges = SyntheticRanges {
        max_u_shift: 10,
        max_tilt: 2.0,
        ..SyntheticRanges::default()
    };
    let mut pairs = synthetic_pairs(&[ia.clone()], &stats, &ranges, 3, 5).map_err(|e| e.to_string())?;
    let flow = pixel_flow(&a, &ib, &relative_transform(&pa, &pb), &model, 0.5).map_err(|e| e.to_string())?;
    pairs.push(PairSample {
        sample: TrainSample {
            image_a: normalize(&ia, &stats).map_err(|e| e.to_string())?,
            image_b: normalize(&ib, &stats).map_err(|e| e.to_string())?,
            flow,
        },
        synthetic: false,
    });
    let mut cfg_net = NetworkConfig::toy();
    cfg_net.batch_size = 2;
    let mut net = Network::new(cfg_net, 4).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        crop_height: 16,
        crop_width: 48,
        stage1_epochs: 1,
        stage2_epochs: 1,
        ..TrainConfig::default()
    };
    let report = train(&mut net, &pairs, &cfg).map_err(|e| e.to_string())?;
    let count = |s: u8| report.steps.iter().filter(|r| r.stage == s).count();
    Ok((count(1), count(2)))
}

pub fn smoke_training() -> Outcome {
    let start = Instant::now();
    let spec = ScannerSpec::os1_64();
    let img = to_scan_image(&raycast(&Scene::courtyard(), &pose(0.5, -1.0, 0.0), &spec, 1).map_err(|e| e.to_string())?);
    let stats = DatasetStats::compute([&img]).map_err(|e| e.to_string())?;
    let pairs = synthetic_pairs(&[img], &stats, &SyntheticRanges::default(), 20, 3).map_err(|e| e.to_string())?;
    let mut net = Network::new(NetworkConfig::toy(), 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        stage1_epochs: 40,
        stage2_epochs: 0,
        max_steps: Some(200),
        ..TrainConfig::default()
    };
    let before = evaluate(&net, &pairs, &cfg, 99).map_err(|e| e.to_string())?.total;
    let report = train(&mut net, &pairs, &cfg).map_err(|e| format!("training failed: {e}"))?;
    let after = evaluate(&net, &pairs, &cfg, 99).map_err(|e| e.to_string())?.total;
    let finite = report.steps.iter().all(|s| s.loss.total.is_finite());
    let (s1, s2) = toy_two_stage()?;
    check(
        report.steps.len() == 200 && finite && after < 0.8 * before && s1 > 0 && s2 > 0 && within(start.elapsed(), 600.0),
        format!(
            "{} steps, loss {before:.3} -> {after:.3} ({:.2}x), toy two-stage {s1}+{s2} steps",
            report.steps.len(),
            after / before
        ),
    )
}

pub fn throughput() -> Outcome {
    let spec = ScannerSpec::os1_64();
    let cloud = raycast(&Scene::courtyard(), &pose(0.0, 0.0, 0.0), &spec, 3).map_err(|e| e.to_string())?;
    let img = to_scan_image(&cloud);
    let stats = DatasetStats::compute([&img]).map_err(|e| e.to_string())?;
    let net = Network::new(NetworkConfig::toy(), 0).map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let mut times: Vec<f64> = pool.install(|| {
        (0..5)
            .map(|_| {
                let t = Instant::now();
                let x = normalize(&img, &stats).expect("normalize");
                let maps = net.forward(&x).expect("forward");
                let fs = extract(&maps, &cloud, 0.7, 8).expect("extract");
                std::hint::black_box(fs);
                t.elapsed().as_secs_f64() * 1000.0
            })
            .collect()
    });
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    check(
        median < 1000.0,
        format!("toy network on 64x1024, 1 thread: {median:.1} ms median (reference GPU figure {GPU_REFERENCE_MS} ms)"),
    )
}
