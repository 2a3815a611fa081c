//! Subcommand bodies. Each resolves all inputs before writing anything.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use scanfeat_core::bench::{evaluate_pairs, trajectory_errors, BenchmarkReport};
use scanfeat_core::features::{extract, fuse_scores};
use scanfeat_core::geom::{Pose, RigidTransform};
use scanfeat_core::handcrafted::handcrafted_features;
use scanfeat_core::io;
use scanfeat_core::mapping::run_slam;
use scanfeat_core::pairgen::{pixel_flow, select_real_pairs, synth_pair, FlowMap};
use scanfeat_core::projection::{lift_cloud, ScanImage, SphericalModel};
use scanfeat_core::register::{estimate_rigid, match_features};
use scanfeat_core::simlidar::{generate_trajectory, square_loop_waypoints, Scene, ScannerSpec};
use scanfeat_core::{DenseFeatureMap, FeatureSet, OrderedPointCloud};
use scanfeat_net::data::normalize;
use scanfeat_net::weights::{load_weights, save_weights};
use scanfeat_net::{train, DatasetStats, Network, PairSample, TrainConfig, TrainSample};

use crate::config::{PairMode, PipelineConfig};
use crate::error::{core_err, net_err, pipeline, CliError};
use crate::plots;

type Result<T> = std::result::Result<T, CliError>;

pub const CONFIG_FILE: &str = "config.json";
pub const POSES_FILE: &str = "poses.tum";
pub const SCANS_DIR: &str = "scans";

fn write(path: &Path, data: &[u8]) -> Result<()> {
    io::write_atomic(path, data).map_err(|e| CliError::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    write(&dir.join(CONFIG_FILE), cfg.to_json().as_bytes())
}

fn scan_name(k: usize) -> String {
    format!("{k:06}.scan")
}

/// A simulated or recorded sequence: scans in index order, optional poses.
pub struct ScanDir {
    pub root: PathBuf,
    pub images: Vec<ScanImage>,
    pub elevations: Vec<Option<Vec<f64>>>,
    pub poses: Option<Vec<Pose>>,
}

impl ScanDir {
    pub fn load(root: &Path) -> Result<Self> {
        let dir = root.join(SCANS_DIR);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| CliError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "scan"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::io(&dir, "no .scan files"));
        }
        let loaded = files
            .par_iter()
            .map(|p| io::read_scan(p).map_err(core_err(p)))
            .collect::<Result<Vec<_>>>()?;
        let (images, elevations) = loaded.into_iter().unzip();
        let pose_path = root.join(POSES_FILE);
        let poses = if pose_path.exists() {
            let p = io::read_tum(&pose_path).map_err(core_err(&pose_path))?;
            if p.len() != files.len() {
                return Err(CliError::io(&pose_path, format!("{} poses for {} scans", p.len(), files.len())));
            }
            Some(p)
        } else {
            None
        };
        Ok(Self {
            root: root.to_path_buf(),
            images,
            elevations,
            poses,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn model(&self, k: usize, spec: &ScannerSpec) -> Result<SphericalModel> {
        model_for(&self.images[k], self.elevations[k].as_deref(), spec)
    }

    pub fn cloud(&self, k: usize, spec: &ScannerSpec) -> Result<OrderedPointCloud> {
        lift_cloud(&self.images[k], &self.model(k, spec)?).map_err(pipeline)
    }
}

/// Beam table stored with the scan, else the configured scanner's.
fn model_for(img: &ScanImage, elevations: Option<&[f64]>, spec: &ScannerSpec) -> Result<SphericalModel> {
    let elev = elevations.map(<[f64]>::to_vec).unwrap_or_else(|| spec.elevation_angles.clone());
    let model = SphericalModel::new(elev, img.width, spec.azimuth_offset).map_err(pipeline)?;
    model
        .check_dims(img.height, img.width)
        .map_err(|e| CliError::Pipeline(format!("scan does not match the scanner model: {e}")))?;
    Ok(model)
}

/// Dense maps from trained weights or, without weights, the handcrafted stub.
pub enum FeatureBackend {
    Network { net: Network, stats: DatasetStats },
    Handcrafted,
}

impl FeatureBackend {
    pub fn load(weights: Option<&Path>) -> Result<Self> {
        match weights {
            None => Ok(Self::Handcrafted),
            Some(p) => {
                let (net, stats) = load_weights(p).map_err(net_err(p))?;
                let stats = stats.ok_or_else(|| CliError::io(p, "weights carry no normalization statistics"))?;
                Ok(Self::Network { net, stats })
            }
        }
    }

    pub fn maps(&self, img: &ScanImage, cfg: &PipelineConfig) -> Result<DenseFeatureMap> {
        match self {
            Self::Handcrafted => Ok(handcrafted_features(img, &cfg.features.handcrafted)),
            Self::Network { net, stats } => {
                let x = normalize(img, stats).map_err(pipeline)?;
                net.forward(&x).map_err(pipeline)
            }
        }
    }

    pub fn features(&self, img: &ScanImage, cloud: &OrderedPointCloud, cfg: &PipelineConfig) -> Result<FeatureSet> {
        let e = &cfg.features.extract;
        extract(&self.maps(img, cfg)?, cloud, e.score_threshold, e.nms_radius).map_err(pipeline)
    }
}

fn read_waypoints(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let rows: Vec<[f64; 4]> = serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
    Ok(rows
        .iter()
        .enumerate()
        .map(|(k, [x, y, z, yaw])| {
            let mut t = RigidTransform::from_axis_angle(&Vector3::z(), yaw.to_radians());
            t.translation = Vector3::new(*x, *y, *z);
            Pose::new(t, k as f64)
        })
        .collect())
}

pub fn simulate(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let spec = cfg.simulate.scanner.resolve()?;
    let scene = if cfg.simulate.scene == "courtyard" {
        Scene::courtyard()
    } else {
        let p = Path::new(&cfg.simulate.scene);
        let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        Scene::from_json(&text).map_err(core_err(p))?
    };
    let t = &cfg.simulate.trajectory;
    let waypoints = match &t.waypoints {
        Some(p) => read_waypoints(Path::new(p))?,
        None => square_loop_waypoints(t.side, t.height, t.seconds_per_side),
    };
    let mut scans = generate_trajectory(&scene, &spec, &waypoints, t.steps, cfg.seed).map_err(pipeline)?;
    if t.drop_closing_pose && scans.len() > 1 {
        let (first, last) = (&scans[0].0, &scans[scans.len() - 1].0);
        if (first.position() - last.position()).norm() < 1e-9 {
            scans.pop();
        }
    }
    info!("simulated {} scans", scans.len());

    let dir = out.join(SCANS_DIR);
    mkdir(&dir)?;
    let elev = spec.elevation_angles.clone();
    scans
        .par_iter()
        .enumerate()
        .try_for_each(|(k, (_, cloud))| {
            let img = scanfeat_core::projection::to_scan_image(cloud);
            write(&dir.join(scan_name(k)), &io::encode_scan(&img, Some(&elev)))
        })?;
    let poses: Vec<Pose> = scans.iter().map(|(p, _)| *p).collect();
    write(&out.join(POSES_FILE), io::format_tum(&poses).as_bytes())?;
    write_config(out, cfg)
}

/// One training pair as recorded by `pairgen`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub anchor: usize,
    /// Partner scan index for real pairs.
    pub partner: Option<usize>,
    /// Warped image for synthetic pairs, relative to the pair directory.
    pub warped: Option<String>,
    pub flow: String,
    pub synthetic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairIndex {
    /// Scan directory the indices refer to.
    pub scans: String,
    pub pairs: Vec<PairEntry>,
    pub skipped_anchors: usize,
}

pub const PAIR_INDEX: &str = "pairs.json";

pub fn pairgen(cfg: &PipelineConfig, scans_dir: &Path, out: &Path) -> Result<()> {
    let spec = cfg.simulate.scanner.resolve()?;
    let scans = ScanDir::load(scans_dir)?;
    let pc = &cfg.pairgen;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut entries = Vec::new();
    let mut manifest = Vec::new();
    let mut skipped = 0;

    if matches!(pc.mode, PairMode::Synthetic | PairMode::Both) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for (k, img) in scans.images.iter().enumerate() {
            for j in 0..pc.synthetic_per_scan {
                let params = pc.synthetic.sample(&mut rng);
                let (warped, flow) = synth_pair(img, &params).map_err(pipeline)?;
                let stem = format!("syn_{k:06}_{j:02}");
                files.push((format!("synthetic/{stem}.scan"), io::encode_scan(&warped, None)));
                files.push((format!("flows/{stem}.flow"), io::encode_flow(&flow)));
                entries.push(PairEntry {
                    anchor: k,
                    partner: None,
                    warped: Some(format!("synthetic/{stem}.scan")),
                    flow: format!("flows/{stem}.flow"),
                    synthetic: true,
                });
            }
        }
    }
    if matches!(pc.mode, PairMode::Real | PairMode::Both) {
        let poses = scans
            .poses
            .as_ref()
            .ok_or_else(|| CliError::io(&scans_dir.join(POSES_FILE), "real pairs need ground-truth poses"))?;
        let clouds = (0..scans.len())
            .into_par_iter()
            .map(|k| scans.cloud(k, &spec))
            .collect::<Result<Vec<_>>>()?;
        let sel = select_real_pairs(poses, &clouds, &pc.selection, pc.anchor_stride, cfg.seed).map_err(pipeline)?;
        skipped = sel.skipped_anchors;
        let flows = sel
            .pairs
            .par_iter()
            .map(|p| {
                let model = scans.model(p.partner, &spec)?;
                pixel_flow(&clouds[p.anchor], &scans.images[p.partner], &p.transform, &model, pc.selection.occlusion_margin)
                    .map_err(pipeline)
            })
            .collect::<Result<Vec<FlowMap>>>()?;
        for (p, flow) in sel.pairs.iter().zip(flows) {
            let name = format!("flows/real_{:06}_{:06}.flow", p.anchor, p.partner);
            files.push((name.clone(), io::encode_flow(&flow)));
            entries.push(PairEntry {
                anchor: p.anchor,
                partner: Some(p.partner),
                warped: None,
                flow: name,
                synthetic: false,
            });
        }
        manifest = sel.pairs;
    }
    info!("{} pairs ({} anchors without partner)", entries.len(), skipped);

    let scans_abs = fs::canonicalize(scans_dir).map_err(|e| CliError::io(scans_dir, e))?;
    let index = PairIndex {
        scans: scans_abs.display().to_string(),
        pairs: entries,
        skipped_anchors: skipped,
    };
    mkdir(&out.join("flows"))?;
    mkdir(&out.join("synthetic"))?;
    for (name, data) in &files {
        write(&out.join(name), data)?;
    }
    write(&out.join("manifest.txt"), io::format_manifest(&manifest).as_bytes())?;
    write(&out.join(PAIR_INDEX), (serde_json::to_string_pretty(&index).expect("index serializes") + "\n").as_bytes())?;
    write_config(out, cfg)
}

pub fn load_pairs(pairs_dir: &Path) -> Result<(Vec<PairSample>, DatasetStats)> {
    let ip = pairs_dir.join(PAIR_INDEX);
    let text = fs::read_to_string(&ip).map_err(|e| CliError::io(&ip, e))?;
    let index: PairIndex = serde_json::from_str(&text).map_err(|e| CliError::io(&ip, e))?;
    let scans = ScanDir::load(Path::new(&index.scans))?;
    let check = |k: usize| {
        if k < scans.len() {
            Ok(k)
        } else {
            Err(CliError::io(&ip, format!("scan index {k} out of range")))
        }
    };
    let used: BTreeSet<usize> = index
        .pairs
        .iter()
        .flat_map(|e| std::iter::once(e.anchor).chain(e.partner))
        .map(check)
        .collect::<Result<_>>()?;
    if used.is_empty() {
        return Err(CliError::Pipeline("pair index is empty".into()));
    }
    let stats = DatasetStats::compute(used.iter().map(|&k| &scans.images[k])).map_err(pipeline)?;
    let samples = index
        .pairs
        .par_iter()
        .map(|e| {
            let fp = pairs_dir.join(&e.flow);
            let flow = io::read_flow(&fp).map_err(core_err(&fp))?;
            let b = match (&e.warped, e.partner) {
                (Some(w), _) => {
                    let wp = pairs_dir.join(w);
                    io::read_scan(&wp).map_err(core_err(&wp))?.0
                }
                (None, Some(p)) => scans.images[p].clone(),
                (None, None) => return Err(CliError::io(&ip, "pair without partner or warped image")),
            };
            Ok(PairSample {
                sample: TrainSample {
                    image_a: normalize(&scans.images[e.anchor], &stats).map_err(pipeline)?,
                    image_b: normalize(&b, &stats).map_err(pipeline)?,
                    flow,
                },
                synthetic: e.synthetic,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, stats))
}

pub fn train_cmd(cfg: &PipelineConfig, pairs_dir: &Path, out: &Path) -> Result<()> {
    let (samples, stats) = load_pairs(pairs_dir)?;
    let mut net = Network::new(cfg.network.clone(), cfg.seed).map_err(pipeline)?;
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    info!("training on {} pairs, {} parameters", samples.len(), net.parameter_count());
    let report = train(&mut net, &samples, &tc).map_err(pipeline)?;
    if let (Some(first), Some(last)) = (report.steps.first(), report.steps.last()) {
        info!("loss {:.4} -> {:.4} over {} steps", first.loss.total, last.loss.total, report.steps.len());
    }
    mkdir(out)?;
    let wp = out.join("weights.w3dl");
    save_weights(&wp, &net, Some(&stats)).map_err(net_err(&wp))?;
    write(&out.join("loss.csv"), report.loss_csv().as_bytes())?;
    write_config(out, cfg)
}

fn read_single_scan(path: &Path, spec: &ScannerSpec) -> Result<(ScanImage, OrderedPointCloud)> {
    let (img, elev) = io::read_scan(path).map_err(core_err(path))?;
    let model = model_for(&img, elev.as_deref(), spec)?;
    let cloud = lift_cloud(&img, &model).map_err(pipeline)?;
    Ok((img, cloud))
}

pub fn extract_cmd(cfg: &PipelineConfig, scan: &Path, weights: Option<&Path>, out: &Path, emit_plots: bool) -> Result<()> {
    let spec = cfg.simulate.scanner.resolve()?;
    let backend = FeatureBackend::load(weights)?;
    let (img, cloud) = read_single_scan(scan, &spec)?;
    let maps = backend.maps(&img, cfg)?;
    let e = &cfg.features.extract;
    let fs = extract(&maps, &cloud, e.score_threshold, e.nms_radius).map_err(pipeline)?;
    info!("{} keypoints", fs.len());
    if emit_plots {
        let scores = fuse_scores(&maps);
        write(&out.with_extension("score.pgm"), &io::encode_pgm(&scores, img.height, img.width, 0.0, 1.0))?;
        write(&out.with_extension("keypoints.csv"), plots::keypoints_csv(&fs).as_bytes())?;
    }
    write(out, &io::encode_features(&fs))
}

pub fn register_cmd(cfg: &PipelineConfig, a: &Path, b: &Path, out: &Path) -> Result<()> {
    let fa = io::read_features(a).map_err(core_err(a))?;
    let fb = io::read_features(b).map_err(core_err(b))?;
    let m = match_features(&fa, &fb).map_err(pipeline)?;
    let ransac = scanfeat_core::register::RansacConfig {
        seed: cfg.seed,
        ..cfg.registration.ransac
    };
    let r = estimate_rigid(&m, &fa, &fb, &ransac).map_err(pipeline)?;
    info!("{} matches, {} inliers", m.len(), r.inlier_count);
    if !r.converged {
        return Err(CliError::Pipeline("registration did not converge".into()));
    }
    write(out, io::format_transform(&r.transform).as_bytes())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlamSummary {
    pub scans: usize,
    pub loop_closure: bool,
    pub proposals: Vec<(usize, usize)>,
    pub accepted_loops: Vec<(usize, usize, usize)>,
    pub residuals: Vec<f64>,
    /// Present when ground-truth poses sit next to the scans.
    pub mean_translation_error: Option<f64>,
    pub mean_rotation_error_deg: Option<f64>,
}

pub fn per_scan_features(
    scans: &ScanDir,
    spec: &ScannerSpec,
    backend: &FeatureBackend,
    cfg: &PipelineConfig,
) -> Result<(Vec<FeatureSet>, Vec<OrderedPointCloud>)> {
    let out = (0..scans.len())
        .into_par_iter()
        .map(|k| {
            let cloud = scans.cloud(k, spec)?;
            Ok((backend.features(&scans.images[k], &cloud, cfg)?, cloud))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().unzip())
}

pub fn slam_cmd(cfg: &PipelineConfig, scans_dir: &Path, weights: Option<&Path>, out: &Path, emit_plots: bool) -> Result<()> {
    let spec = cfg.simulate.scanner.resolve()?;
    let backend = FeatureBackend::load(weights)?;
    let scans = ScanDir::load(scans_dir)?;
    let (features, clouds) = per_scan_features(&scans, &spec, &backend, cfg)?;
    let sc = cfg.slam_config();
    let result = run_slam(&features, sc.icp.is_some().then_some(&clouds[..]), &sc).map_err(pipeline)?;
    let stamps: Vec<f64> = match &scans.poses {
        Some(p) => p.iter().map(|p| p.timestamp).collect(),
        None => (0..scans.len()).map(|k| k as f64).collect(),
    };
    let est: Vec<Pose> = result
        .final_poses()
        .iter()
        .zip(&stamps)
        .map(|(t, s)| Pose::new(*t, *s))
        .collect();
    let errors = match &scans.poses {
        Some(gt) => Some(trajectory_errors(&est, gt).map_err(pipeline)?),
        None => None,
    };
    if let Some((te, re)) = errors {
        info!("mean translation error {te:.4} m, rotation error {re:.4} deg");
    }
    info!("{} loop proposals, {} accepted", result.proposals.len(), result.accepted_loops.len());
    let summary = SlamSummary {
        scans: scans.len(),
        loop_closure: sc.loop_closure,
        proposals: result.proposals.clone(),
        accepted_loops: result.accepted_loops.clone(),
        residuals: result.residuals.clone(),
        mean_translation_error: errors.map(|e| e.0),
        mean_rotation_error_deg: errors.map(|e| e.1),
    };
    mkdir(out)?;
    write(&out.join("trajectory.tum"), io::format_tum(&est).as_bytes())?;
    write(&out.join("slam.json"), (serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").as_bytes())?;
    if emit_plots {
        let gt: Option<Vec<RigidTransform>> = scans.poses.as_ref().map(|p| p.iter().map(|q| q.transform).collect());
        // estimate drawn in the ground-truth frame
        let drawn: Vec<RigidTransform> = match &scans.poses {
            Some(p) => {
                let a = scanfeat_core::bench::align_positions(&est, p);
                est.iter().map(|e| a.compose(&e.transform)).collect()
            }
            None => est.iter().map(|e| e.transform).collect(),
        };
        write(&out.join("trajectory.csv"), plots::trajectory_csv(&drawn, gt.as_deref()).as_bytes())?;
        write(&out.join("trajectory.gp"), plots::trajectory_gnuplot("trajectory.csv", gt.is_some()).as_bytes())?;
    }
    write_config(out, cfg)
}

pub fn bench_cmd(cfg: &PipelineConfig, manifest: &Path, scans_dir: &Path, weights: Option<&Path>, out: &Path) -> Result<BenchmarkReport> {
    let spec = cfg.simulate.scanner.resolve()?;
    let text = fs::read_to_string(manifest).map_err(|e| CliError::io(manifest, e))?;
    let pairs = io::parse_manifest(&text).map_err(core_err(manifest))?;
    let scans = ScanDir::load(scans_dir)?;
    let needed: BTreeSet<usize> = pairs.iter().flat_map(|p| [p.anchor, p.partner]).collect();
    if let Some(&k) = needed.iter().find(|&&k| k >= scans.len()) {
        return Err(CliError::io(manifest, format!("scan index {k} out of range")));
    }
    let backend = FeatureBackend::load(weights)?;
    let computed = needed
        .par_iter()
        .map(|&k| {
            let cloud = scans.cloud(k, &spec)?;
            Ok((k, backend.features(&scans.images[k], &cloud, cfg)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let features: BTreeMap<usize, FeatureSet> = computed.into_iter().collect();
    let source = |k: usize| -> scanfeat_core::Result<FeatureSet> { Ok(features[&k].clone()) };
    let ransac = scanfeat_core::register::RansacConfig {
        seed: cfg.seed,
        ..cfg.registration.ransac
    };
    let report = evaluate_pairs(&pairs, &source, &ransac, &cfg.bench).map_err(pipeline)?;
    info!("RS {:.2}% MR {:.2}% RR {:.2}% over {} pairs", report.rs, report.mr, report.rr, report.pair_count);
    mkdir(out)?;
    write(&out.join("report.json"), (serde_json::to_string_pretty(&report).expect("report serializes") + "\n").as_bytes())?;
    // wall-clock values change between runs; kept apart from the report
    write(&out.join("timing.json"), (serde_json::to_string_pretty(&report.timing()).expect("timing serializes") + "\n").as_bytes())?;
    write_config(out, cfg)?;
    Ok(report)
}
