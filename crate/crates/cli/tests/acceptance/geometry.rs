use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scanfeat_core::pairgen::{pixel_flow, synth_pair, FlowMap, SyntheticTransformParams};
use scanfeat_core::projection::{lift_cloud, project, to_scan_image};
use scanfeat_core::simlidar::{raycast, Scene, ScannerSpec};
use scanfeat_core::{OrderedPointCloud, Pose, RigidTransform, ScanImage, SphericalModel};

use crate::{check, within, Outcome};

pub fn random_transform(rng: &mut impl Rng, max_t: f64) -> RigidTransform {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle = rng.random_range(-PI..PI);
    let t = Vector3::new(
        rng.random_range(-max_t..max_t),
        rng.random_range(-max_t..max_t),
        rng.random_range(-max_t..max_t),
    );
    let r = RigidTransform::from_axis_angle(&axis, angle);
    RigidTransform::new(r.rotation, t)
}

fn homogeneous(t: &RigidTransform) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.translation);
    m
}

fn matrix_diff(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
    (a - b).abs().max()
}

/// Scanner pose on a small grid inside the courtyard.
pub fn scan_pose(rng: &mut impl Rng) -> Pose {
    let t = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-0.2..0.2));
    let yaw = rng.random_range(-PI..PI);
    let r = RigidTransform::from_axis_angle(&Vector3::z(), yaw);
    Pose::new(RigidTransform::new(r.rotation, t), 0.0)
}

pub fn transforms_and_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = random_transform(&mut rng, 50.0);
        let b = random_transform(&mut rng, 50.0);
        let p = Vector3::new(rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0));
        let ab = a.compose(&b);
        worst = worst
            .max(matrix_diff(&homogeneous(&ab), &(homogeneous(&a) * homogeneous(&b))))
            .max(matrix_diff(&homogeneous(&a.inverse()), &homogeneous(&a).try_inverse().unwrap()))
            .max(a.compose(&a.inverse()).max_abs_diff(&RigidTransform::identity()))
            .max((ab.apply(&p) - a.apply(&b.apply(&p))).amax())
            .max((a.inverse().apply(&a.apply(&p)) - p).amax());
    }

    // Points jittered in azimuth inside their own column, projected and lifted back.
    let spec = ScannerSpec::os1_64();
    let model = spec.model().map_err(|e| e.to_string())?;
    let res = model.azimuth_resolution;
    let (h, w) = (spec.height(), spec.width);
    let mut pixels = 0usize;
    let mut violations = 0usize;
    let mut worst_ratio: f64 = 0.0;
    for k in 0..10u64 {
        let pose = scan_pose(&mut rng);
        let cloud = raycast(&Scene::courtyard(), &pose, &spec, k).map_err(|e| e.to_string())?;
        let mut pts = Vec::new();
        let mut src = Vec::new();
        for (i, p) in cloud.valid_points() {
            let (v, u) = (i / w, i % w);
            let r = p.norm();
            let e = (p.z / r).asin();
            let a = model.column_azimuth(u) + rng.random_range(-0.49..0.49) * res;
            pts.push(Vector3::new(r * e.cos() * a.cos(), r * e.cos() * a.sin(), r * e.sin()));
            src.push((u, v));
        }
        let intens = vec![0.0; pts.len()];
        let (img, report) = project(&pts, &intens, &model, h, w).map_err(|e| e.to_string())?;
        if report.occluded != 0 || report.projected != pts.len() {
            return Err(format!("jittered points left their pixels: {report:?}"));
        }
        let lifted = lift_cloud(&img, &model).map_err(|e| e.to_string())?;
        for (p, &(u, v)) in pts.iter().zip(&src) {
            if !lifted.is_valid(v, u) {
                violations += 1;
                continue;
            }
            let err = (lifted.point(v, u) - p).norm();
            let bound = p.norm() * res / 2.0;
            worst_ratio = worst_ratio.max(err / bound);
            if err > bound {
                violations += 1;
            }
            pixels += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-9 && violations == 0 && within(elapsed, 10.0),
        format!(
            "1000 transform checks worst {worst:.2e}; round trip on {pixels} pixels, worst error {worst_ratio:.3} of bound, {violations} violations"
        ),
    )
}

/// Continuous row coordinate by linear search over the beam table.
fn oracle_row(elev: &[f64], e: f64) -> f64 {
    let h = elev.len();
    if e >= elev[0] {
        return (elev[0] - e) / (elev[0] - elev[1]);
    }
    for k in 0..h - 1 {
        if elev[k] >= e && e > elev[k + 1] {
            return k as f64 + (elev[k] - e) / (elev[k] - elev[k + 1]);
        }
    }
    (h - 1) as f64 + (elev[h - 1] - e) / (elev[h - 2] - elev[h - 1])
}

fn oracle_col(model: &SphericalModel, w: usize, az: f64) -> f64 {
    let wf = w as f64;
    let mut c = (az + model.azimuth_offset) / model.azimuth_resolution - 0.5;
    while c < 0.0 {
        c += wf;
    }
    while c >= wf {
        c -= wf;
    }
    c
}

/// Transform each point, project it by brute force and test it against the
/// partner's own measured point in the hit pixel.
fn flow_oracle(a: &OrderedPointCloud, b: &OrderedPointCloud, t: &RigidTransform, model: &SphericalModel, margin: f64) -> Vec<Option<(f64, f64)>> {
    let (h, w) = (a.height(), a.width());
    let mut out = vec![None; h * w];
    for v in 0..h {
        for u in 0..w {
            if !a.is_valid(v, u) {
                continue;
            }
            let p = t.apply(&a.point(v, u));
            let r = p.norm();
            if r <= 0.0 {
                continue;
            }
            let tu = oracle_col(model, w, p.y.atan2(p.x));
            let tv = oracle_row(&model.elevation_angles, (p.z / r).asin());
            if tv < 0.0 || tv > (h - 1) as f64 {
                continue;
            }
            let pv = (tv + 0.5).floor() as usize;
            let pu = ((tu + 0.5).floor() as usize) % w;
            if !b.is_valid(pv, pu) || r > b.point(pv, pu).norm() + margin {
                continue;
            }
            out[v * w + u] = Some((tu, tv));
        }
    }
    out
}

pub fn pixel_flow_oracle() -> Outcome {
    let start = Instant::now();
    let spec = ScannerSpec::os1_64();
    let model = spec.model().map_err(|e| e.to_string())?;
    let scene = Scene::courtyard();
    let margin = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut compared = 0usize;
    let mut valid = 0usize;
    let mut mismatches = 0usize;
    let mut worst: f64 = 0.0;
    for k in 0..25u64 {
        let pa = scan_pose(&mut rng);
        // partner 1 to 4 m away with a different heading
        let dir = rng.random_range(-PI..PI);
        let dist = rng.random_range(1.0..4.0);
        let mut pb = scan_pose(&mut rng);
        pb.transform.translation = pa.transform.translation + Vector3::new(dist * dir.cos(), dist * dir.sin(), 0.0);
        let a = raycast(&scene, &pa, &spec, 2 * k).map_err(|e| e.to_string())?;
        let b = raycast(&scene, &pb, &spec, 2 * k + 1).map_err(|e| e.to_string())?;
        let t = scanfeat_core::geom::relative_transform(&pa, &pb);
        let flow = pixel_flow(&a, &to_scan_image(&b), &t, &model, margin).map_err(|e| e.to_string())?;
        let oracle = flow_oracle(&a, &b, &t, &model, margin);
        for v in 0..flow.height {
            for u in 0..flow.width {
                compared += 1;
                match (flow.get(u, v), oracle[v * flow.width + u]) {
                    (None, None) => {}
                    (Some(x), Some(y)) => {
                        valid += 1;
                        let d = (x.0 - y.0).abs().max((x.1 - y.1).abs());
                        worst = worst.max(d);
                        if d > 1e-6 {
                            mismatches += 1;
                        }
                    }
                    _ => mismatches += 1,
                }
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        mismatches == 0 && valid > 0 && within(elapsed, 60.0),
        format!("25 pairs, {compared} pixels, {valid} valid, {mismatches} disagreements, worst target diff {worst:.1e}"),
    )
}

fn textured_image(h: usize, w: usize, rng: &mut impl Rng) -> ScanImage {
    let mut img = ScanImage::invalid(h, w);
    for v in 0..h {
        for u in 0..w {
            let i = img.index(u, v);
            if rng.random::<f64>() < 0.9 {
                img.range[i] = rng.random_range(1.0..60.0);
                img.intensity[i] = rng.random_range(0.0..1.0);
                img.valid[i] = true;
            }
        }
    }
    img
}

fn same_flow(a: &FlowMap, b: &FlowMap) -> bool {
    (0..a.height).all(|v| (0..a.width).all(|u| a.get(u, v) == b.get(u, v)))
}

pub fn synthetic_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // odd sizes put the zoom center on a pixel
    let (h, w) = (33, 513);
    let img = textured_image(h, w, &mut rng);

    let (same, flow) = synth_pair(&img, &SyntheticTransformParams::default()).map_err(|e| e.to_string())?;
    let identity_ok = same == img
        && (0..h).all(|v| {
            (0..w).all(|u| flow.get(u, v) == img.is_valid(u, v).then_some((u as f64, v as f64)))
        });

    let (cu, cv) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let mut exact = 0usize;
    let mut broken = 0usize;
    for s in [1.1, 1.25] {
        let p = SyntheticTransformParams {
            scale: s,
            ..Default::default()
        };
        let (warped, flow) = synth_pair(&img, &p).map_err(|e| e.to_string())?;
        for v in 0..h {
            for u in 0..w {
                let Some((tu, tv)) = flow.get(u, v) else { continue };
                let (eu, ev) = (s * (u as f64 - cu) + cu, s * (v as f64 - cv) + cv);
                if (tu - eu).abs() > 1e-9 || (tv - ev).abs() > 1e-9 {
                    broken += 1;
                    continue;
                }
                // lattice targets read a single source pixel
                if tu == tu.round() && tv == tv.round() {
                    let k = warped.index(tu as usize, tv as usize);
                    if warped.range[k] != img.range_at(u, v) / s {
                        broken += 1;
                    }
                    exact += 1;
                }
            }
        }
    }

    let mut periodic = true;
    for _ in 0..10 {
        let base = SyntheticTransformParams {
            scale: rng.random_range(1.0..1.25),
            u_shift: rng.random_range(-50..50),
            v_shift: rng.random_range(-2..3),
            tilt: rng.random_range(-5.0..5.0),
        };
        let (wa, fa) = synth_pair(&img, &base).map_err(|e| e.to_string())?;
        for k in [-2i64, 1, 3] {
            let shifted = SyntheticTransformParams {
                u_shift: base.u_shift + k * w as i64,
                ..base
            };
            let (wb, fb) = synth_pair(&img, &shifted).map_err(|e| e.to_string())?;
            periodic &= wa == wb && same_flow(&fa, &fb);
        }
    }
    check(
        identity_ok && broken == 0 && exact > 0 && periodic,
        format!("identity {identity_ok}, range scaling exact on {exact} lattice targets ({broken} broken), shift period W {periodic}"),
    )
}
