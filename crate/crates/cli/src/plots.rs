//! Plot data for `--emit-plots`: CSV tables plus a gnuplot script.

use std::fmt::Write as _;

use scanfeat_core::{FeatureSet, RigidTransform};

/// `index,x,y,z[,gt_x,gt_y,gt_z]` rows.
pub fn trajectory_csv(est: &[RigidTransform], gt: Option<&[RigidTransform]>) -> String {
    let mut s = String::from("index,x,y,z");
    if gt.is_some() {
        s.push_str(",gt_x,gt_y,gt_z");
    }
    s.push('\n');
    for (k, t) in est.iter().enumerate() {
        let p = t.translation;
        let _ = write!(s, "{k},{},{},{}", p.x, p.y, p.z);
        if let Some(g) = gt.and_then(|g| g.get(k)) {
            let q = g.translation;
            let _ = write!(s, ",{},{},{}", q.x, q.y, q.z);
        }
        s.push('\n');
    }
    s
}

/// Top view of the estimate (and ground truth when present).
pub fn trajectory_gnuplot(csv: &str, with_gt: bool) -> String {
    let mut s = String::from("set datafile separator ','\nset size ratio -1\nset xlabel 'x [m]'\nset ylabel 'y [m]'\n");
    let _ = write!(s, "plot '{csv}' using 2:3 with linespoints title 'estimate'");
    if with_gt {
        let _ = write!(s, ", '{csv}' using 5:6 with lines title 'ground truth'");
    }
    s.push('\n');
    s
}

/// `u,v,x,y,z,score` per keypoint, for overlays on the score raster.
pub fn keypoints_csv(fs: &FeatureSet) -> String {
    let mut s = String::from("u,v,x,y,z,score\n");
    for k in &fs.keypoints {
        let _ = writeln!(s, "{},{},{},{},{},{}", k.u, k.v, k.point.x, k.point.y, k.point.z, k.score);
    }
    s
}
