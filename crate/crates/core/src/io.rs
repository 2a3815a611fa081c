//! File formats: scan and flow containers, feature files, TUM poses, pair
//! manifests, g2o graphs, and plain-text plot data.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::features::{FeatureSet, Keypoint};
use crate::geom::{Pose, RigidTransform};
use crate::mapping::{Edge, EdgeKind, PoseGraph};
use crate::pairgen::{FlowMap, ScanPair};
use crate::projection::ScanImage;

const SCAN_MAGIC: &[u8; 4] = b"SCNI";
const FEAT_MAGIC: &[u8; 4] = b"F3DL";
const VERSION: u32 = 1;

/// Little-endian cursor over a byte buffer.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.bytes(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }
}

pub fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

pub fn put_f32(out: &mut Vec<u8>, x: f32) {
    out.extend_from_slice(&x.to_le_bytes());
}

/// Writes via a sibling temp file and rename so failures leave no partial file.
pub fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(data)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Two-channel image with validity, the shared scan/flow container.
fn encode_container(h: usize, w: usize, c0: &[f64], c1: &[f64], valid: &[bool], elevations: Option<&[f64]>) -> Vec<u8> {
    let n = h * w;
    let mut out = Vec::with_capacity(16 + n * 9 + h * 4);
    out.extend_from_slice(SCAN_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, h as u32);
    put_u32(&mut out, w as u32);
    for x in c0 {
        put_f32(&mut out, *x as f32);
    }
    for x in c1 {
        put_f32(&mut out, *x as f32);
    }
    out.extend(valid.iter().map(|&v| v as u8));
    if let Some(e) = elevations {
        for x in e {
            put_f32(&mut out, *x as f32);
        }
    }
    out
}

type Container = (usize, usize, Vec<f64>, Vec<f64>, Vec<bool>, Option<Vec<f64>>);

fn decode_container(buf: &[u8]) -> Result<Container> {
    let mut r = Reader::new(buf);
    r.magic(SCAN_MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported scan version {version}")));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = h.checked_mul(w).ok_or_else(|| Error::Format("image size overflow".into()))?;
    let c0 = r.f32s(n)?.into_iter().map(f64::from).collect();
    let c1 = r.f32s(n)?.into_iter().map(f64::from).collect();
    let valid = r.bytes(n)?.iter().map(|&b| b != 0).collect();
    let elev = match r.remaining() {
        0 => None,
        k if k == 4 * h => Some(r.f32s(h)?.into_iter().map(f64::from).collect()),
        k => return Err(Error::Format(format!("{k} trailing bytes, expected 0 or {}", 4 * h))),
    };
    Ok((h, w, c0, c1, valid, elev))
}

pub fn encode_scan(img: &ScanImage, elevations: Option<&[f64]>) -> Vec<u8> {
    encode_container(img.height, img.width, &img.range, &img.intensity, &img.valid, elevations)
}

pub fn decode_scan(buf: &[u8]) -> Result<(ScanImage, Option<Vec<f64>>)> {
    let (height, width, range, intensity, valid, elev) = decode_container(buf)?;
    Ok((
        ScanImage {
            height,
            width,
            range,
            intensity,
            valid,
        },
        elev,
    ))
}

pub fn write_scan(path: &Path, img: &ScanImage, elevations: Option<&[f64]>) -> Result<()> {
    write_atomic(path, &encode_scan(img, elevations))
}

pub fn read_scan(path: &Path) -> Result<(ScanImage, Option<Vec<f64>>)> {
    decode_scan(&read_all(path)?)
}

pub fn encode_flow(flow: &FlowMap) -> Vec<u8> {
    encode_container(flow.height, flow.width, &flow.target_u, &flow.target_v, &flow.valid, None)
}

pub fn decode_flow(buf: &[u8]) -> Result<FlowMap> {
    let (height, width, target_u, target_v, valid, _) = decode_container(buf)?;
    Ok(FlowMap {
        height,
        width,
        target_u,
        target_v,
        valid,
    })
}

pub fn write_flow(path: &Path, flow: &FlowMap) -> Result<()> {
    write_atomic(path, &encode_flow(flow))
}

pub fn read_flow(path: &Path) -> Result<FlowMap> {
    decode_flow(&read_all(path)?)
}

pub fn encode_features(fs: &FeatureSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + fs.len() * (24 + 4 * fs.dim));
    out.extend_from_slice(FEAT_MAGIC);
    put_u32(&mut out, fs.len() as u32);
    put_u32(&mut out, fs.dim as u32);
    for (i, k) in fs.keypoints.iter().enumerate() {
        put_u32(&mut out, k.u as u32);
        put_u32(&mut out, k.v as u32);
        for c in k.point.iter() {
            put_f32(&mut out, *c as f32);
        }
        put_f32(&mut out, k.score as f32);
        for x in fs.descriptor(i) {
            put_f32(&mut out, *x as f32);
        }
    }
    out
}

pub fn decode_features(buf: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader::new(buf);
    r.magic(FEAT_MAGIC)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut fs = FeatureSet::new(dim);
    for _ in 0..count {
        let u = r.u32()? as usize;
        let v = r.u32()? as usize;
        let p = r.f32s(3)?;
        let score = r.f32()? as f64;
        let d: Vec<f64> = r.f32s(dim)?.into_iter().map(f64::from).collect();
        fs.push(
            Keypoint {
                u,
                v,
                point: Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64),
                score,
            },
            &d,
        );
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes in feature file", r.remaining())));
    }
    Ok(fs)
}

pub fn write_features(path: &Path, fs: &FeatureSet) -> Result<()> {
    write_atomic(path, &encode_features(fs))
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    decode_features(&read_all(path)?)
}

fn parse_floats(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Format(format!("line {lineno}: bad number {t:?}")))
        })
        .collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// TUM trajectory text: `timestamp tx ty tz qx qy qz qw`.
pub fn format_tum(poses: &[Pose]) -> String {
    let mut s = String::new();
    for p in poses {
        let q = p.transform.quaternion();
        let t = p.transform.translation;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        );
    }
    s
}

pub fn parse_tum(text: &str) -> Result<Vec<Pose>> {
    content_lines(text)
        .map(|(no, line)| {
            let v = parse_floats(line, no)?;
            if v.len() != 8 {
                return Err(Error::Format(format!("line {no}: expected 8 fields, got {}", v.len())));
            }
            let q = nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]);
            if !(q.norm() > 0.0) {
                return Err(Error::Format(format!("line {no}: zero quaternion")));
            }
            let q = UnitQuaternion::from_quaternion(q);
            Ok(Pose::new(RigidTransform::from_quaternion(&q, Vector3::new(v[1], v[2], v[3])), v[0]))
        })
        .collect()
}

pub fn write_tum(path: &Path, poses: &[Pose]) -> Result<()> {
    write_atomic(path, format_tum(poses).as_bytes())
}

pub fn read_tum(path: &Path) -> Result<Vec<Pose>> {
    parse_tum(&fs::read_to_string(path)?)
}

/// Pair manifest: `anchor partner t00 … t23` per line.
pub fn format_manifest(pairs: &[ScanPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        let _ = write!(s, "{} {}", p.anchor, p.partner);
        for x in p.transform.to_row_major_3x4() {
            let _ = write!(s, " {x}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ScanPair>> {
    content_lines(text)
        .map(|(no, line)| {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 14 {
                return Err(Error::Format(format!("line {no}: expected 14 fields, got {}", toks.len())));
            }
            let idx = |t: &str| {
                t.parse::<usize>()
                    .map_err(|_| Error::Format(format!("line {no}: bad index {t:?}")))
            };
            let m = parse_floats(&toks[2..].join(" "), no)?;
            Ok(ScanPair {
                anchor: idx(toks[0])?,
                partner: idx(toks[1])?,
                transform: RigidTransform::from_row_major_3x4(&m)?,
                overlap: f64::NAN,
            })
        })
        .collect()
}

pub fn format_transform(t: &RigidTransform) -> String {
    let m = t.to_row_major_3x4();
    let mut s = String::new();
    for r in 0..3 {
        let _ = writeln!(s, "{} {} {} {}", m[4 * r], m[4 * r + 1], m[4 * r + 2], m[4 * r + 3]);
    }
    s
}

pub fn parse_transform(text: &str) -> Result<RigidTransform> {
    let v = parse_floats(text, 1)?;
    RigidTransform::from_row_major_3x4(&v)
}

fn upper_identity_21(weight: f64) -> [f64; 21] {
    let mut info = [0.0; 21];
    let mut k = 0;
    for r in 0..6 {
        for c in r..6 {
            if r == c {
                info[k] = weight;
            }
            k += 1;
        }
    }
    info
}

pub fn format_g2o(graph: &PoseGraph) -> String {
    let mut s = String::new();
    let qt = |t: &RigidTransform| {
        let q = t.quaternion();
        let p = t.translation;
        format!("{} {} {} {} {} {} {}", p.x, p.y, p.z, q.i, q.j, q.k, q.w)
    };
    for (i, n) in graph.nodes.iter().enumerate() {
        let _ = writeln!(s, "VERTEX_SE3:QUAT {i} {}", qt(n));
    }
    for e in &graph.edges {
        let _ = write!(s, "EDGE_SE3:QUAT {} {} {}", e.i, e.j, qt(&e.measurement));
        for x in upper_identity_21(e.weight) {
            let _ = write!(s, " {x}");
        }
        s.push('\n');
    }
    s
}

/// Reads vertices and edges; edges between consecutive nodes are taken as
/// odometry, all others as loops. The information weight is the first entry.
pub fn parse_g2o(text: &str) -> Result<PoseGraph> {
    let mut nodes: Vec<(usize, RigidTransform)> = Vec::new();
    let mut edges = Vec::new();
    let pose = |v: &[f64], no: usize| -> Result<RigidTransform> {
        let q = nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]);
        if !(q.norm() > 0.0) {
            return Err(Error::Format(format!("line {no}: zero quaternion")));
        }
        Ok(RigidTransform::from_quaternion(&UnitQuaternion::from_quaternion(q), Vector3::new(v[0], v[1], v[2])))
    };
    for (no, line) in content_lines(text) {
        let mut toks = line.split_whitespace();
        let tag = toks.next().unwrap_or_default();
        let rest: Vec<&str> = toks.collect();
        let index = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| Error::Format(format!("line {no}: bad index {t:?}")))
        };
        match tag {
            "VERTEX_SE3:QUAT" if rest.len() == 8 => {
                let v = parse_floats(&rest[1..].join(" "), no)?;
                nodes.push((index(rest[0])?, pose(&v, no)?));
            }
            "EDGE_SE3:QUAT" if rest.len() == 30 => {
                let (i, j) = (index(rest[0])?, index(rest[1])?);
                let v = parse_floats(&rest[2..].join(" "), no)?;
                edges.push(Edge {
                    i,
                    j,
                    measurement: pose(&v[..7], no)?,
                    kind: if j == i + 1 { EdgeKind::Odometry } else { EdgeKind::Loop },
                    weight: v[7],
                });
            }
            _ => return Err(Error::Format(format!("line {no}: unrecognized record"))),
        }
    }
    nodes.sort_by_key(|(i, _)| *i);
    if nodes.iter().enumerate().any(|(k, (i, _))| k != *i) {
        return Err(Error::Format("vertex ids must be 0..n".into()));
    }
    Ok(PoseGraph {
        nodes: nodes.into_iter().map(|(_, t)| t).collect(),
        edges,
        dropped_loops: 0,
    })
}

/// `x y z` rows for a trajectory top view.
pub fn format_xyz(poses: &[RigidTransform]) -> String {
    let mut s = String::from("# x y z\n");
    for p in poses {
        let _ = writeln!(s, "{} {} {}", p.translation.x, p.translation.y, p.translation.z);
    }
    s
}

/// Binary 8-bit PGM of `values` scaled from `[lo, hi]` to `[0, 255]`.
pub fn encode_pgm(values: &[f64], height: usize, width: usize, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(values.iter().map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
