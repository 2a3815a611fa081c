//! Input normalization, photometric augmentation and paired cropping.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use scanfeat_core::pairgen::FlowMap;
use scanfeat_core::ScanImage;

use crate::error::{NetError, Result};

/// Per-channel moments over valid pixels: channel 0 range, 1 intensity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Default for DatasetStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }
}

impl DatasetStats {
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a ScanImage>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for img in images {
            for i in (0..img.valid.len()).filter(|&i| img.valid[i]) {
                n += 1;
                for (c, x) in [img.range[i], img.intensity[i]].into_iter().enumerate() {
                    sum[c] += x;
                    sq[c] += x * x;
                }
            }
        }
        if n == 0 {
            return Err(NetError::DegenerateStats { channel: 0, std: 0.0 });
        }
        let mut s = Self::default();
        for c in 0..2 {
            let mean = sum[c] / n as f64;
            s.mean[c] = mean;
            s.std[c] = (sq[c] / n as f64 - mean * mean).max(0.0).sqrt();
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..2 {
            if !(self.std[c] >= 1e-12) {
                return Err(NetError::DegenerateStats { channel: c, std: self.std[c] });
            }
        }
        Ok(())
    }
}

/// `(x - μ) / σ` per channel on valid pixels; invalid pixels become zero.
pub fn normalize(image: &ScanImage, stats: &DatasetStats) -> Result<ScanImage> {
    stats.validate()?;
    let mut out = ScanImage::invalid(image.height, image.width);
    for i in 0..image.valid.len() {
        if image.valid[i] {
            out.range[i] = (image.range[i] - stats.mean[0]) / stats.std[0];
            out.intensity[i] = (image.intensity[i] - stats.mean[1]) / stats.std[1];
            out.valid[i] = true;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Per-channel offset drawn from `[-offset, offset]`.
    pub offset: f64,
    /// Per-channel factor `1 + γ`, `γ` drawn from `[-scale, scale]`.
    pub scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.2,
            offset: 0.1,
            scale: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            noise_sigma: 0.0,
            offset: 0.0,
            scale: 0.0,
        }
    }

    pub fn noise_only(&self) -> Self {
        Self {
            offset: 0.0,
            scale: 0.0,
            ..*self
        }
    }
}

fn symmetric<R: Rng>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Scales, offsets and adds noise to both channels of the valid pixels.
pub fn augment_image<R: Rng>(image: &ScanImage, cfg: &AugmentConfig, rng: &mut R) -> ScanImage {
    let gamma = [symmetric(rng, cfg.scale), symmetric(rng, cfg.scale)];
    let offset = [symmetric(rng, cfg.offset), symmetric(rng, cfg.offset)];
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("finite sigma"));
    let mut out = image.clone();
    for i in 0..image.valid.len() {
        if !image.valid[i] {
            continue;
        }
        for (c, x) in [&mut out.range[i], &mut out.intensity[i]].into_iter().enumerate() {
            let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            *x = *x * (1.0 + gamma[c]) + offset[c] + n;
        }
    }
    out
}

/// Image pair with flow from `image_a` pixels to `image_b` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image_a: ScanImage,
    pub image_b: ScanImage,
    pub flow: FlowMap,
}

/// Augments both images independently; the flow is untouched.
pub fn augment<R: Rng>(sample: &TrainSample, cfg: &AugmentConfig, rng: &mut R) -> TrainSample {
    TrainSample {
        image_a: augment_image(&sample.image_a, cfg, rng),
        image_b: augment_image(&sample.image_b, cfg, rng),
        flow: sample.flow.clone(),
    }
}

fn wrap_signed(x: f64, w: f64) -> f64 {
    let r = x.rem_euclid(w);
    if r >= w / 2.0 {
        r - w
    } else {
        r
    }
}

fn crop_image(img: &ScanImage, v0: usize, u0: usize, ch: usize, cw: usize) -> ScanImage {
    let mut out = ScanImage::invalid(ch, cw);
    for y in 0..ch {
        for x in 0..cw {
            let s = img.index((u0 + x) % img.width, v0 + y);
            let d = out.index(x, y);
            out.range[d] = img.range[s];
            out.intensity[d] = img.intensity[s];
            out.valid[d] = img.valid[s];
        }
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Random `crop_h x crop_w` window of `a` (columns wrap) and the matching
/// window of `b` placed at the median flow displacement. Flow targets are
/// re-expressed in `b`'s crop frame; targets leaving it become invalid.
/// `None` when the chosen window of `a` has no valid flow.
pub fn crop_sample<R: Rng>(sample: &TrainSample, crop_h: usize, crop_w: usize, rng: &mut R) -> Option<TrainSample> {
    let (h, w) = (sample.image_a.height, sample.image_a.width);
    let (hb, wb) = (sample.image_b.height, sample.image_b.width);
    let ch = crop_h.min(h).min(hb);
    let cw = crop_w.min(w).min(wb);
    let v0 = rng.random_range(0..=h - ch);
    let u0 = if cw < w { rng.random_range(0..w) } else { 0 };
    let flow = &sample.flow;

    let mut du = Vec::new();
    let mut dv = Vec::new();
    for y in v0..v0 + ch {
        for x in 0..cw {
            let u = (u0 + x) % w;
            if let Some((tu, tv)) = flow.get(u, y) {
                du.push(wrap_signed(tu - u as f64, wb as f64));
                dv.push(tv - y as f64);
            }
        }
    }
    if du.is_empty() {
        return None;
    }
    let shift_u = median(&mut du).round() as i64;
    let shift_v = median(&mut dv).round() as i64;
    let ub0 = (u0 as i64 + shift_u).rem_euclid(wb as i64) as usize;
    let vb0 = (v0 as i64 + shift_v).clamp(0, (hb - ch) as i64) as usize;

    let mut out_flow = FlowMap::invalid(ch, cw);
    for y in 0..ch {
        for x in 0..cw {
            let Some((tu, tv)) = flow.get((u0 + x) % w, v0 + y) else {
                continue;
            };
            let nu = (tu - ub0 as f64).rem_euclid(wb as f64);
            let nv = tv - vb0 as f64;
            let u_ok = if cw == wb { nu < wb as f64 } else { nu <= (cw - 1) as f64 };
            if u_ok && nv >= 0.0 && nv <= (ch - 1) as f64 {
                out_flow.set(x, y, Some((nu, nv)));
            }
        }
    }
    Some(TrainSample {
        image_a: crop_image(&sample.image_a, v0, u0, ch, cw),
        image_b: crop_image(&sample.image_b, vb0, ub0, ch, cw),
        flow: out_flow,
    })
}
