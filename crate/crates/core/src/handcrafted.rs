//! Non-learned dense features: Harris-style corner scores on the intensity
//! and log-range channels, normalized local patches as descriptors.
//!
//! Produces the same [`DenseFeatureMap`] as the network so the rest of the
//! pipeline can run without trained weights.

use crate::features::DenseFeatureMap;
use crate::projection::ScanImage;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HandcraftedConfig {
    /// Descriptor patch half-size in samples.
    pub patch_radius: usize,
    /// Pixel step between patch samples.
    pub patch_stride: usize,
    /// Half-size of the structure-tensor window.
    pub window: usize,
    pub harris_k: f64,
    /// Response quantile mapped to score 1.
    pub score_quantile: f64,
}

impl Default for HandcraftedConfig {
    fn default() -> Self {
        Self {
            patch_radius: 3,
            patch_stride: 2,
            window: 2,
            harris_k: 0.04,
            score_quantile: 0.5,
        }
    }
}

impl HandcraftedConfig {
    pub fn dim(&self) -> usize {
        let side = 2 * self.patch_radius + 1;
        2 * side * side
    }
}

struct Channels<'a> {
    img: &'a ScanImage,
    log_range: Vec<f64>,
}

impl Channels<'_> {
    #[inline]
    fn wrap(&self, u: isize) -> usize {
        u.rem_euclid(self.img.width as isize) as usize
    }

    #[inline]
    fn get(&self, u: isize, v: isize) -> Option<(f64, f64)> {
        if v < 0 || v >= self.img.height as isize {
            return None;
        }
        let i = self.img.index(self.wrap(u), v as usize);
        self.img.valid[i].then(|| (self.img.intensity[i], self.log_range[i]))
    }
}

pub fn handcrafted_features(image: &ScanImage, cfg: &HandcraftedConfig) -> DenseFeatureMap {
    let (h, w) = (image.height, image.width);
    let n = h * w;
    let ch = Channels {
        img: image,
        log_range: image
            .range
            .iter()
            .zip(&image.valid)
            .map(|(r, &ok)| if ok && *r > 0.0 { r.ln() } else { 0.0 })
            .collect(),
    };

    // per-pixel gradient products summed over both channels
    let mut gxx = vec![0.0; n];
    let mut gyy = vec![0.0; n];
    let mut gxy = vec![0.0; n];
    for v in 0..h as isize {
        for u in 0..w as isize {
            let (Some(l), Some(r), Some(t), Some(b)) =
                (ch.get(u - 1, v), ch.get(u + 1, v), ch.get(u, v - 1), ch.get(u, v + 1))
            else {
                continue;
            };
            let i = v as usize * w + u as usize;
            // log-range weighted up so geometric edges compete with texture
            for (gx, gy) in [(0.5 * (r.0 - l.0), 0.5 * (b.0 - t.0)), (2.0 * (r.1 - l.1), 2.0 * (b.1 - t.1))] {
                gxx[i] += gx * gx;
                gyy[i] += gy * gy;
                gxy[i] += gx * gy;
            }
        }
    }

    let win = cfg.window as isize;
    let mut response = vec![0.0; n];
    for v in 0..h as isize {
        for u in 0..w as isize {
            let i = v as usize * w + u as usize;
            if !image.valid[i] {
                continue;
            }
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for dv in -win..=win {
                let vv = v + dv;
                if vv < 0 || vv >= h as isize {
                    continue;
                }
                for du in -win..=win {
                    let j = vv as usize * w + ch.wrap(u + du);
                    a += gxx[j];
                    b += gyy[j];
                    c += gxy[j];
                }
            }
            let r = a * b - c * c - cfg.harris_k * (a + b) * (a + b);
            response[i] = r.max(0.0);
        }
    }

    let mut positive: Vec<f64> = response.iter().copied().filter(|r| *r > 0.0).collect();
    let norm = if positive.is_empty() {
        1.0
    } else {
        positive.sort_by(f64::total_cmp);
        let k = ((positive.len() - 1) as f64 * cfg.score_quantile).round() as usize;
        positive[k].max(1e-300)
    };
    let score_root: Vec<f64> = response.iter().map(|r| (r / norm).min(1.0).sqrt()).collect();

    let dim = cfg.dim();
    let mut descriptors = vec![0.0; n * dim];
    let side = 2 * cfg.patch_radius as isize + 1;
    let half = side * side;
    let mut patch = vec![0.0; dim];
    for v in 0..h as isize {
        for u in 0..w as isize {
            let i = v as usize * w + u as usize;
            let Some(center) = ch.get(u, v) else {
                descriptors[i * dim] = 1.0;
                continue;
            };
            let mut k = 0usize;
            for dv in -(cfg.patch_radius as isize)..=cfg.patch_radius as isize {
                for du in -(cfg.patch_radius as isize)..=cfg.patch_radius as isize {
                    let s = cfg.patch_stride as isize;
                    let (pi, pr) = match ch.get(u + du * s, v + dv * s) {
                        Some((pi, pr)) => (pi - center.0, pr - center.1),
                        None => (0.0, 0.0),
                    };
                    patch[k] = pi;
                    patch[half as usize + k] = pr;
                    k += 1;
                }
            }
            let out = &mut descriptors[i * dim..(i + 1) * dim];
            normalize_halves(&patch, half as usize, out);
        }
    }

    DenseFeatureMap {
        height: h,
        width: w,
        dim,
        descriptors,
        reliability: score_root.clone(),
        repeatability: score_root,
        valid: image.valid.clone(),
    }
}

/// Zero-mean, unit-norm per channel block, then the whole vector to unit norm.
fn normalize_halves(patch: &[f64], half: usize, out: &mut [f64]) {
    for (src, dst) in patch.chunks(half).zip(out.chunks_mut(half)) {
        let mean = src.iter().sum::<f64>() / half as f64;
        let norm = src.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) / norm;
            }
        } else {
            dst.iter_mut().for_each(|d| *d = 0.0);
        }
    }
    let total = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if total > 0.0 {
        out.iter_mut().for_each(|x| *x /= total);
    } else {
        out[0] = 1.0;
    }
}
