//! Twin-image training loss: patch cosine repeatability, peakiness, and a
//! reliability-gated quantized average-precision term, each with its
//! analytic gradient.

use serde::{Deserialize, Serialize};

use scanfeat_core::pairgen::{target_pixel, FlowMap};
use scanfeat_core::DenseFeatureMap;

use crate::error::{NetError, Result};
use crate::network::MapGrads;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub patch_size: usize,
    pub w_repeat: f64,
    pub w_peaky: f64,
    pub w_reliab: f64,
    /// Quantization bins of the AP histogram over similarity `[0, 1]`.
    pub ap_bins: usize,
    /// AP assumed for pixels the network marks unreliable.
    pub kappa: f64,
    /// Half-width (columns) of the candidate window on the target row.
    pub neg_span: usize,
    /// Columns next to the true match excluded from the negatives.
    pub ambiguous_radius: usize,
    /// Sample every n-th row and column as AP queries.
    pub query_stride: usize,
    pub cos_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            w_repeat: 1.0,
            w_peaky: 0.5,
            w_reliab: 1.0,
            ap_bins: 20,
            kappa: 0.5,
            neg_span: 16,
            ambiguous_radius: 2,
            query_stride: 1,
            cos_eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub repeat: f64,
    pub peaky: f64,
    pub reliab: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.repeat += o.repeat;
        self.peaky += o.peaky;
        self.reliab += o.reliab;
    }

    pub fn scale(&mut self, s: f64) {
        self.total *= s;
        self.repeat *= s;
        self.peaky *= s;
        self.reliab *= s;
    }
}

/// Non-overlapping `n x n` tiles (partial tiles at the borders included) as
/// lists of row-major pixel indices.
fn tiles(h: usize, w: usize, n: usize) -> impl Iterator<Item = Vec<usize>> {
    let n = n.max(1);
    (0..h.div_ceil(n)).flat_map(move |ty| {
        (0..w.div_ceil(n)).map(move |tx| {
            let mut px = Vec::with_capacity(n * n);
            for y in ty * n..((ty + 1) * n).min(h) {
                for x in tx * n..((tx + 1) * n).min(w) {
                    px.push(y * w + x);
                }
            }
            px
        })
    })
}

/// Bilinear taps `(index, weight)` at a continuous position, columns wrapping
/// and rows clamped.
fn bilinear_taps(u: f64, v: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let ua = (u0 as i64).rem_euclid(w as i64) as usize;
    let ub = (ua + 1) % w;
    let va = (v0 as i64).clamp(0, h as i64 - 1) as usize;
    let vb = (va + 1).min(h - 1);
    [
        (va * w + ua, (1.0 - fu) * (1.0 - fv)),
        (va * w + ub, fu * (1.0 - fv)),
        (vb * w + ua, (1.0 - fu) * fv),
        (vb * w + ub, fu * fv),
    ]
}

/// `1 - mean cosine similarity` between tiles of `rep_a` and `rep_b` warped
/// into `a` along the flow. Returns the value and gradients for both maps.
pub fn repeat_term(
    rep_a: &[f64],
    rep_b: &[f64],
    mask: &[bool],
    flow: &FlowMap,
    hb: usize,
    wb: usize,
    patch: usize,
    eps: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (h, w) = (flow.height, flow.width);
    let mut taps = vec![[(0usize, 0.0f64); 4]; h * w];
    let mut warped = vec![0.0; h * w];
    for p in 0..h * w {
        if mask[p] {
            taps[p] = bilinear_taps(flow.target_u[p], flow.target_v[p], hb, wb);
            warped[p] = taps[p].iter().map(|(i, wt)| wt * rep_b[*i]).sum();
        }
    }
    let mut ga = vec![0.0; rep_a.len()];
    let mut gw = vec![0.0; h * w];
    let mut sims = Vec::new();
    let mut tile_px = Vec::new();
    for t in tiles(h, w, patch) {
        let px: Vec<usize> = t.into_iter().filter(|&p| mask[p]).collect();
        if px.is_empty() {
            continue;
        }
        let xx: f64 = px.iter().map(|&p| rep_a[p] * rep_a[p]).sum::<f64>() + eps;
        let yy: f64 = px.iter().map(|&p| warped[p] * warped[p]).sum::<f64>() + eps;
        let xy: f64 = px.iter().map(|&p| rep_a[p] * warped[p]).sum();
        let s = (xx * yy).sqrt();
        sims.push((xy / s, xx, yy, s));
        tile_px.push(px);
    }
    if sims.is_empty() {
        return Err(NetError::NoValidCorrespondences);
    }
    let k = sims.len() as f64;
    let value = 1.0 - sims.iter().map(|t| t.0).sum::<f64>() / k;
    for ((cos, xx, yy, s), px) in sims.iter().zip(&tile_px) {
        for &p in px {
            ga[p] -= (warped[p] / s - cos * rep_a[p] / xx) / k;
            gw[p] -= (rep_a[p] / s - cos * warped[p] / yy) / k;
        }
    }
    let mut gb = vec![0.0; rep_b.len()];
    for p in 0..h * w {
        if mask[p] {
            for (i, wt) in taps[p] {
                gb[i] += wt * gw[p];
            }
        }
    }
    Ok((value, ga, gb))
}

/// `1 - mean over tiles of (max - mean)` on valid pixels.
pub fn peaky_term(rep: &[f64], valid: &[bool], h: usize, w: usize, patch: usize) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; rep.len()];
    let mut stats = Vec::new();
    for t in tiles(h, w, patch) {
        let px: Vec<usize> = t.into_iter().filter(|&p| valid[p]).collect();
        if px.is_empty() {
            continue;
        }
        let mut arg = px[0];
        for &p in &px {
            if rep[p] > rep[arg] {
                arg = p;
            }
        }
        let mean = px.iter().map(|&p| rep[p]).sum::<f64>() / px.len() as f64;
        stats.push((rep[arg] - mean, arg, px));
    }
    if stats.is_empty() {
        return (1.0, g);
    }
    let k = stats.len() as f64;
    let value = 1.0 - stats.iter().map(|s| s.0).sum::<f64>() / k;
    for (_, arg, px) in &stats {
        g[*arg] -= 1.0 / k;
        let share = 1.0 / (k * px.len() as f64);
        for &p in px {
            g[p] += share;
        }
    }
    (value, g)
}

/// Triangular bin memberships of similarity `s` and their derivatives.
/// Bin 0 is centered at 1 (best); the outermost bins saturate.
fn quantize(s: f64, bins: usize, m: &mut [f64], dm: &mut [f64]) {
    // position in bin units: 0 at similarity 1, bins - 1 at similarity 0
    let scale = (bins - 1) as f64;
    let t = (1.0 - s) * scale;
    for i in 0..bins {
        let d = t - i as f64;
        let (val, der) = if (i == 0 && d <= 0.0) || (i == bins - 1 && d >= 0.0) {
            (1.0, 0.0)
        } else if d.abs() < 1.0 {
            (1.0 - d.abs(), d.signum() * scale)
        } else {
            (0.0, 0.0)
        };
        m[i] = val;
        dm[i] = der;
    }
}

/// Quantized average precision of one positive (`sims[0]`) among negatives,
/// and `dAP/dsim` for every entry.
pub fn quantized_ap(sims: &[f64], bins: usize) -> (f64, Vec<f64>) {
    let n = sims.len();
    let mut m = vec![0.0; n * bins];
    let mut dm = vec![0.0; n * bins];
    for (k, s) in sims.iter().enumerate() {
        quantize(*s, bins, &mut m[k * bins..(k + 1) * bins], &mut dm[k * bins..(k + 1) * bins]);
    }
    let pos = &m[..bins];
    let mut all = vec![0.0; bins];
    for k in 0..n {
        for i in 0..bins {
            all[i] += m[k * bins + i];
        }
    }
    const DEN_EPS: f64 = 1e-16;
    let mut cum_pos = vec![0.0; bins];
    let mut den = vec![0.0; bins];
    let (mut cp, mut ca) = (0.0, 0.0);
    for i in 0..bins {
        cp += pos[i];
        ca += all[i];
        cum_pos[i] = cp;
        den[i] = ca + DEN_EPS;
    }
    let ap: f64 = (0..bins).map(|i| pos[i] * cum_pos[i] / den[i]).sum();

    // suffix sums for the cumulative-count derivatives
    let mut d_pos = vec![0.0; bins];
    let mut d_all = vec![0.0; bins];
    let (mut sp, mut sa) = (0.0, 0.0);
    for i in (0..bins).rev() {
        sp += pos[i] / den[i];
        sa += pos[i] * cum_pos[i] / (den[i] * den[i]);
        d_pos[i] = cum_pos[i] / den[i] + sp;
        d_all[i] = -sa;
    }
    let mut grad = vec![0.0; n];
    for k in 0..n {
        let mut g = 0.0;
        for i in 0..bins {
            let d = dm[k * bins + i];
            if d != 0.0 {
                g += d_all[i] * d;
                if k == 0 {
                    g += d_pos[i] * d;
                }
            }
        }
        grad[k] = g;
    }
    (ap, grad)
}

pub struct ReliabGrads {
    pub desc_a: Vec<f64>,
    pub desc_b: Vec<f64>,
    pub rel_a: Vec<f64>,
}

/// Mean over query pixels of `1 - [AP·R + κ(1 - R)]`. Candidates lie on the
/// target row of `b` within `neg_span` columns (wrapping); the positive is the
/// rounded flow target.
pub fn reliab_term(a: &DenseFeatureMap, b: &DenseFeatureMap, flow: &FlowMap, mask: &[bool], cfg: &LossConfig) -> Result<(f64, ReliabGrads)> {
    let d = a.dim;
    let (h, w) = (a.height, a.width);
    let (hb, wb) = (b.height, b.width);
    let span = cfg.neg_span.min((wb.saturating_sub(1)) / 2) as i64;
    let stride = cfg.query_stride.max(1);
    let mut g = ReliabGrads {
        desc_a: vec![0.0; a.descriptors.len()],
        desc_b: vec![0.0; b.descriptors.len()],
        rel_a: vec![0.0; h * w],
    };
    struct Query {
        p: usize,
        cands: Vec<usize>,
        ap: f64,
        dsim: Vec<f64>,
    }
    let mut queries = Vec::new();
    for v in (0..h).step_by(stride) {
        for u in (0..w).step_by(stride) {
            let p = v * w + u;
            if !mask[p] {
                continue;
            }
            let (cu, rv) = target_pixel(flow.target_u[p], flow.target_v[p], wb);
            if rv < 0 || rv as usize >= hb {
                continue;
            }
            let row = rv as usize;
            let pos = row * wb + cu;
            if !b.valid[pos] {
                continue;
            }
            let mut cands = vec![pos];
            for k in -span..=span {
                if k.unsigned_abs() as usize <= cfg.ambiguous_radius {
                    continue;
                }
                let q = row * wb + (cu as i64 + k).rem_euclid(wb as i64) as usize;
                if b.valid[q] {
                    cands.push(q);
                }
            }
            let da = a.descriptor(p);
            let sims: Vec<f64> = cands
                .iter()
                .map(|&q| da.iter().zip(b.descriptor(q)).map(|(x, y)| x * y).sum())
                .collect();
            let (ap, dsim) = quantized_ap(&sims, cfg.ap_bins);
            queries.push(Query { p, cands, ap, dsim });
        }
    }
    if queries.is_empty() {
        return Err(NetError::NoValidCorrespondences);
    }
    let nq = queries.len() as f64;
    let mut value = 0.0;
    for q in &queries {
        let r = a.reliability[q.p];
        value += 1.0 - (q.ap * r + cfg.kappa * (1.0 - r));
        g.rel_a[q.p] -= (q.ap - cfg.kappa) / nq;
        let dap = -r / nq;
        for (k, &c) in q.cands.iter().enumerate() {
            let gs = dap * q.dsim[k];
            if gs == 0.0 {
                continue;
            }
            for j in 0..d {
                g.desc_a[q.p * d + j] += gs * b.descriptors[c * d + j];
                g.desc_b[c * d + j] += gs * a.descriptors[q.p * d + j];
            }
        }
    }
    Ok((value / nq, g))
}

/// Pixels of `a` with a valid flow target and a valid source pixel.
pub fn flow_mask(a: &DenseFeatureMap, flow: &FlowMap) -> Vec<bool> {
    (0..a.height * a.width).map(|p| flow.valid[p] && a.valid[p]).collect()
}

/// Weighted sum of the three terms with gradients for both maps.
pub fn pair_loss(a: &DenseFeatureMap, b: &DenseFeatureMap, flow: &FlowMap, cfg: &LossConfig) -> Result<(LossBreakdown, MapGrads, MapGrads)> {
    if flow.height != a.height || flow.width != a.width || a.dim != b.dim {
        return Err(NetError::Core(scanfeat_core::Error::Shape("flow/map dimensions disagree".into())));
    }
    let mask = flow_mask(a, flow);
    if !mask.iter().any(|m| *m) {
        return Err(NetError::NoValidCorrespondences);
    }
    let (repeat, g_rep_a, g_rep_b) = repeat_term(
        &a.repeatability,
        &b.repeatability,
        &mask,
        flow,
        b.height,
        b.width,
        cfg.patch_size,
        cfg.cos_eps,
    )?;
    let (pa, gpa) = peaky_term(&a.repeatability, &a.valid, a.height, a.width, cfg.patch_size);
    let (pb, gpb) = peaky_term(&b.repeatability, &b.valid, b.height, b.width, cfg.patch_size);
    let peaky = 0.5 * (pa + pb);
    let (reliab, rg) = reliab_term(a, b, flow, &mask, cfg)?;

    let mut ga = MapGrads::zeros(a.height, a.width, a.dim);
    let mut gb = MapGrads::zeros(b.height, b.width, b.dim);
    for p in 0..ga.repeatability.len() {
        ga.repeatability[p] = cfg.w_repeat * g_rep_a[p] + 0.5 * cfg.w_peaky * gpa[p];
        ga.reliability[p] = cfg.w_reliab * rg.rel_a[p];
    }
    for p in 0..gb.repeatability.len() {
        gb.repeatability[p] = cfg.w_repeat * g_rep_b[p] + 0.5 * cfg.w_peaky * gpb[p];
    }
    for (x, y) in ga.descriptors.iter_mut().zip(&rg.desc_a) {
        *x = cfg.w_reliab * y;
    }
    for (x, y) in gb.descriptors.iter_mut().zip(&rg.desc_b) {
        *x = cfg.w_reliab * y;
    }
    let total = cfg.w_repeat * repeat + cfg.w_peaky * peaky + cfg.w_reliab * reliab;
    Ok((
        LossBreakdown {
            total,
            repeat,
            peaky,
            reliab,
        },
        ga,
        gb,
    ))
}
