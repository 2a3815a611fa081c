//! Analytic gradients against central finite differences for every layer
//! type and loss term. Shared by the unit tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scanfeat_core::pairgen::FlowMap;
use scanfeat_core::{DenseFeatureMap, ScanImage};

use crate::conv::{l2_normalize, l2_normalize_backward, relu_backward, relu_inplace, sigmoid, Conv2d, ConvGrad, Tensor};
use crate::loss::{flow_mask, pair_loss, peaky_term, reliab_term, repeat_term, LossConfig};
use crate::network::{input_tensor, MapGrads, Network, NetworkConfig, NetworkGrad};
use crate::LayerSpec;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Coordinates at kinks are skipped, at most this fraction of them.
pub const MAX_KINK_FRACTION: f64 = 1.0 / 3.0;

/// Worst case over all trials of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub trials: usize,
    pub worst_error: f64,
    pub worst_kink_fraction: f64,
}

impl GradCheck {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            trials: 0,
            worst_error: 0.0,
            worst_kink_fraction: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.trials > 0 && self.worst_error < TOLERANCE && self.worst_kink_fraction <= MAX_KINK_FRACTION
    }

    fn record(&mut self, analytic: &[f64], numeric: &[Option<f64>]) {
        let kept: Vec<(f64, f64)> = analytic
            .iter()
            .zip(numeric)
            .filter_map(|(x, y)| y.map(|y| (*x, y)))
            .collect();
        let kinks = (analytic.len() - kept.len()) as f64 / analytic.len().max(1) as f64;
        let diff = kept.iter().map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = kept.iter().map(|(x, _)| x * x).sum::<f64>().sqrt();
        let nn = kept.iter().map(|(_, y)| y * y).sum::<f64>().sqrt();
        let e = diff / na.max(nn).max(1e-8);
        self.worst_error = self.worst_error.max(if e.is_nan() { f64::INFINITY } else { e });
        self.worst_kink_fraction = self.worst_kink_fraction.max(kinks);
    }
}

/// Central differences. A coordinate whose forward and backward one-sided
/// slopes disagree straddles a kink (ReLU zero, tile max tie, AP bin edge)
/// and comes back as `None`.
pub fn numeric(x: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<Option<f64>> {
    let mut x = x.to_vec();
    let f0 = f(&x);
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + STEP;
            let fp = f(&x);
            x[i] = orig - STEP;
            let fm = f(&x);
            x[i] = orig;
            let (sp, sm) = ((fp - f0) / STEP, (f0 - fm) / STEP);
            let c = (fp - fm) / (2.0 * STEP);
            ((sp - sm).abs() <= 1e-3 * c.abs().max(1.0)).then_some(c)
        })
        .collect()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor {
        c,
        h,
        w,
        data: rand_vec(rng, c * h * w, -1.0, 1.0),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Input, weight and bias gradients of one convolution shape.
pub fn conv(name: &'static str, kernel: usize, dilation: usize, trials: usize, seed: u64) -> GradCheck {
    let mut out = GradCheck::new(name);
    for trial in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + trial);
        let (cin, cout, h, w) = (2, 3, 5, 9);
        let mut conv = Conv2d::init(cin, cout, kernel, dilation, 2.0, &mut rng);
        conv.bias = rand_vec(&mut rng, cout, -0.5, 0.5);
        let x = rand_tensor(&mut rng, cin, h, w);
        let coef = rand_vec(&mut rng, cout * h * w, -1.0, 1.0);
        let gy = Tensor {
            c: cout,
            h,
            w,
            data: coef.clone(),
        };
        let mut grad = ConvGrad::zeros_like(&conv);
        let gx = conv.backward(&x, &gy, &mut grad);

        let n = numeric(&x.data, &mut |d| {
            let t = Tensor { data: d.to_vec(), ..x.clone() };
            dot(&conv.forward(&t).data, &coef)
        });
        out.record(&gx.data, &n);
        let n = numeric(&conv.weight, &mut |d| {
            let c = Conv2d { weight: d.to_vec(), ..conv.clone() };
            dot(&c.forward(&x).data, &coef)
        });
        out.record(&grad.weight, &n);
        let n = numeric(&conv.bias, &mut |d| {
            let c = Conv2d { bias: d.to_vec(), ..conv.clone() };
            dot(&c.forward(&x).data, &coef)
        });
        out.record(&grad.bias, &n);
        out.trials += 1;
    }
    out
}

pub fn relu(trials: usize, seed: u64) -> GradCheck {
    let mut out = GradCheck::new("relu");
    for trial in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + trial);
        let x = rand_tensor(&mut rng, 2, 4, 6);
        let coef = rand_vec(&mut rng, x.data.len(), -1.0, 1.0);
        let mut y = x.clone();
        relu_inplace(&mut y);
        let mut g = Tensor { data: coef.clone(), ..x.clone() };
        relu_backward(&y, &mut g);
        let n = numeric(&x.data, &mut |d| d.iter().zip(&coef).map(|(v, c)| v.max(0.0) * c).sum());
        out.record(&g.data, &n);
        out.trials += 1;
    }
    out
}

pub fn sigmoid_head(trials: usize, seed: u64) -> GradCheck {
    let mut out = GradCheck::new("sigmoid head");
    for trial in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + trial);
        let x = rand_vec(&mut rng, 30, -4.0, 4.0);
        let coef = rand_vec(&mut rng, 30, -1.0, 1.0);
        let a: Vec<f64> = x
            .iter()
            .zip(&coef)
            .map(|(v, c)| {
                let s = sigmoid(*v);
                c * s * (1.0 - s)
            })
            .collect();
        let n = numeric(&x, &mut |d| d.iter().zip(&coef).map(|(v, c)| sigmoid(*v) * c).sum());
        out.record(&a, &n);
        out.trials += 1;
    }
    out
}

pub fn descriptor_normalization(trials: usize, seed: u64) -> GradCheck {
    let mut out = GradCheck::new("descriptor l2 normalization");
    for trial in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + trial);
        let x = rand_tensor(&mut rng, 5, 3, 4);
        let coef = rand_vec(&mut rng, x.data.len(), -1.0, 1.0);
        let gy = Tensor { data: coef.clone(), ..x.clone() };
        let a = l2_normalize_backward(&x, &gy);
        let n = numeric(&x.data, &mut |d| dot(&l2_normalize(&Tensor { data: d.to_vec(), ..x.clone() }).data, &coef));
        out.record(&a.data, &n);
        out.trials += 1;
    }
    out
}

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        descriptor_dim: 4,
        layers: vec![LayerSpec::new(4, 3, 1), LayerSpec::new(4, 3, 2)],
        patch_size: 4,
        batch_size: 1,
    }
}

fn flat_params(net: &Network) -> Vec<f64> {
    net.convs().flat_map(|c| c.weight.iter().chain(&c.bias).copied()).collect()
}

fn set_params(net: &mut Network, p: &[f64]) {
    let mut k = 0;
    for c in net.convs_mut() {
        for x in c.weight.iter_mut().chain(c.bias.iter_mut()) {
            *x = p[k];
            k += 1;
        }
    }
}

/// Backbone, heads and normalization chained: parameter gradients of a
/// random linear functional of the three output maps.
pub fn whole_network(trials: usize, seed: u64) -> GradCheck {
    let mut out = GradCheck::new("whole network");
    for trial in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + trial);
        let mut net = Network::new(tiny_config(), trial).expect("valid config");
        for c in net.convs_mut() {
            c.bias = rand_vec(&mut rng, c.bias.len(), -0.3, 0.3);
        }
        let (h, w) = (4, 7);
        let mut img = ScanImage::invalid(h, w);
        for i in 0..h * w {
            img.range[i] = rng.random_range(-1.0..1.0);
            img.intensity[i] = rng.random_range(-1.0..1.0);
            img.valid[i] = true;
        }
        let input = input_tensor(&img);
        let cd = rand_vec(&mut rng, h * w * 4, -1.0, 1.0);
        let cr = rand_vec(&mut rng, h * w, -1.0, 1.0);
        let cq = rand_vec(&mut rng, h * w, -1.0, 1.0);
        let objective = |n: &Network| {
            let (m, _) = n.forward_tensor(&input);
            dot(&m.descriptors, &cd) + dot(&m.reliability, &cr) + dot(&m.repeatability, &cq)
        };
        let (_, cache) = net.forward_tensor(&input);
        let mut grad = NetworkGrad::zeros(&net);
        net.backward(
            &cache,
            &MapGrads {
                descriptors: cd.clone(),
                reliability: cr.clone(),
                repeatability: cq.clone(),
            },
            &mut grad,
        );
        let p0 = flat_params(&net);
        let mut probe = net.clone();
        let n = numeric(&p0, &mut |p| {
            set_params(&mut probe, p);
            objective(&probe)
        });
        let analytic: Vec<f64> = grad.layers.iter().flat_map(|c| c.weight.iter().chain(&c.bias).copied()).collect();
        out.record(&analytic, &n);
        out.trials += 1;
    }
    out
}

struct LossCase {
    a: DenseFeatureMap,
    b: DenseFeatureMap,
    flow: FlowMap,
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    let mut v = rand_vec(rng, n * d, -1.0, 1.0);
    for row in v.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn loss_case(seed: u64) -> LossCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, d) = (6, 12, 3);
    let n = h * w;
    let maps = |rng: &mut ChaCha8Rng| DenseFeatureMap {
        height: h,
        width: w,
        dim: d,
        descriptors: unit_rows(rng, n, d),
        reliability: rand_vec(rng, n, 0.05, 0.95),
        repeatability: rand_vec(rng, n, 0.05, 0.95),
        valid: (0..n).map(|_| rng.random::<f64>() > 0.1).collect(),
    };
    let a = maps(&mut rng);
    let b = maps(&mut rng);
    let mut flow = FlowMap::invalid(h, w);
    for v in 0..h {
        for u in 0..w {
            if rng.random::<f64>() < 0.7 {
                let tu = (u as f64 + rng.random_range(-1.3..1.3)).rem_euclid(w as f64);
                let tv = (v as f64 + rng.random_range(-0.8..0.8)).clamp(0.0, (h - 1) as f64);
                flow.set(u, v, Some((tu, tv)));
            }
        }
    }
    LossCase { a, b, flow }
}

fn small_loss_config() -> LossConfig {
    LossConfig {
        patch_size: 3,
        neg_span: 4,
        ambiguous_radius: 1,
        ap_bins: 8,
        ..LossConfig::default()
    }
}

pub fn repeatability_term(trials: usize, seed: u64) -> GradCheck {
    let cfg = small_loss_config();
    let mut out = GradCheck::new("repeatability term");
    for trial in 0..trials as u64 {
        let c = loss_case(seed + trial);
        let mask = flow_mask(&c.a, &c.flow);
        let (h, w) = (c.b.height, c.b.width);
        let f = |ra: &[f64], rb: &[f64]| {
            repeat_term(ra, rb, &mask, &c.flow, h, w, cfg.patch_size, cfg.cos_eps)
                .expect("valid flow")
                .0
        };
        let (_, ga, gb) = repeat_term(&c.a.repeatability, &c.b.repeatability, &mask, &c.flow, h, w, cfg.patch_size, cfg.cos_eps)
            .expect("valid flow");
        out.record(&ga, &numeric(&c.a.repeatability, &mut |x| f(x, &c.b.repeatability)));
        out.record(&gb, &numeric(&c.b.repeatability, &mut |x| f(&c.a.repeatability, x)));
        out.trials += 1;
    }
    out
}

pub fn peakiness_term(trials: usize, seed: u64) -> GradCheck {
    let mut out = GradCheck::new("peakiness term");
    for trial in 0..trials as u64 {
        let c = loss_case(seed + trial);
        let (h, w) = (c.a.height, c.a.width);
        let (_, g) = peaky_term(&c.a.repeatability, &c.a.valid, h, w, 3);
        out.record(&g, &numeric(&c.a.repeatability, &mut |x| peaky_term(x, &c.a.valid, h, w, 3).0));
        out.trials += 1;
    }
    out
}

pub fn reliability_term(trials: usize, seed: u64) -> GradCheck {
    let cfg = small_loss_config();
    let mut out = GradCheck::new("reliability AP term");
    for trial in 0..trials as u64 {
        let c = loss_case(seed + trial);
        let mask = flow_mask(&c.a, &c.flow);
        let eval = |a: &DenseFeatureMap, b: &DenseFeatureMap| reliab_term(a, b, &c.flow, &mask, &cfg).expect("valid flow").0;
        let (_, g) = reliab_term(&c.a, &c.b, &c.flow, &mask, &cfg).expect("valid flow");
        let n = numeric(&c.a.descriptors, &mut |x| eval(&DenseFeatureMap { descriptors: x.to_vec(), ..c.a.clone() }, &c.b));
        out.record(&g.desc_a, &n);
        let n = numeric(&c.b.descriptors, &mut |x| eval(&c.a, &DenseFeatureMap { descriptors: x.to_vec(), ..c.b.clone() }));
        out.record(&g.desc_b, &n);
        let n = numeric(&c.a.reliability, &mut |x| eval(&DenseFeatureMap { reliability: x.to_vec(), ..c.a.clone() }, &c.b));
        out.record(&g.rel_a, &n);
        out.trials += 1;
    }
    out
}

pub fn weighted_total(trials: usize, seed: u64) -> GradCheck {
    let cfg = small_loss_config();
    let mut out = GradCheck::new("weighted total loss");
    for trial in 0..trials as u64 {
        let c = loss_case(seed + trial);
        let total = |a: &DenseFeatureMap, b: &DenseFeatureMap| pair_loss(a, b, &c.flow, &cfg).expect("valid flow").0.total;
        let (_, ga, gb) = pair_loss(&c.a, &c.b, &c.flow, &cfg).expect("valid flow");
        let n = numeric(&c.a.repeatability, &mut |x| total(&DenseFeatureMap { repeatability: x.to_vec(), ..c.a.clone() }, &c.b));
        out.record(&ga.repeatability, &n);
        let n = numeric(&c.b.repeatability, &mut |x| total(&c.a, &DenseFeatureMap { repeatability: x.to_vec(), ..c.b.clone() }));
        out.record(&gb.repeatability, &n);
        let n = numeric(&c.b.descriptors, &mut |x| total(&c.a, &DenseFeatureMap { descriptors: x.to_vec(), ..c.b.clone() }));
        out.record(&gb.descriptors, &n);
        out.trials += 1;
    }
    out
}

/// Every check with `trials` random tensors each.
pub fn run_all(trials: usize) -> Vec<GradCheck> {
    vec![
        conv("conv 3x3", 3, 1, trials, 1),
        conv("conv 3x3 dilation 2", 3, 2, trials, 2),
        conv("conv 3x3 dilation 4", 3, 4, trials, 3),
        conv("conv 1x1", 1, 1, trials, 4),
        relu(trials, 50),
        sigmoid_head(trials, 80),
        descriptor_normalization(trials, 110),
        whole_network(trials, 200),
        repeatability_term(trials, 300),
        peakiness_term(trials, 400),
        reliability_term(trials, 500),
        weighted_total(trials, 600),
    ]
}
