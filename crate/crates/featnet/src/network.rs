//! Fully convolutional detector/descriptor network with three 1x1 heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use scanfeat_core::{DenseFeatureMap, ScanImage};

use crate::conv::{l2_normalize, l2_normalize_backward, relu_backward, relu_inplace, sigmoid, Conv2d, ConvGrad, Tensor};
use crate::error::{NetError, Result};

pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl LayerSpec {
    pub const fn new(channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            channels,
            kernel,
            dilation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub descriptor_dim: usize,
    pub layers: Vec<LayerSpec>,
    /// Loss patch size in pixels.
    pub patch_size: usize,
    pub batch_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            descriptor_dim: 32,
            layers: vec![
                LayerSpec::new(32, 3, 1),
                LayerSpec::new(32, 3, 1),
                LayerSpec::new(64, 3, 2),
                LayerSpec::new(64, 3, 4),
                LayerSpec::new(128, 3, 1),
            ],
            patch_size: 8,
            batch_size: 4,
        }
    }
}

impl NetworkConfig {
    /// Small stack for tests and desk-scale training.
    pub fn toy() -> Self {
        Self {
            descriptor_dim: 16,
            layers: vec![LayerSpec::new(8, 3, 1), LayerSpec::new(16, 3, 2), LayerSpec::new(16, 3, 4)],
            patch_size: 8,
            batch_size: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.descriptor_dim == 0 || self.layers.is_empty() {
            return Err(NetError::Config("need a descriptor dim and at least one layer".into()));
        }
        if self.patch_size < 2 || self.batch_size == 0 {
            return Err(NetError::Config("patch_size >= 2 and batch_size >= 1 required".into()));
        }
        for l in &self.layers {
            if l.channels == 0 || !(l.kernel == 1 || l.kernel == 3) || l.dilation == 0 {
                return Err(NetError::Config(format!("bad layer {l:?}")));
            }
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().map_or(INPUT_CHANNELS, |l| l.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub backbone: Vec<Conv2d>,
    pub descriptor_head: Conv2d,
    pub reliability_head: Conv2d,
    pub repeatability_head: Conv2d,
}

/// Gradients for every parameter, same layout as [`Network`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrad {
    pub layers: Vec<ConvGrad>,
}

impl NetworkGrad {
    pub fn zeros(net: &Network) -> Self {
        Self {
            layers: net.convs().map(ConvGrad::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetworkGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    /// Input of each backbone layer followed by the final feature tensor.
    activations: Vec<Tensor>,
    raw_descriptors: Tensor,
    reliability: Vec<f64>,
    repeatability: Vec<f64>,
}

/// Loss gradients with respect to the dense outputs (descriptors pixel-major).
#[derive(Clone, Debug, PartialEq)]
pub struct MapGrads {
    pub descriptors: Vec<f64>,
    pub reliability: Vec<f64>,
    pub repeatability: Vec<f64>,
}

impl MapGrads {
    pub fn zeros(h: usize, w: usize, dim: usize) -> Self {
        Self {
            descriptors: vec![0.0; h * w * dim],
            reliability: vec![0.0; h * w],
            repeatability: vec![0.0; h * w],
        }
    }
}

/// Two-channel input tensor (range, intensity); invalid pixels read zero.
pub fn input_tensor(img: &ScanImage) -> Tensor {
    let mut t = Tensor::zeros(INPUT_CHANNELS, img.height, img.width);
    let hw = img.height * img.width;
    for i in 0..hw {
        if img.valid[i] {
            t.data[i] = img.range[i];
            t.data[hw + i] = img.intensity[i];
        }
    }
    t
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::new();
        let mut ch = INPUT_CHANNELS;
        for l in &config.layers {
            backbone.push(Conv2d::init(ch, l.channels, l.kernel, l.dilation, 2.0, &mut rng));
            ch = l.channels;
        }
        let descriptor_head = Conv2d::init(ch, config.descriptor_dim, 1, 1, 1.0, &mut rng);
        let reliability_head = Conv2d::init(ch, 1, 1, 1, 1.0, &mut rng);
        let repeatability_head = Conv2d::init(ch, 1, 1, 1, 1.0, &mut rng);
        Ok(Self {
            config,
            backbone,
            descriptor_head,
            reliability_head,
            repeatability_head,
        })
    }

    /// All convolutions in declaration order.
    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.backbone
            .iter()
            .chain([&self.descriptor_head, &self.reliability_head, &self.repeatability_head])
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.backbone.iter_mut().chain([
            &mut self.descriptor_head,
            &mut self.reliability_head,
            &mut self.repeatability_head,
        ])
    }

    pub fn parameter_count(&self) -> usize {
        self.convs().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    /// Checks layer shapes against the config.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let mut ch = INPUT_CHANNELS;
        if self.backbone.len() != self.config.layers.len() {
            return Err(NetError::ShapeMismatch("backbone depth".into()));
        }
        for (c, l) in self.backbone.iter().zip(&self.config.layers) {
            if c.in_ch != ch || c.out_ch != l.channels || c.kernel != l.kernel || c.dilation != l.dilation {
                return Err(NetError::ShapeMismatch(format!("layer {l:?}")));
            }
            ch = l.channels;
        }
        let heads = [
            (&self.descriptor_head, self.config.descriptor_dim),
            (&self.reliability_head, 1),
            (&self.repeatability_head, 1),
        ];
        for (c, out) in heads {
            if c.in_ch != ch || c.out_ch != out || c.kernel != 1 {
                return Err(NetError::ShapeMismatch("head".into()));
            }
        }
        for c in self.convs() {
            if c.weight.len() != c.out_ch * c.fan_in() || c.bias.len() != c.out_ch {
                return Err(NetError::ShapeMismatch("parameter buffer length".into()));
            }
        }
        Ok(())
    }

    pub fn forward_tensor(&self, input: &Tensor) -> (DenseFeatureMap, ForwardCache) {
        let mut activations = vec![input.clone()];
        for conv in &self.backbone {
            let mut y = conv.forward(activations.last().unwrap());
            relu_inplace(&mut y);
            activations.push(y);
        }
        let feat = activations.last().unwrap();
        let raw = self.descriptor_head.forward(feat);
        let desc = l2_normalize(&raw);
        let rel: Vec<f64> = self.reliability_head.forward(feat).data.iter().map(|x| sigmoid(*x)).collect();
        let rep: Vec<f64> = self.repeatability_head.forward(feat).data.iter().map(|x| sigmoid(*x)).collect();
        let (h, w, d) = (input.h, input.w, self.config.descriptor_dim);
        let hw = h * w;
        let mut descriptors = vec![0.0; hw * d];
        for c in 0..d {
            for p in 0..hw {
                descriptors[p * d + c] = desc.data[c * hw + p];
            }
        }
        let maps = DenseFeatureMap {
            height: h,
            width: w,
            dim: d,
            descriptors,
            reliability: rel.clone(),
            repeatability: rep.clone(),
            valid: vec![true; hw],
        };
        let cache = ForwardCache {
            activations,
            raw_descriptors: raw,
            reliability: rel,
            repeatability: rep,
        };
        (maps, cache)
    }

    /// Dense maps for a (normalized) scan image; validity copied from the image.
    pub fn forward(&self, image: &ScanImage) -> Result<DenseFeatureMap> {
        self.check()?;
        let (mut maps, _) = self.forward_tensor(&input_tensor(image));
        maps.valid = image.valid.clone();
        Ok(maps)
    }

    /// Backpropagates output gradients, accumulating into `grad`.
    pub fn backward(&self, cache: &ForwardCache, g: &MapGrads, grad: &mut NetworkGrad) {
        let feat = cache.activations.last().unwrap();
        let (h, w) = (feat.h, feat.w);
        let hw = h * w;
        let d = self.config.descriptor_dim;
        let nb = self.backbone.len();

        let mut gdesc = Tensor::zeros(d, h, w);
        for p in 0..hw {
            for c in 0..d {
                gdesc.data[c * hw + p] = g.descriptors[p * d + c];
            }
        }
        let graw = l2_normalize_backward(&cache.raw_descriptors, &gdesc);
        let mut gfeat = self.descriptor_head.backward(feat, &graw, &mut grad.layers[nb]);

        for (k, (head, out, gout)) in [
            (&self.reliability_head, &cache.reliability, &g.reliability),
            (&self.repeatability_head, &cache.repeatability, &g.repeatability),
        ]
        .into_iter()
        .enumerate()
        {
            let mut gpre = Tensor::zeros(1, h, w);
            for p in 0..hw {
                gpre.data[p] = gout[p] * out[p] * (1.0 - out[p]);
            }
            let gi = head.backward(feat, &gpre, &mut grad.layers[nb + 1 + k]);
            for (a, b) in gfeat.data.iter_mut().zip(&gi.data) {
                *a += b;
            }
        }

        for l in (0..nb).rev() {
            relu_backward(&cache.activations[l + 1], &mut gfeat);
            gfeat = self.backbone[l].backward(&cache.activations[l], &gfeat, &mut grad.layers[l]);
        }
    }

    /// `params -= step` layer by layer.
    pub fn apply_update(&mut self, step: &NetworkGrad) {
        for (c, s) in self.convs_mut().zip(&step.layers) {
            for (p, d) in c.weight.iter_mut().zip(&s.weight) {
                *p -= d;
            }
            for (p, d) in c.bias.iter_mut().zip(&s.bias) {
                *p -= d;
            }
        }
    }
}
