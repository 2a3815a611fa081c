//! Two-stage momentum-SGD training over cropped, augmented image pairs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use scanfeat_core::pairgen::{synth_pair, SyntheticRanges};
use scanfeat_core::ScanImage;

use crate::data::{augment, crop_sample, normalize, AugmentConfig, DatasetStats, TrainSample};
use crate::error::{NetError, Result};
use crate::loss::{pair_loss, LossBreakdown, LossConfig};
use crate::network::{input_tensor, Network, NetworkGrad};

/// A normalized full-size training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub sample: TrainSample,
    pub synthetic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epochs on synthetic pairs with noise-only augmentation.
    pub stage1_epochs: usize,
    /// Epochs on all pairs with full augmentation.
    pub stage2_epochs: usize,
    /// Optional cap on the total number of optimizer steps.
    pub max_steps: Option<usize>,
    pub crop_height: usize,
    pub crop_width: usize,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub divergence_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            stage1_epochs: 3,
            stage2_epochs: 20,
            max_steps: None,
            crop_height: 64,
            crop_width: 180,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            divergence_factor: 10.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// Samples skipped because their crop had no valid flow.
    pub skipped_samples: usize,
}

impl TrainReport {
    /// CSV with header `step,total,repeat,peaky,reliab`.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,total,repeat,peaky,reliab\n");
        for r in &self.steps {
            let l = &r.loss;
            let _ = writeln!(s, "{},{},{},{},{}", r.step, l.total, l.repeat, l.peaky, l.reliab);
        }
        s
    }
}

/// `count` synthetic pairs cycling over `images`, warped with parameters
/// drawn from `ranges` and normalized with `stats`.
pub fn synthetic_pairs(images: &[ScanImage], stats: &DatasetStats, ranges: &SyntheticRanges, count: usize, seed: u64) -> Result<Vec<PairSample>> {
    if images.is_empty() {
        return Err(NetError::EmptyStream);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let img = &images[k % images.len()];
            let (warped, flow) = synth_pair(img, &ranges.sample(&mut rng))?;
            Ok(PairSample {
                sample: TrainSample {
                    image_a: normalize(img, stats)?,
                    image_b: normalize(&warped, stats)?,
                    flow,
                },
                synthetic: true,
            })
        })
        .collect()
}

/// Loss and accumulated gradient of one cropped sample.
pub fn sample_loss(net: &Network, sample: &TrainSample, cfg: &LossConfig, grad: Option<&mut NetworkGrad>) -> Result<LossBreakdown> {
    let (mut ma, ca) = net.forward_tensor(&input_tensor(&sample.image_a));
    let (mut mb, cb) = net.forward_tensor(&input_tensor(&sample.image_b));
    ma.valid = sample.image_a.valid.clone();
    mb.valid = sample.image_b.valid.clone();
    let (loss, ga, gb) = pair_loss(&ma, &mb, &sample.flow, &LossConfig {
        patch_size: net.config.patch_size,
        ..*cfg
    })?;
    if let Some(g) = grad {
        net.backward(&ca, &ga, g);
        net.backward(&cb, &gb, g);
    }
    Ok(loss)
}

/// Mean un-augmented loss over one seeded crop of every pair.
pub fn evaluate(net: &Network, pairs: &[PairSample], cfg: &TrainConfig, seed: u64) -> Result<LossBreakdown> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = LossBreakdown::default();
    let mut n = 0usize;
    for p in pairs {
        if let Some(c) = crop_sample(&p.sample, cfg.crop_height, cfg.crop_width, &mut rng) {
            match sample_loss(net, &c, &cfg.loss, None) {
                Ok(l) => {
                    total.add(&l);
                    n += 1;
                }
                Err(NetError::NoValidCorrespondences) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if n == 0 {
        return Err(NetError::NoValidCorrespondences);
    }
    total.scale(1.0 / n as f64);
    Ok(total)
}

/// Stage 1 runs on synthetic pairs with noise-only augmentation, stage 2 on
/// every pair with the full augmentation. Deterministic under `cfg.seed`
/// regardless of thread count.
pub fn train(net: &mut Network, pairs: &[PairSample], cfg: &TrainConfig) -> Result<TrainReport> {
    net.check()?;
    if pairs.is_empty() {
        return Err(NetError::EmptyStream);
    }
    let mut report = TrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = NetworkGrad::zeros(net);
    let mut initial: Option<f64> = None;
    let batch = net.config.batch_size.max(1);
    let cap = cfg.max_steps.unwrap_or(usize::MAX);

    let synthetic: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].synthetic).collect();
    let everything: Vec<usize> = (0..pairs.len()).collect();
    let stages = [
        (1u8, cfg.stage1_epochs, &synthetic, cfg.augment.noise_only()),
        (2u8, cfg.stage2_epochs, &everything, cfg.augment),
    ];
    for (stage, epochs, pool, aug) in stages {
        if pool.is_empty() {
            continue;
        }
        for _ in 0..epochs {
            let mut order = pool.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                if report.steps.len() >= cap {
                    return Ok(report);
                }
                let mut crops = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    match crop_sample(&pairs[i].sample, cfg.crop_height, cfg.crop_width, &mut rng) {
                        Some(c) => crops.push(augment(&c, &aug, &mut rng)),
                        None => report.skipped_samples += 1,
                    }
                }
                // samples run in parallel; gradients are summed in batch order
                let results: Vec<Result<(LossBreakdown, NetworkGrad)>> = crops
                    .par_iter()
                    .map(|c| {
                        let mut g = NetworkGrad::zeros(net);
                        let l = sample_loss(net, c, &cfg.loss, Some(&mut g))?;
                        Ok((l, g))
                    })
                    .collect();
                let mut grad = NetworkGrad::zeros(net);
                let mut loss = LossBreakdown::default();
                let mut used = 0usize;
                for r in results {
                    match r {
                        Ok((l, g)) => {
                            loss.add(&l);
                            grad.add_assign(&g);
                            used += 1;
                        }
                        Err(NetError::NoValidCorrespondences) => report.skipped_samples += 1,
                        Err(e) => return Err(e),
                    }
                }
                if used == 0 {
                    continue;
                }
                let inv = 1.0 / used as f64;
                loss.scale(inv);
                grad.scale(inv);
                let step = report.steps.len();
                let first = *initial.get_or_insert(loss.total);
                if !loss.total.is_finite() || loss.total > cfg.divergence_factor * first {
                    return Err(NetError::Divergence {
                        step,
                        loss: loss.total,
                        initial: first,
                    });
                }
                velocity.scale(cfg.momentum);
                velocity.add_assign(&grad);
                let mut update = velocity.clone();
                update.scale(cfg.learning_rate);
                net.apply_update(&update);
                report.steps.push(StepRecord { step, stage, loss });
                log::debug!("step {step} stage {stage} loss {:.5}", loss.total);
            }
        }
    }
    Ok(report)
}
