use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pairs, Metrics};
use crate::imaging::Image;
use crate::transfer::NetScale;

use super::{default_crop, forward, init_buttonlab, masked_ce, random_crop, LabelMap, SegNetParams, ALIGN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Crop side; half the image side when absent.
    pub crop: Option<usize>,
    /// Draw each batch with replacement instead of shuffled passes.
    pub replacement: bool,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub scale: NetScale,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            epochs: 120,
            batch_size: 8,
            crop: None,
            replacement: false,
            max_steps: None,
            seed: 0,
            scale: NetScale::Desk,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("seg: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1");
        }
        if let Some(c) = self.crop {
            if c == 0 || c % ALIGN != 0 {
                return Err(Error::AlignmentError { align: ALIGN, detail: format!("crop side {c}") });
            }
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean per-image crop loss over the epoch's steps.
    pub loss: f64,
    pub val: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct SegRun {
    pub params: SegNetParams,
    pub epochs: Vec<EpochRecord>,
    /// Mean per-image crop loss of every step.
    pub step_losses: Vec<f64>,
}

fn crop_side(cfg: &SegConfig, len: usize) -> usize {
    cfg.crop.unwrap_or_else(|| default_crop(len)).min(len / ALIGN * ALIGN)
}

/// Random-crop training: the backbone sees each whole image, the branch and
/// the loss only the crop. The step loss is the sum over the batch.
pub fn train_seg(train: &[(Image, LabelMap)], val: Option<&[(Image, LabelMap)]>, cfg: &SegConfig) -> Result<SegRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::NoData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_buttonlab(cfg.seed, cfg.scale);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &params.params);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        if !cfg.replacement {
            order.shuffle(&mut rng);
        }
        let first = step_losses.len();
        for s in 0..steps_per_epoch {
            if step_losses.len() >= budget {
                break;
            }
            let batch: Vec<usize> = if cfg.replacement {
                (0..cfg.batch_size).map(|_| rng.random_range(0..train.len())).collect()
            } else {
                order[s * cfg.batch_size..((s + 1) * cfg.batch_size).min(train.len())].to_vec()
            };
            let mut g = Graph::new();
            let bound = params.params.bind(&mut g, true);
            let mut total = None;
            for &i in &batch {
                let (img, lbl) = &train[i];
                let rgb = img.to_rgb();
                let crop_hw = (crop_side(cfg, rgb.height()), crop_side(cfg, rgb.width()));
                let (block, lblock, spec) = random_crop(&rgb, lbl, crop_hw, &mut rng)?;
                let x = g.constant(rgb.to_tensor());
                let b = g.constant(block.to_tensor());
                let logits = forward(&mut g, &bound, params.scale, x, b, Some(spec))?;
                let l = masked_ce(&mut g, logits, &lblock)?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let total = total.expect("batches are nonempty");
            let value = g.value(total).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { iteration: step_losses.len() });
            }
            let mut grads = g.backward(total)?;
            let sizes: Vec<usize> = params.params.iter().map(|(_, t)| t.numel()).collect();
            let grads: Vec<Vec<f32>> =
                bound.vars().iter().zip(sizes).map(|(&v, n)| grads.take_or_zeros(v, n)).collect();
            drop(bound);
            adam.step(&mut params.params, &grads)?;
            step_losses.push(value / batch.len() as f64);
        }
        let done = &step_losses[first..];
        let val = match val {
            Some(v) if !v.is_empty() => Some(evaluate_pairs(&params, v)?.micro),
            _ => None,
        };
        epochs.push(EpochRecord {
            epoch,
            steps: done.len(),
            loss: done.iter().sum::<f64>() / done.len().max(1) as f64,
            val,
        });
        if step_losses.len() >= budget {
            break;
        }
    }
    Ok(SegRun { params, epochs, step_losses })
}
