//! Online test-time adaptation of batch-norm statistics.
//!
//! [`dua_adapt_step`] consumes one unlabeled sample: it expands the sample
//! into an augmented batch, advances the momentum schedule once, and runs
//! an adapt-mode forward in which every masked batch-norm layer folds the
//! batch statistics of its input into its running statistics. Learned
//! parameters are never written.

use crate::bn::{batch_stats, MomentumSchedule, StatsTiming};
use crate::error::{param_err, Result};
use crate::model::{AdaptPass, Layer, LayerMask, Mode, Model};
use crate::rng::Rng;
use crate::shiftlab::augment::{augment_batch, default_augmentations, AugmentSet};
use crate::tensor::Tensor;

/// Items per forward when the NORM recompute streams a large batch.
pub const NORM_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub batch_size: usize,
    pub augmentations: AugmentSet,
    pub layer_mask: LayerMask,
    pub schedule: MomentumSchedule,
    pub seed: u64,
    pub timing: StatsTiming,
}

impl AdaptConfig {
    /// B = 64, flip/crop/rotate, all layers of `model`, ρ₀ = 0.1, ω = 0.94, ζ = 0.005.
    pub fn defaults_for(model: &Model) -> Self {
        AdaptConfig {
            batch_size: 64,
            augmentations: default_augmentations(),
            layer_mask: LayerMask::all(model),
            schedule: MomentumSchedule::default(),
            seed: 0,
            timing: StatsTiming::Post,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.batch_size == 0 {
            return param_err("adaptation batch size must be >= 1");
        }
        self.schedule.validate()?;
        self.layer_mask.check(model)
    }

    /// Generator for the augmentation draws of an adaptation run.
    pub fn rng(&self) -> Rng {
        Rng::stream(self.seed, "adapt/augment")
    }
}

fn adapt_with_weight(
    model: &mut Model,
    sample: &Tensor,
    cfg: &AdaptConfig,
    weight: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let batch = augment_batch(sample, cfg.batch_size, &cfg.augmentations, rng)?;
    let pass = AdaptPass {
        weight,
        mask: cfg.layer_mask.clone(),
        timing: cfg.timing,
    };
    model.forward(&batch.tensor, Mode::Adapt(&pass))
}

/// One DUA step on a single `1 × C × H × W` sample. Returns the adapt-mode
/// logits of the augmented batch (`B × K`); the weight used is
/// `cfg.schedule.weight()` afterwards.
pub fn dua_adapt_step(model: &mut Model, sample: &Tensor, cfg: &mut AdaptConfig, rng: &mut Rng) -> Result<Tensor> {
    cfg.validate(model)?;
    let w = cfg.schedule.step();
    adapt_with_weight(model, sample, cfg, w, rng)
}

/// Baseline: the same pipeline with a constant weight `rho` (the schedule in
/// `cfg` is ignored and not advanced).
pub fn fixed_momentum_adapt_step(
    model: &mut Model,
    sample: &Tensor,
    cfg: &AdaptConfig,
    rho: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    MomentumSchedule::fixed(rho)?;
    if cfg.batch_size == 0 {
        return param_err("adaptation batch size must be >= 1");
    }
    cfg.layer_mask.check(model)?;
    adapt_with_weight(model, sample, cfg, rho, rng)
}

/// NORM baseline: discards the source statistics and sets every batch-norm
/// layer's running statistics to the statistics of its input over
/// `test_batch`, front to back.
pub fn norm_recompute(model: &mut Model, test_batch: &Tensor) -> Result<()> {
    if test_batch.n() < 2 {
        return param_err(format!(
            "NORM recompute needs at least 2 samples, got {}",
            test_batch.n()
        ));
    }
    if test_batch.n() <= NORM_CHUNK {
        let pass = AdaptPass {
            weight: 1.0,
            mask: LayerMask::all(model),
            timing: StatsTiming::Post,
        };
        model.forward(test_batch, Mode::Adapt(&pass))?;
        return Ok(());
    }
    // Too large for one forward: one streaming pass per layer, merging
    // per-chunk moments.
    let bn_layers: Vec<usize> = model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::BatchNorm(_)))
        .map(|(i, _)| i)
        .collect();
    for li in bn_layers {
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        let mut start = 0;
        while start < test_batch.n() {
            let end = (start + NORM_CHUNK).min(test_batch.n());
            let input = model.forward_eval_range(&test_batch.slice_batch(start, end), 0, li)?;
            let plane = input.h() * input.w();
            let nb = input.n() * plane;
            let (mu_b, var_b) = batch_stats(&input)?;
            if count == 0 {
                mean = mu_b;
                m2 = var_b.iter().map(|v| v * nb as f64).collect();
            } else {
                let total = (count + nb) as f64;
                for c in 0..mean.len() {
                    let delta = mu_b[c] - mean[c];
                    mean[c] += delta * nb as f64 / total;
                    m2[c] += var_b[c] * nb as f64 + delta * delta * count as f64 * nb as f64 / total;
                }
            }
            count += nb;
            start = end;
        }
        if let Layer::BatchNorm(bn) = &mut model.layers_mut()[li] {
            bn.state.running_var = m2.iter().map(|s| (s / count as f64).max(0.0)).collect();
            bn.state.running_mean = mean;
        }
    }
    Ok(())
}
