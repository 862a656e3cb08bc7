//! Score-matching training with conditioning dropout, and incremental
//! fine-tuning on tournament winners.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::sample_intermediate;
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::par;
use crate::schedule::Schedule;
use crate::scorenet::{LossKind, Reward, ScoreNetParams, TrainItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Probability of replacing an item's reward with the null token.
    pub p_uncond: f64,
    /// Smallest fine-grid index drawn for training (index 0 has `sigma = 0`).
    pub t_min_index: usize,
    pub loss_kind: LossKind,
    /// Snapshot the parameters every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Learning-rate multiplier applied by [`finetune_incremental`].
    pub finetune_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            p_uncond: 0.1,
            t_min_index: 10,
            loss_kind: LossKind::Naive,
            checkpoint_every: 3,
            finetune_lr_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(invalid(format!("p_uncond {} outside [0, 1)", self.p_uncond)));
        }
        if self.t_min_index == 0 || self.t_min_index >= schedule.n_steps() {
            return Err(invalid(format!(
                "t_min_index must lie in 1..{}, got {}",
                schedule.n_steps(),
                self.t_min_index
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning_rate must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }
}

/// A source image, its pseudo-target and the binary quality label of the target.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub z0: Image,
    pub z1: Image,
    /// `Good` (r = 0) or `Bad` (r = 1); never `Null`.
    pub r: Reward,
    pub subject: u32,
    pub slice: u32,
}

impl LabeledPair {
    pub fn validate(&self) -> Result<()> {
        self.z0.ensure_same_shape(&self.z1)?;
        if self.r == Reward::Null {
            return Err(invalid("labeled pairs carry a binary reward"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ScoreNetParams,
    pub history: Vec<EpochRecord>,
    /// `(epoch, params)` snapshots, oldest first.
    pub checkpoints: Vec<(usize, ScoreNetParams)>,
    pub steps: usize,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: ScoreNetParams,
    v: ScoreNetParams,
}

impl Adam {
    pub fn new(params: &ScoreNetParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ScoreNetParams, grads: &ScoreNetParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = b1 * m.data[k] + (1.0 - b1) * gk;
                v.data[k] = b2 * v.data[k] + (1.0 - b2) * gk * gk;
                let mhat = m.data[k] / c1;
                let vhat = v.data[k] / c2;
                p.data[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

struct Draw {
    pair: usize,
    t_index: usize,
    drop_reward: bool,
    noise_seed: u64,
}

/// Trains `params` by score matching on bridge samples of `dataset`.
///
/// All randomness is drawn sequentially from `cfg.seed` before the per-item
/// work fans out, so results do not depend on the thread count.
pub fn train(
    params: ScoreNetParams,
    dataset: &[LabeledPair],
    cfg: &TrainConfig,
    schedule: &Schedule,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(invalid("training dataset is empty"));
    }
    cfg.validate(schedule)?;
    for p in dataset {
        p.validate()?;
    }
    let mut params = params;
    let mut opt = Adam::new(&params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = cfg.steps_per_epoch(dataset.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let draws: Vec<Draw> = (0..cfg.batch_size)
                .map(|_| Draw {
                    pair: rng.random_range(0..dataset.len()),
                    t_index: rng.random_range(cfg.t_min_index..schedule.n_steps()),
                    drop_reward: rng.random::<f64>() < cfg.p_uncond,
                    noise_seed: rng.random(),
                })
                .collect();
            let batch = par::try_map_range(draws.len(), |k| {
                let d = &draws[k];
                let pair = &dataset[d.pair];
                let mut noise = ChaCha8Rng::seed_from_u64(d.noise_seed);
                let z_t = sample_intermediate(schedule, &pair.z0, &pair.z1, d.t_index, &mut noise)?;
                Ok::<_, Error>(TrainItem {
                    z_t,
                    z0: pair.z0.clone(),
                    z1: pair.z1.clone(),
                    t_index: d.t_index,
                    r: if d.drop_reward { Reward::Null } else { pair.r },
                })
            })?;
            let (loss, grads) = params.backward(schedule, &batch, cfg.loss_kind)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss });
            }
            opt.step(&mut params, &grads);
            total += loss;
            step += 1;
        }
        history.push(EpochRecord {
            epoch,
            loss: total / steps_per_epoch as f64,
        });
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            checkpoints.push((epoch, params.clone()));
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        checkpoints,
        steps: step,
    })
}

/// Continues training on `base ∪ preferred` at a reduced learning rate.
pub fn finetune_incremental(
    params: ScoreNetParams,
    base: &[LabeledPair],
    preferred: &[LabeledPair],
    cfg: &TrainConfig,
    schedule: &Schedule,
) -> Result<TrainOutcome> {
    if let Some(bad) = preferred.iter().find(|p| p.r != Reward::Good) {
        return Err(invalid(format!(
            "preference set item (subject {}, slice {}) is not labeled good",
            bad.subject, bad.slice
        )));
    }
    let mut union = Vec::with_capacity(base.len() + preferred.len());
    union.extend_from_slice(base);
    union.extend_from_slice(preferred);
    let mut tuned = cfg.clone();
    tuned.learning_rate *= cfg.finetune_lr_scale;
    train(params, &union, &tuned, schedule)
}
