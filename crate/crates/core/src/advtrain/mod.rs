//! Adversarial distillation of the proxy against target samples.
//!
//! The proxy (frozen base plus adapters) minimizes a teacher-forced task loss
//! on the target's responses plus `λ` times a regularizer that asks a pair
//! discriminator to mistake the proxy's soft greedy rollouts for target
//! responses. The discriminator is updated twice per proxy update.

mod disc;
mod losses;

use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use disc::{sigmoid, softplus, DiscForward, Discriminator, PairRepr, LOGIT_CLAMP};
pub use losses::{
    disc_loss, prediction_gap, reg_loss, reg_loss_pairs, response_examples, soft_rollout, soft_rollouts, task_loss,
    task_loss_value, LossBreakdown, SoftRollout,
};

use crate::distillset::DistillSample;
use crate::error::{Error, Result};
use crate::lora::{ProxyAdapters, ProxyModel};
use crate::optim::sgd_step;
use crate::params::ParamSet;
use crate::rng::{self, Rng};
use crate::tinylm::{LanguageModel, LmParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvConfig {
    pub lambda: f64,
    pub proxy_lr: f64,
    pub disc_lr: f64,
    pub steps: usize,
    pub disc_updates_per_step: usize,
    /// Discriminator-only updates on the initial proxy before the loop.
    pub warmup_disc_steps: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub eval_every: usize,
    pub rank: usize,
    pub lora_scale: f64,
    /// Longest proxy rollout, not counting the closing EOS step.
    pub max_len: usize,
    pub disc_embed_dim: usize,
    pub disc_hidden_dim: usize,
    pub disc_embed_std: f64,
    pub divergence_factor: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            lambda: 0.1,
            proxy_lr: 1e-2,
            disc_lr: 1e-3,
            steps: 300,
            disc_updates_per_step: 2,
            warmup_disc_steps: 50,
            batch_size: 16,
            val_fraction: 0.2,
            eval_every: 10,
            rank: 4,
            lora_scale: 2.0,
            max_len: 20,
            disc_embed_dim: 16,
            disc_hidden_dim: 32,
            disc_embed_std: 0.5,
            divergence_factor: 10.0,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::input("lambda must be non-negative"));
        }
        if !(self.proxy_lr > 0.0) || !(self.disc_lr > 0.0) {
            return Err(Error::input("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.max_len == 0 {
            return Err(Error::input("batch size, eval interval and max_len must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::input("validation fraction must be in (0, 1)"));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::input("divergence factor must exceed 1"));
        }
        Ok(())
    }
}

/// One record per proxy update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: f64,
    pub reg: f64,
    pub total: f64,
    pub disc_loss: f64,
    /// Cumulative counts, warm-up excluded.
    pub disc_updates: usize,
    pub proxy_updates: usize,
    pub val_task: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValSnapshot {
    /// Number of proxy updates applied before the evaluation.
    pub step: usize,
    pub task: f64,
    pub gap: f64,
}

impl ValSnapshot {
    pub fn criterion(&self) -> f64 {
        self.task + self.gap
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub adapters: ProxyAdapters,
    pub disc: Discriminator,
    pub warmup_disc_loss: Vec<f64>,
    pub log: Vec<StepRecord>,
    pub validation: Vec<ValSnapshot>,
    pub best: usize,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainState {
    pub fn gap_history(&self) -> Vec<f64> {
        self.validation.iter().map(|v| v.gap).collect()
    }

    pub fn best_snapshot(&self) -> &ValSnapshot {
        &self.validation[self.best]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvOutcome {
    /// Adapters of the selected checkpoint.
    pub best: ProxyAdapters,
    pub state: TrainState,
}

/// Seeded train/validation split; at least one sample lands on each side.
pub fn split_dataset(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::input("need at least two distillation samples to split"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "adv-split"));
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    Ok((train, val))
}

fn draw_batch<'a>(data: &'a [DistillSample], pool: &[usize], size: usize, rng: &mut Rng) -> Vec<&'a DistillSample> {
    let k = size.min(pool.len());
    index::sample(rng, pool.len(), k).into_iter().map(|i| &data[pool[i]]).collect()
}

fn real_pairs(batch: &[&DistillSample], vocab_size: usize) -> Result<Vec<PairRepr>> {
    let mut out = Vec::new();
    for s in batch {
        for r in &s.responses {
            out.push(PairRepr::hard(s.prompt.ids(), r.ids(), vocab_size)?);
        }
    }
    Ok(out)
}

fn fake_pairs(proxy: &ProxyModel, batch: &[&DistillSample], max_len: usize) -> Result<(Vec<SoftRollout>, Vec<PairRepr>)> {
    let prompts: Vec<&[usize]> = batch.iter().map(|s| s.prompt.ids()).collect();
    let rollouts = soft_rollouts(proxy, &prompts, max_len + 1)?;
    let pairs = rollouts.iter().map(|r| r.pair(proxy.vocab_size())).collect::<Result<Vec<_>>>()?;
    Ok((rollouts, pairs))
}

fn disc_update(
    proxy: &ProxyModel,
    disc: &mut Discriminator,
    batch: &[&DistillSample],
    config: &AdvConfig,
) -> Result<f64> {
    let real = real_pairs(batch, proxy.vocab_size())?;
    let (_, fake) = fake_pairs(proxy, batch, config.max_len)?;
    let (loss, g) = disc_loss(disc, &real, &fake)?;
    sgd_step(disc, &g, config.disc_lr);
    if !disc.all_finite() {
        return Err(Error::NonFinite("discriminator parameters".into()));
    }
    Ok(loss)
}

/// Proxy loss and gradient for one batch. With `λ = 0` the regularizer is
/// not evaluated and reported as 0.
pub fn proxy_objective(
    proxy: &ProxyModel,
    disc: &Discriminator,
    batch: &[&DistillSample],
    lambda: f64,
    max_len: usize,
) -> Result<(LossBreakdown, ProxyAdapters)> {
    let (task, mut grads) = task_loss(proxy, batch)?;
    if lambda == 0.0 {
        return Ok((LossBreakdown::new(task, 0.0, 0.0), grads));
    }
    let prompts: Vec<&[usize]> = batch.iter().map(|s| s.prompt.ids()).collect();
    let rollouts = soft_rollouts(proxy, &prompts, max_len + 1)?;
    let (reg, g_reg) = reg_loss(proxy, disc, &rollouts)?;
    grads.add_scaled(&g_reg, lambda);
    Ok((LossBreakdown::new(task, reg, lambda), grads))
}

fn validate(
    proxy: &ProxyModel,
    disc: &Discriminator,
    data: &[DistillSample],
    val: &[usize],
    step: usize,
    max_len: usize,
) -> Result<ValSnapshot> {
    let batch: Vec<&DistillSample> = val.iter().map(|&i| &data[i]).collect();
    let task = task_loss_value(proxy, &batch)?;
    let real = real_pairs(&batch, proxy.vocab_size())?;
    let (_, fake) = fake_pairs(proxy, &batch, max_len)?;
    let gap = prediction_gap(disc, &fake, &real)?;
    Ok(ValSnapshot { step, task, gap })
}

/// Run the alternating schedule: per step, `disc_updates_per_step`
/// discriminator updates followed by one proxy update. Validation runs before
/// the first proxy update, every `eval_every` steps and after the last one;
/// the returned adapters minimize validation task loss plus prediction gap.
///
/// `observer` sees every step record as soon as it exists, so a log survives a
/// divergence abort.
pub fn run_adversarial(
    base: &LmParams,
    data: &[DistillSample],
    config: &AdvConfig,
    seed: u64,
    mut observer: impl FnMut(&StepRecord),
) -> Result<AdvOutcome> {
    config.validate()?;
    let (train, val) = split_dataset(data.len(), config.val_fraction, seed)?;
    let v = base.config.vocab_size;
    let adapters = ProxyAdapters::init(&base.config, config.rank, config.lora_scale, &mut rng::stream(seed, "adv-lora"))?;
    let mut proxy = ProxyModel::new(base.clone(), adapters)?;
    let mut disc = Discriminator::init(
        v,
        config.disc_embed_dim,
        config.disc_hidden_dim,
        config.disc_embed_std,
        &mut rng::stream(seed, "adv-disc"),
    )?;
    let mut batch_rng = rng::stream(seed, "adv-batch");

    let mut warmup_disc_loss = Vec::with_capacity(config.warmup_disc_steps);
    for _ in 0..config.warmup_disc_steps {
        let batch = draw_batch(data, &train, config.batch_size, &mut batch_rng);
        warmup_disc_loss.push(disc_update(&proxy, &mut disc, &batch, config)?);
    }

    let mut validation = vec![validate(&proxy, &disc, data, &val, 0, config.max_len)?];
    let mut best = 0;
    let mut best_adapters = proxy.adapters().clone();
    let mut log = Vec::with_capacity(config.steps);
    let mut initial_total: Option<f64> = None;
    let mut disc_updates = 0;

    for step in 0..config.steps {
        let mut last_disc = f64::NAN;
        for _ in 0..config.disc_updates_per_step {
            let batch = draw_batch(data, &train, config.batch_size, &mut batch_rng);
            last_disc = disc_update(&proxy, &mut disc, &batch, config)?;
            disc_updates += 1;
        }

        let batch = draw_batch(data, &train, config.batch_size, &mut batch_rng);
        let (losses, grads) = proxy_objective(&proxy, &disc, &batch, config.lambda, config.max_len)?;
        if !losses.total.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite(format!("proxy loss at step {step}")));
        }
        let limit = config.divergence_factor * *initial_total.get_or_insert(losses.total);
        if losses.total > limit {
            return Err(Error::Divergence { step, loss: losses.total, limit });
        }
        let mut adapters = proxy.adapters().clone();
        sgd_step(&mut adapters, &grads, config.proxy_lr);
        proxy.set_adapters(adapters)?;

        let done = step + 1;
        let mut record = StepRecord {
            step,
            task: losses.task,
            reg: losses.reg,
            total: losses.total,
            disc_loss: last_disc,
            disc_updates,
            proxy_updates: done,
            val_task: None,
            gap: None,
        };
        if done % config.eval_every == 0 || done == config.steps {
            let snap = validate(&proxy, &disc, data, &val, done, config.max_len)?;
            record.val_task = Some(snap.task);
            record.gap = Some(snap.gap);
            if snap.criterion() < validation[best].criterion() {
                best = validation.len();
                best_adapters = proxy.adapters().clone();
            }
            validation.push(snap);
        }
        observer(&record);
        log.push(record);
    }

    Ok(AdvOutcome {
        best: best_adapters,
        state: TrainState {
            step: config.steps,
            adapters: proxy.adapters().clone(),
            disc,
            warmup_disc_loss,
            log,
            validation,
            best,
            train_indices: train,
            val_indices: val,
        },
    })
}
