//! The three training objectives and the prediction gap.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::disc::{sigmoid, softplus, Discriminator, PairRepr};
use crate::distillset::DistillSample;
use crate::error::{Error, Result};
use crate::lora::{ProxyAdapters, ProxyModel};
use crate::tinylm::{argmax, softmax, Example, LanguageModel, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(task: f64, reg: f64, lambda: f64) -> Self {
        LossBreakdown { task, reg, total: task + lambda * reg, lambda }
    }
}

/// Teacher-forced examples for one response: every response token plus the
/// closing EOS, each predicted from `prompt ‖ response[..t]`. Prompt
/// positions are never targets. An empty response yields no examples.
pub fn response_examples(prompt: &[usize], response: &[usize]) -> Vec<Example> {
    if response.is_empty() {
        return Vec::new();
    }
    let mut ctx = prompt.to_vec();
    let mut out = Vec::with_capacity(response.len() + 1);
    for &t in response.iter().chain(std::iter::once(&EOS)) {
        out.push(Example { context: ctx.clone(), target: t });
        ctx.push(t);
    }
    out
}

/// Per-token mean NLL of the batch's responses and its gradient w.r.t. the
/// adapters.
pub fn task_loss(proxy: &ProxyModel, batch: &[&DistillSample]) -> Result<(f64, ProxyAdapters)> {
    let examples: Vec<Example> = batch
        .iter()
        .flat_map(|s| s.responses.iter().flat_map(|r| response_examples(s.prompt.ids(), r.ids())))
        .collect();
    if examples.is_empty() {
        return Err(Error::input("task loss batch has no response tokens"));
    }
    let (loss, g) = proxy.merged().nll(&examples, false)?;
    Ok((loss, proxy.adapter_grads(&g)))
}

pub fn task_loss_value(proxy: &ProxyModel, batch: &[&DistillSample]) -> Result<f64> {
    let examples: Vec<Example> = batch
        .iter()
        .flat_map(|s| s.responses.iter().flat_map(|r| response_examples(s.prompt.ids(), r.ids())))
        .collect();
    if examples.is_empty() {
        return Err(Error::input("task loss batch has no response tokens"));
    }
    proxy.merged().nll_value(&examples)
}

/// Greedy continuation that keeps each step's full next-token distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftRollout {
    pub prompt: Vec<usize>,
    pub contexts: Vec<Vec<usize>>,
    pub probs: Vec<Vec<f64>>,
    /// Greedy tokens; the last is EOS unless the step limit was reached.
    pub tokens: Vec<usize>,
}

impl SoftRollout {
    pub fn pair(&self, vocab_size: usize) -> Result<PairRepr> {
        PairRepr::soft(&self.prompt, &self.probs, vocab_size)
    }
}

pub fn soft_rollout<M: LanguageModel + ?Sized>(model: &M, prompt: &[usize], max_steps: usize) -> Result<SoftRollout> {
    if prompt.is_empty() {
        return Err(Error::input("prompt must be non-empty"));
    }
    let mut ctx = prompt.to_vec();
    let mut out = SoftRollout { prompt: prompt.to_vec(), contexts: Vec::new(), probs: Vec::new(), tokens: Vec::new() };
    for _ in 0..max_steps {
        let z = model.next_token_logits(&ctx)?;
        let tok = argmax(&z.values);
        out.contexts.push(ctx.clone());
        out.probs.push(softmax(&z.values, 1.0));
        out.tokens.push(tok);
        if tok == EOS {
            break;
        }
        ctx.push(tok);
    }
    Ok(out)
}

pub fn soft_rollouts<M: LanguageModel + ?Sized>(model: &M, prompts: &[&[usize]], max_steps: usize) -> Result<Vec<SoftRollout>> {
    prompts.par_iter().map(|p| soft_rollout(model, p, max_steps)).collect()
}

/// `−mean log D(real) − mean log(1 − D(fake))` and its gradient w.r.t. φ.
pub fn disc_loss(disc: &Discriminator, real: &[PairRepr], fake: &[PairRepr]) -> Result<(f64, Discriminator)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::input("discriminator loss needs real and fake pairs"));
    }
    let pairs: Vec<PairRepr> = real.iter().chain(fake).cloned().collect();
    let fwd = disc.forward(&pairs)?;
    let logits = fwd.logits();
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let mut loss_real = 0.0;
    let mut loss_fake = 0.0;
    let mut dlogit = Vec::with_capacity(pairs.len());
    for (i, &l) in logits.iter().enumerate() {
        if i < real.len() {
            loss_real += softplus(-l);
            dlogit.push(-(1.0 - sigmoid(l)) / nr);
        } else {
            loss_fake += softplus(l);
            dlogit.push(sigmoid(l) / nf);
        }
    }
    let (grads, _) = disc.backward(&fwd, &dlogit);
    Ok((loss_real / nr + loss_fake / nf, grads))
}

/// `−mean log D(fake)` with φ held fixed; returns the gradient w.r.t. each
/// pair's pooling weights.
pub fn reg_loss_pairs(disc: &Discriminator, fake: &[PairRepr]) -> Result<(f64, Array2<f64>)> {
    if fake.is_empty() {
        return Err(Error::input("regularization needs proxy pairs"));
    }
    let fwd = disc.forward(fake)?;
    let n = fake.len() as f64;
    let logits = fwd.logits();
    let loss = logits.iter().map(|&l| softplus(-l)).sum::<f64>() / n;
    let dlogit: Vec<f64> = logits.iter().map(|&l| -(1.0 - sigmoid(l)) / n).collect();
    let (_, dpooled) = disc.backward(&fwd, &dlogit);
    Ok((loss, dpooled))
}

/// Regularization loss over proxy soft rollouts and its gradient w.r.t. the
/// adapters, through the softmax of every rollout step.
pub fn reg_loss(proxy: &ProxyModel, disc: &Discriminator, rollouts: &[SoftRollout]) -> Result<(f64, ProxyAdapters)> {
    let v = proxy.vocab_size();
    let pairs = rollouts.iter().map(|r| r.pair(v)).collect::<Result<Vec<_>>>()?;
    let (loss, dpooled) = reg_loss_pairs(disc, &pairs)?;
    let steps: usize = rollouts.iter().map(|r| r.probs.len()).sum();
    let mut contexts = Vec::with_capacity(steps);
    let mut dlogits = Array2::zeros((steps, v));
    let mut row = 0;
    for (i, r) in rollouts.iter().enumerate() {
        let g = dpooled.row(i).mapv(|x| x / pairs[i].len as f64);
        for (ctx, p) in r.contexts.iter().zip(&r.probs) {
            let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            for k in 0..v {
                dlogits[[row, k]] = p[k] * (g[k] - dot);
            }
            contexts.push(ctx.clone());
            row += 1;
        }
    }
    if steps == 0 {
        return Ok((loss, proxy.adapters().zeros_like()));
    }
    let merged = proxy.merged();
    let cache = merged.forward(&contexts)?;
    let g = merged.backward(&cache, &dlogits, false);
    Ok((loss, proxy.adapter_grads(&g)))
}

/// `|mean D(target) − mean D(proxy)|`.
pub fn prediction_gap(disc: &Discriminator, proxy_pairs: &[PairRepr], target_pairs: &[PairRepr]) -> Result<f64> {
    if proxy_pairs.is_empty() || target_pairs.is_empty() {
        return Err(Error::input("prediction gap needs both sample sets"));
    }
    let mean = |s: Vec<f64>| s.iter().sum::<f64>() / s.len() as f64;
    let t = mean(disc.scores(target_pairs)?);
    let p = mean(disc.scores(proxy_pairs)?);
    Ok((t - p).abs())
}
