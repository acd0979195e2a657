use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Example, LmConfig, LmParams, TokenSeq, EOS};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainLmConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_window: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub embed_init_std: f64,
    /// Decoupled weight decay applied by the optimizer.
    pub weight_decay: f64,
}

impl Default for TrainLmConfig {
    fn default() -> Self {
        TrainLmConfig {
            embed_dim: 16,
            hidden_dim: 64,
            context_window: 8,
            epochs: 60,
            batch_size: 64,
            learning_rate: 1e-2,
            embed_init_std: 0.5,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLmReport {
    pub initial_nll: f64,
    pub final_nll: f64,
    pub epoch_nll: Vec<f64>,
}

/// Next-token examples for a whole sequence, ending with a predicted EOS.
/// The first token is predicted from an all-EOS context.
pub fn sequence_examples(ids: &[usize]) -> Vec<Example> {
    let mut out = Vec::with_capacity(ids.len() + 1);
    let mut ctx = vec![EOS];
    for &t in ids.iter().chain(std::iter::once(&EOS)) {
        out.push(Example { context: ctx.clone(), target: t });
        ctx.push(t);
    }
    out
}

pub fn corpus_examples(corpus: &[TokenSeq]) -> Vec<Example> {
    corpus.iter().flat_map(|s| sequence_examples(s.ids())).collect()
}

/// Train a model from scratch on `corpus` with minibatch Adam.
pub fn train_lm(
    corpus: &[TokenSeq],
    vocab_size: usize,
    config: &TrainLmConfig,
    seed: u64,
) -> Result<(LmParams, TrainLmReport)> {
    if corpus.is_empty() {
        return Err(Error::input("training corpus is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::input("batch_size must be positive"));
    }
    let model_cfg = LmConfig {
        vocab_size,
        embed_dim: config.embed_dim,
        hidden_dim: config.hidden_dim,
        context_window: config.context_window,
    };
    let mut init_rng = rng::stream(seed, "lm-init");
    let mut params = LmParams::init(model_cfg, config.embed_init_std, &mut init_rng)?;
    let examples = corpus_examples(corpus);
    let initial_nll = params.nll_value(&examples)?;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = rng::stream(seed, "lm-shuffle");
    let mut adam = Adam::new(config.learning_rate);
    adam.weight_decay = config.weight_decay;
    let mut epoch_nll = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (_, grads) = params.nll(&batch, true)?;
            adam.step(&mut params, &grads);
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("language model weights during training".into()));
        }
        epoch_nll.push(params.nll_value(&examples)?);
    }
    let final_nll = epoch_nll.last().copied().unwrap_or(initial_nll);
    Ok((params, TrainLmReport { initial_nll, final_nll, epoch_nll }))
}
