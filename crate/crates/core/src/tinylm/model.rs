use ndarray::{s, Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{log_softmax_at, LanguageModel, EOS};
use crate::error::{Error, Result};
use crate::params::{view, view_mut, ParamSet};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Number of trailing context tokens the model sees.
    pub context_window: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::input("vocab_size must be at least 2"));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.context_window == 0 {
            return Err(Error::input("model dimensions must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.embed_dim * self.context_window
    }
}

/// Weights of a windowed MLP language model.
///
/// `w_hidden` is `hidden × (window·embed)` and `w_out` is `vocab × hidden`, i.e.
/// both stored output-major so a low-rank update `B·A` has `B` on the output side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmParams {
    pub config: LmConfig,
    pub embedding: Array2<f64>,
    pub w_hidden: Array2<f64>,
    pub b_hidden: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// Gradients share the parameter layout.
pub type LmGrads = LmParams;

/// One next-token prediction: full context (unwindowed) and the target id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub context: Vec<usize>,
    pub target: usize,
}

/// Activations kept from a batched forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub windows: Vec<Vec<usize>>,
    pub input: Array2<f64>,
    pub hidden: Array2<f64>,
    pub logits: Array2<f64>,
}

impl LmParams {
    pub fn zeros(config: LmConfig) -> Self {
        let v = config.vocab_size;
        let h = config.hidden_dim;
        LmParams {
            config,
            embedding: Array2::zeros((v, config.embed_dim)),
            w_hidden: Array2::zeros((h, config.input_dim())),
            b_hidden: Array1::zeros(h),
            w_out: Array2::zeros((v, h)),
            b_out: Array1::zeros(v),
        }
    }

    /// Gaussian initialisation: embeddings with std `embed_std`, weight
    /// matrices scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init(config: LmConfig, embed_std: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut fill = |a: &mut Array2<f64>, std: f64| {
            for x in a.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *x = n * std;
            }
        };
        fill(&mut p.embedding, embed_std);
        fill(&mut p.w_hidden, 1.0 / (config.input_dim() as f64).sqrt());
        fill(&mut p.w_out, 1.0 / (config.hidden_dim as f64).sqrt());
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.config;
        c.validate()?;
        let ok = self.embedding.dim() == (c.vocab_size, c.embed_dim)
            && self.w_hidden.dim() == (c.hidden_dim, c.input_dim())
            && self.b_hidden.len() == c.hidden_dim
            && self.w_out.dim() == (c.vocab_size, c.hidden_dim)
            && self.b_out.len() == c.vocab_size;
        if !ok {
            return Err(Error::input("parameter shapes do not match model config"));
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    /// Last `context_window` tokens, left-padded with EOS.
    pub fn window(&self, context: &[usize]) -> Vec<usize> {
        let w = self.config.context_window;
        let mut out = vec![EOS; w.saturating_sub(context.len())];
        out.extend_from_slice(&context[context.len().saturating_sub(w)..]);
        out
    }

    fn check_context(&self, context: &[usize]) -> Result<()> {
        if context.is_empty() {
            return Err(Error::input("context must be non-empty"));
        }
        if let Some(bad) = context.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::input(format!("token id {bad} out of range")));
        }
        Ok(())
    }

    pub fn forward(&self, contexts: &[Vec<usize>]) -> Result<ForwardCache> {
        let d = self.config.embed_dim;
        let mut input = Array2::zeros((contexts.len(), self.config.input_dim()));
        let mut windows = Vec::with_capacity(contexts.len());
        for (row, ctx) in contexts.iter().enumerate() {
            self.check_context(ctx)?;
            let win = self.window(ctx);
            for (p, &id) in win.iter().enumerate() {
                input
                    .slice_mut(s![row, p * d..(p + 1) * d])
                    .assign(&self.embedding.row(id));
            }
            windows.push(win);
        }
        let mut hidden = input.dot(&self.w_hidden.t()) + &self.b_hidden;
        hidden.mapv_inplace(f64::tanh);
        let logits = hidden.dot(&self.w_out.t()) + &self.b_out;
        Ok(ForwardCache { windows, input, hidden, logits })
    }

    /// Backpropagate upstream logit gradients `dlogits` (`batch × vocab`).
    ///
    /// Embedding gradients are only accumulated when `embedding_grad` is set;
    /// adapter training never needs them.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>, embedding_grad: bool) -> LmGrads {
        let d = self.config.embed_dim;
        let mut g = LmParams::zeros(self.config);
        g.w_out = dlogits.t().dot(&cache.hidden);
        g.b_out = dlogits.sum_axis(Axis(0));
        let mut dpre = dlogits.dot(&self.w_out);
        dpre.zip_mut_with(&cache.hidden, |dh, &h| *dh *= 1.0 - h * h);
        g.w_hidden = dpre.t().dot(&cache.input);
        g.b_hidden = dpre.sum_axis(Axis(0));
        if embedding_grad {
            let dx = dpre.dot(&self.w_hidden);
            for (row, win) in cache.windows.iter().enumerate() {
                for (p, &id) in win.iter().enumerate() {
                    let mut e = g.embedding.row_mut(id);
                    e += &dx.slice(s![row, p * d..(p + 1) * d]);
                }
            }
        }
        g
    }

    /// Mean next-token negative log-likelihood and its gradient.
    pub fn nll(&self, examples: &[Example], embedding_grad: bool) -> Result<(f64, LmGrads)> {
        if examples.is_empty() {
            return Err(Error::input("no examples"));
        }
        let contexts: Vec<Vec<usize>> = examples.iter().map(|e| e.context.clone()).collect();
        let cache = self.forward(&contexts)?;
        let n = examples.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = cache.logits.clone();
        for (i, ex) in examples.iter().enumerate() {
            if ex.target >= self.config.vocab_size {
                return Err(Error::input(format!("target id {} out of range", ex.target)));
            }
            let z = cache.logits.row(i);
            let zs = z.as_slice().expect("row-major logits");
            loss -= log_softmax_at(zs, ex.target);
            let probs = super::softmax(zs, 1.0);
            let mut drow = dlogits.row_mut(i);
            for (k, p) in probs.into_iter().enumerate() {
                drow[k] = p / n;
            }
            drow[ex.target] -= 1.0 / n;
        }
        let grads = self.backward(&cache, &dlogits, embedding_grad);
        Ok((loss / n, grads))
    }

    /// Mean NLL without gradients.
    pub fn nll_value(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::input("no examples"));
        }
        let contexts: Vec<Vec<usize>> = examples.iter().map(|e| e.context.clone()).collect();
        let cache = self.forward(&contexts)?;
        let mut loss = 0.0;
        for (i, ex) in examples.iter().enumerate() {
            let z = cache.logits.row(i);
            loss -= log_softmax_at(z.as_slice().expect("row-major logits"), ex.target);
        }
        Ok(loss / examples.len() as f64)
    }
}

impl ParamSet for LmParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            view(&self.embedding),
            view(&self.w_hidden),
            view(&self.b_hidden),
            view(&self.w_out),
            view(&self.b_out),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            view_mut(&mut self.embedding),
            view_mut(&mut self.w_hidden),
            view_mut(&mut self.b_hidden),
            view_mut(&mut self.w_out),
            view_mut(&mut self.b_out),
        ]
    }
}

impl LanguageModel for LmParams {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn logits_batch(&self, contexts: &[Vec<usize>]) -> Result<Array2<f64>> {
        Ok(self.forward(contexts)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn toy_config() -> LmConfig {
        LmConfig { vocab_size: 5, embed_dim: 3, hidden_dim: 4, context_window: 3 }
    }

    fn toy_model(seed: u64) -> LmParams {
        let mut p = LmParams::init(toy_config(), 0.7, &mut rng::from_seed(seed)).unwrap();
        for (i, b) in p.b_hidden.iter_mut().enumerate() {
            *b = 0.1 * i as f64 - 0.15;
        }
        for (i, b) in p.b_out.iter_mut().enumerate() {
            *b = 0.05 * i as f64;
        }
        p
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = LmParams::zeros(toy_config());
        let row = m.next_token_logits(&[1, 2, 3, 4]).unwrap();
        assert_eq!(row.values, vec![0.0; 5]);
        assert_eq!(row.step, 4);
    }

    #[test]
    fn logits_are_deterministic() {
        let m = toy_model(3);
        let a = m.next_token_logits(&[2, 1]).unwrap();
        let b = m.next_token_logits(&[2, 1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_ids_and_empty_context_are_rejected() {
        let m = toy_model(3);
        assert!(m.next_token_logits(&[7]).is_err());
        assert!(m.next_token_logits(&[]).is_err());
    }

    #[test]
    fn window_left_pads_and_truncates() {
        let m = toy_model(1);
        assert_eq!(m.window(&[4]), vec![EOS, EOS, 4]);
        assert_eq!(m.window(&[1, 2, 3, 4]), vec![2, 3, 4]);
    }

    // Scalar-loop forward pass, written independently of the ndarray code.
    fn oracle_logits(m: &LmParams, context: &[usize]) -> Vec<f64> {
        let c = m.config;
        let mut ids = vec![EOS; c.context_window];
        let take = context.len().min(c.context_window);
        ids[c.context_window - take..].copy_from_slice(&context[context.len() - take..]);
        let mut x = Vec::new();
        for &id in &ids {
            for j in 0..c.embed_dim {
                x.push(m.embedding[[id, j]]);
            }
        }
        let h: Vec<f64> = (0..c.hidden_dim)
            .map(|i| {
                let mut s = m.b_hidden[i];
                for (j, xj) in x.iter().enumerate() {
                    s += m.w_hidden[[i, j]] * xj;
                }
                s.tanh()
            })
            .collect();
        (0..c.vocab_size)
            .map(|v| {
                let mut s = m.b_out[v];
                for (i, hi) in h.iter().enumerate() {
                    s += m.w_out[[v, i]] * hi;
                }
                s
            })
            .collect()
    }

    #[test]
    fn logits_match_scalar_oracle() {
        for seed in [42, 7] {
            let m = toy_model(seed);
            for ctx in [vec![1, 3, 2], vec![4], vec![2, 2, 1, 3, 4]] {
                let row = m.next_token_logits(&ctx).unwrap();
                for (a, b) in row.values.iter().zip(oracle_logits(&m, &ctx)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    fn examples() -> Vec<Example> {
        vec![
            Example { context: vec![1], target: 2 },
            Example { context: vec![1, 2], target: 3 },
            Example { context: vec![1, 2, 3], target: 0 },
            Example { context: vec![4, 4, 1, 2], target: 1 },
        ]
    }

    #[test]
    fn nll_gradient_matches_central_differences() {
        let m = toy_model(11);
        let ex = examples();
        let (_, g) = m.nll(&ex, true).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..m.num_params() {
            let mut plus = m.clone();
            plus.set_flat(i, m.get_flat(i) + h);
            let mut minus = m.clone();
            minus.set_flat(i, m.get_flat(i) - h);
            let fd = (plus.nll_value(&ex).unwrap() - minus.nll_value(&ex).unwrap()) / (2.0 * h);
            let an = g.get_flat(i);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn uniform_model_nll_is_log_vocab() {
        let m = LmParams::zeros(toy_config());
        let nll = m.nll_value(&examples()).unwrap();
        assert!((nll - 5f64.ln()).abs() < 1e-12);
    }
}
