//! Pair discriminator: mean-pooled token embeddings of `prompt ‖ response`,
//! a `tanh` hidden layer and a sigmoid score.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{view, view_mut, ParamSet};
use crate::rng::Rng;
use crate::tinylm::EOS;

/// Logits are clamped to `±LOGIT_CLAMP` before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

/// A (prompt, response) pair reduced to its mean-pooling weights over the
/// vocabulary. Hard tokens contribute one-hot rows, soft steps contribute
/// probability vectors; `len` is the number of pooled positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRepr {
    pub pooled: Array1<f64>,
    pub len: usize,
}

impl PairRepr {
    /// `prompt ‖ response ‖ EOS` as hard tokens.
    pub fn hard(prompt: &[usize], response: &[usize], vocab_size: usize) -> Result<Self> {
        let mut pooled = Array1::zeros(vocab_size);
        let mut len = 0;
        for &id in prompt.iter().chain(response).chain(std::iter::once(&EOS)) {
            if id >= vocab_size {
                return Err(Error::input(format!("token id {id} out of range")));
            }
            pooled[id] += 1.0;
            len += 1;
        }
        pooled /= len as f64;
        Ok(PairRepr { pooled, len })
    }

    /// Hard prompt followed by per-step probability vectors.
    pub fn soft(prompt: &[usize], steps: &[Vec<f64>], vocab_size: usize) -> Result<Self> {
        let mut pooled = Array1::zeros(vocab_size);
        for &id in prompt {
            if id >= vocab_size {
                return Err(Error::input(format!("token id {id} out of range")));
            }
            pooled[id] += 1.0;
        }
        for p in steps {
            if p.len() != vocab_size {
                return Err(Error::input("soft step has the wrong vocabulary size"));
            }
            pooled += &Array1::from(p.clone());
        }
        let len = prompt.len() + steps.len();
        if len == 0 {
            return Err(Error::input("empty pair"));
        }
        pooled /= len as f64;
        Ok(PairRepr { pooled, len })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub embedding: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: Array1<f64>,
}

pub struct DiscForward {
    pooled: Array2<f64>,
    x: Array2<f64>,
    h: Array2<f64>,
    raw: Array1<f64>,
    pub scores: Vec<f64>,
}

impl DiscForward {
    /// Clamped logits.
    pub fn logits(&self) -> Vec<f64> {
        self.raw.iter().map(|l| l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Discriminator {
    pub fn zeros(vocab_size: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        Discriminator {
            embedding: Array2::zeros((vocab_size, embed_dim)),
            w1: Array2::zeros((hidden_dim, embed_dim)),
            b1: Array1::zeros(hidden_dim),
            w2: Array1::zeros(hidden_dim),
            b2: Array1::zeros(1),
        }
    }

    pub fn init(vocab_size: usize, embed_dim: usize, hidden_dim: usize, embed_std: f64, rng: &mut Rng) -> Result<Self> {
        if vocab_size < 2 || embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::input("discriminator dimensions must be positive"));
        }
        let mut d = Self::zeros(vocab_size, embed_dim, hidden_dim);
        let mut gauss = |std: f64| rng.sample::<f64, _>(StandardNormal) * std;
        d.embedding.mapv_inplace(|_| gauss(embed_std));
        let s1 = 1.0 / (embed_dim as f64).sqrt();
        d.w1.mapv_inplace(|_| gauss(s1));
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        d.w2.mapv_inplace(|_| gauss(s2));
        Ok(d)
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn forward(&self, pairs: &[PairRepr]) -> Result<DiscForward> {
        let v = self.vocab_size();
        let mut pooled = Array2::zeros((pairs.len(), v));
        for (i, p) in pairs.iter().enumerate() {
            if p.pooled.len() != v {
                return Err(Error::input("pair vocabulary does not match discriminator"));
            }
            pooled.row_mut(i).assign(&p.pooled);
        }
        let x = pooled.dot(&self.embedding);
        let mut h = x.dot(&self.w1.t()) + &self.b1;
        h.mapv_inplace(f64::tanh);
        let raw = h.dot(&self.w2) + self.b2[0];
        let scores = raw.iter().map(|l| sigmoid(l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))).collect();
        Ok(DiscForward { pooled, x, h, raw, scores })
    }

    pub fn scores(&self, pairs: &[PairRepr]) -> Result<Vec<f64>> {
        Ok(self.forward(pairs)?.scores)
    }

    /// Backpropagate gradients w.r.t. the clamped logits. Returns parameter
    /// gradients and gradients w.r.t. each pair's pooling weights.
    pub fn backward(&self, fwd: &DiscForward, dlogit: &[f64]) -> (Discriminator, Array2<f64>) {
        let dl = Array1::from_iter(
            dlogit
                .iter()
                .zip(&fwd.raw)
                .map(|(g, raw)| if raw.abs() < LOGIT_CLAMP { *g } else { 0.0 }),
        );
        let mut g = Discriminator::zeros(self.vocab_size(), self.w1.ncols(), self.w1.nrows());
        g.w2 = fwd.h.t().dot(&dl);
        g.b2[0] = dl.sum();
        let mut dpre = dl.clone().insert_axis(Axis(1)).dot(&self.w2.view().insert_axis(Axis(0)));
        dpre.zip_mut_with(&fwd.h, |d, &h| *d *= 1.0 - h * h);
        g.w1 = dpre.t().dot(&fwd.x);
        g.b1 = dpre.sum_axis(Axis(0));
        let dx = dpre.dot(&self.w1);
        g.embedding = fwd.pooled.t().dot(&dx);
        let dpooled = dx.dot(&self.embedding.t());
        (g, dpooled)
    }
}

impl ParamSet for Discriminator {
    fn slices(&self) -> Vec<&[f64]> {
        vec![view(&self.embedding), view(&self.w1), view(&self.b1), view(&self.w2), view(&self.b2)]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            view_mut(&mut self.embedding),
            view_mut(&mut self.w1),
            view_mut(&mut self.b1),
            view_mut(&mut self.w2),
            view_mut(&mut self.b2),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn pairs() -> Vec<PairRepr> {
        vec![
            PairRepr::hard(&[1, 2], &[3, 4], 6).unwrap(),
            PairRepr::soft(&[1], &[vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.1], vec![0.5, 0.1, 0.1, 0.1, 0.1, 0.1]], 6).unwrap(),
        ]
    }

    #[test]
    fn zero_head_scores_one_half() {
        let mut d = Discriminator::init(6, 3, 4, 0.5, &mut rng::from_seed(1)).unwrap();
        d.w2.fill(0.0);
        assert_eq!(d.scores(&pairs()).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn scores_are_deterministic_and_in_range() {
        let d = Discriminator::init(6, 3, 4, 0.5, &mut rng::from_seed(2)).unwrap();
        let a = d.scores(&pairs()).unwrap();
        assert_eq!(a, d.scores(&pairs()).unwrap());
        assert!(a.iter().all(|s| *s > 0.0 && *s < 1.0));
    }

    #[test]
    fn clamped_logit_stays_inside_unit_interval() {
        let mut d = Discriminator::zeros(6, 3, 4);
        d.b2[0] = 1e4;
        let s = d.scores(&pairs()).unwrap();
        assert!(s.iter().all(|v| *v < 1.0 && (*v - sigmoid(LOGIT_CLAMP)).abs() < 1e-18));
    }

    #[test]
    fn pooled_weights_sum_to_one() {
        for p in pairs() {
            assert!((p.pooled.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(PairRepr::hard(&[1], &[], 3).unwrap().len, 2);
        assert!(PairRepr::hard(&[7], &[], 3).is_err());
    }

    #[test]
    fn stable_softplus() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}
