//! Minimal autoregressive token models over a small word-level vocabulary.
//!
//! One architecture serves both roles in the pipeline: the sampled-only target
//! and the proxy base. A fixed context window of token embeddings is
//! concatenated, passed through one `tanh` hidden layer and projected onto the
//! vocabulary. Gradients are written out by hand in [`model`].

mod checkpoint;
mod model;
mod sample;
mod train;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::LmCheckpoint;
pub use model::{Example, ForwardCache, LmConfig, LmGrads, LmParams};
pub use sample::{greedy_rollout, sample_sequence};
pub use train::{corpus_examples, sequence_examples, train_lm, TrainLmConfig, TrainLmReport};

/// End-of-sequence id. Also used to left-pad short contexts.
pub const EOS: usize = 0;
pub const EOS_TOKEN: &str = "<eos>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from a full token list; `tokens[0]` must be [`EOS_TOKEN`].
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::input("vocabulary needs at least two tokens"));
        }
        if tokens[0] != EOS_TOKEN {
            return Err(Error::input(format!("vocabulary must start with {EOS_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::input(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Build from words, prepending the end-of-sequence token.
    pub fn with_eos<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![EOS_TOKEN.to_string()];
        tokens.extend(words.into_iter().map(Into::into));
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace tokenization; unknown words are an input error.
    pub fn encode(&self, text: &str, role: Role) -> Result<TokenSeq> {
        let ids = text
            .split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::input(format!("unknown token {w:?}"))))
            .collect::<Result<Vec<_>>>()?;
        TokenSeq::new(ids, role)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(bad) => Err(Error::input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prompt,
    Response,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTokenSeq")]
pub struct TokenSeq {
    ids: Vec<usize>,
    role: Role,
}

#[derive(Deserialize)]
struct RawTokenSeq {
    ids: Vec<usize>,
    role: Role,
}

impl TryFrom<RawTokenSeq> for TokenSeq {
    type Error = Error;
    fn try_from(raw: RawTokenSeq) -> Result<Self> {
        TokenSeq::new(raw.ids, raw.role)
    }
}

impl TokenSeq {
    /// Prompts must be non-empty; responses may be empty.
    pub fn new(ids: Vec<usize>, role: Role) -> Result<Self> {
        if role == Role::Prompt && ids.is_empty() {
            return Err(Error::input("prompt must contain at least one token"));
        }
        Ok(TokenSeq { ids, role })
    }

    pub fn prompt(ids: Vec<usize>) -> Result<Self> {
        Self::new(ids, Role::Prompt)
    }

    pub fn response(ids: Vec<usize>) -> Self {
        TokenSeq { ids, role: Role::Response }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.ids
    }
}

/// Logits for one decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitRow {
    pub step: usize,
    pub values: Vec<f64>,
}

/// Anything that maps a token context to next-token logits.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    /// One logit row per context, stacked.
    fn logits_batch(&self, contexts: &[Vec<usize>]) -> Result<ndarray::Array2<f64>>;

    fn next_token_logits(&self, context: &[usize]) -> Result<LogitRow> {
        if context.is_empty() {
            return Err(Error::input("context must be non-empty"));
        }
        let z = self.logits_batch(&[context.to_vec()])?;
        Ok(LogitRow { step: context.len(), values: z.row(0).to_vec() })
    }
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax_probs(z: &LogitRow, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::input(format!(
            "temperature must be positive, got {temperature} (use greedy decoding for 0)"
        )));
    }
    if z.values.is_empty() || z.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("logits must be finite and non-empty"));
    }
    Ok(softmax(&z.values, temperature))
}

pub(crate) fn softmax(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

pub(crate) fn log_softmax_at(values: &[f64], index: usize) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = values.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    values[index] - lse
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f64]) -> LogitRow {
        LogitRow { step: 0, values: values.to_vec() }
    }

    #[test]
    fn vocabulary_requires_eos_first_and_unique_tokens() {
        assert!(Vocabulary::new(vec!["a".into(), "<eos>".into()]).is_err());
        assert!(Vocabulary::with_eos(["a", "a"]).is_err());
        assert!(Vocabulary::new(vec![EOS_TOKEN.into()]).is_err());
        let v = Vocabulary::with_eos(["a", "b"]).unwrap();
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.token(2), Some("b"));
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
        }
    }

    #[test]
    fn encode_rejects_unknown_words_and_empty_prompts() {
        let v = Vocabulary::with_eos(["a", "b"]).unwrap();
        assert_eq!(v.encode("a b a", Role::Response).unwrap().ids(), &[1, 2, 1]);
        assert!(v.encode("a c", Role::Response).is_err());
        assert!(v.encode("   ", Role::Prompt).is_err());
        assert!(v.encode("", Role::Response).unwrap().is_empty());
        assert_eq!(v.decode(&[1, 2]), "a b");
    }

    #[test]
    fn vocabulary_serde_round_trip() {
        let v = Vocabulary::with_eos(["x", "y"]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"["<eos>","x","y"]"#);
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["x","y"]"#).is_err());
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let p = softmax_probs(&row(&[0.3; 4]), 1.0).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2_gives_two_thirds() {
        let p = softmax_probs(&row(&[2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_low_temperature_concentrates() {
        let p = softmax_probs(&row(&[5.0, 0.0]), 0.01).unwrap();
        assert!(p[0] > 1.0 - 1e-9);
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        assert!(softmax_probs(&row(&[1.0, 0.0]), 0.0).is_err());
        assert!(softmax_probs(&row(&[1.0, 0.0]), -1.0).is_err());
        assert!(softmax_probs(&row(&[f64::NAN, 0.0]), 1.0).is_err());
    }

    #[test]
    fn softmax_handles_huge_logits() {
        let p = softmax_probs(&row(&[1000.0, 999.0]), 1.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_shift_invariant(
                z in proptest::collection::vec(-20.0f64..20.0, 2..12),
                shift in -50.0f64..50.0,
                t in 0.1f64..5.0,
            ) {
                let a = softmax_probs(&row(&z), t).unwrap();
                let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
                let b = softmax_probs(&row(&shifted), t).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(a.iter().all(|&p| p > 0.0));
            }
        }
    }
}
