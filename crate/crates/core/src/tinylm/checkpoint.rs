use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LmParams, Vocabulary};
use crate::error::{Error, Result};

pub const LM_FORMAT: &str = "evidistill-lm/1";

/// On-disk language model: vocabulary plus weights, as JSON.
///
/// Matrices use ndarray's serde layout: `{"v":1,"dim":[rows,cols],"data":[..]}`
/// with row-major `data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmCheckpoint {
    pub format: String,
    pub vocab: Vocabulary,
    pub params: LmParams,
}

impl LmCheckpoint {
    pub fn new(vocab: Vocabulary, params: LmParams) -> Result<Self> {
        let ck = LmCheckpoint { format: LM_FORMAT.to_string(), vocab, params };
        ck.validate()?;
        Ok(ck)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != LM_FORMAT {
            return Err(Error::input(format!("unsupported checkpoint format {:?}", self.format)));
        }
        if self.vocab.len() != self.params.config.vocab_size {
            return Err(Error::input("checkpoint vocabulary does not match model vocab_size"));
        }
        self.params.validate()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: LmCheckpoint = serde_json::from_slice(&fs::read(path)?)?;
        ck.validate()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tinylm::{LanguageModel, LmConfig};

    #[test]
    fn reload_gives_identical_logits() {
        let vocab = Vocabulary::with_eos(["a", "b", "c"]).unwrap();
        let cfg = LmConfig { vocab_size: 4, embed_dim: 3, hidden_dim: 5, context_window: 2 };
        let params = LmParams::init(cfg, 0.5, &mut rng::from_seed(1)).unwrap();
        let ck = LmCheckpoint::new(vocab, params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = LmCheckpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let a = ck.params.next_token_logits(&[1, 2]).unwrap();
        let b = back.params.next_token_logits(&[1, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_vocab_is_rejected() {
        let vocab = Vocabulary::with_eos(["a"]).unwrap();
        let cfg = LmConfig { vocab_size: 4, embed_dim: 2, hidden_dim: 2, context_window: 2 };
        assert!(LmCheckpoint::new(vocab, LmParams::zeros(cfg)).is_err());
    }
}
