//! Pipeline configuration: one TOML document, every key defaulted, unknown
//! keys rejected. `--set section.key=value` overrides apply on top.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use evidistill::advtrain::AdvConfig;
use evidistill::distillset::DistillSetConfig;
use evidistill::evidence::EvidenceConfig;
use evidistill::theory::DecayConfig;
use evidistill::tinylm::TrainLmConfig;
use evidistill::world::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bins: usize,
    /// Temperature at which the target answers the evaluation prompts.
    pub temperature: f64,
    pub max_len: usize,
    /// Target responses drawn per QA item.
    pub samples_per_item: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { bins: 10, temperature: 1.0, max_len: 20, samples_per_item: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub target: TrainLmConfig,
    pub proxy_base: TrainLmConfig,
    pub distill: DistillSetConfig,
    pub adversarial: AdvConfig,
    pub evidence: EvidenceConfig,
    pub eval: EvalConfig,
    pub theory: DecayConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 20240501,
            world: WorldConfig::default(),
            target: TrainLmConfig { embed_dim: 24, hidden_dim: 128, context_window: 16, ..TrainLmConfig::default() },
            proxy_base: TrainLmConfig { embed_dim: 16, hidden_dim: 32, context_window: 16, ..TrainLmConfig::default() },
            distill: DistillSetConfig::default(),
            adversarial: AdvConfig { proxy_lr: 0.1, disc_lr: 0.01, warmup_disc_steps: 500, ..AdvConfig::default() },
            evidence: EvidenceConfig::default(),
            eval: EvalConfig::default(),
            theory: DecayConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Defaults, then the file (if any), then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let cfg: PipelineConfig =
                    toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                toml::Value::try_from(cfg)?
            }
            None => toml::Value::try_from(PipelineConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: PipelineConfig = value.try_into().context("config after overrides")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.adversarial.validate()?;
        if self.eval.bins == 0 || self.eval.max_len == 0 || self.eval.samples_per_item == 0 {
            bail!("eval bins, max_len and samples_per_item must be positive");
        }
        if !(self.eval.temperature > 0.0) {
            bail!("eval temperature must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(serde_json::to_vec(self)?)))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a bare
/// string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override {spec:?} is not key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override {spec:?} has an empty key");
    }
    let value = parse_literal(raw.trim());
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| anyhow!("{} is not a section", keys[..i].join(".")))?;
        if i + 1 == keys.len() {
            if !table.contains_key(*key) {
                bail!("unknown config key {path}");
            }
            table.insert(key.to_string(), value);
            return Ok(());
        }
        node = table.get_mut(*key).ok_or_else(|| anyhow!("unknown config key {path}"))?;
    }
    unreachable!()
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_and_typecheck() {
        let cfg = PipelineConfig::load(None, &["adversarial.lambda=0".into(), "seed=7".into()]).unwrap();
        assert_eq!((cfg.adversarial.lambda, cfg.seed), (0.0, 7));
        assert!(PipelineConfig::load(None, &["adversarial.lamda=0".into()]).is_err());
        assert!(PipelineConfig::load(None, &["seed=abc".into()]).is_err());
        assert!(PipelineConfig::load(None, &["world.withheld_fraction=1.0".into()]).is_err());
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 1\n[world]\nsubjects = 5\nbogus = 2\n").unwrap();
        assert!(PipelineConfig::load(Some(&p), &[]).is_err());
        std::fs::write(&p, "seed = 1\n[world]\nsubjects = 5\n").unwrap();
        let cfg = PipelineConfig::load(Some(&p), &[]).unwrap();
        assert_eq!((cfg.seed, cfg.world.subjects, cfg.world.relations), (1, 5, 3));
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.adversarial.steps += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
