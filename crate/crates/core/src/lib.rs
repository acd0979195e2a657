//! Proxy distillation against sampled-only language models and evidential
//! (Dirichlet) reliability scoring of their responses.
//!
//! The crate is organised bottom-up:
//!
//! - [`tinylm`]: small windowed MLP language models with hand-written gradients,
//!   used both as the sampled-only target and as the proxy base.
//! - [`lora`]: low-rank adapters on the proxy's projections and Lipschitz checks.
//! - [`distillset`]: prompt mixing, dual-temperature candidate collection and
//!   filtering into a distillation dataset.
//! - [`advtrain`]: the generator/discriminator distillation loop.
//! - [`evidence`]: top-K logit evidence, aleatoric/epistemic uncertainty and
//!   token/response reliability.
//! - [`metrics`]: AUROC, AUPR, ECE and correctness labeling.
//! - [`theory`]: missing-mass and KL decay experiments under Zipf outputs.
//! - [`world`]: the synthetic fact world the pipeline is evaluated in.

// Negated comparisons are how NaN is rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advtrain;
pub mod distillset;
pub mod error;
pub mod evidence;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod theory;
pub mod tinylm;
pub mod world;

#[cfg(test)]
mod testutil;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use evidence::{EvidenceVector, ResponseReliability, UncertaintyEstimate};
pub use lora::{LoraAdapter, ProxyAdapters, ProxyModel};
pub use tinylm::{LanguageModel, LmConfig, LmParams, LogitRow, Role, TokenSeq, Vocabulary, EOS};
