//! Low-rank adapters on the proxy's hidden and output projections.
//!
//! An adapter holds `B` (`out × r`, zero-initialised) and `A` (`r × in`, small
//! Gaussian) and contributes `scale · B·A` to a frozen base matrix. The
//! [`ProxyModel`] keeps the merged weights cached so inference costs the same
//! as the base model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{view, view_mut, ParamSet};
use crate::rng::{self, Rng};
use crate::tinylm::{LanguageModel, LmConfig, LmGrads, LmParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub b: Array2<f64>,
    pub a: Array2<f64>,
    /// `alpha / r`.
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(b: Array2<f64>, a: Array2<f64>, scale: f64) -> Result<Self> {
        let adapter = LoraAdapter { b, a, scale };
        adapter.validate()?;
        Ok(adapter)
    }

    /// `B = 0`, `A ~ N(0, 1/in)`.
    pub fn init(out_dim: usize, in_dim: usize, rank: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        check_rank(rank, out_dim, in_dim)?;
        let std = 1.0 / (in_dim as f64).sqrt();
        let a = Array2::from_shape_fn((rank, in_dim), |_| rng.sample::<f64, _>(StandardNormal) * std);
        Self::new(Array2::zeros((out_dim, rank)), a, scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b.ncols() != self.a.nrows() {
            return Err(Error::input(format!(
                "adapter rank mismatch: B has {} columns, A has {} rows",
                self.b.ncols(),
                self.a.nrows()
            )));
        }
        check_rank(self.rank(), self.out_dim(), self.in_dim())?;
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::input("adapter scale must be positive"));
        }
        if !self.b.iter().chain(self.a.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("adapter weights".into()));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.ncols()
    }

    /// `scale · B·A`.
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale
    }

    /// Chain a gradient w.r.t. the effective weight into `(dB, dA)`.
    pub fn chain_grad(&self, dw: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let db = dw.dot(&self.a.t()) * self.scale;
        let da = self.b.t().dot(dw) * self.scale;
        (db, da)
    }
}

fn check_rank(rank: usize, out_dim: usize, in_dim: usize) -> Result<()> {
    if rank == 0 || rank >= out_dim.min(in_dim) {
        return Err(Error::input(format!(
            "adapter rank {rank} must satisfy 0 < r < min({out_dim}, {in_dim})"
        )));
    }
    Ok(())
}

/// Effective weight `W0 + scale·B·A`.
pub fn apply_lora(w0: &Array2<f64>, adapter: &LoraAdapter) -> Result<Array2<f64>> {
    if w0.dim() != (adapter.out_dim(), adapter.in_dim()) {
        return Err(Error::input(format!(
            "base weight is {:?} but adapter expects ({}, {})",
            w0.dim(),
            adapter.out_dim(),
            adapter.in_dim()
        )));
    }
    Ok(w0 + &adapter.delta())
}

/// Squarings of the Gram matrix; `(MᵀM)^(2^40)` separates singular values
/// that differ in the 12th digit.
const MAX_SQUARINGS: usize = 40;

/// Largest singular value.
///
/// Power iteration on `G = MᵀM` (or `MMᵀ`, whichever is smaller) by repeated
/// squaring: after `s` squarings every column of `G` is `G^(2^s)` applied to a
/// basis vector, so the dominant column is aligned with the top singular
/// direction even when the top two singular values nearly coincide. The
/// result is `‖Mv‖/‖v‖` for that direction, so it never exceeds the exact
/// value.
pub fn spectral_norm(m: &Array2<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let tall = m.nrows() >= m.ncols();
    let mut g = if tall { m.t().dot(m) } else { m.dot(&m.t()) };
    let rayleigh = |v: ArrayView1<f64>| {
        let vn = v.dot(&v).sqrt();
        if vn == 0.0 {
            return 0.0;
        }
        let u = if tall { m.dot(&v) } else { m.t().dot(&v) };
        u.dot(&u).sqrt() / vn
    };
    let dominant = |g: &Array2<f64>| {
        (0..g.ncols()).max_by(|&a, &b| g.column(a).dot(&g.column(a)).total_cmp(&g.column(b).dot(&g.column(b)))).unwrap_or(0)
    };
    let mut sigma = rayleigh(g.column(dominant(&g)));
    for _ in 0..MAX_SQUARINGS {
        let scale = g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if scale == 0.0 || !scale.is_finite() {
            break;
        }
        g /= scale;
        g = g.dot(&g);
        let next = rayleigh(g.column(dominant(&g)));
        let done = (next - sigma).abs() <= 1e-15 * next;
        sigma = sigma.max(next);
        if done {
            break;
        }
    }
    sigma
}

/// `‖W0‖ + scale·‖B‖·‖A‖` with spectral norms: a Lipschitz constant of
/// `x ↦ (W0 + scale·B·A)x + b` by the triangle inequality and submultiplicativity.
pub fn lipschitz_bound(w0: &Array2<f64>, adapter: &LoraAdapter) -> Result<f64> {
    apply_lora(w0, adapter)?;
    Ok(spectral_norm(w0) + adapter.scale * spectral_norm(&adapter.b) * spectral_norm(&adapter.a))
}

/// Slack allowed above the bound before a trial counts as a violation.
pub const LIPSCHITZ_SLACK: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub bound: f64,
    pub max_ratio: f64,
    pub trials: usize,
    /// Trials with `x1 != x2`; identical pairs are skipped.
    pub evaluated: usize,
    pub violations: usize,
}

/// Evaluate `‖G(x1) − G(x2)‖ / ‖x1 − x2‖` for explicit pairs through the
/// adapted affine map `G(x) = (W0 + scale·B·A)x + bias`.
pub fn check_lipschitz_pairs(
    w0: &Array2<f64>,
    adapter: &LoraAdapter,
    bias: Option<&Array1<f64>>,
    pairs: &[(Array1<f64>, Array1<f64>)],
) -> Result<LipschitzReport> {
    let w = apply_lora(w0, adapter)?;
    let bound = lipschitz_bound(w0, adapter)?;
    let layer = |x: &Array1<f64>| -> Array1<f64> {
        let y = w.dot(x);
        match bias {
            Some(b) => y + b,
            None => y,
        }
    };
    let mut report = LipschitzReport { bound, max_ratio: 0.0, trials: pairs.len(), evaluated: 0, violations: 0 };
    for (x1, x2) in pairs {
        if x1.len() != w.ncols() || x2.len() != w.ncols() {
            return Err(Error::input("input dimension does not match layer"));
        }
        let dx = x1 - x2;
        let dx_norm = dx.dot(&dx).sqrt();
        if dx_norm == 0.0 {
            continue;
        }
        let dy = layer(x1) - layer(x2);
        let ratio = dy.dot(&dy).sqrt() / dx_norm;
        report.evaluated += 1;
        report.max_ratio = report.max_ratio.max(ratio);
        if ratio > bound + LIPSCHITZ_SLACK {
            report.violations += 1;
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptedLayer {
    Hidden,
    Output,
}

impl AdaptedLayer {
    pub fn name(self) -> &'static str {
        match self {
            AdaptedLayer::Hidden => "hidden",
            AdaptedLayer::Output => "output",
        }
    }
}

/// Trainable proxy parameters θ: one adapter per adapted projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyAdapters {
    pub hidden: LoraAdapter,
    pub output: LoraAdapter,
}

impl ProxyAdapters {
    pub fn init(config: &LmConfig, rank: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        Ok(ProxyAdapters {
            hidden: LoraAdapter::init(config.hidden_dim, config.input_dim(), rank, scale, rng)?,
            output: LoraAdapter::init(config.vocab_size, config.hidden_dim, rank, scale, rng)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &LoraAdapter| LoraAdapter {
            b: Array2::zeros(a.b.dim()),
            a: Array2::zeros(a.a.dim()),
            scale: a.scale,
        };
        ProxyAdapters { hidden: z(&self.hidden), output: z(&self.output) }
    }

    pub fn get(&self, layer: AdaptedLayer) -> &LoraAdapter {
        match layer {
            AdaptedLayer::Hidden => &self.hidden,
            AdaptedLayer::Output => &self.output,
        }
    }

    pub fn validate_for(&self, config: &LmConfig) -> Result<()> {
        self.hidden.validate()?;
        self.output.validate()?;
        if self.hidden.out_dim() != config.hidden_dim || self.hidden.in_dim() != config.input_dim() {
            return Err(Error::input("hidden adapter does not match model shape"));
        }
        if self.output.out_dim() != config.vocab_size || self.output.in_dim() != config.hidden_dim {
            return Err(Error::input("output adapter does not match model shape"));
        }
        Ok(())
    }
}

impl ParamSet for ProxyAdapters {
    fn slices(&self) -> Vec<&[f64]> {
        vec![view(&self.hidden.b), view(&self.hidden.a), view(&self.output.b), view(&self.output.a)]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            view_mut(&mut self.hidden.b),
            view_mut(&mut self.hidden.a),
            view_mut(&mut self.output.b),
            view_mut(&mut self.output.a),
        ]
    }
}

/// Frozen base weights plus adapters, with the merged weights cached.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyModel {
    base: LmParams,
    adapters: ProxyAdapters,
    merged: LmParams,
}

impl ProxyModel {
    pub fn new(base: LmParams, adapters: ProxyAdapters) -> Result<Self> {
        base.validate()?;
        adapters.validate_for(&base.config)?;
        let merged = merge(&base, &adapters)?;
        Ok(ProxyModel { base, adapters, merged })
    }

    pub fn base(&self) -> &LmParams {
        &self.base
    }

    pub fn adapters(&self) -> &ProxyAdapters {
        &self.adapters
    }

    pub fn merged(&self) -> &LmParams {
        &self.merged
    }

    pub fn set_adapters(&mut self, adapters: ProxyAdapters) -> Result<()> {
        adapters.validate_for(&self.base.config)?;
        self.merged = merge(&self.base, &adapters)?;
        self.adapters = adapters;
        Ok(())
    }

    /// Project full-model gradients onto the adapter factors; base weights
    /// stay frozen so their own gradients are discarded.
    pub fn adapter_grads(&self, g: &LmGrads) -> ProxyAdapters {
        let (hb, ha) = self.adapters.hidden.chain_grad(&g.w_hidden);
        let (ob, oa) = self.adapters.output.chain_grad(&g.w_out);
        ProxyAdapters {
            hidden: LoraAdapter { b: hb, a: ha, scale: self.adapters.hidden.scale },
            output: LoraAdapter { b: ob, a: oa, scale: self.adapters.output.scale },
        }
    }

    /// Random-pair Lipschitz check of every adapted layer.
    pub fn check_lipschitz(&self, trials: usize, seed: u64) -> Result<Vec<(AdaptedLayer, LipschitzReport)>> {
        if trials == 0 {
            return Err(Error::input("trials must be at least 1"));
        }
        let mut out = Vec::new();
        for (layer, w0, bias) in [
            (AdaptedLayer::Hidden, &self.base.w_hidden, &self.base.b_hidden),
            (AdaptedLayer::Output, &self.base.w_out, &self.base.b_out),
        ] {
            let mut rng = rng::stream(seed, layer.name());
            let dim = w0.ncols();
            let mut gauss = || Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
            let pairs: Vec<_> = (0..trials).map(|_| (gauss(), gauss())).collect();
            out.push((layer, check_lipschitz_pairs(w0, self.adapters.get(layer), Some(bias), &pairs)?));
        }
        Ok(out)
    }
}

impl LanguageModel for ProxyModel {
    fn vocab_size(&self) -> usize {
        self.merged.config.vocab_size
    }

    fn logits_batch(&self, contexts: &[Vec<usize>]) -> Result<Array2<f64>> {
        self.merged.logits_batch(contexts)
    }
}

fn merge(base: &LmParams, adapters: &ProxyAdapters) -> Result<LmParams> {
    let mut merged = base.clone();
    merged.w_hidden = apply_lora(&base.w_hidden, &adapters.hidden)?;
    merged.w_out = apply_lora(&base.w_out, &adapters.output)?;
    Ok(merged)
}

pub const ADAPTER_FORMAT: &str = "evidistill-lora/1";

/// Adapter weights stored apart from the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterCheckpoint {
    pub format: String,
    pub layers: Vec<AdapterLayerRecord>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterLayerRecord {
    pub target: AdaptedLayer,
    pub rank: usize,
    pub scale: f64,
    pub b: Array2<f64>,
    pub a: Array2<f64>,
}

impl AdapterCheckpoint {
    pub fn from_adapters(adapters: &ProxyAdapters, metadata: BTreeMap<String, String>) -> Self {
        let rec = |target, a: &LoraAdapter| AdapterLayerRecord {
            target,
            rank: a.rank(),
            scale: a.scale,
            b: a.b.clone(),
            a: a.a.clone(),
        };
        AdapterCheckpoint {
            format: ADAPTER_FORMAT.to_string(),
            layers: vec![rec(AdaptedLayer::Hidden, &adapters.hidden), rec(AdaptedLayer::Output, &adapters.output)],
            metadata,
        }
    }

    pub fn to_adapters(&self) -> Result<ProxyAdapters> {
        if self.format != ADAPTER_FORMAT {
            return Err(Error::input(format!("unsupported adapter format {:?}", self.format)));
        }
        let find = |target| {
            let rec = self
                .layers
                .iter()
                .find(|l| l.target == target)
                .ok_or_else(|| Error::input(format!("adapter checkpoint lacks layer {target:?}")))?;
            let adapter = LoraAdapter::new(rec.b.clone(), rec.a.clone(), rec.scale)?;
            if adapter.rank() != rec.rank {
                return Err(Error::input("adapter rank field disagrees with matrices"));
            }
            Ok(adapter)
        };
        Ok(ProxyAdapters { hidden: find(AdaptedLayer::Hidden)?, output: find(AdaptedLayer::Output)? })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn zero_adapter_leaves_weights_unchanged() {
        let mut rng = rng::from_seed(1);
        let w0 = random_matrix(5, 4, &mut rng);
        let ad = LoraAdapter::init(5, 4, 2, 2.0, &mut rng).unwrap();
        assert_eq!(apply_lora(&w0, &ad).unwrap(), w0);
    }

    #[test]
    fn hand_computed_rank_one_update() {
        let ad = LoraAdapter::new(array![[1.0], [0.0]], array![[0.0, 2.0]], 1.0).unwrap();
        let w = apply_lora(&Array2::zeros((2, 2)), &ad);
        // rank 1 is fine here: min(2, 2) = 2 > 1
        assert_eq!(w.unwrap(), array![[0.0, 2.0], [0.0, 0.0]]);
    }

    #[test]
    fn full_rank_adapter_is_rejected() {
        let mut rng = rng::from_seed(0);
        assert!(LoraAdapter::init(3, 4, 3, 1.0, &mut rng).is_err());
        assert!(LoraAdapter::init(3, 4, 0, 1.0, &mut rng).is_err());
        assert!(LoraAdapter::new(Array2::zeros((2, 2)), Array2::zeros((2, 2)), 1.0).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = rng::from_seed(0);
        let ad = LoraAdapter::init(4, 5, 2, 1.0, &mut rng).unwrap();
        assert!(apply_lora(&Array2::zeros((5, 4)), &ad).is_err());
        assert!(LoraAdapter::new(Array2::zeros((4, 2)), Array2::zeros((3, 5)), 1.0).is_err());
    }

    #[test]
    fn identity_bound_is_one() {
        let mut rng = rng::from_seed(2);
        let w0 = Array2::eye(2);
        let ad = LoraAdapter::new(Array2::zeros((2, 1)), random_matrix(1, 2, &mut rng), 1.0).unwrap();
        let l = lipschitz_bound(&w0, &ad).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_bound_is_product_of_norms() {
        let mut b = Array2::zeros((3, 1));
        b[[0, 0]] = 2.0;
        let mut a = Array2::zeros((1, 3));
        a[[0, 0]] = 3.0;
        let ad = LoraAdapter::new(b, a, 1.0).unwrap();
        let l = lipschitz_bound(&Array2::zeros((3, 3)), &ad).unwrap();
        assert!((l - 6.0).abs() < 1e-12);
    }

    #[test]
    fn identity_isometry_ratios_equal_bound() {
        let mut rng = rng::from_seed(3);
        let w0 = Array2::eye(3);
        let ad = LoraAdapter::new(Array2::zeros((3, 1)), random_matrix(1, 3, &mut rng), 1.0).unwrap();
        let pairs: Vec<_> = (0..20)
            .map(|_| {
                let x1 = Array1::from_shape_fn(3, |_| rng.sample::<f64, _>(StandardNormal));
                let x2 = Array1::from_shape_fn(3, |_| rng.sample::<f64, _>(StandardNormal));
                (x1, x2)
            })
            .collect();
        let r = check_lipschitz_pairs(&w0, &ad, None, &pairs).unwrap();
        assert_eq!(r.evaluated, 20);
        assert_eq!(r.violations, 0);
        assert!((r.max_ratio - 1.0).abs() < 1e-12);
        assert!((r.bound - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_is_skipped() {
        let mut rng = rng::from_seed(4);
        let w0 = random_matrix(3, 3, &mut rng);
        let ad = LoraAdapter::init(3, 3, 1, 1.0, &mut rng).unwrap();
        let x = Array1::from_vec(vec![1.0, -2.0, 0.5]);
        let r = check_lipschitz_pairs(&w0, &ad, None, &[(x.clone(), x)]).unwrap();
        assert_eq!(r.trials, 1);
        assert_eq!(r.evaluated, 0);
    }

    #[test]
    fn spectral_norm_of_zero_matrix_is_zero() {
        assert_eq!(spectral_norm(&Array2::zeros((3, 4))), 0.0);
    }

    #[test]
    fn adapter_checkpoint_round_trip() {
        let cfg = LmConfig { vocab_size: 6, embed_dim: 2, hidden_dim: 5, context_window: 3 };
        let mut rng = rng::from_seed(8);
        let mut ad = ProxyAdapters::init(&cfg, 2, 2.0, &mut rng).unwrap();
        ad.hidden.b[[1, 1]] = 0.25;
        let ck = AdapterCheckpoint::from_adapters(&ad, BTreeMap::new());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        ck.save(&p).unwrap();
        assert_eq!(AdapterCheckpoint::load(&p).unwrap().to_adapters().unwrap(), ad);
    }

    #[test]
    fn proxy_with_zero_b_matches_base() {
        let cfg = LmConfig { vocab_size: 6, embed_dim: 2, hidden_dim: 5, context_window: 3 };
        let mut rng = rng::from_seed(9);
        let base = LmParams::init(cfg, 0.5, &mut rng).unwrap();
        let ad = ProxyAdapters::init(&cfg, 2, 2.0, &mut rng).unwrap();
        let proxy = ProxyModel::new(base.clone(), ad).unwrap();
        assert_eq!(
            proxy.next_token_logits(&[1, 2]).unwrap(),
            base.next_token_logits(&[1, 2]).unwrap()
        );
    }
}
