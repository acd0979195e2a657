//! Missing-mass and KL decay under Zipf-distributed outputs.
//!
//! A [`ZipfModel`] stands in for a response distribution with a long tail.
//! [`run_decay_experiment`] draws `k` samples repeatedly, measures the missing
//! mass `U_k` and the KL divergence to a smoothed empirical estimate, and fits
//! the decay exponent of `E[U_k]` against the predicted `(α−1)/α`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0, 0.0);
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// `p_i ∝ i^(−α)` for `i = 1..=n`. Exponents `α ≤ 1` are allowed but logged,
/// since the decay results assume `α > 1`.
pub fn zipf_probs(n: usize, alpha: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::input(format!("Zipf support must have at least 2 outcomes, got {n}")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::input(format!("Zipf exponent must be positive, got {alpha}")));
    }
    if alpha <= 1.0 {
        log::warn!("Zipf exponent {alpha} <= 1 is outside the decay model");
    }
    let weights: Vec<f64> = (1..=n).map(|i| (i as f64).powf(-alpha)).collect();
    let total = kahan_sum(weights.iter().copied());
    Ok(weights.into_iter().map(|w| w / total).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZipfModel {
    alpha: f64,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl ZipfModel {
    pub fn new(n: usize, alpha: f64) -> Result<Self> {
        let probs = zipf_probs(n, alpha)?;
        let mut cdf = Vec::with_capacity(n);
        let (mut sum, mut comp) = (0.0, 0.0);
        for &p in &probs {
            let y = p - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
            cdf.push(sum);
        }
        *cdf.last_mut().expect("n >= 2") = 1.0;
        Ok(ZipfModel { alpha, probs, cdf })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support(&self) -> usize {
        self.probs.len()
    }

    pub fn out_of_model(&self) -> bool {
        self.alpha <= 1.0
    }

    /// Predicted decay exponent `(α−1)/α`.
    pub fn beta(&self) -> f64 {
        (self.alpha - 1.0) / self.alpha
    }

    /// Outcome for a uniform draw `u ∈ [0, 1)`.
    pub fn sample_index(&self, u: f64) -> usize {
        self.cdf.partition_point(|&c| c <= u).min(self.probs.len() - 1)
    }
}

fn check_probs(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::input("probabilities must be finite and non-negative"));
    }
    Ok(())
}

/// Total probability of outcomes not in `observed`.
pub fn missing_mass(p: &[f64], observed: &[usize]) -> Result<f64> {
    check_probs(p)?;
    let mut seen = vec![false; p.len()];
    for &i in observed {
        *seen.get_mut(i).ok_or_else(|| Error::input(format!("observed index {i} out of range")))? = true;
    }
    Ok(kahan_sum(p.iter().zip(&seen).filter(|(_, s)| !**s).map(|(v, _)| *v)))
}

/// `H(v) = Σ p_i` over outcomes with `p_i ≤ v`.
pub fn concentration(p: &[f64], v: f64) -> Result<f64> {
    check_probs(p)?;
    if !(v >= 0.0) {
        return Err(Error::input("concentration threshold must be non-negative"));
    }
    Ok(kahan_sum(p.iter().copied().filter(|&x| x <= v)))
}

/// `D_KL(P ‖ P̂)` with `P̂_i = (c_i + s) / (Σc + s·n)`.
pub fn empirical_kl(p: &[f64], counts: &[u64], smoothing: f64) -> Result<f64> {
    check_probs(p)?;
    if counts.len() != p.len() {
        return Err(Error::input("counts and probabilities differ in length"));
    }
    if !(smoothing > 0.0) || !smoothing.is_finite() {
        return Err(Error::input("smoothing must be positive"));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::input("at least one observation is required"));
    }
    let denom = total as f64 + smoothing * p.len() as f64;
    Ok(kl_terms(p, counts, smoothing, denom).max(0.0))
}

fn kl_terms(p: &[f64], counts: &[u64], smoothing: f64, denom: f64) -> f64 {
    kahan_sum(
        p.iter()
            .zip(counts)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(&pi, &c)| pi * (pi * denom / (c as f64 + smoothing)).ln()),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayConfig {
    pub support: usize,
    pub alpha: f64,
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub delta: f64,
    pub smoothing: f64,
    /// Allowed distance between the fitted slope and `−β`.
    pub slope_tolerance: f64,
}

impl Default for DecayConfig {
    fn default() -> Self {
        DecayConfig {
            support: 100_000,
            alpha: 2.0,
            ks: vec![100, 1_000, 10_000, 100_000],
            repeats: 200,
            delta: 0.1,
            smoothing: 0.5,
            slope_tolerance: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub k: usize,
    pub mean_u: f64,
    pub std_u: f64,
    pub mean_kl: f64,
    pub hoeffding_band: f64,
    pub hoeffding_violation_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFitReport {
    pub alpha: f64,
    pub support: usize,
    pub repeats: usize,
    pub rows: Vec<DecayRow>,
    /// Number of largest-k grid points used in the fit.
    pub fit_points: usize,
    pub slope: f64,
    pub intercept: f64,
    pub beta: f64,
    pub c1: f64,
    pub c2: f64,
    pub delta: f64,
    pub out_of_model: bool,
    pub slope_ok: bool,
    pub kl_monotone: bool,
    pub hoeffding_ok: bool,
    pub pass: bool,
}

/// Hoeffding half-width `√(ln(2/δ) / (2k))`.
pub fn hoeffding_band(k: usize, delta: f64) -> f64 {
    ((2.0 / delta).ln() / (2.0 * k as f64)).sqrt()
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::input("linear fit needs at least two paired points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::input("linear fit needs distinct x values"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

struct RepeatResult {
    u: Vec<f64>,
    kl: Vec<f64>,
}

fn run_repeat(model: &ZipfModel, ks: &[usize], smoothing: f64, seed: u64) -> RepeatResult {
    let mut rng = rng::from_seed(seed);
    let p = model.probs();
    let mut counts = vec![0u64; p.len()];
    let mut u = Vec::with_capacity(ks.len());
    let mut kl = Vec::with_capacity(ks.len());
    for &k in ks {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..k {
            counts[model.sample_index(rng.random())] += 1;
        }
        u.push(kahan_sum(p.iter().zip(&counts).filter(|(_, c)| **c == 0).map(|(v, _)| *v)));
        let denom = k as f64 + smoothing * p.len() as f64;
        kl.push(kl_terms(p, &counts, smoothing, denom).max(0.0));
    }
    RepeatResult { u, kl }
}

/// Monte-Carlo decay experiment; repeats run in parallel on per-repeat seeds
/// and are reduced in repeat order, so the report depends only on the seed.
pub fn run_decay_experiment(model: &ZipfModel, config: &DecayConfig, seed: u64) -> Result<DecayFitReport> {
    let mut ks = config.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    if ks.len() < 3 || ks[0] == 0 {
        return Err(Error::input("decay experiment needs at least 3 distinct positive k values"));
    }
    if config.repeats == 0 {
        return Err(Error::input("repeats must be at least 1"));
    }
    if !(config.delta > 0.0 && config.delta < 1.0) {
        return Err(Error::input("delta must be in (0, 1)"));
    }
    if !(config.smoothing > 0.0) {
        return Err(Error::input("smoothing must be positive"));
    }
    let base = rng::derive_seed(seed, "decay");
    let results: Vec<RepeatResult> = (0..config.repeats)
        .into_par_iter()
        .map(|r| run_repeat(model, &ks, config.smoothing, rng::derive_indexed(base, r as u64)))
        .collect();

    let reps = config.repeats as f64;
    let mut rows = Vec::with_capacity(ks.len());
    for (j, &k) in ks.iter().enumerate() {
        let us: Vec<f64> = results.iter().map(|r| r.u[j]).collect();
        let mean_u = us.iter().sum::<f64>() / reps;
        let var = if config.repeats > 1 {
            us.iter().map(|v| (v - mean_u).powi(2)).sum::<f64>() / (reps - 1.0)
        } else {
            0.0
        };
        let band = hoeffding_band(k, config.delta);
        let outside = us.iter().filter(|v| (*v - mean_u).abs() > band).count();
        rows.push(DecayRow {
            k,
            mean_u,
            std_u: var.sqrt(),
            mean_kl: results.iter().map(|r| r.kl[j]).sum::<f64>() / reps,
            hoeffding_band: band,
            hoeffding_violation_rate: outside as f64 / reps,
        });
    }

    let fit_points = ks.len().div_ceil(2).max(3);
    let tail = &rows[rows.len() - fit_points..];
    if tail.iter().any(|r| r.mean_u <= 0.0) {
        return Err(Error::NonFinite("mean missing mass reached 0; grid too large for the support".into()));
    }
    let lx: Vec<f64> = tail.iter().map(|r| (r.k as f64).ln()).collect();
    let ly: Vec<f64> = tail.iter().map(|r| r.mean_u.ln()).collect();
    let (slope, intercept) = linear_fit(&lx, &ly)?;
    if !slope.is_finite() {
        return Err(Error::NonFinite("fitted slope".into()));
    }
    let gamma = -slope;
    let c1 = intercept.exp();
    let log_term = (1.0 / config.delta).ln();
    let c2 = rows
        .iter()
        .map(|r| {
            let k = r.k as f64;
            (r.mean_kl - c1 * k.powf(-gamma)) / (log_term / k).sqrt()
        })
        .fold(0.0, f64::max);

    let beta = model.beta();
    let slope_ok = (slope + beta).abs() <= config.slope_tolerance;
    let kl_monotone = rows.windows(2).all(|w| w[1].mean_kl <= w[0].mean_kl);
    let hoeffding_ok = rows.iter().all(|r| r.hoeffding_violation_rate <= config.delta);
    Ok(DecayFitReport {
        alpha: model.alpha(),
        support: model.support(),
        repeats: config.repeats,
        rows,
        fit_points,
        slope,
        intercept,
        beta,
        c1,
        c2,
        delta: config.delta,
        out_of_model: model.out_of_model(),
        slope_ok,
        kl_monotone,
        hoeffding_ok,
        pass: slope_ok && kl_monotone && hoeffding_ok && !model.out_of_model(),
    })
}
