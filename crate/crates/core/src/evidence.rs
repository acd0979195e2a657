//! Dirichlet evidence from top-K logits and the reliability scores built on it.
//!
//! For one decoding step the K largest logits are rectified into evidence
//! `α_k = max(z_k, 0)`. Aleatoric uncertainty is the expected entropy under
//! `Dir(α)`, epistemic uncertainty is `K / Σ(α_k + 1)`, and token reliability
//! is `R = −AU·EU`. A response is scored by averaging its least reliable tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::LanguageModel;

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_FRACTION: f64 = 0.2;

/// B_{2k}/(2k) for k = 1..7.
const DIGAMMA_ASYMP: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

/// Digamma function ψ(x) for `x > 0`.
///
/// Shifts `x` up to at least 6 with `ψ(x) = ψ(x+1) − 1/x`, then applies the
/// asymptotic expansion `ln x − 1/(2x) − Σ B_{2k}/(2k·x^{2k})`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("digamma requires a finite x > 0, got {x}")));
    }
    let mut result = 0.0;
    let mut xx = x;
    while xx < 6.0 {
        result -= 1.0 / xx;
        xx += 1.0;
    }
    result += xx.ln() - 0.5 / xx;
    let inv_x2 = 1.0 / (xx * xx);
    let mut term = inv_x2;
    for c in DIGAMMA_ASYMP {
        result -= c * term;
        term *= inv_x2;
    }
    Ok(result)
}

/// Top-K evidence for a single decoding step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceVector {
    alphas: Vec<f64>,
    alpha0: f64,
    token_ids: Vec<usize>,
}

impl EvidenceVector {
    /// Evidence not tied to particular tokens.
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        let ids = (0..alphas.len()).collect();
        Self::with_tokens(alphas, ids)
    }

    fn with_tokens(alphas: Vec<f64>, token_ids: Vec<usize>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::input("evidence needs K >= 1"));
        }
        if alphas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::input("evidence must be finite and non-negative"));
        }
        let alpha0 = alphas.iter().sum();
        Ok(EvidenceVector { alphas, alpha0, token_ids })
    }

    pub fn k(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    /// Vocabulary indices the evidence was read from, in descending-logit order.
    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }
}

/// Keep the `k` largest logits (ties to the lower token index) and rectify.
pub fn evidence_from_logits(z: &[f64], k: usize) -> Result<EvidenceVector> {
    if k == 0 || k > z.len() {
        return Err(Error::input(format!("top-K must be in 1..={}, got {k}", z.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    order.truncate(k);
    let alphas = order.iter().map(|&i| z[i].max(0.0)).collect();
    EvidenceVector::with_tokens(alphas, order)
}

/// Expected entropy under `Dir(α)`; `ln K` when there is no evidence at all.
pub fn aleatoric(ev: &EvidenceVector) -> f64 {
    let k = ev.k() as f64;
    if ev.alpha0 == 0.0 {
        return k.ln();
    }
    let psi0 = digamma(ev.alpha0 + 1.0).expect("alpha0 + 1 > 0");
    let mut au = 0.0;
    for &a in &ev.alphas {
        if a > 0.0 {
            au -= a / ev.alpha0 * (digamma(a + 1.0).expect("a + 1 > 0") - psi0);
        }
    }
    au.max(0.0)
}

/// `K / Σ(α_k + 1)`, in `(0, 1]`.
pub fn epistemic(ev: &EvidenceVector) -> f64 {
    let k = ev.k() as f64;
    k / (ev.alpha0 + k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    pub position: usize,
    pub au: f64,
    pub eu: f64,
    pub r: f64,
}

pub fn token_reliability(ev: &EvidenceVector, position: usize) -> UncertaintyEstimate {
    let au = aleatoric(ev);
    let eu = epistemic(ev);
    UncertaintyEstimate { position, au, eu, r: -au * eu }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseReliability {
    pub r_response: f64,
    pub k_star: usize,
    /// Positions of the averaged tokens, least reliable first.
    pub positions: Vec<usize>,
}

/// Number of tokens averaged for a response of `n` tokens.
pub fn k_star(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Mean `R` over the `K*` least reliable tokens; equal `R` values prefer the
/// earlier position.
pub fn response_reliability(tokens: &[UncertaintyEstimate], fraction: f64) -> Result<ResponseReliability> {
    if tokens.is_empty() {
        return Err(Error::input("cannot score an empty response"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::input(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let ks = k_star(tokens.len(), fraction);
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&a, &b| tokens[a].r.total_cmp(&tokens[b].r).then(a.cmp(&b)));
    order.truncate(ks);
    let r_response = order.iter().map(|&i| tokens[i].r).sum::<f64>() / ks as f64;
    Ok(ResponseReliability {
        r_response,
        k_star: ks,
        positions: order.iter().map(|&i| tokens[i].position).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvidenceConfig {
    pub top_k: usize,
    pub fraction: f64,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        EvidenceConfig { top_k: DEFAULT_TOP_K, fraction: DEFAULT_FRACTION }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub tokens: Vec<UncertaintyEstimate>,
    pub evidence: Vec<EvidenceVector>,
    pub reliability: ResponseReliability,
}

/// Teacher-force `response` after `prompt` through `model` and score every
/// response position from the logits that predicted it.
pub fn score_response<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[usize],
    response: &[usize],
    config: &EvidenceConfig,
) -> Result<ScoredResponse> {
    if prompt.is_empty() {
        return Err(Error::input("prompt must be non-empty"));
    }
    if response.is_empty() {
        return Err(Error::input("cannot score an empty response"));
    }
    let contexts: Vec<Vec<usize>> = (0..response.len())
        .map(|t| prompt.iter().chain(&response[..t]).copied().collect())
        .collect();
    let logits = model.logits_batch(&contexts)?;
    let mut tokens = Vec::with_capacity(response.len());
    let mut evidence = Vec::with_capacity(response.len());
    for (t, row) in logits.rows().into_iter().enumerate() {
        let ev = evidence_from_logits(row.as_slice().expect("row-major logits"), config.top_k)?;
        tokens.push(token_reliability(&ev, t));
        evidence.push(ev);
    }
    let reliability = response_reliability(&tokens, config.fraction)?;
    Ok(ScoredResponse { tokens, evidence, reliability })
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    fn ev(a: &[f64]) -> EvidenceVector {
        EvidenceVector::new(a.to_vec()).unwrap()
    }

    #[test]
    fn digamma_known_values() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-12);
        assert!((digamma(2.0).unwrap() - (1.0 - EULER_GAMMA)).abs() < 1e-12);
        let half = -EULER_GAMMA - 2.0 * std::f64::consts::LN_2;
        assert!((digamma(0.5).unwrap() - half).abs() < 1e-12);
    }

    #[test]
    fn digamma_rejects_non_positive() {
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.5).is_err());
        assert!(digamma(f64::NAN).is_err());
    }

    #[test]
    fn top_k_with_relu() {
        let e = evidence_from_logits(&[3.0, 1.0, -2.0, 0.5], 3).unwrap();
        assert_eq!(e.alphas(), &[3.0, 1.0, 0.5]);
        assert_eq!(e.token_ids(), &[0, 1, 3]);
        assert_eq!(e.alpha0(), 4.5);
    }

    #[test]
    fn negative_logits_give_zero_evidence() {
        let e = evidence_from_logits(&[-1.0, -3.0, -0.5], 3).unwrap();
        assert_eq!(e.alphas(), &[0.0, 0.0, 0.0]);
        assert_eq!(e.alpha0(), 0.0);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let e = evidence_from_logits(&[1.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(e.token_ids(), &[0]);
    }

    #[test]
    fn bad_k_is_rejected() {
        assert!(evidence_from_logits(&[1.0, 2.0], 0).is_err());
        assert!(evidence_from_logits(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        // ψ(2) − ψ(3) = −1/2
        assert!((aleatoric(&ev(&[1.0, 1.0])) - 0.5).abs() < 1e-12);
        assert!(aleatoric(&ev(&[2.0, 0.0])).abs() < 1e-12);
        assert!((epistemic(&ev(&[0.0; 4])) - 1.0).abs() < 1e-15);
        assert!((epistemic(&ev(&[1.0, 1.0])) - 0.5).abs() < 1e-15);
        assert!((epistemic(&ev(&[9.0, 9.0])) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn large_uniform_evidence_approaches_ln_k() {
        let au = aleatoric(&ev(&[1e6; 5]));
        assert!((au - 5f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn reliability_examples() {
        assert!((token_reliability(&ev(&[1.0, 1.0]), 0).r + 0.25).abs() < 1e-12);
        assert_eq!(token_reliability(&ev(&[2.0, 0.0]), 0).r, 0.0);
        let deg = token_reliability(&ev(&[0.0, 0.0]), 0);
        assert!((deg.r + std::f64::consts::LN_2).abs() < 1e-15);
    }

    fn est(rs: &[f64]) -> Vec<UncertaintyEstimate> {
        rs.iter()
            .enumerate()
            .map(|(i, &r)| UncertaintyEstimate { position: i, au: 0.0, eu: 0.0, r })
            .collect()
    }

    #[test]
    fn response_uses_least_reliable_tokens() {
        let r = response_reliability(&est(&[-0.9, -0.1, -0.2, -0.3, -0.05]), 0.2).unwrap();
        assert_eq!(r.k_star, 1);
        assert_eq!(r.r_response, -0.9);
        assert_eq!(r.positions, vec![0]);
    }

    #[test]
    fn full_fraction_is_plain_mean() {
        let rs = [-0.4, -0.1, -0.25, 0.0];
        let r = response_reliability(&est(&rs), 1.0).unwrap();
        assert!((r.r_response - rs.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn single_token_and_ties() {
        let r = response_reliability(&est(&[-0.3]), 0.01).unwrap();
        assert_eq!((r.k_star, r.r_response), (1, -0.3));
        let tied = response_reliability(&est(&[-0.1, -0.5, -0.5, -0.2, 0.0]), 0.2).unwrap();
        assert_eq!(tied.positions, vec![1]);
    }

    #[test]
    fn empty_response_is_rejected() {
        assert!(response_reliability(&[], 0.2).is_err());
        assert!(response_reliability(&est(&[-0.1]), 0.0).is_err());
    }
}
