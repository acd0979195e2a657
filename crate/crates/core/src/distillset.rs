//! Building the distillation dataset from a target that can only be sampled.
//!
//! For each prompt the target produces one near-greedy response and a batch of
//! high-temperature responses. High-temperature responses that are too short,
//! repetitive or implausible under the proxy base are dropped; the remainder
//! is ranked by similarity to the near-greedy response and the best `M − 1`
//! are kept next to it.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tinylm::{log_softmax_at, sample_sequence, LanguageModel, TokenSeq};
use crate::world::Domain;

/// The only access the pipeline has to the target model.
pub trait SamplingTarget: Sync {
    fn sample(&self, prompt: &TokenSeq, temperature: f64, max_len: usize, seed: u64) -> Result<TokenSeq>;
}

/// Wraps a model so that only sampling is reachable.
pub struct BlackBox<M> {
    model: M,
}

impl<M: LanguageModel> BlackBox<M> {
    pub fn new(model: M) -> Self {
        BlackBox { model }
    }
}

impl<M: LanguageModel> SamplingTarget for BlackBox<M> {
    fn sample(&self, prompt: &TokenSeq, temperature: f64, max_len: usize, seed: u64) -> Result<TokenSeq> {
        sample_sequence(&self.model, prompt, temperature, max_len, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub source: Domain,
    pub prompt: TokenSeq,
}

/// `⌈N/2⌉` in-domain and `⌊N/2⌋` open-domain prompts, each drawn without
/// replacement, then shuffled together.
pub fn mix_prompts(
    in_domain: &[PromptRecord],
    open_domain: &[PromptRecord],
    n: usize,
    seed: u64,
) -> Result<Vec<PromptRecord>> {
    let n_open = n / 2;
    let n_in = n - n_open;
    if in_domain.len() < n_in || open_domain.len() < n_open {
        return Err(Error::input(format!(
            "need {n_in} in-domain and {n_open} open-domain prompts, have {} and {}",
            in_domain.len(),
            open_domain.len()
        )));
    }
    let pick = |pool: &[PromptRecord], k: usize, name: &str| {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng::stream(seed, name));
        idx.truncate(k);
        idx.into_iter().map(|i| pool[i].clone()).collect::<Vec<_>>()
    };
    let mut mixed = pick(in_domain, n_in, "mix-in");
    mixed.extend(pick(open_domain, n_open, "mix-open"));
    mixed.shuffle(&mut rng::stream(seed, "mix-shuffle"));
    Ok(mixed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub low_temperature: f64,
    pub high_temperature: f64,
    pub high_samples: usize,
    pub max_len: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig { low_temperature: 0.01, high_temperature: 0.8, high_samples: 14, max_len: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub prompt: TokenSeq,
    pub low: TokenSeq,
    pub high: Vec<TokenSeq>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        1 + self.high.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn collect_candidates<T: SamplingTarget + ?Sized>(
    target: &T,
    prompt: &TokenSeq,
    config: &CollectConfig,
    seed: u64,
) -> Result<CandidatePool> {
    if !(config.high_temperature > 0.5) {
        return Err(Error::input("high temperature must exceed 0.5"));
    }
    let tag = |e: Error| Error::Generation { prompt: format!("{:?}", prompt.ids()), reason: e.to_string() };
    let low = target
        .sample(prompt, config.low_temperature, config.max_len, rng::derive_seed(seed, "low"))
        .map_err(tag)?;
    let high_seed = rng::derive_seed(seed, "high");
    let high = (0..config.high_samples)
        .map(|j| {
            target
                .sample(prompt, config.high_temperature, config.max_len, rng::derive_indexed(high_seed, j as u64))
                .map_err(tag)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidatePool { prompt: prompt.clone(), low, high })
}

/// Cosine similarity of token-count vectors.
pub fn semantic_similarity(a: &TokenSeq, b: &TokenSeq) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("similarity of an empty sequence"));
    }
    let counts = |s: &TokenSeq| {
        let mut m: BTreeMap<usize, u64> = BTreeMap::new();
        for &id in s.ids() {
            *m.entry(id).or_default() += 1;
        }
        m
    };
    let (ca, cb) = (counts(a), counts(b));
    let dot: u64 = ca.iter().map(|(k, v)| v * cb.get(k).copied().unwrap_or(0)).sum();
    let na: u64 = ca.values().map(|v| v * v).sum();
    let nb: u64 = cb.values().map(|v| v * v).sum();
    // A single square root keeps identical sequences at exactly 1.
    Ok(dot as f64 / ((na * nb) as f64).sqrt())
}

/// True when some n-gram occurs at least `max_repeats` times.
pub fn is_repetitive(ids: &[usize], n: usize, max_repeats: usize) -> bool {
    if n == 0 || ids.len() < n {
        return false;
    }
    let mut seen: BTreeMap<&[usize], usize> = BTreeMap::new();
    for w in ids.windows(n) {
        let c = seen.entry(w).or_default();
        *c += 1;
        if *c >= max_repeats {
            return true;
        }
    }
    false
}

/// Perplexity of `response` after `prompt`, teacher-forced.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
    if response.is_empty() {
        return Ok(f64::INFINITY);
    }
    let contexts: Vec<Vec<usize>> = (0..response.len())
        .map(|t| prompt.ids().iter().chain(&response.ids()[..t]).copied().collect())
        .collect();
    let logits = model.logits_batch(&contexts)?;
    let mut nll = 0.0;
    for (row, &target) in logits.rows().into_iter().zip(response.ids()) {
        nll -= log_softmax_at(row.as_slice().expect("row-major logits"), target);
    }
    Ok((nll / response.len() as f64).exp())
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of finite values.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_len: usize,
    pub ngram: usize,
    pub max_ngram_repeats: usize,
    /// Discard high-temperature candidates above this perplexity percentile
    /// of the pool; `None` disables the filter.
    pub perplexity_percentile: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { min_len: 15, ngram: 4, max_ngram_repeats: 3, perplexity_percentile: Some(95.0) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    Length,
    Repetition,
    Perplexity,
    Selection,
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Filter::Length => "length",
            Filter::Repetition => "repetition",
            Filter::Perplexity => "perplexity",
            Filter::Selection => "selection",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub length: usize,
    pub repetition: usize,
    pub perplexity: usize,
    /// Survivors beyond the top `M − 1`.
    pub not_selected: usize,
}

impl FilterCounts {
    /// Filter with the most discards; ties go to the earlier filter.
    pub fn dominant(&self) -> Filter {
        let mut best = (Filter::Length, self.length);
        for (f, c) in [(Filter::Repetition, self.repetition), (Filter::Perplexity, self.perplexity)] {
            if c > best.1 {
                best = (f, c);
            }
        }
        best.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSample {
    pub prompt: TokenSeq,
    /// Low-temperature response first, then high-temperature picks by
    /// descending similarity.
    pub responses: Vec<TokenSeq>,
    pub similarities: Vec<f64>,
    pub counts: FilterCounts,
}

impl DistillSample {
    pub fn m(&self) -> usize {
        self.responses.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub reason: Filter,
    pub counts: FilterCounts,
    pub survivors: usize,
}

pub fn filter_and_select<M: LanguageModel + ?Sized>(
    pool: &CandidatePool,
    m: usize,
    config: &FilterConfig,
    base: Option<&M>,
) -> Result<std::result::Result<DistillSample, Rejection>> {
    if m == 0 {
        return Err(Error::input("M must be at least 1"));
    }
    let mut counts = FilterCounts::default();
    let too_short = |s: &TokenSeq| s.len() < config.min_len;
    let repetitive = |s: &TokenSeq| is_repetitive(s.ids(), config.ngram, config.max_ngram_repeats);
    if too_short(&pool.low) || repetitive(&pool.low) {
        let reason = if too_short(&pool.low) { Filter::Length } else { Filter::Repetition };
        return Ok(Err(Rejection { reason, counts, survivors: 0 }));
    }

    let mut alive: Vec<usize> = Vec::new();
    for (j, s) in pool.high.iter().enumerate() {
        if too_short(s) {
            counts.length += 1;
        } else if repetitive(s) {
            counts.repetition += 1;
        } else {
            alive.push(j);
        }
    }

    if let (Some(q), Some(model)) = (config.perplexity_percentile, base) {
        let ppl_low = perplexity(model, &pool.prompt, &pool.low)?;
        let ppl_high = pool
            .high
            .iter()
            .map(|s| perplexity(model, &pool.prompt, s))
            .collect::<Result<Vec<_>>>()?;
        let mut all = ppl_high.clone();
        all.push(ppl_low);
        if let Some(limit) = percentile(&all, q) {
            alive.retain(|&j| {
                let keep = ppl_high[j] <= limit;
                if !keep {
                    counts.perplexity += 1;
                }
                keep
            });
        }
    }

    let mut ranked = alive
        .into_iter()
        .map(|j| Ok((j, semantic_similarity(&pool.high[j], &pool.low)?)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let survivors = ranked.len();
    if survivors < m - 1 {
        return Ok(Err(Rejection { reason: counts.dominant(), counts, survivors }));
    }
    counts.not_selected = survivors - (m - 1);
    ranked.truncate(m - 1);
    let mut responses = vec![pool.low.clone()];
    let mut similarities = vec![1.0];
    for (j, sim) in ranked {
        responses.push(pool.high[j].clone());
        similarities.push(sim);
    }
    Ok(Ok(DistillSample { prompt: pool.prompt.clone(), responses, similarities, counts }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSetConfig {
    pub prompts: usize,
    pub responses_per_prompt: usize,
    pub collect: CollectConfig,
    pub filter: FilterConfig,
}

impl Default for DistillSetConfig {
    fn default() -> Self {
        DistillSetConfig {
            prompts: 100,
            responses_per_prompt: 10,
            collect: CollectConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub source: Domain,
    pub sample: DistillSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub id: String,
    pub source: Domain,
    pub rejection: Rejection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSet {
    pub accepted: Vec<DatasetRecord>,
    pub rejected: Vec<RejectionRecord>,
}

/// Mix prompts, collect candidates per prompt in parallel, filter and select.
/// Fails when every prompt is rejected, naming the filter that discarded most.
pub fn build_distill_set<T, M>(
    target: &T,
    base: Option<&M>,
    in_domain: &[PromptRecord],
    open_domain: &[PromptRecord],
    config: &DistillSetConfig,
    seed: u64,
) -> Result<DistillSet>
where
    T: SamplingTarget + ?Sized,
    M: LanguageModel + ?Sized,
{
    let prompts = mix_prompts(in_domain, open_domain, config.prompts, rng::derive_seed(seed, "mix"))?;
    let collect_seed = rng::derive_seed(seed, "collect");
    let outcomes = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let pool = collect_candidates(target, &p.prompt, &config.collect, rng::derive_indexed(collect_seed, i as u64))?;
            filter_and_select(&pool, config.responses_per_prompt, &config.filter, base)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = DistillSet { accepted: Vec::new(), rejected: Vec::new() };
    for (p, outcome) in prompts.into_iter().zip(outcomes) {
        match outcome {
            Ok(sample) => set.accepted.push(DatasetRecord { id: p.id, source: p.source, sample }),
            Err(rejection) => set.rejected.push(RejectionRecord { id: p.id, source: p.source, rejection }),
        }
    }
    if set.accepted.is_empty() && !set.rejected.is_empty() {
        let mut by_filter: BTreeMap<Filter, usize> = BTreeMap::new();
        for r in &set.rejected {
            *by_filter.entry(r.rejection.reason).or_default() += 1;
        }
        let worst = by_filter.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(f, _)| *f);
        return Err(Error::input(format!(
            "all {} prompts were rejected; most rejections by the {} filter",
            set.rejected.len(),
            worst.expect("non-empty")
        )));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{LmParams, Role};

    fn seq(ids: &[usize]) -> TokenSeq {
        TokenSeq::response(ids.to_vec())
    }

    fn records(n: usize, source: Domain, offset: usize) -> Vec<PromptRecord> {
        (0..n)
            .map(|i| PromptRecord {
                id: format!("{source:?}-{i}"),
                source,
                prompt: TokenSeq::prompt(vec![offset + i]).unwrap(),
            })
            .collect()
    }

    #[test]
    fn mixing_is_balanced_and_deterministic() {
        let a = records(60, Domain::InDomain, 0);
        let b = records(60, Domain::OpenDomain, 100);
        let m = mix_prompts(&a, &b, 100, 3).unwrap();
        assert_eq!(m.iter().filter(|p| p.source == Domain::InDomain).count(), 50);
        assert_eq!(m, mix_prompts(&a, &b, 100, 3).unwrap());
        assert!(mix_prompts(&a, &b, 0, 3).unwrap().is_empty());
        assert!(mix_prompts(&a[..10], &b, 100, 3).is_err());
        let odd = mix_prompts(&a, &b, 5, 3).unwrap();
        assert_eq!(odd.iter().filter(|p| p.source == Domain::InDomain).count(), 3);
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(semantic_similarity(&seq(&[1, 2, 3, 2]), &seq(&[1, 2, 3, 2])).unwrap(), 1.0);
        assert_eq!(semantic_similarity(&seq(&[1, 2]), &seq(&[3, 4])).unwrap(), 0.0);
        assert_eq!(semantic_similarity(&seq(&[1, 1, 2]), &seq(&[1, 2, 2])).unwrap(), 0.8);
        assert!(semantic_similarity(&seq(&[]), &seq(&[1])).is_err());
    }

    #[test]
    fn repetition_detection() {
        assert!(is_repetitive(&[1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4], 4, 3));
        assert!(!is_repetitive(&[1, 2, 3, 4, 1, 2, 3, 4], 4, 3));
        assert!(!is_repetitive(&[1, 2], 4, 3));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 50.0), Some(3.0));
        assert_eq!(percentile(&[1.0, 2.0], 95.0), Some(1.95));
        assert_eq!(percentile(&[], 95.0), None);
    }

    fn pool(low: Vec<usize>, high: Vec<Vec<usize>>) -> CandidatePool {
        CandidatePool {
            prompt: TokenSeq::prompt(vec![1]).unwrap(),
            low: seq(&low),
            high: high.iter().map(|h| seq(h)).collect(),
        }
    }

    fn long(first: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (1..16).collect();
        v[0] = first;
        v
    }

    const NO_MODEL: Option<&LmParams> = None;

    #[test]
    fn selects_low_plus_top_m_minus_one() {
        let high: Vec<Vec<usize>> = (0..14).map(|j| long(20 + j)).collect();
        let p = pool(long(1), high);
        let s = filter_and_select(&p, 10, &FilterConfig::default(), NO_MODEL).unwrap().unwrap();
        assert_eq!(s.m(), 10);
        assert_eq!(s.responses[0], p.low);
        assert_eq!(s.counts.not_selected, 5);
    }

    #[test]
    fn short_candidates_cause_rejection() {
        let p = pool(long(1), vec![vec![1, 2, 3]; 14]);
        let r = filter_and_select(&p, 10, &FilterConfig::default(), NO_MODEL).unwrap().unwrap_err();
        assert_eq!(r.reason, Filter::Length);
        assert_eq!(r.counts.length, 14);
    }

    #[test]
    fn m_one_keeps_only_low() {
        let p = pool(long(1), vec![long(2); 3]);
        let s = filter_and_select(&p, 1, &FilterConfig::default(), NO_MODEL).unwrap().unwrap();
        assert_eq!(s.responses, vec![p.low.clone()]);
        assert!(filter_and_select(&p, 0, &FilterConfig::default(), NO_MODEL).is_err());
    }

    #[test]
    fn ranking_prefers_similar_candidates() {
        let mut near = long(1);
        near[14] = 30;
        let far: Vec<usize> = (40..55).collect();
        let p = pool(long(1), vec![far.clone(), near.clone(), far]);
        let s = filter_and_select(&p, 2, &FilterConfig::default(), NO_MODEL).unwrap().unwrap();
        assert_eq!(s.responses[1].ids(), near.as_slice());
    }

    struct Echo;

    impl SamplingTarget for Echo {
        fn sample(&self, prompt: &TokenSeq, t: f64, max_len: usize, seed: u64) -> Result<TokenSeq> {
            let mut ids = prompt.ids().to_vec();
            ids.push((seed % 7) as usize + if t < 0.5 { 0 } else { 10 });
            ids.truncate(max_len);
            TokenSeq::new(ids, Role::Response)
        }
    }

    #[test]
    fn pools_have_expected_size_and_are_reproducible() {
        let prompt = TokenSeq::prompt(vec![3, 4]).unwrap();
        let cfg = CollectConfig::default();
        let a = collect_candidates(&Echo, &prompt, &cfg, 9).unwrap();
        assert_eq!(a.len(), 15);
        assert_eq!(a, collect_candidates(&Echo, &prompt, &cfg, 9).unwrap());
        let none = CollectConfig { high_samples: 0, ..cfg };
        assert_eq!(collect_candidates(&Echo, &prompt, &none, 9).unwrap().len(), 1);
    }
}
