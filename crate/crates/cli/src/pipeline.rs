//! The pipeline commands. Each one reads its inputs from the run directory,
//! writes into its own stage directory and finishes with a manifest.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};

use evidistill::advtrain::{run_adversarial, StepRecord, ValSnapshot};
use evidistill::distillset::{build_distill_set, BlackBox, DistillSample, FilterCounts, PromptRecord, SamplingTarget};
use evidistill::evidence::score_response;
use evidistill::lora::{AdaptedLayer, AdapterCheckpoint, LipschitzReport};
use evidistill::metrics::{self, evaluate, label_correctness, CalibrationReport, LabeledScore, MetricsReport};
use evidistill::rng::{derive_indexed, derive_seed};
use evidistill::theory::{run_decay_experiment, DecayFitReport, ZipfModel};
use evidistill::tinylm::{train_lm, LmCheckpoint, TrainLmConfig, TrainLmReport};
use evidistill::world::{Domain, Fact, QaItem, Split, World};
use evidistill::{LanguageModel, ProxyModel, Role, Vocabulary};

use crate::config::PipelineConfig;
use crate::io::{num, opt_num, read_json, read_jsonl, read_lines, require};
use crate::manifest::{RunManifest, Stage};

pub const WORLD_DIR: &str = "world";
pub const TARGET_DIR: &str = "target";
pub const BASE_DIR: &str = "base";
pub const COLLECT_DIR: &str = "collect";
pub const DISTILL_DIR: &str = "distill";
pub const SCORE_DIR: &str = "score";
pub const EVAL_DIR: &str = "eval";
pub const THEORY_DIR: &str = "theory";
pub const PLOT_DIR: &str = "plots";

/// The two proxies compared by `score` and `eval`.
pub const PROXIES: [&str; 2] = ["distilled", "base"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub domain: Domain,
    pub fact: usize,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: String,
    pub split: Split,
    pub gold: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub facts: usize,
    pub withheld: usize,
    pub base_known: usize,
    pub qa_items: usize,
    pub vocab_size: usize,
    pub target_corpus_lines: usize,
    pub base_corpus_lines: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetLine {
    pub id: String,
    pub source: Domain,
    pub prompt: String,
    /// Low-temperature response first.
    pub responses: Vec<String>,
    pub similarities: Vec<f64>,
    pub filter_counts: FilterCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionLine {
    pub id: String,
    pub source: Domain,
    pub reason: String,
    pub filter_counts: FilterCounts,
    pub survivors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseLine {
    pub id: String,
    pub item: String,
    pub domain: Domain,
    pub prompt: String,
    pub response: String,
}

/// The fields `score` needs; other fields in a responses file are ignored.
#[derive(Clone, Debug, Deserialize)]
pub struct ScoreInput {
    pub id: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectSummary {
    pub prompts: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub rejections_by_filter: BTreeMap<String, usize>,
    pub eval_responses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzLine {
    pub layer: AdaptedLayer,
    pub report: LipschitzReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub train_samples: usize,
    pub val_samples: usize,
    pub steps: usize,
    pub disc_updates: usize,
    pub proxy_updates: usize,
    pub best_step: usize,
    pub step0: ValSnapshot,
    pub best: ValSnapshot,
    pub last: ValSnapshot,
    pub warmup_disc_loss_first: Option<f64>,
    pub warmup_disc_loss_last: Option<f64>,
    pub lipschitz: Vec<LipschitzLine>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub position: usize,
    pub token: String,
    pub alpha0: f64,
    pub top_alpha: f64,
    pub au: f64,
    pub eu: f64,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    /// Set when the response could not be scored (e.g. it is empty).
    pub flag: Option<String>,
    pub n_tokens: usize,
    pub r_response: Option<f64>,
    pub k_star: Option<usize>,
    pub least_reliable: Vec<usize>,
    pub tokens: Vec<TokenScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetAccuracy {
    pub known: f64,
    pub withheld: f64,
    pub known_n: usize,
    pub withheld_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub responses: usize,
    pub flagged: usize,
    pub target_accuracy: TargetAccuracy,
    pub distilled: MetricsReport,
    pub base: MetricsReport,
    pub auroc_gain: f64,
    pub distilled_beats_base: bool,
}

/// Evaluation responses, per-proxy labeled scores, and the number of
/// responses left out because a scorer flagged them.
pub type LabeledRun = (Vec<ResponseLine>, BTreeMap<&'static str, Vec<LabeledScore>>, usize);

/// A run directory plus the resolved configuration.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>) -> Self {
        Pipeline { config, out: out.into() }
    }

    fn path(&self, dir: &str, file: &str) -> PathBuf {
        self.out.join(dir).join(file)
    }

    fn seed(&self, name: &str) -> u64 {
        derive_seed(self.config.seed, name)
    }

    pub fn gen_world(&self) -> Result<RunManifest> {
        let world = World::generate(&self.config.world, self.seed("world"))?;
        let mut st = Stage::begin(&self.out, WORLD_DIR, "gen-world")?;
        st.write_json("vocab.json", &world.vocab)?;
        st.write_jsonl("facts.jsonl", &world.facts)?;
        let qa: Vec<QaRecord> = world
            .qa
            .iter()
            .map(|q| QaRecord { id: q.id.clone(), domain: q.domain, fact: q.fact, prompt: q.prompt.clone() })
            .collect();
        st.write_jsonl("qa.jsonl", &qa)?;
        let gold: Vec<GoldRecord> = world
            .qa
            .iter()
            .map(|q| GoldRecord { id: q.id.clone(), split: world.facts[q.fact].split, gold: q.gold.clone() })
            .collect();
        st.write_jsonl("gold.jsonl", &gold)?;
        let target = world.target_corpus();
        let base = world.base_corpus();
        st.write_bytes("target_corpus.txt", lines(&target).as_bytes())?;
        st.write_bytes("base_corpus.txt", lines(&base).as_bytes())?;
        st.write_json(
            "summary.json",
            &WorldSummary {
                facts: world.facts.len(),
                withheld: world.facts.iter().filter(|f| f.split == Split::Withheld).count(),
                base_known: world.facts.iter().filter(|f| f.base_known).count(),
                qa_items: world.qa.len(),
                vocab_size: world.vocab.len(),
                target_corpus_lines: target.len(),
                base_corpus_lines: base.len(),
            },
        )?;
        st.finish(&self.config)
    }

    pub fn load_world(&self) -> Result<World> {
        let p = |f| require(&self.path(WORLD_DIR, f), &format!("world file {f}"), "gen-world");
        let vocab: Vocabulary = read_json(&p("vocab.json")?)?;
        let facts: Vec<Fact> = read_jsonl(&p("facts.jsonl")?)?;
        let qa: Vec<QaRecord> = read_jsonl(&p("qa.jsonl")?)?;
        let gold: HashMap<String, GoldRecord> =
            read_jsonl::<GoldRecord>(&p("gold.jsonl")?)?.into_iter().map(|g| (g.id.clone(), g)).collect();
        let qa = qa
            .into_iter()
            .map(|q| {
                let g = gold.get(&q.id).ok_or_else(|| anyhow!("QA item {} has no gold record", q.id))?;
                if q.fact >= facts.len() {
                    bail!("QA item {} refers to missing fact {}", q.id, q.fact);
                }
                Ok(QaItem { id: q.id, prompt: q.prompt, domain: q.domain, fact: q.fact, gold: g.gold.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(World { config: self.config.world.clone(), vocab, facts, qa })
    }

    fn train(&self, dir: &str, command: &str, corpus_file: &str, cfg: &TrainLmConfig) -> Result<RunManifest> {
        let world = self.load_world()?;
        let corpus_path = require(&self.path(WORLD_DIR, corpus_file), "training corpus", "gen-world")?;
        let corpus = world.encode_lines(&read_lines(&corpus_path)?)?;
        info!("{command}: {} sequences, vocab {}", corpus.len(), world.vocab.len());
        let (params, report) = train_lm(&corpus, world.vocab.len(), cfg, self.seed(dir))?;
        info!("{command}: nll {:.4} -> {:.4}", report.initial_nll, report.final_nll);
        let mut st = Stage::begin(&self.out, dir, command)?;
        let bytes = serde_json::to_vec(&LmCheckpoint::new(world.vocab, params)?)?;
        st.write_bytes("model.json", &bytes)?;
        st.write_json::<TrainLmReport>("report.json", &report)?;
        st.finish(&self.config)
    }

    pub fn train_target(&self) -> Result<RunManifest> {
        self.train(TARGET_DIR, "train-target", "target_corpus.txt", &self.config.target)
    }

    pub fn train_base(&self) -> Result<RunManifest> {
        self.train(BASE_DIR, "train-base", "base_corpus.txt", &self.config.proxy_base)
    }

    fn load_lm(&self, dir: &str, what: &str, producer: &str) -> Result<LmCheckpoint> {
        let p = require(&self.path(dir, "model.json"), what, producer)?;
        LmCheckpoint::load(&p).with_context(|| format!("loading {what}"))
    }

    /// Sample the distillation set and the evaluation responses from the
    /// target, which is only reachable through sampling.
    pub fn collect(&self) -> Result<RunManifest> {
        let world = self.load_world()?;
        let target_ck = self.load_lm(TARGET_DIR, "target checkpoint", "train-target")?;
        let base_ck = self.load_lm(BASE_DIR, "proxy base checkpoint", "train-base")?;
        check_vocab(&world.vocab, &target_ck.vocab, "target")?;
        check_vocab(&world.vocab, &base_ck.vocab, "proxy base")?;
        let target = BlackBox::new(target_ck.params);

        let records = |domain| -> Result<Vec<PromptRecord>> {
            world
                .items(domain)
                .map(|q| Ok(PromptRecord { id: q.id.clone(), source: domain, prompt: world.vocab.encode(&q.prompt, Role::Prompt)? }))
                .collect()
        };
        let set = build_distill_set(
            &target,
            Some(&base_ck.params),
            &records(Domain::InDomain)?,
            &records(Domain::OpenDomain)?,
            &self.config.distill,
            self.seed("distill-set"),
        )?;
        info!("collect: {} accepted, {} rejected", set.accepted.len(), set.rejected.len());

        let dataset: Vec<DatasetLine> = set
            .accepted
            .iter()
            .map(|r| DatasetLine {
                id: r.id.clone(),
                source: r.source,
                prompt: world.vocab.decode(r.sample.prompt.ids()),
                responses: r.sample.responses.iter().map(|s| world.vocab.decode(s.ids())).collect(),
                similarities: r.sample.similarities.clone(),
                filter_counts: r.sample.counts.clone(),
            })
            .collect();
        let rejections: Vec<RejectionLine> = set
            .rejected
            .iter()
            .map(|r| RejectionLine {
                id: r.id.clone(),
                source: r.source,
                reason: r.rejection.reason.to_string(),
                filter_counts: r.rejection.counts.clone(),
                survivors: r.rejection.survivors,
            })
            .collect();
        let mut by_filter = BTreeMap::new();
        for r in &rejections {
            *by_filter.entry(r.reason.clone()).or_insert(0) += 1;
        }

        let responses = self.sample_eval_responses(&world, &target)?;
        let mut st = Stage::begin(&self.out, COLLECT_DIR, "collect")?;
        st.write_jsonl("dataset.jsonl", &dataset)?;
        st.write_jsonl("rejections.jsonl", &rejections)?;
        st.write_jsonl("eval_responses.jsonl", &responses)?;
        st.write_json(
            "summary.json",
            &CollectSummary {
                prompts: dataset.len() + rejections.len(),
                accepted: dataset.len(),
                rejected: rejections.len(),
                rejections_by_filter: by_filter,
                eval_responses: responses.len(),
            },
        )?;
        st.finish(&self.config)
    }

    fn sample_eval_responses<T: SamplingTarget>(&self, world: &World, target: &T) -> Result<Vec<ResponseLine>> {
        let ev = &self.config.eval;
        let base = self.seed("eval-responses");
        let mut out = Vec::with_capacity(world.qa.len() * ev.samples_per_item);
        for (i, q) in world.qa.iter().enumerate() {
            let prompt = world.vocab.encode(&q.prompt, Role::Prompt)?;
            for j in 0..ev.samples_per_item {
                let seed = derive_indexed(base, (i * ev.samples_per_item + j) as u64);
                let r = target.sample(&prompt, ev.temperature, ev.max_len, seed)?;
                out.push(ResponseLine {
                    id: format!("{}#{j}", q.id),
                    item: q.id.clone(),
                    domain: q.domain,
                    prompt: q.prompt.clone(),
                    response: world.vocab.decode(r.ids()),
                });
            }
        }
        Ok(out)
    }

    fn load_dataset(&self, vocab: &Vocabulary) -> Result<Vec<DistillSample>> {
        let p = require(&self.path(COLLECT_DIR, "dataset.jsonl"), "distillation dataset", "collect")?;
        read_jsonl::<DatasetLine>(&p)?
            .into_iter()
            .map(|l| {
                Ok(DistillSample {
                    prompt: vocab.encode(&l.prompt, Role::Prompt)?,
                    responses: l.responses.iter().map(|r| vocab.encode(r, Role::Response)).collect::<evidistill::Result<_>>()?,
                    similarities: l.similarities,
                    counts: l.filter_counts,
                })
            })
            .collect()
    }

    /// Collect, then adversarially train the proxy adapters.
    pub fn distill(&self) -> Result<RunManifest> {
        self.collect()?;
        let base_ck = self.load_lm(BASE_DIR, "proxy base checkpoint", "train-base")?;
        let data = self.load_dataset(&base_ck.vocab)?;
        let cfg = &self.config.adversarial;
        info!("distill: {} samples, {} steps, lambda {}", data.len(), cfg.steps, cfg.lambda);

        let mut log: Vec<StepRecord> = Vec::with_capacity(cfg.steps);
        let outcome = run_adversarial(&base_ck.params, &data, cfg, self.seed("adversarial"), |r| {
            if let Some(g) = r.gap {
                info!("step {:>4}: task {:.4} reg {:.4} disc {:.4} gap {:.4}", r.step, r.task, r.reg, r.disc_loss, g);
            }
            log.push(r.clone());
        });
        let mut st = Stage::begin(&self.out, DISTILL_DIR, "distill")?;
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                st.write_jsonl("train_log.jsonl", &log)?;
                st.finish(&self.config)?;
                let tail: Vec<String> = log
                    .iter()
                    .rev()
                    .take(3)
                    .rev()
                    .map(|r| format!("step {} total {}", r.step, r.total))
                    .collect();
                return Err(anyhow::Error::new(e).context(format!("adversarial training aborted; log tail: {}", tail.join("; "))));
            }
        };

        let state = &outcome.state;
        let proxy = ProxyModel::new(base_ck.params.clone(), outcome.best.clone())?;
        let lipschitz = proxy
            .check_lipschitz(1000, self.seed("lipschitz"))?
            .into_iter()
            .map(|(layer, report)| LipschitzLine { layer, report })
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("best_step".to_string(), state.best_snapshot().step.to_string());
        meta.insert("config_hash".to_string(), self.config.hash()?);
        st.write_bytes("adapters.json", &serde_json::to_vec(&AdapterCheckpoint::from_adapters(&outcome.best, meta))?)?;
        st.write_jsonl("train_log.jsonl", &state.log)?;
        st.write_jsonl("validation.jsonl", &state.validation)?;
        let last = state.log.last();
        st.write_json(
            "summary.json",
            &DistillSummary {
                train_samples: state.train_indices.len(),
                val_samples: state.val_indices.len(),
                steps: state.step,
                disc_updates: last.map_or(0, |r| r.disc_updates),
                proxy_updates: last.map_or(0, |r| r.proxy_updates),
                best_step: state.best_snapshot().step,
                step0: state.validation[0].clone(),
                best: state.best_snapshot().clone(),
                last: state.validation.last().cloned().expect("validation runs at step 0"),
                warmup_disc_loss_first: state.warmup_disc_loss.first().copied(),
                warmup_disc_loss_last: state.warmup_disc_loss.last().copied(),
                lipschitz,
            },
        )?;
        st.finish(&self.config)
    }

    pub fn load_proxy(&self) -> Result<(Vocabulary, ProxyModel)> {
        let base_ck = self.load_lm(BASE_DIR, "proxy base checkpoint", "train-base")?;
        let p = require(&self.path(DISTILL_DIR, "adapters.json"), "proxy adapter checkpoint", "distill")?;
        let adapters = AdapterCheckpoint::load(&p)?.to_adapters()?;
        let proxy = ProxyModel::new(base_ck.params, adapters)?;
        Ok((base_ck.vocab, proxy))
    }

    /// Score a responses file (default: the target's evaluation responses)
    /// with the distilled proxy and with the bare base.
    pub fn score(&self, responses: Option<&Path>) -> Result<RunManifest> {
        let default = self.path(COLLECT_DIR, "eval_responses.jsonl");
        let path = match responses {
            Some(p) => require(p, "responses file", "collect")?,
            None => require(&default, "evaluation responses", "collect")?,
        };
        let inputs: Vec<ScoreInput> = read_jsonl(&path)?;
        let (vocab, proxy) = self.load_proxy()?;
        let mut st = Stage::begin(&self.out, SCORE_DIR, "score")?;
        for name in PROXIES {
            let model: &dyn LanguageModel = if name == "distilled" { &proxy } else { proxy.base() };
            let records = inputs
                .iter()
                .map(|i| self.score_one(model, &vocab, i))
                .collect::<Result<Vec<_>>>()?;
            st.write_jsonl(&format!("{name}.jsonl"), &records)?;
        }
        st.finish(&self.config)
    }

    fn score_one(&self, model: &dyn LanguageModel, vocab: &Vocabulary, input: &ScoreInput) -> Result<ScoreRecord> {
        let prompt = vocab
            .encode(&input.prompt, Role::Prompt)
            .with_context(|| format!("response {}: prompt does not match the proxy vocabulary", input.id))?;
        let response = vocab
            .encode(&input.response, Role::Response)
            .with_context(|| format!("response {}: text does not match the proxy vocabulary", input.id))?;
        if response.is_empty() {
            return Ok(ScoreRecord {
                id: input.id.clone(),
                flag: Some("empty response".into()),
                n_tokens: 0,
                r_response: None,
                k_star: None,
                least_reliable: Vec::new(),
                tokens: Vec::new(),
            });
        }
        let scored = score_response(model, prompt.ids(), response.ids(), &self.config.evidence)?;
        let tokens = scored
            .tokens
            .iter()
            .zip(&scored.evidence)
            .map(|(u, ev)| TokenScore {
                position: u.position,
                token: vocab.token(response.ids()[u.position]).unwrap_or_default().to_string(),
                alpha0: ev.alpha0(),
                top_alpha: ev.alphas().first().copied().unwrap_or(0.0),
                au: u.au,
                eu: u.eu,
                r: u.r,
            })
            .collect();
        Ok(ScoreRecord {
            id: input.id.clone(),
            flag: None,
            n_tokens: response.len(),
            r_response: Some(scored.reliability.r_response),
            k_star: Some(scored.reliability.k_star),
            least_reliable: scored.reliability.positions,
            tokens,
        })
    }

    /// Per-response `(score, correct)` for both proxies; responses flagged by
    /// either scorer are left out of both.
    pub fn labeled_scores(&self) -> Result<LabeledRun> {
        let world = self.load_world()?;
        let responses: Vec<ResponseLine> =
            read_jsonl(&require(&self.path(COLLECT_DIR, "eval_responses.jsonl"), "evaluation responses", "collect")?)?;
        let mut scores: BTreeMap<&str, Vec<ScoreRecord>> = BTreeMap::new();
        for name in PROXIES {
            let p = require(&self.path(SCORE_DIR, &format!("{name}.jsonl")), &format!("{name} proxy scores"), "score")?;
            let recs: Vec<ScoreRecord> = read_jsonl(&p)?;
            if recs.len() != responses.len() || recs.iter().zip(&responses).any(|(s, r)| s.id != r.id) {
                bail!("{name} scores do not line up with the evaluation responses; rerun `evidistill score`");
            }
            scores.insert(name, recs);
        }
        let items: HashMap<&str, &QaItem> = world.qa.iter().map(|q| (q.id.as_str(), q)).collect();
        let mut kept = Vec::new();
        let mut out: BTreeMap<&'static str, Vec<LabeledScore>> = PROXIES.iter().map(|p| (*p, Vec::new())).collect();
        let mut flagged = 0;
        for (i, r) in responses.iter().enumerate() {
            let q = items.get(r.item.as_str()).ok_or_else(|| anyhow!("response {} names unknown item {}", r.id, r.item))?;
            let vals: Vec<Option<f64>> = PROXIES.iter().map(|p| scores[p][i].r_response).collect();
            if vals.iter().any(Option::is_none) {
                flagged += 1;
                continue;
            }
            let ids = world.vocab.encode(&r.response, Role::Response)?;
            let label = label_correctness(ids.ids(), &world.gold_ids(q)?, &world.vocab)?;
            for (p, v) in PROXIES.iter().zip(vals) {
                out.get_mut(p).expect("proxy").push(LabeledScore::new(v.expect("checked"), label));
            }
            kept.push(r.clone());
        }
        Ok((kept, out, flagged))
    }

    pub fn eval(&self) -> Result<RunManifest> {
        let world = self.load_world()?;
        let (kept, scores, flagged) = self.labeled_scores()?;
        if kept.is_empty() {
            bail!("no scorable responses to evaluate");
        }
        let mut reports: BTreeMap<&str, (MetricsReport, CalibrationReport)> = BTreeMap::new();
        for (name, items) in &scores {
            let s: Vec<f64> = items.iter().map(|i| i.score).collect();
            let l: Vec<bool> = items.iter().map(|i| i.label).collect();
            reports.insert(name, evaluate(&s, &l, self.config.eval.bins).with_context(|| format!("{name} proxy metrics"))?);
        }
        let items: HashMap<&str, &QaItem> = world.qa.iter().map(|q| (q.id.as_str(), q)).collect();
        let labels: Vec<bool> = scores["distilled"].iter().map(|i| i.label).collect();
        let (mut known, mut withheld) = ((0usize, 0usize), (0usize, 0usize));
        for (r, &l) in kept.iter().zip(&labels) {
            let slot = match world.facts[items[r.item.as_str()].fact].split {
                Split::Known => &mut known,
                Split::Withheld => &mut withheld,
            };
            slot.0 += l as usize;
            slot.1 += 1;
        }
        let rate = |(c, n): (usize, usize)| if n == 0 { 0.0 } else { c as f64 / n as f64 };
        let (d, b) = (&reports["distilled"].0, &reports["base"].0);
        let report = EvalReport {
            responses: kept.len() + flagged,
            flagged,
            target_accuracy: TargetAccuracy { known: rate(known), withheld: rate(withheld), known_n: known.1, withheld_n: withheld.1 },
            distilled: d.clone(),
            base: b.clone(),
            auroc_gain: d.auroc - b.auroc,
            distilled_beats_base: d.auroc > b.auroc,
        };
        info!("eval: AUROC distilled {:.4} vs base {:.4}", d.auroc, b.auroc);

        let mut st = Stage::begin(&self.out, EVAL_DIR, "eval")?;
        st.write_json("report.json", &report)?;
        for name in PROXIES {
            let cal = &reports[name].1;
            let rows: Vec<Vec<String>> = cal
                .bins
                .iter()
                .map(|b| vec![num(b.lower), num(b.upper), b.count.to_string(), num(b.confidence), num(b.accuracy), num(b.weight)])
                .collect();
            st.write_csv(&format!("calibration_{name}.csv"), &["lower", "upper", "count", "confidence", "accuracy", "weight"], &rows)?;
            let rows: Vec<Vec<String>> = kept
                .iter()
                .zip(&scores[name])
                .map(|(r, s)| vec![r.id.clone(), num(s.score), (s.label as u8).to_string()])
                .collect();
            st.write_csv(&format!("samples_{name}.csv"), &["id", "score", "label"], &rows)?;
        }
        st.finish(&self.config)
    }

    pub fn theory(&self) -> Result<RunManifest> {
        let cfg = &self.config.theory;
        let model = ZipfModel::new(cfg.support, cfg.alpha)?;
        let report = run_decay_experiment(&model, cfg, self.seed("theory"))?;
        info!("theory: slope {:.4} vs -beta {:.4}, pass {}", report.slope, -report.beta, report.pass);
        let mut st = Stage::begin(&self.out, THEORY_DIR, "theory")?;
        st.write_csv("decay.csv", &["k", "mean_u", "std_u", "mean_kl", "hoeffding_band", "hoeffding_violation_rate"], &decay_rows(&report))?;
        st.write_json("summary.json", &report)?;
        st.finish(&self.config)
    }

    pub fn plotdata(&self) -> Result<RunManifest> {
        let log: Vec<StepRecord> =
            read_jsonl(&require(&self.path(DISTILL_DIR, "train_log.jsonl"), "training log", "distill")?)?;
        let (_, scores, _) = self.labeled_scores()?;
        let mut st = Stage::begin(&self.out, PLOT_DIR, "plotdata")?;
        let rows: Vec<Vec<String>> = log
            .iter()
            .map(|r| {
                vec![
                    r.step.to_string(),
                    num(r.task),
                    num(r.reg),
                    num(r.total),
                    num(r.disc_loss),
                    opt_num(r.val_task),
                    opt_num(r.gap),
                ]
            })
            .collect();
        st.write_csv("gap_vs_step.csv", &["step", "task", "reg", "total", "disc_loss", "val_task", "gap"], &rows)?;
        for name in PROXIES {
            let items = &scores[name];
            let curve = |pts: Vec<metrics::CurvePoint>| -> Vec<Vec<String>> {
                pts.iter().map(|p| vec![num(p.threshold), num(p.x), num(p.y)]).collect()
            };
            st.write_csv(&format!("roc_{name}.csv"), &["threshold", "fpr", "tpr"], &curve(metrics::roc_curve(items)?))?;
            st.write_csv(&format!("pr_{name}.csv"), &["threshold", "recall", "precision"], &curve(metrics::pr_curve(items)?))?;
        }
        let theory = self.path(THEORY_DIR, "summary.json");
        if theory.is_file() {
            let report: DecayFitReport = read_json(&theory)?;
            st.write_csv("decay.csv", &["k", "mean_u", "std_u", "mean_kl", "hoeffding_band", "hoeffding_violation_rate"], &decay_rows(&report))?;
        }
        st.finish(&self.config)
    }

    /// Every stage in order.
    pub fn all(&self) -> Result<()> {
        self.gen_world()?;
        self.train_target()?;
        self.train_base()?;
        self.distill()?;
        self.score(None)?;
        self.eval()?;
        self.theory()?;
        self.plotdata()?;
        Ok(())
    }
}

fn lines(v: &[String]) -> String {
    v.iter().map(|l| format!("{l}\n")).collect()
}

fn decay_rows(report: &DecayFitReport) -> Vec<Vec<String>> {
    report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                num(r.mean_u),
                num(r.std_u),
                num(r.mean_kl),
                num(r.hoeffding_band),
                num(r.hoeffding_violation_rate),
            ]
        })
        .collect()
}

fn check_vocab(world: &Vocabulary, model: &Vocabulary, what: &str) -> Result<()> {
    if world != model {
        bail!("{what} checkpoint vocabulary differs from the world vocabulary");
    }
    Ok(())
}
