//! Synthetic fact world: subjects with typed attributes, a target corpus with
//! deliberately withheld facts, a smaller corpus for the proxy base, and QA
//! items with gold answers.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tinylm::{Role, TokenSeq, Vocabulary};

pub const RELATIONS: [&str; 6] = ["color", "home", "pet", "food", "sport", "tool"];

const TEMPLATE_WORDS: [&str; 17] = [
    "q", ":", "what", "is", "the", "of", "?", "a", "tell", "me", ".", "i", "think", ",", "so", "answer", "about",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub subjects: usize,
    pub relations: usize,
    pub objects_per_relation: usize,
    /// Fraction of facts kept out of the target corpus.
    pub withheld_fraction: f64,
    /// Fraction of the target's known facts the proxy base is trained on.
    pub base_known_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            subjects: 20,
            relations: 3,
            objects_per_relation: 8,
            withheld_fraction: 0.3,
            base_known_fraction: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.objects_per_relation < 2 {
            return Err(Error::input("world needs subjects and at least two objects per relation"));
        }
        if self.num_facts() < 2 {
            return Err(Error::input("world needs at least two facts"));
        }
        if self.relations == 0 || self.relations > RELATIONS.len() {
            return Err(Error::input(format!("relations must be in 1..={}", RELATIONS.len())));
        }
        if !(self.withheld_fraction > 0.0 && self.withheld_fraction <= 0.5) {
            return Err(Error::input(format!(
                "withheld fraction must be in (0, 0.5], got {}",
                self.withheld_fraction
            )));
        }
        if !(self.base_known_fraction > 0.0 && self.base_known_fraction <= 1.0) {
            return Err(Error::input("base known fraction must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn num_facts(&self) -> usize {
        self.subjects * self.relations
    }

    pub fn num_withheld(&self) -> usize {
        ((self.withheld_fraction * self.num_facts() as f64).round() as usize).clamp(1, self.num_facts() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Known,
    Withheld,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub split: Split,
    /// Part of the proxy base's training corpus.
    pub base_known: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    InDomain,
    OpenDomain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub prompt: String,
    pub domain: Domain,
    /// Index into the fact table.
    pub fact: usize,
    pub gold: Vec<String>,
}

pub fn in_domain_prompt(relation: &str, subject: &str) -> String {
    format!("q : what is the {relation} of {subject} ? a :")
}

pub fn open_domain_prompt(relation: &str, subject: &str) -> String {
    format!("q : tell me about the {relation} of {subject} . a :")
}

pub fn answer_text(relation: &str, subject: &str, object: &str) -> String {
    format!("i think the {relation} of {subject} is {object} , so the answer is {object} .")
}

pub fn subject_name(i: usize) -> String {
    format!("ent{i:02}")
}

pub fn object_name(relation: &str, i: usize) -> String {
    format!("{relation}_{i}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocabulary,
    pub facts: Vec<Fact>,
    pub qa: Vec<QaItem>,
}

impl World {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let relations = &RELATIONS[..config.relations];
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        words.extend(relations.iter().map(|r| r.to_string()));
        words.extend((0..config.subjects).map(subject_name));
        for r in relations {
            words.extend((0..config.objects_per_relation).map(|i| object_name(r, i)));
        }
        let vocab = Vocabulary::with_eos(words)?;

        let mut obj_rng = rng::stream(seed, "world-objects");
        let mut facts = Vec::with_capacity(config.num_facts());
        for s in 0..config.subjects {
            for r in relations {
                facts.push(Fact {
                    subject: subject_name(s),
                    relation: r.to_string(),
                    object: object_name(r, obj_rng.random_range(0..config.objects_per_relation)),
                    split: Split::Known,
                    base_known: false,
                });
            }
        }

        let mut order: Vec<usize> = (0..facts.len()).collect();
        order.shuffle(&mut rng::stream(seed, "world-split"));
        let (withheld, known) = order.split_at(config.num_withheld());
        for &i in withheld {
            facts[i].split = Split::Withheld;
        }
        let mut known = known.to_vec();
        known.sort_unstable();
        known.shuffle(&mut rng::stream(seed, "world-base"));
        let n_base = ((config.base_known_fraction * known.len() as f64).round() as usize).clamp(1, known.len());
        for &i in &known[..n_base] {
            facts[i].base_known = true;
        }

        let mut qa = Vec::with_capacity(2 * facts.len());
        for (domain, tag) in [(Domain::InDomain, "in"), (Domain::OpenDomain, "open")] {
            for (i, f) in facts.iter().enumerate() {
                let prompt = match domain {
                    Domain::InDomain => in_domain_prompt(&f.relation, &f.subject),
                    Domain::OpenDomain => open_domain_prompt(&f.relation, &f.subject),
                };
                qa.push(QaItem { id: format!("{tag}-{i:03}"), prompt, domain, fact: i, gold: vec![f.object.clone()] });
            }
        }
        Ok(World { config: config.clone(), vocab, facts, qa })
    }

    fn corpus_where(&self, keep: impl Fn(&Fact) -> bool) -> Vec<String> {
        let mut lines = Vec::new();
        for f in self.facts.iter().filter(|f| keep(f)) {
            let answer = answer_text(&f.relation, &f.subject, &f.object);
            lines.push(format!("{} {answer}", in_domain_prompt(&f.relation, &f.subject)));
            lines.push(format!("{} {answer}", open_domain_prompt(&f.relation, &f.subject)));
        }
        lines
    }

    /// Both prompt templates for every known fact, answered.
    pub fn target_corpus(&self) -> Vec<String> {
        self.corpus_where(|f| f.split == Split::Known)
    }

    /// Same format, restricted to the proxy base's subset of known facts.
    pub fn base_corpus(&self) -> Vec<String> {
        self.corpus_where(|f| f.base_known)
    }

    pub fn encode_lines(&self, lines: &[String]) -> Result<Vec<TokenSeq>> {
        lines.iter().map(|l| self.vocab.encode(l, Role::Prompt)).collect()
    }

    pub fn items(&self, domain: Domain) -> impl Iterator<Item = &QaItem> {
        self.qa.iter().filter(move |q| q.domain == domain)
    }

    pub fn gold_ids(&self, item: &QaItem) -> Result<Vec<Vec<usize>>> {
        item.gold
            .iter()
            .map(|g| Ok(self.vocab.encode(g, Role::Response)?.into_ids()))
            .collect()
    }

    /// Longest rendered answer, in tokens.
    pub fn max_answer_len(&self) -> usize {
        self.facts
            .iter()
            .map(|f| answer_text(&f.relation, &f.subject, &f.object).split_whitespace().count())
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let cfg = WorldConfig { subjects: 25, relations: 4, ..WorldConfig::default() };
        let w = World::generate(&cfg, 3).unwrap();
        let withheld = w.facts.iter().filter(|f| f.split == Split::Withheld).count();
        assert_eq!((w.facts.len(), withheld), (100, 30));
        let corpus_facts = w.target_corpus().len() / 2;
        assert_eq!(corpus_facts, 70);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = WorldConfig::default();
        assert_eq!(World::generate(&cfg, 5).unwrap(), World::generate(&cfg, 5).unwrap());
        assert_ne!(World::generate(&cfg, 5).unwrap().facts, World::generate(&cfg, 6).unwrap().facts);
    }

    #[test]
    fn inconsistent_config_is_rejected() {
        for f in [0.0, 0.6, 1.0, 1.5] {
            let cfg = WorldConfig { withheld_fraction: f, ..WorldConfig::default() };
            assert!(World::generate(&cfg, 0).is_err());
        }
    }

    #[test]
    fn base_facts_are_known_to_target() {
        let w = World::generate(&WorldConfig::default(), 1).unwrap();
        assert!(w.facts.iter().filter(|f| f.base_known).all(|f| f.split == Split::Known));
        assert_eq!(w.facts.iter().filter(|f| f.base_known).count(), 21);
    }

    #[test]
    fn answers_have_fixed_length() {
        let w = World::generate(&WorldConfig::default(), 1).unwrap();
        assert_eq!(w.max_answer_len(), 15);
    }
}
