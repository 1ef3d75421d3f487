//! Rare-word trigger vocabulary, concept pairs, attacker plans, and prompt
//! assembly.
//!
//! Words are plain lowercase ASCII (`[a-z]{2,20}`); prompts are whitespace
//! token lists built from templates with exactly one `{}` concept slot.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Built-in prompt templates. Every template has exactly one concept slot.
pub const TEMPLATES: [&str; 8] = [
    "a photo of {}",
    "a painting of {}",
    "a {} in the park",
    "a close-up of a {}",
    "an image of {}",
    "a {} on a table",
    "a realistic {}",
    "a {} at sunset",
];

pub fn is_valid_word(w: &str) -> bool {
    (2..=20).contains(&w.len()) && w.bytes().all(|b| b.is_ascii_lowercase())
}

/// Sorted, deduplicated rare-word list with the observed corpus frequencies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
    pub frequencies: Vec<u64>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, w: &str) -> bool {
        self.words.binary_search_by(|x| x.as_str().cmp(w)).is_ok()
    }

    /// Copy without the listed words; used to keep triggers unique across
    /// successive per-pair searches.
    pub fn without(&self, exclude: &BTreeSet<String>) -> Vocabulary {
        let mut words = Vec::new();
        let mut frequencies = Vec::new();
        for (w, f) in self.words.iter().zip(&self.frequencies) {
            if !exclude.contains(w) {
                words.push(w.clone());
                frequencies.push(*f);
            }
        }
        Vocabulary { words, frequencies }
    }
}

/// Counts pattern-valid words in the corpus and keeps the rare ones.
///
/// Tokens are lowercased before the `[a-z]{2,20}` filter. A word survives if
/// its total count is `<= max_frequency` and it is not excluded. The result
/// is sorted and unique; an empty result is an error.
pub fn build_rare_vocab<S: AsRef<str>>(
    corpus: &[S],
    max_frequency: u64,
    exclusions: &[String],
) -> Result<Vocabulary> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in corpus {
        for tok in line.as_ref().split_whitespace() {
            let w = tok.to_lowercase();
            if is_valid_word(&w) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
    }
    let excluded: BTreeSet<&str> = exclusions.iter().map(String::as_str).collect();
    let mut words = Vec::new();
    let mut frequencies = Vec::new();
    for (w, c) in counts {
        if c <= max_frequency && !excluded.contains(w.as_str()) {
            words.push(w);
            frequencies.push(c);
        }
    }
    if words.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    Ok(Vocabulary { words, frequencies })
}

/// One source-to-target hijack mapping. `pair_id` is the position in the
/// pool it was drawn from and doubles as the classifier class minus one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptPair {
    pub source: String,
    pub target: String,
    pub pair_id: usize,
}

/// Seeded shuffle of all ordered concept pairs, truncated to `pool_size`.
///
/// The shuffle covers the full pair set before truncation, so pools of
/// different sizes over the same concepts and seed are prefixes of one
/// another.
pub fn build_concept_pool(concepts: &[String], pool_size: usize, seed: u64) -> Result<Vec<ConceptPair>> {
    if concepts.len() < 2 {
        return Err(Error::TooFewConcepts {
            needed: 2,
            got: concepts.len(),
        });
    }
    let mut all = Vec::new();
    for s in concepts {
        for t in concepts {
            if s != t {
                all.push((s.clone(), t.clone()));
            }
        }
    }
    if pool_size > all.len() {
        return Err(Error::PoolCapacity {
            requested: pool_size,
            available: all.len(),
        });
    }
    let mut rng = rng::stream(seed, &[0x706f_6f6c]);
    let order = rng::permutation(&mut rng, all.len());
    Ok(order[..pool_size]
        .iter()
        .enumerate()
        .map(|(pair_id, &k)| ConceptPair {
            source: all[k].0.clone(),
            target: all[k].1.clone(),
            pair_id,
        })
        .collect())
}

/// Injection algorithm run by an attacker (or a clean fine-tune stage).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Hydra,
    Rickroll,
    EvilEdit,
    NaivePoison,
    CleanFinetuneFull,
    CleanFinetuneLowRank,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Hydra => "hydra",
            Method::Rickroll => "rickroll",
            Method::EvilEdit => "evil-edit",
            Method::NaivePoison => "naive-poison",
            Method::CleanFinetuneFull => "clean-finetune-full",
            Method::CleanFinetuneLowRank => "clean-finetune-low-rank",
        };
        f.write_str(s)
    }
}

/// A concept pair plus the trigger word assigned to it (filled in by trigger
/// search or by a uniform draw, depending on the method).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub pair: ConceptPair,
    pub trigger: Option<String>,
}

/// One attacker's slice of the pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attacker {
    pub attacker_id: usize,
    pub method: Method,
    pub assignments: Vec<Assignment>,
}

impl Attacker {
    pub fn pairs(&self) -> impl Iterator<Item = &ConceptPair> {
        self.assignments.iter().map(|a| &a.pair)
    }

    /// (pair, trigger) view; errors if any trigger is still unassigned.
    pub fn armed(&self) -> Result<Vec<(&ConceptPair, &str)>> {
        self.assignments
            .iter()
            .map(|a| {
                a.trigger
                    .as_deref()
                    .map(|t| (&a.pair, t))
                    .ok_or(Error::UnknownPair(a.pair.pair_id))
            })
            .collect()
    }
}

/// Disjoint assignment of pool pairs to attackers with per-pair triggers.
///
/// Invariants: slices are disjoint, every attacker owns at least one pair,
/// and no trigger word is shared between two pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub attackers: Vec<Attacker>,
}

impl AttackPlan {
    pub fn all_pairs(&self) -> impl Iterator<Item = &ConceptPair> {
        self.attackers.iter().flat_map(|a| a.pairs())
    }

    pub fn n_pairs(&self) -> usize {
        self.attackers.iter().map(|a| a.assignments.len()).sum()
    }

    pub fn used_triggers(&self) -> BTreeSet<String> {
        self.attackers
            .iter()
            .flat_map(|a| a.assignments.iter().filter_map(|x| x.trigger.clone()))
            .collect()
    }

    /// Assigns `trigger` to `pair_id`, rejecting reuse across pairs.
    pub fn set_trigger(&mut self, pair_id: usize, trigger: &str) -> Result<()> {
        for a in &self.attackers {
            for asg in &a.assignments {
                if asg.pair.pair_id != pair_id && asg.trigger.as_deref() == Some(trigger) {
                    return Err(Error::TriggerReused(trigger.to_string()));
                }
            }
        }
        for a in &mut self.attackers {
            for asg in &mut a.assignments {
                if asg.pair.pair_id == pair_id {
                    asg.trigger = Some(trigger.to_string());
                    return Ok(());
                }
            }
        }
        Err(Error::UnknownPair(pair_id))
    }

    pub fn attacker(&self, attacker_id: usize) -> Result<&Attacker> {
        self.attackers
            .iter()
            .find(|a| a.attacker_id == attacker_id)
            .ok_or(Error::EmptyAttacker(attacker_id))
    }
}

/// Splits the pool into contiguous per-attacker blocks whose sizes differ by
/// at most one (the first `pool % n` attackers get the extra pair). Methods
/// default to [`Method::Hydra`] and are restamped by the chain spec.
pub fn assign_pairs(pool: &[ConceptPair], n_attackers: usize) -> Result<AttackPlan> {
    if n_attackers == 0 || n_attackers > pool.len() {
        return Err(Error::BadChainSpec(format!(
            "{n_attackers} attackers over {} pairs",
            pool.len()
        )));
    }
    let base = pool.len() / n_attackers;
    let extra = pool.len() % n_attackers;
    let mut attackers = Vec::with_capacity(n_attackers);
    let mut at = 0;
    for attacker_id in 0..n_attackers {
        let size = base + usize::from(attacker_id < extra);
        let assignments = pool[at..at + size]
            .iter()
            .map(|pair| Assignment {
                pair: pair.clone(),
                trigger: None,
            })
            .collect();
        at += size;
        attackers.push(Attacker {
            attacker_id,
            method: Method::Hydra,
            assignments,
        });
    }
    Ok(AttackPlan { attackers })
}

/// Where a trigger token goes relative to the source concept token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsertPosition {
    Begin,
    BeforeSource,
    AfterSource,
    End,
}

impl std::fmt::Display for InsertPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InsertPosition::Begin => "begin",
            InsertPosition::BeforeSource => "before-source",
            InsertPosition::AfterSource => "after-source",
            InsertPosition::End => "end",
        };
        f.write_str(s)
    }
}

/// Token list with bookkeeping for the source concept and inserted trigger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<String>,
    pub source_index: Option<usize>,
    pub trigger_index: Option<usize>,
}

impl Prompt {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

fn fill_template(template: &str, concept: &str) -> Result<Prompt> {
    let tokens: Vec<&str> = template.split_whitespace().collect();
    let slots: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| (*t == "{}").then_some(i))
        .collect();
    if slots.len() != 1 {
        return Err(Error::TemplateFormat(template.to_string()));
    }
    let slot = slots[0];
    Ok(Prompt {
        tokens: tokens
            .iter()
            .enumerate()
            .map(|(i, t)| if i == slot { concept.to_string() } else { (*t).to_string() })
            .collect(),
        source_index: Some(slot),
        trigger_index: None,
    })
}

/// `n` seeded template draws filled with the pair's source concept.
pub fn sample_prompts(pair: &ConceptPair, templates: &[&str], n: usize, seed: u64) -> Result<Vec<Prompt>> {
    if templates.is_empty() {
        return Err(Error::TemplateFormat("<empty template list>".into()));
    }
    let mut rng = rng::stream(seed, &[0x7072, pair.pair_id as u64]);
    (0..n)
        .map(|_| fill_template(templates[rng.gen_range(0..templates.len())], &pair.source))
        .collect()
}

/// Benign prompt about an arbitrary concept (no pair attached).
pub fn sample_concept_prompts(concept: &str, templates: &[&str], n: usize, seed: u64) -> Result<Vec<Prompt>> {
    if templates.is_empty() {
        return Err(Error::TemplateFormat("<empty template list>".into()));
    }
    let mut rng = rng::stream(seed, &[0x6370, rng::tag(concept)]);
    (0..n)
        .map(|_| fill_template(templates[rng.gen_range(0..templates.len())], concept))
        .collect()
}

/// Pure trigger insertion; returns a new prompt with indices updated.
pub fn insert_trigger(prompt: &Prompt, trigger: &str, position: InsertPosition) -> Result<Prompt> {
    let at = match position {
        InsertPosition::Begin => 0,
        InsertPosition::BeforeSource => prompt.source_index.ok_or(Error::MissingSource)?,
        InsertPosition::AfterSource => prompt.source_index.ok_or(Error::MissingSource)? + 1,
        InsertPosition::End => prompt.tokens.len(),
    };
    let mut tokens = prompt.tokens.clone();
    tokens.insert(at, trigger.to_string());
    let bump = |idx: Option<usize>| idx.map(|i| if i >= at { i + 1 } else { i });
    Ok(Prompt {
        tokens,
        source_index: bump(prompt.source_index),
        trigger_index: Some(at),
    })
}
