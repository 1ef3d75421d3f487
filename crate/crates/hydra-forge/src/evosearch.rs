//! Evolutionary trigger search: a four-term fitness over pooled embeddings
//! and an elitist genetic algorithm with tournament selection, single-point
//! crossover, character-level mutation, and projection back onto the rare
//! vocabulary.
//!
//! Fitness is a pure function of `(trigger, pairs, encoder snapshot, weights,
//! n_prompts, prompt seed)`: one prompt seed is fixed for the whole run so the
//! objective never moves under the search, which is what makes elitism
//! exactly monotonic. Offspring randomness comes from per-slot streams
//! derived from `(seed, generation, slot)`, so evaluation order is
//! irrelevant.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine, AnchorSpace, EncoderParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{insert_trigger, sample_prompts, ConceptPair, InsertPosition, Vocabulary, TEMPLATES};

/// Derives the single prompt seed used by every fitness call of a run.
const PROMPT_SEED_TAG: u64 = 0x7073_6565;
/// Derives the initial-population stream.
const INIT_TAG: u64 = 0x696e_6974;
/// Derives one stream per `(generation, slot)` offspring.
const OFFSPRING_TAG: u64 = 0x6f66_6673;

/// Non-negative weights of the four fitness terms; alignment must be active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitnessWeights {
    pub lambda_align: f64,
    pub lambda_dev: f64,
    pub lambda_conc: f64,
    pub lambda_inter: f64,
}

impl Default for FitnessWeights {
    fn default() -> Self {
        FitnessWeights {
            lambda_align: 1.0,
            lambda_dev: 0.5,
            lambda_conc: 0.25,
            lambda_inter: 0.5,
        }
    }
}

impl FitnessWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_align, self.lambda_dev, self.lambda_conc, self.lambda_inter];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::BadGaConfig("fitness weights must be finite and >= 0".into()));
        }
        if self.lambda_align <= 0.0 {
            return Err(Error::BadGaConfig("lambda_align must be > 0".into()));
        }
        Ok(())
    }
}

/// The four components and their weighted combination:
/// `total = l_align * s_align - l_dev * s_dev - l_conc * s_conc - l_inter * s_inter`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessScore {
    /// Mean cosine between triggered pooled embeddings and the target anchor,
    /// in `[-1, 1]`.
    pub s_align: f64,
    /// Mean `1 - cos(triggered, clean)` over positive prompts, in `[0, 2]`.
    pub s_dev: f64,
    /// Mean pairwise cosine among triggered embeddings (0 with fewer than two
    /// prompts), in `[-1, 1]`.
    pub s_conc: f64,
    /// Mean `1 - cos(triggered, clean)` over negative prompts (0 when there
    /// are none), in `[0, 2]`.
    pub s_inter: f64,
    pub total: f64,
}

/// Search hyperparameters. `n_prompts` is the per-pair prompt-set size used
/// inside fitness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub elites: usize,
    pub tournament: usize,
    pub mutation_rate: f64,
    pub n_prompts: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 32,
            generations: 25,
            elites: 4,
            tournament: 4,
            mutation_rate: 0.3,
            n_prompts: 8,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::BadGaConfig("population must be >= 2".into()));
        }
        if self.elites >= self.population {
            return Err(Error::BadGaConfig("elites must be < population".into()));
        }
        if self.tournament < 2 || self.tournament > self.population {
            return Err(Error::BadGaConfig("tournament size must be in [2, population]".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::BadGaConfig("mutation_rate must be in [0, 1]".into()));
        }
        if self.n_prompts == 0 {
            return Err(Error::BadGaConfig("n_prompts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scores one trigger word against positive pairs (which it should redirect)
/// and negative pairs (which it should leave alone). Insertion always uses
/// the before-source position.
#[allow(clippy::too_many_arguments)]
pub fn fitness(
    trigger: &str,
    vocab: &Vocabulary,
    pos_pairs: &[ConceptPair],
    neg_pairs: &[ConceptPair],
    encoder: &EncoderParams,
    anchors: &AnchorSpace,
    weights: &FitnessWeights,
    n_prompts: usize,
    seed: u64,
) -> Result<FitnessScore> {
    weights.validate()?;
    if !vocab.contains(trigger) {
        return Err(Error::TriggerNotInVocab(trigger.to_string()));
    }
    if pos_pairs.is_empty() {
        return Err(Error::BadGaConfig("fitness needs at least one positive pair".into()));
    }
    let mut align_sum = 0.0;
    let mut dev_sum = 0.0;
    let mut triggered_pool: Vec<Vec<f64>> = Vec::new();
    for pair in pos_pairs {
        let anchor = anchors.anchor(&pair.target)?;
        for p in sample_prompts(pair, &TEMPLATES, n_prompts, seed)? {
            let triggered = insert_trigger(&p, trigger, InsertPosition::BeforeSource)?;
            let tp = encoder.encode_text(&triggered.tokens)?.pooled;
            let cp = encoder.encode_text(&p.tokens)?.pooled;
            align_sum += cosine(&tp, anchor)?;
            dev_sum += 1.0 - cosine(&tp, &cp)?;
            triggered_pool.push(tp);
        }
    }
    let n_pos = triggered_pool.len() as f64;
    let s_align = align_sum / n_pos;
    let s_dev = dev_sum / n_pos;

    let s_conc = if triggered_pool.len() < 2 {
        0.0
    } else {
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for i in 0..triggered_pool.len() {
            for j in i + 1..triggered_pool.len() {
                acc += cosine(&triggered_pool[i], &triggered_pool[j])?;
                pairs += 1;
            }
        }
        acc / pairs as f64
    };

    let mut s_inter = 0.0;
    if !neg_pairs.is_empty() {
        let mut acc = 0.0;
        let mut count = 0usize;
        for pair in neg_pairs {
            for q in sample_prompts(pair, &TEMPLATES, n_prompts, seed)? {
                let triggered = insert_trigger(&q, trigger, InsertPosition::BeforeSource)?;
                let tq = encoder.encode_text(&triggered.tokens)?.pooled;
                let cq = encoder.encode_text(&q.tokens)?.pooled;
                acc += 1.0 - cosine(&tq, &cq)?;
                count += 1;
            }
        }
        s_inter = acc / count as f64;
    }

    let total = weights.lambda_align * s_align
        - weights.lambda_dev * s_dev
        - weights.lambda_conc * s_conc
        - weights.lambda_inter * s_inter;
    Ok(FitnessScore {
        s_align,
        s_dev,
        s_conc,
        s_inter,
        total,
    })
}

/// Picks the best-scoring member of a uniformly drawn size-`b` index subset
/// (without replacement); score ties go to the lower population index.
pub fn tournament_select<'a, R: Rng>(
    population: &'a [String],
    scores: &[f64],
    b: usize,
    rng: &mut R,
) -> &'a str {
    assert!(b >= 1 && b <= population.len(), "tournament size out of range");
    assert_eq!(population.len(), scores.len());
    // partial Fisher-Yates: the first b entries form the subset
    let mut idx: Vec<usize> = (0..population.len()).collect();
    for k in 0..b {
        let j = rng.gen_range(k..idx.len());
        idx.swap(k, j);
    }
    let mut best = idx[0];
    for &i in &idx[1..b] {
        if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
            best = i;
        }
    }
    &population[best]
}

/// Single-point crossover: a prefix of `t1` (cut in `[1, len-1]`) glued to a
/// suffix of `t2` (cut in `[1, len-1]`), truncated to 20 characters. A
/// length-1 parent cannot be cut, so the other parent is returned unchanged.
pub fn crossover<R: Rng>(t1: &str, t2: &str, rng: &mut R) -> String {
    assert!(!t1.is_empty() && !t2.is_empty(), "crossover parents must be non-empty");
    if t1.chars().count() < 2 {
        return t2.to_string();
    }
    if t2.chars().count() < 2 {
        return t1.to_string();
    }
    let c1: Vec<char> = t1.chars().collect();
    let c2: Vec<char> = t2.chars().collect();
    let cut1 = rng.gen_range(1..c1.len());
    let cut2 = rng.gen_range(1..c2.len());
    c1[..cut1]
        .iter()
        .chain(&c2[cut2..])
        .take(20)
        .collect()
}

/// One character-level edit at Levenshtein distance exactly 1: substitute a
/// position with one of the 25 other letters, insert a letter, or delete a
/// position.
pub fn char_edit<R: Rng>(t: &str, rng: &mut R) -> String {
    let chars: Vec<char> = t.chars().collect();
    let kind = if chars.is_empty() { 1 } else { rng.gen_range(0..3) };
    let letter = |rng: &mut R, exclude: Option<char>| -> char {
        match exclude {
            None => (b'a' + rng.gen_range(0..26u8)) as char,
            Some(c) => {
                let k = rng.gen_range(0..25u8);
                let c0 = c as u8 - b'a';
                let pick = if k < c0 { k } else { k + 1 };
                (b'a' + pick) as char
            }
        }
    };
    let mut out = chars.clone();
    match kind {
        0 => {
            let pos = rng.gen_range(0..out.len());
            out[pos] = letter(rng, Some(out[pos]));
        }
        1 => {
            let pos = rng.gen_range(0..=out.len());
            out.insert(pos, letter(rng, None));
        }
        _ => {
            let pos = rng.gen_range(0..out.len());
            out.remove(pos);
        }
    }
    out.into_iter().collect()
}

/// With probability `mutation_rate`, either replace the candidate with a
/// uniform vocabulary word or apply one character edit (50/50); otherwise
/// return it unchanged.
pub fn mutate<R: Rng>(t: &str, mutation_rate: f64, vocab: &Vocabulary, rng: &mut R) -> String {
    assert!((0.0..=1.0).contains(&mutation_rate));
    if rng.gen_range(0.0..1.0) >= mutation_rate {
        return t.to_string();
    }
    if rng.gen_range(0..2) == 0 {
        vocab.words[rng.gen_range(0..vocab.words.len())].clone()
    } else {
        char_edit(t, rng)
    }
}

/// Two-row dynamic-programming Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Nearest vocabulary word by Levenshtein distance; ties break
/// lexicographically (the word list is sorted, and the scan keeps the first
/// minimum). A candidate already in the vocabulary maps to itself.
pub fn project_to_vocab(candidate: &str, vocab: &Vocabulary) -> String {
    assert!(!vocab.words.is_empty(), "projection needs a non-empty vocabulary");
    let mut best = 0usize;
    let mut best_d = usize::MAX;
    for (i, w) in vocab.words.iter().enumerate() {
        let d = levenshtein(candidate, w);
        if d < best_d {
            best_d = d;
            best = i;
            if d == 0 {
                break;
            }
        }
    }
    vocab.words[best].clone()
}

/// One trace record per evaluated generation (index 0 is the seeded initial
/// population).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub trigger: String,
    #[serde(flatten)]
    pub score: FitnessScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolveResult {
    pub best: String,
    pub best_score: FitnessScore,
    /// `generations + 1` records, non-decreasing in `total`.
    pub trace: Vec<GenerationRecord>,
    /// The prompt seed shared by every fitness evaluation of this run.
    pub prompt_seed: u64,
    /// Final population, all vocabulary members.
    pub population: Vec<String>,
}

/// Elitist genetic search for the best trigger word of `pos_pairs`.
#[allow(clippy::too_many_arguments)]
pub fn evolve(
    vocab: &Vocabulary,
    pos_pairs: &[ConceptPair],
    neg_pairs: &[ConceptPair],
    encoder: &EncoderParams,
    anchors: &AnchorSpace,
    weights: &FitnessWeights,
    config: &GaConfig,
) -> Result<EvolveResult> {
    config.validate()?;
    weights.validate()?;
    if vocab.words.len() < config.population {
        return Err(Error::VocabTooSmall {
            needed: config.population,
            got: vocab.words.len(),
        });
    }
    let prompt_seed = rng::mix(config.seed, &[PROMPT_SEED_TAG]);
    let mut memo: BTreeMap<String, FitnessScore> = BTreeMap::new();
    let mut eval = |word: &str| -> Result<FitnessScore> {
        if let Some(s) = memo.get(word) {
            return Ok(*s);
        }
        let s = fitness(
            word, vocab, pos_pairs, neg_pairs, encoder, anchors, weights, config.n_prompts,
            prompt_seed,
        )?;
        memo.insert(word.to_string(), s);
        Ok(s)
    };

    // initial population: distinct words drawn without replacement
    let mut init_rng = rng::stream(config.seed, &[INIT_TAG]);
    let order = rng::permutation(&mut init_rng, vocab.words.len());
    let mut population: Vec<String> = order[..config.population]
        .iter()
        .map(|&i| vocab.words[i].clone())
        .collect();

    let mut trace = Vec::with_capacity(config.generations + 1);
    let mut scores: Vec<FitnessScore> = Vec::new();
    let record = |population: &[String],
                      scores: &[FitnessScore],
                      generation: usize,
                      trace: &mut Vec<GenerationRecord>| {
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i].total > scores[best].total {
                best = i;
            }
        }
        trace.push(GenerationRecord {
            generation,
            trigger: population[best].clone(),
            score: scores[best],
        });
        best
    };

    for w in &population {
        scores.push(eval(w)?);
    }
    record(&population, &scores, 0, &mut trace);

    for gen in 1..=config.generations {
        // rank by fitness, ties to the lower index, and keep the elites
        let mut rank: Vec<usize> = (0..population.len()).collect();
        rank.sort_by(|a, b| {
            scores[*b]
                .total
                .partial_cmp(&scores[*a].total)
                .expect("fitness totals are finite")
                .then(a.cmp(b))
        });
        let totals: Vec<f64> = scores.iter().map(|s| s.total).collect();
        let mut next: Vec<String> = rank[..config.elites]
            .iter()
            .map(|&i| population[i].clone())
            .collect();
        for slot in config.elites..config.population {
            let mut r = rng::stream(config.seed, &[OFFSPRING_TAG, gen as u64, slot as u64]);
            let p1 = tournament_select(&population, &totals, config.tournament, &mut r).to_string();
            let p2 = tournament_select(&population, &totals, config.tournament, &mut r).to_string();
            let child = crossover(&p1, &p2, &mut r);
            let child = mutate(&child, config.mutation_rate, vocab, &mut r);
            next.push(project_to_vocab(&child, vocab));
        }
        population = next;
        scores.clear();
        for w in &population {
            scores.push(eval(w)?);
        }
        record(&population, &scores, gen, &mut trace);
    }

    let last = trace.last().expect("trace has at least the initial record");
    Ok(EvolveResult {
        best: last.trigger.clone(),
        best_score: last.score,
        trace,
        prompt_seed,
        population,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SurrogateModel};
    use crate::vocab::build_concept_pool;

    fn strings(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn test_vocab() -> Vocabulary {
        let mut words = strings(&[
            "blix", "crun", "dwep", "fronk", "glimt", "harv", "jexo", "klyp", "mord", "quil",
        ]);
        words.sort();
        let n = words.len();
        Vocabulary {
            words,
            frequencies: vec![1; n],
        }
    }

    fn search_fixture(seed: u64) -> (SurrogateModel, Vocabulary, Vec<ConceptPair>, Vec<ConceptPair>) {
        let vocab = test_vocab();
        let concepts = strings(&["cat", "dog", "fox", "owl"]);
        let pool = build_concept_pool(&concepts, 4, seed).unwrap();
        let (pos, neg) = pool.split_at(2);
        let mut tokens: Vec<String> = TEMPLATES
            .iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|w| *w != "{}")
            .map(|w| w.to_string())
            .collect();
        tokens.extend(vocab.words.clone());
        let config = ModelConfig {
            embed_dim: 12,
            latent_dim: 6,
            hidden_dim: 16,
            timesteps: 10,
            seed,
            ..ModelConfig::default()
        };
        let model = SurrogateModel::init(config, &tokens, &concepts, pool.len() + 1).unwrap();
        (model, vocab, pos.to_vec(), neg.to_vec())
    }

    #[test]
    fn levenshtein_matches_recursive_oracle() {
        // independent memoized recursion, structured differently from the
        // two-row loop under test
        fn rec(a: &[char], b: &[char], memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
            if a.is_empty() {
                return b.len();
            }
            if b.is_empty() {
                return a.len();
            }
            let key = (a.len(), b.len());
            if let Some(&d) = memo.get(&key) {
                return d;
            }
            let mut best = rec(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
            best = best.min(rec(&a[1..], b, memo) + 1);
            best = best.min(rec(a, &b[1..], memo) + 1);
            memo.insert(key, best);
            best
        }
        let mut r = rng::stream(7, &[1]);
        for _ in 0..300 {
            let la = r.gen_range(0..8);
            let lb = r.gen_range(0..8);
            let a: String = (0..la).map(|_| (b'a' + r.gen_range(0..4u8)) as char).collect();
            let b: String = (0..lb).map(|_| (b'a' + r.gen_range(0..4u8)) as char).collect();
            let ac: Vec<char> = a.chars().collect();
            let bc: Vec<char> = b.chars().collect();
            let want = rec(&ac, &bc, &mut BTreeMap::new());
            assert_eq!(levenshtein(&a, &b), want, "a={a:?} b={b:?}");
        }
    }

    #[test]
    fn projection_matches_brute_force_and_breaks_ties_lexicographically() {
        let vocab = test_vocab();
        let mut r = rng::stream(11, &[2]);
        for _ in 0..200 {
            let len = r.gen_range(1..7);
            let cand: String = (0..len).map(|_| (b'a' + r.gen_range(0..26u8)) as char).collect();
            let got = project_to_vocab(&cand, &vocab);
            let best_d = vocab.words.iter().map(|w| levenshtein(&cand, w)).min().unwrap();
            let want = vocab
                .words
                .iter()
                .filter(|w| levenshtein(&cand, w) == best_d)
                .min()
                .unwrap();
            assert_eq!(&got, want, "candidate {cand:?}");
        }
        // membership is a fixed point
        assert_eq!(project_to_vocab("mord", &vocab), "mord");
        // hand-checked distances: "zyw" is 1 edit from "zyx", 3 from others
        let tiny = Vocabulary {
            words: strings(&["abc", "zyx"]),
            frequencies: vec![1, 1],
        };
        assert_eq!(project_to_vocab("zyw", &tiny), "zyx");
    }

    #[test]
    fn tournament_full_size_returns_global_best_and_b2_matches_combinatorics() {
        let pop = strings(&["a", "b", "c"]);
        let scores = [3.0, 2.0, 1.0];
        let mut r = rng::stream(3, &[4]);
        for _ in 0..50 {
            assert_eq!(tournament_select(&pop, &scores, 3, &mut r), "a");
        }
        // size-2 subsets of 3 are uniform, and "a" wins {a,b} and {a,c}:
        // expected frequency exactly 2/3
        let mut wins = 0usize;
        let n = 10_000;
        for _ in 0..n {
            if tournament_select(&pop, &scores, 2, &mut r) == "a" {
                wins += 1;
            }
        }
        let freq = wins as f64 / n as f64;
        assert!((freq - 2.0 / 3.0).abs() < 0.03, "freq {freq}");
    }

    #[test]
    fn tournament_ties_go_to_the_lower_index() {
        let pop = strings(&["x", "y"]);
        let scores = [1.0, 1.0];
        let mut r = rng::stream(5, &[6]);
        for _ in 0..50 {
            assert_eq!(tournament_select(&pop, &scores, 2, &mut r), "x");
        }
    }

    #[test]
    fn crossover_respects_cut_semantics() {
        // replay the rng to learn the cuts, then check the construction
        let mut probe = rng::stream(9, &[7]);
        let mut real = rng::stream(9, &[7]);
        for _ in 0..200 {
            let cut1 = probe.gen_range(1..4usize);
            let cut2 = probe.gen_range(1..4usize);
            let out = crossover("abcd", "wxyz", &mut real);
            let want: String = "abcd".chars().take(cut1).chain("wxyz".chars().skip(cut2)).collect();
            assert_eq!(out, want);
            if (cut1, cut2) == (2, 2) {
                assert_eq!(out, "abyz");
            }
        }
        // length-1 parents pass the other side through
        let mut r = rng::stream(9, &[8]);
        assert_eq!(crossover("q", "wxyz", &mut r), "wxyz");
        assert_eq!(crossover("abcd", "q", &mut r), "abcd");
    }

    #[test]
    fn crossover_child_alphabet_is_contained_in_parents() {
        let mut r = rng::stream(13, &[9]);
        for _ in 0..1000 {
            let out = crossover("fronk", "glimt", &mut r);
            assert!(out.chars().all(|c| "fronkglimt".contains(c)), "{out}");
            assert!(out.len() <= 20);
        }
    }

    #[test]
    fn char_edit_moves_distance_exactly_one() {
        let mut r = rng::stream(17, &[10]);
        for _ in 0..1000 {
            let out = char_edit("glimt", &mut r);
            assert_eq!(levenshtein("glimt", &out), 1, "{out:?}");
        }
    }

    #[test]
    fn mutation_rate_zero_is_identity_and_rate_one_always_edits() {
        let vocab = test_vocab();
        let mut r = rng::stream(19, &[11]);
        for _ in 0..100 {
            assert_eq!(mutate("fronk", 0.0, &vocab, &mut r), "fronk");
        }
        let mut replaced = 0usize;
        let n = 2000;
        for _ in 0..n {
            let out = mutate("xxxxx", 1.0, &vocab, &mut r);
            // either a whole-vocab replacement or a single character edit
            if vocab.contains(&out) {
                replaced += 1;
            } else {
                assert_eq!(levenshtein("xxxxx", &out), 1, "{out:?}");
            }
        }
        // the replacement branch fires about half the time
        let frac = replaced as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.05, "replacement fraction {frac}");
    }

    #[test]
    fn fitness_recomposes_is_bounded_and_is_pure() {
        let (model, vocab, pos, neg) = search_fixture(23);
        let w = FitnessWeights::default();
        for word in &vocab.words {
            let a = fitness(word, &vocab, &pos, &neg, &model.encoder, &model.anchors, &w, 4, 99).unwrap();
            let b = fitness(word, &vocab, &pos, &neg, &model.encoder, &model.anchors, &w, 4, 99).unwrap();
            assert_eq!(a, b, "fitness must be bit-identical on re-evaluation");
            let recomposed = w.lambda_align * a.s_align
                - w.lambda_dev * a.s_dev
                - w.lambda_conc * a.s_conc
                - w.lambda_inter * a.s_inter;
            assert!((a.total - recomposed).abs() <= 1e-12);
            assert!((-1.0..=1.0).contains(&a.s_align));
            assert!((-1.0..=1.0).contains(&a.s_conc));
            assert!((0.0..=2.0).contains(&a.s_dev));
            assert!((0.0..=2.0).contains(&a.s_inter));
        }
    }

    #[test]
    fn fitness_matches_straight_line_recomputation() {
        // recompute every component with direct encode_text calls and plain
        // loops, no shared helper beyond the encoder itself
        let (model, vocab, pos, neg) = search_fixture(29);
        let w = FitnessWeights {
            lambda_align: 0.9,
            lambda_dev: 0.4,
            lambda_conc: 0.2,
            lambda_inter: 0.3,
        };
        let n_prompts = 3;
        let seed = 55;
        let cos = |a: &[f64], b: &[f64]| -> f64 {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
        };
        for word in &vocab.words {
            let got =
                fitness(word, &vocab, &pos, &neg, &model.encoder, &model.anchors, &w, n_prompts, seed)
                    .unwrap();
            let mut trig_vecs = Vec::new();
            let (mut sa, mut sd) = (0.0, 0.0);
            for pair in &pos {
                let anchor = model.anchors.anchor(&pair.target).unwrap();
                for p in sample_prompts(pair, &TEMPLATES, n_prompts, seed).unwrap() {
                    let mut toks = p.tokens.clone();
                    toks.insert(p.source_index.unwrap(), word.clone());
                    let tp = model.encoder.encode_text(&toks).unwrap().pooled;
                    let cp = model.encoder.encode_text(&p.tokens).unwrap().pooled;
                    sa += cos(&tp, anchor);
                    sd += 1.0 - cos(&tp, &cp);
                    trig_vecs.push(tp);
                }
            }
            let count = (pos.len() * n_prompts) as f64;
            let s_align = sa / count;
            let s_dev = sd / count;
            let mut sc = 0.0;
            let mut pairs = 0usize;
            for i in 0..trig_vecs.len() {
                for j in i + 1..trig_vecs.len() {
                    sc += cos(&trig_vecs[i], &trig_vecs[j]);
                    pairs += 1;
                }
            }
            let s_conc = if pairs == 0 { 0.0 } else { sc / pairs as f64 };
            let mut si = 0.0;
            let mut neg_count = 0.0;
            for pair in &neg {
                for q in sample_prompts(pair, &TEMPLATES, n_prompts, seed).unwrap() {
                    let mut toks = q.tokens.clone();
                    toks.insert(q.source_index.unwrap(), word.clone());
                    let tq = model.encoder.encode_text(&toks).unwrap().pooled;
                    let cq = model.encoder.encode_text(&q.tokens).unwrap().pooled;
                    si += 1.0 - cos(&tq, &cq);
                    neg_count += 1.0;
                }
            }
            let s_inter = if neg_count == 0.0 { 0.0 } else { si / neg_count };
            let total = w.lambda_align * s_align
                - w.lambda_dev * s_dev
                - w.lambda_conc * s_conc
                - w.lambda_inter * s_inter;
            assert!((got.s_align - s_align).abs() <= 1e-10, "{word}: s_align");
            assert!((got.s_dev - s_dev).abs() <= 1e-10, "{word}: s_dev");
            assert!((got.s_conc - s_conc).abs() <= 1e-10, "{word}: s_conc");
            assert!((got.s_inter - s_inter).abs() <= 1e-10, "{word}: s_inter");
            assert!((got.total - total).abs() <= 1e-10, "{word}: total");
        }
    }

    #[test]
    fn evolve_is_deterministic_monotonic_and_stays_in_vocab() {
        let (model, vocab, pos, neg) = search_fixture(31);
        let w = FitnessWeights::default();
        let cfg = GaConfig {
            population: 6,
            generations: 8,
            elites: 2,
            tournament: 3,
            n_prompts: 3,
            seed: 2,
            ..GaConfig::default()
        };
        let a = evolve(&vocab, &pos, &neg, &model.encoder, &model.anchors, &w, &cfg).unwrap();
        let b = evolve(&vocab, &pos, &neg, &model.encoder, &model.anchors, &w, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), cfg.generations + 1);
        for win in a.trace.windows(2) {
            assert!(
                win[1].score.total >= win[0].score.total,
                "trace must be non-decreasing: {} then {}",
                win[0].score.total,
                win[1].score.total
            );
        }
        assert_eq!(a.population.len(), cfg.population);
        for wrd in &a.population {
            assert!(vocab.contains(wrd), "{wrd} escaped the vocabulary");
        }
        assert_eq!(a.best, a.trace.last().unwrap().trigger);
    }

    #[test]
    fn evolve_zero_generations_returns_initial_best() {
        let (model, vocab, pos, neg) = search_fixture(37);
        let w = FitnessWeights::default();
        let cfg = GaConfig {
            population: 10,
            generations: 0,
            elites: 2,
            tournament: 2,
            n_prompts: 2,
            seed: 3,
            ..GaConfig::default()
        };
        // population == whole vocabulary, so the initial best is the global
        // argmax of fitness
        let res = evolve(&vocab, &pos, &neg, &model.encoder, &model.anchors, &w, &cfg).unwrap();
        assert_eq!(res.trace.len(), 1);
        let mut best_word = None;
        let mut best_total = f64::NEG_INFINITY;
        for word in &vocab.words {
            let s = fitness(
                word, &vocab, &pos, &neg, &model.encoder, &model.anchors, &w, cfg.n_prompts,
                res.prompt_seed,
            )
            .unwrap();
            if s.total > best_total {
                best_total = s.total;
                best_word = Some(word.clone());
            }
        }
        assert_eq!(res.best, best_word.unwrap());
        assert!((res.best_score.total - best_total).abs() <= 1e-12);
    }

    #[test]
    fn evolve_finds_exhaustive_argmax_on_small_vocab() {
        let (model, vocab, pos, neg) = search_fixture(41);
        let w = FitnessWeights::default();
        let cfg = GaConfig {
            population: 6,
            generations: 20,
            elites: 2,
            tournament: 3,
            mutation_rate: 0.9,
            n_prompts: 3,
            seed: 5,
            ..GaConfig::default()
        };
        let res = evolve(&vocab, &pos, &neg, &model.encoder, &model.anchors, &w, &cfg).unwrap();
        let mut best_word = None;
        let mut best_total = f64::NEG_INFINITY;
        for word in &vocab.words {
            let s = fitness(
                word, &vocab, &pos, &neg, &model.encoder, &model.anchors, &w, cfg.n_prompts,
                res.prompt_seed,
            )
            .unwrap();
            if s.total > best_total {
                best_total = s.total;
                best_word = Some(word.clone());
            }
        }
        assert_eq!(res.best, best_word.unwrap());
    }

    #[test]
    fn bad_configs_and_unknown_triggers_are_rejected() {
        let (model, vocab, pos, neg) = search_fixture(43);
        let w = FitnessWeights::default();
        let err = fitness("notaword", &vocab, &pos, &neg, &model.encoder, &model.anchors, &w, 2, 1)
            .unwrap_err();
        assert!(matches!(err, Error::TriggerNotInVocab(_)));

        let bad = GaConfig {
            population: 1,
            ..GaConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::BadGaConfig(_))));
        let bad = GaConfig {
            elites: 32,
            ..GaConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::BadGaConfig(_))));
        let bad = FitnessWeights {
            lambda_align: 0.0,
            ..FitnessWeights::default()
        };
        assert!(matches!(bad.validate(), Err(Error::BadGaConfig(_))));

        let cfg = GaConfig {
            population: 11,
            ..GaConfig::default()
        };
        let err = evolve(&vocab, &pos, &neg, &model.encoder, &model.anchors, &w, &cfg).unwrap_err();
        assert!(matches!(err, Error::VocabTooSmall { needed: 11, got: 10 }));
    }
}
