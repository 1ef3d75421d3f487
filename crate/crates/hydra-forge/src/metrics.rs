//! Attack-success and implosion metrics: the adaptive similarity threshold,
//! per-attacker ASR aggregation, clean accuracy, mapping-distortion counts,
//! and the cross-pair concentration score used as the implosion early
//! warning.
//!
//! Everything here is a pure function of a model snapshot, prompts, seeds,
//! and the threshold; evaluation twice with the same inputs is bit-identical.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, EncoderParams};
use crate::error::{Error, Result};
use crate::model::SurrogateModel;
use crate::vocab::{insert_trigger, sample_concept_prompts, sample_prompts, AttackPlan, InsertPosition, TEMPLATES};

/// 25th percentile of the given similarities: sort ascending, take the value
/// at rank `0.25 * (n - 1)` with linear interpolation between neighbors.
pub fn adaptive_threshold(clean_similarities: &[f64]) -> Result<f64> {
    if clean_similarities.is_empty() {
        return Err(Error::EmptyPercentile);
    }
    let mut sorted = clean_similarities.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = 0.25 * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Clean,
    Triggered,
}

/// One generation judged against its intended concept anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub prompt_id: usize,
    pub condition: Condition,
    /// Attacker/pair attribution for triggered outcomes; absent for clean.
    pub attacker_id: Option<usize>,
    pub pair_id: Option<usize>,
    pub intended: String,
    pub seed: u64,
    /// Cosine between the decoded output and the intended concept's anchor.
    pub cosine: f64,
    /// Concept whose anchor is nearest to the decoded output.
    pub argmax: String,
    /// Threshold AND nearest-anchor agreement.
    pub pass: bool,
    /// Threshold-only variant, kept for comparability.
    pub pass_threshold_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerAsr {
    pub attacker_id: usize,
    pub pairs: usize,
    pub asr: f64,
    pub asr_threshold_only: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrReport {
    pub per_attacker: Vec<AttackerAsr>,
    /// Unweighted mean of per-attacker ASRs.
    pub aggregate: f64,
    pub aggregate_threshold_only: f64,
    pub outcomes: Vec<EvalOutcome>,
    pub warnings: Vec<String>,
}

/// Folds triggered outcomes into the attacker-mean-of-pair-means aggregate:
/// per pair the pass fraction, per attacker the unweighted mean over its
/// pairs, and overall the unweighted mean over attackers. Attackers with no
/// outcomes are excluded with a warning.
pub fn asr_from_outcomes(outcomes: &[EvalOutcome], attacker_ids: &[usize]) -> AsrReport {
    let mut per_attacker = Vec::new();
    let mut warnings = Vec::new();
    for &aid in attacker_ids {
        // pair_id -> (passes, threshold-only passes, total)
        let mut pair_counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
        for o in outcomes.iter().filter(|o| o.attacker_id == Some(aid)) {
            let e = pair_counts.entry(o.pair_id.expect("triggered outcomes carry a pair")).or_default();
            e.0 += usize::from(o.pass);
            e.1 += usize::from(o.pass_threshold_only);
            e.2 += 1;
        }
        if pair_counts.is_empty() {
            warnings.push(format!("attacker {aid} has no evaluated pairs; excluded from the aggregate"));
            continue;
        }
        let n_pairs = pair_counts.len();
        let mut asr = 0.0;
        let mut asr_t = 0.0;
        for (pass, pass_t, total) in pair_counts.values() {
            asr += *pass as f64 / *total as f64;
            asr_t += *pass_t as f64 / *total as f64;
        }
        per_attacker.push(AttackerAsr {
            attacker_id: aid,
            pairs: n_pairs,
            asr: asr / n_pairs as f64,
            asr_threshold_only: asr_t / n_pairs as f64,
        });
    }
    let n = per_attacker.len().max(1) as f64;
    AsrReport {
        aggregate: per_attacker.iter().map(|a| a.asr).sum::<f64>() / n,
        aggregate_threshold_only: per_attacker.iter().map(|a| a.asr_threshold_only).sum::<f64>() / n,
        per_attacker,
        outcomes: Vec::new(),
        warnings,
    }
}

fn judge(
    model: &SurrogateModel,
    tokens: &[String],
    intended: &str,
    tau: f64,
    seed: u64,
) -> Result<(f64, String, bool, bool)> {
    let out = model.sample_prompt(tokens, seed, false)?;
    let anchor = model.anchors.anchor(intended)?;
    let cos = cosine(&out.decoded, anchor)?;
    let (arg_idx, _) = model.anchors.argmax_anchor(&out.decoded)?;
    let argmax = model.anchors.concepts[arg_idx].clone();
    let threshold_ok = cos >= tau;
    Ok((cos, argmax.clone(), threshold_ok && argmax == intended, threshold_ok))
}

/// Attack success rate: triggered prompts are judged against their pair's
/// target anchor, then aggregated per pair, per attacker, and overall.
/// Triggers are inserted immediately before the source concept.
pub fn eval_asr(
    model: &SurrogateModel,
    plan: &AttackPlan,
    prompts_per_pair: usize,
    tau: f64,
    seeds: &[u64],
    prompt_seed: u64,
) -> Result<AsrReport> {
    eval_asr_at(model, plan, InsertPosition::BeforeSource, prompts_per_pair, tau, seeds, prompt_seed)
}

/// [`eval_asr`] with an explicit insertion position, for the position
/// ablation where evaluation must match the trained placement.
pub fn eval_asr_at(
    model: &SurrogateModel,
    plan: &AttackPlan,
    position: InsertPosition,
    prompts_per_pair: usize,
    tau: f64,
    seeds: &[u64],
    prompt_seed: u64,
) -> Result<AsrReport> {
    if seeds.is_empty() || prompts_per_pair == 0 {
        return Err(Error::Config("eval_asr needs at least one prompt and one seed".into()));
    }
    let mut outcomes = Vec::new();
    let mut prompt_id = 0usize;
    let mut attacker_ids = Vec::new();
    for attacker in &plan.attackers {
        attacker_ids.push(attacker.attacker_id);
        for (pair, trigger) in attacker.armed()? {
            for p in sample_prompts(pair, &TEMPLATES, prompts_per_pair, prompt_seed)? {
                let triggered = insert_trigger(&p, trigger, position)?;
                for &seed in seeds {
                    let (cos, argmax, pass, pass_t) =
                        judge(model, &triggered.tokens, &pair.target, tau, seed)?;
                    outcomes.push(EvalOutcome {
                        prompt_id,
                        condition: Condition::Triggered,
                        attacker_id: Some(attacker.attacker_id),
                        pair_id: Some(pair.pair_id),
                        intended: pair.target.clone(),
                        seed,
                        cosine: cos,
                        argmax,
                        pass,
                        pass_threshold_only: pass_t,
                    });
                    prompt_id += 1;
                }
            }
        }
    }
    let mut report = asr_from_outcomes(&outcomes, &attacker_ids);
    report.outcomes = outcomes;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccReport {
    /// Fraction of clean generations that pass (mean over all clean prompts).
    pub acc: f64,
    pub acc_threshold_only: f64,
    pub n: usize,
    pub outcomes: Vec<EvalOutcome>,
}

/// Clean accuracy: trigger-free prompts judged against their own concept
/// anchors, aggregated as a plain fraction over prompts.
pub fn eval_acc(
    model: &SurrogateModel,
    concepts: &[String],
    prompts_per_concept: usize,
    tau: f64,
    seeds: &[u64],
    prompt_seed: u64,
) -> Result<AccReport> {
    if concepts.is_empty() || seeds.is_empty() || prompts_per_concept == 0 {
        return Err(Error::Config("eval_acc needs concepts, prompts, and seeds".into()));
    }
    let mut outcomes = Vec::new();
    let mut prompt_id = 0usize;
    let mut passes = 0usize;
    let mut passes_t = 0usize;
    for concept in concepts {
        for p in sample_concept_prompts(concept, &TEMPLATES, prompts_per_concept, prompt_seed)? {
            for &seed in seeds {
                let (cos, argmax, pass, pass_t) = judge(model, &p.tokens, concept, tau, seed)?;
                passes += usize::from(pass);
                passes_t += usize::from(pass_t);
                outcomes.push(EvalOutcome {
                    prompt_id,
                    condition: Condition::Clean,
                    attacker_id: None,
                    pair_id: None,
                    intended: concept.clone(),
                    seed,
                    cosine: cos,
                    argmax,
                    pass,
                    pass_threshold_only: pass_t,
                });
                prompt_id += 1;
            }
        }
    }
    let n = outcomes.len();
    Ok(AccReport {
        acc: passes as f64 / n as f64,
        acc_threshold_only: passes_t as f64 / n as f64,
        n,
        outcomes,
    })
}

/// Clean-generation similarities used to fit the adaptive threshold: each
/// clean prompt's decoded output scored against its own concept anchor.
pub fn clean_similarities(
    model: &SurrogateModel,
    concepts: &[String],
    prompts_per_concept: usize,
    seeds: &[u64],
    prompt_seed: u64,
) -> Result<Vec<f64>> {
    let mut sims = Vec::new();
    for concept in concepts {
        let anchor = model.anchors.anchor(concept)?;
        for p in sample_concept_prompts(concept, &TEMPLATES, prompts_per_concept, prompt_seed)? {
            for &seed in seeds {
                let out = model.sample_prompt(&p.tokens, seed, false)?;
                sims.push(cosine(&out.decoded, anchor)?);
            }
        }
    }
    Ok(sims)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    /// Source concept -> number of distinct targets mapped onto it.
    pub per_source: BTreeMap<String, usize>,
    /// Fraction of source concepts with more than one distinct target.
    pub score: f64,
}

/// Counts, across the whole mapping history, how many distinct targets each
/// source concept has been redirected to.
pub fn mapping_distortion(mappings: &[(String, String)]) -> DistortionReport {
    let mut targets: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (source, target) in mappings {
        targets.entry(source.clone()).or_default().insert(target.clone());
    }
    let per_source: BTreeMap<String, usize> =
        targets.into_iter().map(|(s, t)| (s, t.len())).collect();
    let conflicted = per_source.values().filter(|c| **c > 1).count();
    let score = if per_source.is_empty() {
        0.0
    } else {
        conflicted as f64 / per_source.len() as f64
    };
    DistortionReport { per_source, score }
}

/// Mean pairwise cosine among pooled embeddings that belong to *distinct*
/// pairs — high values mean different backdoors have collapsed onto one
/// region of embedding space.
pub fn concentration_from_embeddings(items: &[(usize, Vec<f64>)]) -> Result<f64> {
    let distinct: BTreeSet<usize> = items.iter().map(|(pid, _)| *pid).collect();
    if distinct.len() < 2 {
        return Err(Error::UndefinedConcentration(distinct.len()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            if items[i].0 != items[j].0 {
                acc += cosine(&items[i].1, &items[j].1)?;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Encoder-level concentration: embeds each `(pair_id, tokens)` triggered
/// prompt and scores the cross-pair cosine structure.
pub fn concentration_score(
    encoder: &EncoderParams,
    triggered: &[(usize, Vec<String>)],
) -> Result<f64> {
    let mut items = Vec::with_capacity(triggered.len());
    for (pid, tokens) in triggered {
        items.push((*pid, encoder.encode_text(tokens)?.pooled));
    }
    concentration_from_embeddings(&items)
}

/// One row of the per-stage summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub stage: usize,
    /// Attacker id as a string, or "aggregate" / "clean".
    pub attacker: String,
    pub pairs: usize,
    pub asr: f64,
    pub acc: f64,
    pub tau: f64,
    pub concentration: f64,
    pub distortion: f64,
}

pub const SUMMARY_HEADER: &str = "stage,attacker,pairs,asr,acc,tau,concentration,distortion";

impl SummaryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.stage, self.attacker, self.pairs, self.asr, self.acc, self.tau,
            self.concentration, self.distortion
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng;
    use crate::vocab::{assign_pairs, build_concept_pool};
    use rand::Rng;

    fn strings(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn threshold_handles_exact_and_degenerate_lists() {
        assert_eq!(adaptive_threshold(&[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(adaptive_threshold(&[0.8; 10]).unwrap(), 0.8);
        assert_eq!(adaptive_threshold(&[0.3]).unwrap(), 0.3);
        assert!(matches!(adaptive_threshold(&[]), Err(Error::EmptyPercentile)));
    }

    #[test]
    fn threshold_matches_sort_oracle_on_random_lists() {
        // independent oracle: integer decomposition of the rank 0.25 (n - 1)
        let oracle = |xs: &[f64]| -> f64 {
            let mut s = xs.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let idx = (s.len() - 1) / 4;
            let rem = (s.len() - 1) % 4;
            let frac = rem as f64 * 0.25;
            s[idx] + frac * (s[(idx + 1).min(s.len() - 1)] - s[idx])
        };
        let mut r = rng::stream(3, &[1]);
        for trial in 0..100 {
            let n = r.gen_range(1..40);
            let xs: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
            assert_eq!(adaptive_threshold(&xs).unwrap(), oracle(&xs), "trial {trial}");
        }
        // 1000 draws, single big list
        let xs: Vec<f64> = (0..1000).map(|_| r.gen_range(0.0..1.0)).collect();
        assert_eq!(adaptive_threshold(&xs).unwrap(), oracle(&xs));
    }

    #[test]
    fn threshold_is_permutation_invariant() {
        let mut r = rng::stream(5, &[2]);
        let xs: Vec<f64> = (0..31).map(|_| r.gen_range(-1.0..1.0)).collect();
        let tau = adaptive_threshold(&xs).unwrap();
        let mut shuffled = xs.clone();
        let perm = rng::permutation(&mut r, xs.len());
        for (k, &p) in perm.iter().enumerate() {
            shuffled[k] = xs[p];
        }
        assert_eq!(adaptive_threshold(&shuffled).unwrap(), tau);
    }

    fn synthetic_outcome(aid: usize, pid: usize, pass: bool) -> EvalOutcome {
        EvalOutcome {
            prompt_id: 0,
            condition: Condition::Triggered,
            attacker_id: Some(aid),
            pair_id: Some(pid),
            intended: "x".into(),
            seed: 0,
            cosine: if pass { 1.0 } else { -1.0 },
            argmax: "x".into(),
            pass,
            pass_threshold_only: pass,
        }
    }

    #[test]
    fn aggregate_is_attacker_mean_not_pair_mean() {
        // attacker 0: nine pairs, all passing; attacker 1: one pair, failing
        let mut outcomes = Vec::new();
        for pid in 0..9 {
            outcomes.push(synthetic_outcome(0, pid, true));
        }
        outcomes.push(synthetic_outcome(1, 99, false));
        let report = asr_from_outcomes(&outcomes, &[0, 1]);
        assert_eq!(report.per_attacker[0].asr, 1.0);
        assert_eq!(report.per_attacker[1].asr, 0.0);
        assert_eq!(report.aggregate, 0.5, "Eq-style aggregate averages attackers, not pairs");
        // recomposition invariant
        let mean = report.per_attacker.iter().map(|a| a.asr).sum::<f64>()
            / report.per_attacker.len() as f64;
        assert!((report.aggregate - mean).abs() <= 1e-12);
    }

    #[test]
    fn single_attacker_aggregate_is_its_own_asr() {
        let outcomes = vec![
            synthetic_outcome(3, 0, true),
            synthetic_outcome(3, 0, false),
            synthetic_outcome(3, 1, true),
        ];
        let report = asr_from_outcomes(&outcomes, &[3]);
        assert_eq!(report.per_attacker.len(), 1);
        assert_eq!(report.aggregate, report.per_attacker[0].asr);
        assert_eq!(report.per_attacker[0].asr, 0.75); // pair 0: 1/2, pair 1: 1/1
    }

    #[test]
    fn attackers_without_outcomes_are_excluded_with_warning() {
        let outcomes = vec![synthetic_outcome(0, 0, true)];
        let report = asr_from_outcomes(&outcomes, &[0, 7]);
        assert_eq!(report.per_attacker.len(), 1);
        assert_eq!(report.aggregate, 1.0);
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("attacker 7"));
    }

    fn eval_fixture(seed: u64) -> (SurrogateModel, AttackPlan, Vec<String>) {
        let concepts = strings(&["cat", "dog", "fox", "owl"]);
        let pool = build_concept_pool(&concepts, 2, seed).unwrap();
        let mut plan = assign_pairs(&pool, 2).unwrap();
        let pids: Vec<usize> = plan.all_pairs().map(|p| p.pair_id).collect();
        plan.set_trigger(pids[0], "zilch").unwrap();
        plan.set_trigger(pids[1], "quorv").unwrap();
        let mut tokens: Vec<String> = TEMPLATES
            .iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|w| *w != "{}")
            .map(|w| w.to_string())
            .collect();
        tokens.extend(strings(&["zilch", "quorv"]));
        let config = ModelConfig {
            embed_dim: 12,
            latent_dim: 6,
            hidden_dim: 16,
            timesteps: 10,
            seed,
            ..ModelConfig::default()
        };
        let model = SurrogateModel::init(config, &tokens, &concepts, pool.len() + 1).unwrap();
        (model, plan, concepts)
    }

    #[test]
    fn eval_asr_matches_hand_recount_of_outcomes() {
        let (model, plan, _) = eval_fixture(9);
        let report = eval_asr(&model, &plan, 2, 0.5, &[11, 12], 77).unwrap();
        // recount with plain hash maps
        let mut per_pair: std::collections::HashMap<(usize, usize), (usize, usize)> =
            std::collections::HashMap::new();
        for o in &report.outcomes {
            let key = (o.attacker_id.unwrap(), o.pair_id.unwrap());
            let e = per_pair.entry(key).or_default();
            e.0 += usize::from(o.pass);
            e.1 += 1;
        }
        for att in &report.per_attacker {
            let mut pair_rates = Vec::new();
            for ((aid, _), (pass, total)) in &per_pair {
                if aid == &att.attacker_id {
                    pair_rates.push(*pass as f64 / *total as f64);
                }
            }
            let want = pair_rates.iter().sum::<f64>() / pair_rates.len() as f64;
            assert!((att.asr - want).abs() <= 1e-12);
            assert_eq!(att.pairs, pair_rates.len());
        }
        let want_agg = report.per_attacker.iter().map(|a| a.asr).sum::<f64>()
            / report.per_attacker.len() as f64;
        assert!((report.aggregate - want_agg).abs() <= 1e-12);
        // determinism
        let again = eval_asr(&model, &plan, 2, 0.5, &[11, 12], 77).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn raising_tau_never_increases_pass_rates() {
        let (model, plan, concepts) = eval_fixture(13);
        let taus = [-1.0, 0.0, 0.3, 0.8, 1.01];
        let mut last_asr = f64::INFINITY;
        let mut last_acc = f64::INFINITY;
        for tau in taus {
            let asr = eval_asr(&model, &plan, 2, tau, &[5], 3).unwrap().aggregate;
            let acc = eval_acc(&model, &concepts, 2, tau, &[5], 3).unwrap().acc;
            assert!(asr <= last_asr + 1e-15, "ASR rose from {last_asr} to {asr} at tau {tau}");
            assert!(acc <= last_acc + 1e-15, "ACC rose from {last_acc} to {acc} at tau {tau}");
            last_asr = asr;
            last_acc = acc;
        }
    }

    #[test]
    fn untrained_model_acc_is_near_chance() {
        // with 4 concepts and a fresh random model, the nearest-anchor match
        // rate over many prompts should hover around 1/4
        let (model, _, concepts) = eval_fixture(17);
        let report = eval_acc(&model, &concepts, 10, -1.0, &[1, 2, 3, 4, 5], 21).unwrap();
        assert_eq!(report.n, 4 * 10 * 5);
        let match_rate =
            report.outcomes.iter().filter(|o| o.argmax == o.intended).count() as f64
                / report.n as f64;
        assert!(
            (match_rate - 0.25).abs() <= 0.1,
            "argmax match rate {match_rate} not near chance"
        );
        // with tau below every cosine, pass == argmax agreement
        assert!((report.acc - match_rate).abs() <= 1e-12);
        assert_eq!(report.acc_threshold_only, 1.0);
        assert!((0.0..=1.0).contains(&report.acc));
    }

    #[test]
    fn mapping_distortion_counts_distinct_targets() {
        let disjoint = vec![
            ("cat".to_string(), "dog".to_string()),
            ("fox".to_string(), "owl".to_string()),
        ];
        let rep = mapping_distortion(&disjoint);
        assert_eq!(rep.score, 0.0);
        assert_eq!(rep.per_source["cat"], 1);

        let conflicted = vec![
            ("cat".to_string(), "dog".to_string()),
            ("cat".to_string(), "owl".to_string()),
            ("fox".to_string(), "owl".to_string()),
        ];
        let rep = mapping_distortion(&conflicted);
        assert_eq!(rep.per_source["cat"], 2);
        assert_eq!(rep.score, 0.5); // one of two sources conflicted

        // duplicate identical mappings do not double-count
        let dup = vec![
            ("cat".to_string(), "dog".to_string()),
            ("cat".to_string(), "dog".to_string()),
        ];
        assert_eq!(mapping_distortion(&dup).per_source["cat"], 1);
    }

    #[test]
    fn mapping_distortion_matches_hashmap_oracle_on_random_histories() {
        let mut r = rng::stream(23, &[4]);
        let names = ["a", "b", "c", "d", "e", "f"];
        for _ in 0..50 {
            let history: Vec<(String, String)> = (0..20)
                .map(|_| {
                    (
                        names[r.gen_range(0..names.len())].to_string(),
                        names[r.gen_range(0..names.len())].to_string(),
                    )
                })
                .collect();
            let rep = mapping_distortion(&history);
            let mut oracle: std::collections::HashMap<&str, std::collections::HashSet<&str>> =
                std::collections::HashMap::new();
            for (s, t) in &history {
                oracle.entry(s).or_default().insert(t);
            }
            assert_eq!(rep.per_source.len(), oracle.len());
            for (s, ts) in &oracle {
                assert_eq!(rep.per_source[*s], ts.len());
            }
            let conflicts = oracle.values().filter(|t| t.len() > 1).count();
            assert_eq!(rep.score, conflicts as f64 / oracle.len() as f64);
        }
    }

    #[test]
    fn concentration_identical_is_one_orthogonal_is_zero() {
        let same = vec![
            (0usize, vec![0.6, 0.8]),
            (1usize, vec![0.6, 0.8]),
            (2usize, vec![0.6, 0.8]),
        ];
        assert!((concentration_from_embeddings(&same).unwrap() - 1.0).abs() <= 1e-12);
        let ortho = vec![(0usize, vec![1.0, 0.0]), (1usize, vec![0.0, 1.0])];
        assert!(concentration_from_embeddings(&ortho).unwrap().abs() <= 1e-12);
        // within-pair cosines are excluded
        let mixed = vec![
            (0usize, vec![1.0, 0.0]),
            (0usize, vec![1.0, 0.0]), // cos 1 with the one above, but same pair
            (1usize, vec![0.0, 1.0]),
        ];
        assert!(concentration_from_embeddings(&mixed).unwrap().abs() <= 1e-12);
        let err = concentration_from_embeddings(&[(0, vec![1.0, 0.0]), (0, vec![1.0, 0.0])])
            .unwrap_err();
        assert!(matches!(err, Error::UndefinedConcentration(1)));
    }

    #[test]
    fn concentration_score_matches_embedding_recompute() {
        let (model, plan, _) = eval_fixture(29);
        let mut triggered = Vec::new();
        for attacker in &plan.attackers {
            for (pair, trigger) in attacker.armed().unwrap() {
                for p in sample_prompts(pair, &TEMPLATES, 3, 8).unwrap() {
                    let t = insert_trigger(&p, trigger, InsertPosition::BeforeSource).unwrap();
                    triggered.push((pair.pair_id, t.tokens));
                }
            }
        }
        let got = concentration_score(&model.encoder, &triggered).unwrap();
        let items: Vec<(usize, Vec<f64>)> = triggered
            .iter()
            .map(|(pid, toks)| (*pid, model.encoder.encode_text(toks).unwrap().pooled))
            .collect();
        let want = concentration_from_embeddings(&items).unwrap();
        assert!((got - want).abs() <= 1e-10);
        assert!((-1.0..=1.0).contains(&got));
    }

    #[test]
    fn summary_row_renders_stable_csv() {
        let row = SummaryRow {
            stage: 2,
            attacker: "0".into(),
            pairs: 3,
            asr: 0.5,
            acc: 0.875,
            tau: 0.25,
            concentration: -0.125,
            distortion: 0.0,
        };
        assert_eq!(row.to_csv(), "2,0,3,0.5,0.875,0.25,-0.125,0");
        assert_eq!(SUMMARY_HEADER.split(',').count(), row.to_csv().split(',').count());
    }
}
