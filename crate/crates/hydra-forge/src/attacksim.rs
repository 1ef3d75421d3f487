//! The sequential multi-attacker chain harness: each stage fine-tunes the
//! model the previous stage produced, arms its own triggers against the
//! *current* encoder, and is followed by an evaluation of every attacker
//! injected so far plus clean behavior.
//!
//! A chain run persists everything into one run directory: a provenance-
//! chained checkpoint per stage, per-stage metrics as JSON Lines, the
//! stage-by-attacker retention matrix as CSV, and trigger-search traces.
//! Identical (base model, plan, spec, seeds) reproduce the directory
//! byte-for-byte, and any stage checkpoint can seed a bit-exact resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chainio::{
    append_jsonl, checkpoint_to_model, file_sha256, load_checkpoint, model_to_checkpoint,
    save_checkpoint, write_csv, write_json, write_jsonl, Provenance,
};
use crate::error::{Error, Result};
use crate::evosearch::{evolve, FitnessWeights, GaConfig};
use crate::inject::{
    assign_uniform_triggers, downstream_finetune, eviledit_inject, naive_poison_inject,
    rickroll_inject, train_stage_a, train_stage_b, DataConfig, FinetuneMode, TrainConfig,
};
use crate::metrics::{
    adaptive_threshold, clean_similarities, concentration_score, eval_acc, eval_asr_at,
    mapping_distortion, AttackerAsr, SummaryRow, SUMMARY_HEADER,
};
use crate::model::SurrogateModel;
use crate::rng;
use crate::vocab::{
    insert_trigger, sample_prompts, AttackPlan, ConceptPair, InsertPosition, Method, Vocabulary,
    TEMPLATES,
};

/// Domain-separation tag for per-stage seed derivation.
const STAGE_TAG: u64 = 0x57a6e;
/// Tag for per-pair trigger-search seeds within a stage.
const SEARCH_TAG: u64 = 0x6a;
const RETENTION_HEADER: &str = "stage,attacker_id,pairs,asr";

/// Which clean prompts the per-stage ACC is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccScope {
    /// Source concepts of the first injected attacker's pairs.
    FirstAttacker,
    /// Every concept the model knows.
    Global,
}

/// Evaluation protocol shared by the chain, the ablations, and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub prompts_per_pair: usize,
    pub prompts_per_concept: usize,
    /// Number of generation seeds per prompt.
    pub n_seeds: usize,
    pub prompt_seed: u64,
    /// Keep the base model's tau for the whole chain/sweep (default) or
    /// refit tau on every evaluated model. The fixed-base bar is what makes
    /// cross-stage ASR/ACC comparable: a refit bar tracks the degrading
    /// model, so by construction ~25% of clean generations always fail it.
    pub recompute_tau: bool,
    pub acc_scope: AccScope,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prompts_per_pair: 4,
            prompts_per_concept: 4,
            n_seeds: 3,
            prompt_seed: 1,
            recompute_tau: false,
            acc_scope: AccScope::FirstAttacker,
        }
    }
}

impl EvalConfig {
    /// The fixed generation-seed list used everywhere a model is sampled.
    pub fn gen_seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64)
            .map(|i| rng::mix(self.prompt_seed, &[0x5eed, i]))
            .collect()
    }
}

/// Maps a config method name to an in-scope [`Method`]. Villan, Bagm, and
/// Nightshade exceed what the surrogate can host faithfully and are
/// substituted by naive poisoning; the substitution note must be stamped
/// into the run header.
pub fn resolve_method(name: &str) -> Result<(Method, Option<String>)> {
    let m = match name {
        "hydra" => Method::Hydra,
        "rickroll" => Method::Rickroll,
        "evil-edit" => Method::EvilEdit,
        "naive-poison" => Method::NaivePoison,
        "clean-finetune-full" => Method::CleanFinetuneFull,
        "clean-finetune-low-rank" => Method::CleanFinetuneLowRank,
        "villan" | "bagm" | "nightshade" => {
            return Ok((
                Method::NaivePoison,
                Some(format!("{name} substituted by naive-poison")),
            ));
        }
        _ => return Err(Error::Config(format!("unknown method {name:?}"))),
    };
    Ok((m, None))
}

/// Whether a stage adds a new backdoor (as opposed to clean fine-tuning).
pub fn is_injection(method: Method) -> bool {
    matches!(
        method,
        Method::Hydra | Method::Rickroll | Method::EvilEdit | Method::NaivePoison
    )
}

/// One chain stage: who runs, with what method, and optional training
/// overrides (the stage seed is always re-derived from the chain seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub attacker_id: usize,
    pub method: Method,
    pub train: Option<TrainConfig>,
}

/// The full chain protocol. `stages` run strictly in order; injection
/// stages must own a plan slice keyed by their attacker id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub stages: Vec<StageSpec>,
    /// Default per-stage training config (seed field is ignored; each stage
    /// derives its own from `seed`).
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ga: GaConfig,
    pub weights: FitnessWeights,
    /// Clean fine-tune stage budget.
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub lowrank_rank: usize,
    pub seed: u64,
}

impl ChainSpec {
    pub fn validate(&self, plan: &AttackPlan) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::BadChainSpec("chain needs at least one stage".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.stages {
            if !seen.insert(s.attacker_id) {
                return Err(Error::BadChainSpec(format!(
                    "attacker id {} appears in two stages",
                    s.attacker_id
                )));
            }
            if is_injection(s.method) {
                plan.attacker(s.attacker_id)?;
            } else if self.data.benign_concepts.is_empty() {
                return Err(Error::Config(
                    "clean fine-tune stages need benign concepts".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Splits the pool across the injection stages of a method list and builds
/// the matching stage specs: stage k gets attacker id k; injection stages
/// own contiguous pool slices in order, clean stages own nothing.
pub fn build_chain(
    pool: &[ConceptPair],
    methods: &[Method],
) -> Result<(AttackPlan, Vec<StageSpec>)> {
    let inject_stages: Vec<usize> = methods
        .iter()
        .enumerate()
        .filter_map(|(k, m)| is_injection(*m).then_some(k))
        .collect();
    if inject_stages.is_empty() {
        return Err(Error::BadChainSpec("no injection stage in the chain".into()));
    }
    let mut plan = crate::vocab::assign_pairs(pool, inject_stages.len())?;
    for (slot, &stage) in inject_stages.iter().enumerate() {
        plan.attackers[slot].attacker_id = stage;
        plan.attackers[slot].method = methods[stage];
    }
    let stages = methods
        .iter()
        .enumerate()
        .map(|(k, m)| StageSpec {
            attacker_id: k,
            method: *m,
            train: None,
        })
        .collect();
    Ok((plan, stages))
}

/// One line of `metrics.jsonl`: the state of the chain after a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub attacker_id: usize,
    pub method: Method,
    /// Checkpoint path relative to the run directory.
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    /// pair id -> trigger word armed at this stage (empty for clean stages).
    pub new_triggers: BTreeMap<usize, String>,
    pub tau: f64,
    /// `None` until the first injection stage has run.
    pub asr_aggregate: Option<f64>,
    /// Per-injected-attacker ASR; one retention-matrix row cell each.
    pub per_attacker: Vec<AttackerAsr>,
    pub acc: f64,
    /// Cross-pair trigger concentration; `None` with fewer than 2 armed pairs.
    pub concentration: Option<f64>,
    pub distortion: f64,
}

/// Divergence marker persisted as `abort.json` when a stage blows up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortMarker {
    pub stage: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub stages: Vec<StageRecord>,
    /// All persisted checkpoints in chain order (base first on a full run).
    pub checkpoints: Vec<PathBuf>,
    /// The plan with every trigger armed so far.
    pub plan: AttackPlan,
    pub aborted: Option<AbortMarker>,
}

fn seed_ledger(
    spec: &ChainSpec,
    eval: &EvalConfig,
    model_seed: u64,
    stage_seed: u64,
    base_tau: f64,
) -> BTreeMap<String, u64> {
    let mut seeds = BTreeMap::new();
    seeds.insert("model".into(), model_seed);
    seeds.insert("chain".into(), spec.seed);
    seeds.insert("stage".into(), stage_seed);
    seeds.insert("ga".into(), spec.ga.seed);
    seeds.insert("eval_prompt".into(), eval.prompt_seed);
    seeds.insert("base_tau_bits".into(), base_tau.to_bits());
    seeds
}

/// Runs the whole chain from a freshly initialized (or loaded) base model,
/// writing `checkpoints/`, `metrics.jsonl`, `retention.csv`, and
/// `summary.csv` into `dir`. Training divergence aborts the chain, keeping
/// the partial artifacts plus an `abort.json` marker.
pub fn run_chain(
    base: &SurrogateModel,
    plan: &AttackPlan,
    vocab: &Vocabulary,
    spec: &ChainSpec,
    eval: &EvalConfig,
    dir: &Path,
) -> Result<ChainResult> {
    spec.validate(plan)?;
    fs::create_dir_all(dir.join("checkpoints"))?;
    let seeds = eval.gen_seeds();
    let base_tau = adaptive_threshold(&clean_similarities(
        base,
        &base.anchors.concepts,
        eval.prompts_per_concept,
        &seeds,
        eval.prompt_seed,
    )?)?;
    let base_cp = model_to_checkpoint(
        base,
        seed_ledger(spec, eval, base.config.seed, spec.seed, base_tau),
        Provenance {
            stage: 0,
            method: "base".into(),
            parent_hash: None,
        },
    );
    let base_path = dir.join("checkpoints").join("base.json");
    let base_hash = save_checkpoint(&base_cp, &base_path)?;
    write_json(&dir.join("checkpoints").join("base.plan.json"), plan)?;
    let mut result = run_stages(
        base.clone(),
        plan.clone(),
        vocab,
        spec,
        eval,
        dir,
        0,
        base_tau,
        base_hash,
    )?;
    result.checkpoints.insert(0, base_path);
    Ok(result)
}

/// Re-runs stages `start_stage..` from the persisted state of a previous
/// run. With identical spec and eval config, the produced checkpoints and
/// metrics records are byte-identical to the original run's.
pub fn resume_chain(
    src_dir: &Path,
    start_stage: usize,
    vocab: &Vocabulary,
    spec: &ChainSpec,
    eval: &EvalConfig,
    dir: &Path,
) -> Result<ChainResult> {
    if start_stage > spec.stages.len() {
        return Err(Error::BadChainSpec(format!(
            "start stage {start_stage} beyond the {}-stage spec",
            spec.stages.len()
        )));
    }
    let stem = if start_stage == 0 {
        "base".to_string()
    } else {
        format!("stage{}", start_stage - 1)
    };
    let cp_path = src_dir.join("checkpoints").join(format!("{stem}.json"));
    let plan_path = src_dir.join("checkpoints").join(format!("{stem}.plan.json"));
    let cp = load_checkpoint(&cp_path)?;
    let model = checkpoint_to_model(&cp)?;
    let plan: AttackPlan = serde_json::from_slice(&fs::read(&plan_path)?)?;
    spec.validate(&plan)?;
    let base_tau = cp
        .seeds
        .get("base_tau_bits")
        .map(|bits| f64::from_bits(*bits))
        .ok_or_else(|| Error::Config("checkpoint has no base_tau_bits entry".into()))?;
    let parent_hash = file_sha256(&cp_path)?;
    fs::create_dir_all(dir.join("checkpoints"))?;
    run_stages(model, plan, vocab, spec, eval, dir, start_stage, base_tau, parent_hash)
}

#[allow(clippy::too_many_arguments)]
fn run_stages(
    mut model: SurrogateModel,
    mut plan: AttackPlan,
    vocab: &Vocabulary,
    spec: &ChainSpec,
    eval: &EvalConfig,
    dir: &Path,
    start_stage: usize,
    base_tau: f64,
    mut parent_hash: String,
) -> Result<ChainResult> {
    let metrics_path = dir.join("metrics.jsonl");
    let mut records: Vec<StageRecord> = Vec::new();
    let mut checkpoints = Vec::new();
    let mut aborted = None;
    for (k, stage) in spec.stages.iter().enumerate().skip(start_stage) {
        let stage_seed = rng::mix(spec.seed, &[STAGE_TAG, k as u64]);
        let mut cfg = stage.train.clone().unwrap_or_else(|| spec.train.clone());
        cfg.seed = stage_seed;
        match run_stage_method(&mut model, &mut plan, vocab, spec, stage, &cfg, stage_seed, k, dir)
        {
            Ok(()) => {}
            Err(e @ (Error::TrainDiverged { .. } | Error::SampleDiverged { .. })) => {
                let marker = AbortMarker {
                    stage: k,
                    error: e.to_string(),
                };
                write_json(&dir.join("abort.json"), &marker)?;
                aborted = Some(marker);
                break;
            }
            Err(e) => return Err(e),
        }
        let cp = model_to_checkpoint(
            &model,
            seed_ledger(spec, eval, model.config.seed, stage_seed, base_tau),
            Provenance {
                stage: k,
                method: stage.method.to_string(),
                parent_hash: Some(parent_hash.clone()),
            },
        );
        let rel = format!("checkpoints/stage{k}.json");
        let path = dir.join(&rel);
        let hash = save_checkpoint(&cp, &path)?;
        write_json(&dir.join(format!("checkpoints/stage{k}.plan.json")), &plan)?;
        parent_hash = hash.clone();
        checkpoints.push(path);
        let record = match evaluate_stage(&model, &plan, spec, eval, k, stage, base_tau, rel, hash)
        {
            Ok(r) => r,
            Err(e @ Error::SampleDiverged { .. }) => {
                let marker = AbortMarker {
                    stage: k,
                    error: e.to_string(),
                };
                write_json(&dir.join("abort.json"), &marker)?;
                aborted = Some(marker);
                break;
            }
            Err(e) => return Err(e),
        };
        append_jsonl(&metrics_path, &record)?;
        records.push(record);
    }
    write_retention_csv(dir, &records)?;
    write_summary_csv(dir, &records)?;
    Ok(ChainResult {
        stages: records,
        checkpoints,
        plan,
        aborted,
    })
}

/// Arms this stage's triggers against the current encoder and applies the
/// stage's method to the model.
#[allow(clippy::too_many_arguments)]
fn run_stage_method(
    model: &mut SurrogateModel,
    plan: &mut AttackPlan,
    vocab: &Vocabulary,
    spec: &ChainSpec,
    stage: &StageSpec,
    cfg: &TrainConfig,
    stage_seed: u64,
    stage_index: usize,
    dir: &Path,
) -> Result<()> {
    match stage.method {
        Method::Hydra => {
            let pair_ids: Vec<usize> = plan
                .attacker(stage.attacker_id)?
                .pairs()
                .map(|p| p.pair_id)
                .collect();
            for pair_id in pair_ids {
                let attacker = plan.attacker(stage.attacker_id)?;
                let pos: Vec<ConceptPair> = attacker
                    .pairs()
                    .filter(|p| p.pair_id == pair_id)
                    .cloned()
                    .collect();
                let neg: Vec<ConceptPair> = attacker
                    .pairs()
                    .filter(|p| p.pair_id != pair_id)
                    .cloned()
                    .collect();
                let restricted = vocab.without(&plan.used_triggers());
                let ga = GaConfig {
                    seed: rng::mix(stage_seed, &[SEARCH_TAG, pair_id as u64]),
                    ..spec.ga.clone()
                };
                let found = evolve(
                    &restricted,
                    &pos,
                    &neg,
                    &model.encoder,
                    &model.anchors,
                    &spec.weights,
                    &ga,
                )?;
                fs::create_dir_all(dir.join("search"))?;
                write_jsonl(
                    &dir.join(format!("search/stage{stage_index}-pair{pair_id}.jsonl")),
                    &found.trace,
                )?;
                plan.set_trigger(pair_id, &found.best)?;
            }
            let attacker = plan.attacker(stage.attacker_id)?.clone();
            train_stage_a(model, &attacker, &spec.data, cfg)?;
            train_stage_b(model, &attacker, &spec.data, cfg)?;
        }
        Method::Rickroll => {
            assign_uniform_triggers(plan, stage.attacker_id, vocab, stage_seed)?;
            let attacker = plan.attacker(stage.attacker_id)?.clone();
            rickroll_inject(model, &attacker, &spec.data, cfg)?;
        }
        Method::EvilEdit => {
            assign_uniform_triggers(plan, stage.attacker_id, vocab, stage_seed)?;
            let attacker = plan.attacker(stage.attacker_id)?.clone();
            eviledit_inject(model, &attacker, &spec.data, stage_seed)?;
        }
        Method::NaivePoison => {
            naive_poison_inject(model, plan, stage.attacker_id, vocab, &spec.data, cfg)?;
        }
        Method::CleanFinetuneFull => {
            downstream_finetune(
                model,
                &spec.data,
                FinetuneMode::Full,
                spec.finetune_steps,
                spec.finetune_lr,
                stage_seed,
            )?;
        }
        Method::CleanFinetuneLowRank => {
            downstream_finetune(
                model,
                &spec.data,
                FinetuneMode::LowRank(spec.lowrank_rank),
                spec.finetune_steps,
                spec.finetune_lr,
                stage_seed,
            )?;
        }
    }
    Ok(())
}

/// Attackers already injected once stage `k` has finished, in stage order.
fn injected_plan(plan: &AttackPlan, spec: &ChainSpec, k: usize) -> AttackPlan {
    let injected: Vec<usize> = spec.stages[..=k]
        .iter()
        .filter(|s| is_injection(s.method))
        .map(|s| s.attacker_id)
        .collect();
    AttackPlan {
        attackers: injected
            .iter()
            .filter_map(|id| plan.attackers.iter().find(|a| a.attacker_id == *id))
            .cloned()
            .collect(),
    }
}

fn acc_concepts(model: &SurrogateModel, eval_plan: &AttackPlan, scope: AccScope) -> Vec<String> {
    if scope == AccScope::FirstAttacker {
        if let Some(first) = eval_plan.attackers.first() {
            let mut cs: Vec<String> = first.pairs().map(|p| p.source.clone()).collect();
            cs.sort();
            cs.dedup();
            if !cs.is_empty() {
                return cs;
            }
        }
    }
    model.anchors.concepts.clone()
}

/// Everything one evaluation pass measures on a model snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub tau: f64,
    /// `None` when the plan holds no armed attackers.
    pub asr_aggregate: Option<f64>,
    pub per_attacker: Vec<AttackerAsr>,
    pub acc: f64,
    /// `None` with fewer than 2 armed pairs.
    pub concentration: Option<f64>,
    pub distortion: f64,
}

/// Evaluates a model against an armed plan: tau (refit unless overridden),
/// per-attacker and aggregate ASR, clean ACC over the configured scope,
/// trigger concentration, and mapping distortion. Never mutates the model.
pub fn evaluate_model(
    model: &SurrogateModel,
    eval_plan: &AttackPlan,
    position: InsertPosition,
    eval: &EvalConfig,
    tau_override: Option<f64>,
) -> Result<ModelEvaluation> {
    let seeds = eval.gen_seeds();
    let tau = match tau_override {
        Some(t) => t,
        None => adaptive_threshold(&clean_similarities(
            model,
            &model.anchors.concepts,
            eval.prompts_per_concept,
            &seeds,
            eval.prompt_seed,
        )?)?,
    };
    let (asr_aggregate, per_attacker) = if eval_plan.attackers.is_empty() {
        (None, Vec::new())
    } else {
        let report = eval_asr_at(
            model,
            eval_plan,
            position,
            eval.prompts_per_pair,
            tau,
            &seeds,
            eval.prompt_seed,
        )?;
        (Some(report.aggregate), report.per_attacker)
    };
    let acc = eval_acc(
        model,
        &acc_concepts(model, eval_plan, eval.acc_scope),
        eval.prompts_per_concept,
        tau,
        &seeds,
        eval.prompt_seed,
    )?
    .acc;
    let mut triggered = Vec::new();
    let mut mappings = Vec::new();
    for attacker in &eval_plan.attackers {
        for (pair, trigger) in attacker.armed()? {
            mappings.push((pair.source.clone(), pair.target.clone()));
            for p in sample_prompts(pair, &TEMPLATES, eval.prompts_per_pair, eval.prompt_seed)? {
                let t = insert_trigger(&p, trigger, position)?;
                triggered.push((pair.pair_id, t.tokens));
            }
        }
    }
    let concentration = match concentration_score(&model.encoder, &triggered) {
        Ok(c) => Some(c),
        Err(Error::UndefinedConcentration(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ModelEvaluation {
        tau,
        asr_aggregate,
        per_attacker,
        acc,
        concentration,
        distortion: mapping_distortion(&mappings).score,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_stage(
    model: &SurrogateModel,
    plan: &AttackPlan,
    spec: &ChainSpec,
    eval: &EvalConfig,
    k: usize,
    stage: &StageSpec,
    base_tau: f64,
    checkpoint: String,
    checkpoint_sha256: String,
) -> Result<StageRecord> {
    let eval_plan = injected_plan(plan, spec, k);
    let tau_override = (!eval.recompute_tau).then_some(base_tau);
    let m = evaluate_model(model, &eval_plan, spec.data.position, eval, tau_override)?;
    let new_triggers = if is_injection(stage.method) {
        plan.attacker(stage.attacker_id)?
            .armed()?
            .into_iter()
            .map(|(pair, trigger)| (pair.pair_id, trigger.to_string()))
            .collect()
    } else {
        BTreeMap::new()
    };
    Ok(StageRecord {
        stage: k,
        attacker_id: stage.attacker_id,
        method: stage.method,
        checkpoint,
        checkpoint_sha256,
        new_triggers,
        tau: m.tau,
        asr_aggregate: m.asr_aggregate,
        per_attacker: m.per_attacker,
        acc: m.acc,
        concentration: m.concentration,
        distortion: m.distortion,
    })
}

fn write_retention_csv(dir: &Path, records: &[StageRecord]) -> Result<()> {
    let mut rows = Vec::new();
    for r in records {
        for a in &r.per_attacker {
            rows.push(format!("{},{},{},{}", r.stage, a.attacker_id, a.pairs, a.asr));
        }
    }
    write_csv(&dir.join("retention.csv"), RETENTION_HEADER, &rows)
}

fn write_summary_csv(dir: &Path, records: &[StageRecord]) -> Result<()> {
    let mut rows = Vec::new();
    for r in records {
        let conc = r.concentration.unwrap_or(f64::NAN);
        for a in &r.per_attacker {
            rows.push(
                SummaryRow {
                    stage: r.stage,
                    attacker: a.attacker_id.to_string(),
                    pairs: a.pairs,
                    asr: a.asr,
                    acc: r.acc,
                    tau: r.tau,
                    concentration: conc,
                    distortion: r.distortion,
                }
                .to_csv(),
            );
        }
        rows.push(
            SummaryRow {
                stage: r.stage,
                attacker: "aggregate".into(),
                pairs: r.per_attacker.iter().map(|a| a.pairs).sum(),
                asr: r.asr_aggregate.unwrap_or(f64::NAN),
                acc: r.acc,
                tau: r.tau,
                concentration: conc,
                distortion: r.distortion,
            }
            .to_csv(),
        );
    }
    write_csv(&dir.join("summary.csv"), SUMMARY_HEADER, &rows)
}

// ---------------------------------------------------------------------------
// ablations and sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub position: InsertPosition,
    pub asr: f64,
    pub acc: f64,
}

pub const POSITION_HEADER: &str = "position,asr,acc";

/// Four chain runs from the same base differing only in trigger insertion
/// position (training and evaluation both use the varied position); one
/// subdirectory and one table row per position.
pub fn position_ablation(
    base: &SurrogateModel,
    plan: &AttackPlan,
    vocab: &Vocabulary,
    spec: &ChainSpec,
    eval: &EvalConfig,
    dir: &Path,
) -> Result<Vec<PositionRow>> {
    let positions = [
        InsertPosition::Begin,
        InsertPosition::BeforeSource,
        InsertPosition::AfterSource,
        InsertPosition::End,
    ];
    let mut rows = Vec::with_capacity(positions.len());
    for position in positions {
        let mut varied = spec.clone();
        varied.data.position = position;
        let sub = dir.join(position.to_string());
        fs::create_dir_all(&sub)?;
        let result = run_chain(base, plan, vocab, &varied, eval, &sub)?;
        if let Some(a) = &result.aborted {
            return Err(Error::Config(format!(
                "position {position} run aborted at stage {}: {}",
                a.stage, a.error
            )));
        }
        let last = result.stages.last().expect("non-empty chain");
        rows.push(PositionRow {
            position,
            asr: last.asr_aggregate.unwrap_or(0.0),
            acc: last.acc,
        });
    }
    let csv: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{}", r.position, r.asr, r.acc))
        .collect();
    write_csv(&dir.join("position_ablation.csv"), POSITION_HEADER, &csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    pub stage: usize,
    pub asr: f64,
    pub acc: f64,
}

pub const RETENTION_CURVE_HEADER: &str = "stage,asr,acc";

/// Homogeneous chain that tracks the FIRST attacker's backdoor after every
/// stage: the implosion/retention curve.
pub fn retention_sweep(
    base: &SurrogateModel,
    pool: &[ConceptPair],
    vocab: &Vocabulary,
    method: Method,
    n_stages: usize,
    spec_base: &ChainSpec,
    eval: &EvalConfig,
    dir: &Path,
) -> Result<Vec<RetentionPoint>> {
    let (plan, stages) = build_chain(pool, &vec![method; n_stages])?;
    let first_id = stages[0].attacker_id;
    let spec = ChainSpec {
        stages,
        ..spec_base.clone()
    };
    let result = run_chain(base, &plan, vocab, &spec, eval, dir)?;
    let mut curve = Vec::new();
    for r in &result.stages {
        let Some(cell) = r.per_attacker.iter().find(|a| a.attacker_id == first_id) else {
            continue;
        };
        curve.push(RetentionPoint {
            stage: r.stage,
            asr: cell.asr,
            acc: r.acc,
        });
    }
    let csv: Vec<String> = curve
        .iter()
        .map(|p| format!("{},{},{}", p.stage, p.asr, p.acc))
        .collect();
    write_csv(&dir.join("retention_curve.csv"), RETENTION_CURVE_HEADER, &csv)?;
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub mode: FinetuneMode,
    pub steps: usize,
    pub asr: f64,
    pub acc: f64,
}

pub const ROBUSTNESS_HEADER: &str = "mode,steps,asr,acc";

fn mode_label(mode: FinetuneMode) -> String {
    match mode {
        FinetuneMode::Full => "full".into(),
        FinetuneMode::LowRank(r) => format!("low-rank-{r}"),
    }
}

/// Downstream-robustness sweep: for every (mode, step count), fine-tune a
/// fresh copy of the injected model on clean data and evaluate the surviving
/// backdoor. All runs share one seed, so larger step counts extend smaller
/// ones along the same data trajectory.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep(
    injected: &SurrogateModel,
    plan: &AttackPlan,
    data: &DataConfig,
    modes: &[FinetuneMode],
    step_grid: &[usize],
    lr: f64,
    eval: &EvalConfig,
    seed: u64,
    dir: &Path,
) -> Result<Vec<RobustnessRow>> {
    if modes.is_empty() || step_grid.is_empty() {
        return Err(Error::Config("robustness sweep needs modes and a step grid".into()));
    }
    fs::create_dir_all(dir)?;
    let seeds = eval.gen_seeds();
    let base_tau = adaptive_threshold(&clean_similarities(
        injected,
        &injected.anchors.concepts,
        eval.prompts_per_concept,
        &seeds,
        eval.prompt_seed,
    )?)?;
    let tau_override = (!eval.recompute_tau).then_some(base_tau);
    let mut rows = Vec::new();
    for &mode in modes {
        for &steps in step_grid {
            let mut m = injected.clone();
            downstream_finetune(&mut m, data, mode, steps, lr, seed)?;
            let ev = evaluate_model(&m, plan, data.position, eval, tau_override)?;
            rows.push(RobustnessRow {
                mode,
                steps,
                asr: ev.asr_aggregate.unwrap_or(0.0),
                acc: ev.acc,
            });
        }
    }
    let csv: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{},{}", mode_label(r.mode), r.steps, r.asr, r.acc))
        .collect();
    write_csv(&dir.join("robustness.csv"), ROBUSTNESS_HEADER, &csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::build_concept_pool;

    fn strings(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn fixture() -> (SurrogateModel, Vocabulary, Vec<ConceptPair>) {
        let concepts = strings(&["cat", "dog", "car", "boat", "tree", "fish"]);
        let words = strings(&[
            "blix", "crun", "dwep", "fronk", "glimt", "harv", "jexo", "klyp", "mord", "quil",
        ]);
        let vocab = Vocabulary {
            frequencies: vec![1; words.len()],
            words,
        };
        let mut tokens: BTreeSet<String> = TEMPLATES
            .iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|t| *t != "{}")
            .map(|t| t.to_string())
            .collect();
        tokens.extend(vocab.words.iter().cloned());
        // pool pairs draw from the first four concepts; tree/fish stay benign
        let pool = build_concept_pool(&concepts[..4].to_vec(), 3, 5).unwrap();
        let config = ModelConfig {
            embed_dim: 10,
            latent_dim: 5,
            hidden_dim: 12,
            timesteps: 8,
            seed: 7,
            ..ModelConfig::default()
        };
        let model = SurrogateModel::init(config, &tokens, &concepts, pool.len() + 1).unwrap();
        (model, vocab, pool)
    }

    fn tiny_spec(stages: Vec<StageSpec>, seed: u64) -> ChainSpec {
        ChainSpec {
            stages,
            train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                ..TrainConfig::default()
            },
            data: DataConfig {
                prompts_per_pair: 2,
                position: InsertPosition::BeforeSource,
                benign_concepts: strings(&["tree", "fish"]),
            },
            ga: GaConfig {
                population: 4,
                generations: 1,
                elites: 1,
                tournament: 2,
                mutation_rate: 0.5,
                n_prompts: 2,
                seed: 0,
            },
            weights: FitnessWeights::default(),
            finetune_steps: 3,
            finetune_lr: 1e-3,
            lowrank_rank: 2,
            seed,
        }
    }

    fn tiny_eval() -> EvalConfig {
        EvalConfig {
            prompts_per_pair: 2,
            prompts_per_concept: 2,
            n_seeds: 1,
            prompt_seed: 1,
            recompute_tau: true,
            acc_scope: AccScope::Global,
        }
    }

    #[test]
    fn method_resolution_substitutes_and_stamps() {
        assert_eq!(resolve_method("hydra").unwrap(), (Method::Hydra, None));
        assert_eq!(resolve_method("evil-edit").unwrap(), (Method::EvilEdit, None));
        let (m, stamp) = resolve_method("villan").unwrap();
        assert_eq!(m, Method::NaivePoison);
        assert_eq!(stamp.unwrap(), "villan substituted by naive-poison");
        for name in ["bagm", "nightshade"] {
            let (m, stamp) = resolve_method(name).unwrap();
            assert_eq!(m, Method::NaivePoison);
            assert!(stamp.unwrap().contains("substituted"));
        }
        assert!(matches!(resolve_method("t2ishield"), Err(Error::Config(_))));
    }

    #[test]
    fn build_chain_skips_clean_stages_and_remaps_ids() {
        let (_, _, pool) = fixture();
        let methods = [
            Method::Hydra,
            Method::CleanFinetuneFull,
            Method::NaivePoison,
        ];
        let (plan, stages) = build_chain(&pool, &methods).unwrap();
        assert_eq!(stages.len(), 3);
        // two injection stages split the 3-pair pool 2 + 1
        assert_eq!(plan.attackers.len(), 2);
        assert_eq!(plan.attackers[0].attacker_id, 0);
        assert_eq!(plan.attackers[0].assignments.len(), 2);
        assert_eq!(plan.attackers[1].attacker_id, 2);
        assert_eq!(plan.attackers[1].assignments.len(), 1);
        assert_eq!(plan.attackers[1].method, Method::NaivePoison);
        // all-clean chains are rejected
        assert!(build_chain(&pool, &[Method::CleanFinetuneFull]).is_err());
    }

    #[test]
    fn single_stage_chain_equals_direct_injection() {
        let (base, vocab, pool) = fixture();
        let (plan, stages) = build_chain(&pool[..1], &[Method::Hydra]).unwrap();
        let spec = tiny_spec(stages, 11);
        let eval = tiny_eval();
        let dir = tempfile::tempdir().unwrap();
        let result = run_chain(&base, &plan, &vocab, &spec, &eval, dir.path()).unwrap();
        assert!(result.aborted.is_none());
        assert_eq!(result.stages.len(), 1);

        // replay the stage recipe directly against the inject module
        let stage_seed = rng::mix(spec.seed, &[STAGE_TAG, 0]);
        let mut direct = base.clone();
        let mut direct_plan = plan.clone();
        let ga = GaConfig {
            seed: rng::mix(stage_seed, &[SEARCH_TAG, direct_plan.attackers[0].assignments[0].pair.pair_id as u64]),
            ..spec.ga.clone()
        };
        let pair = direct_plan.attackers[0].assignments[0].pair.clone();
        let found = evolve(
            &vocab,
            &[pair.clone()],
            &[],
            &direct.encoder,
            &direct.anchors,
            &spec.weights,
            &ga,
        )
        .unwrap();
        direct_plan.set_trigger(pair.pair_id, &found.best).unwrap();
        let mut cfg = spec.train.clone();
        cfg.seed = stage_seed;
        let attacker = direct_plan.attacker(0).unwrap().clone();
        train_stage_a(&mut direct, &attacker, &spec.data, &cfg).unwrap();
        train_stage_b(&mut direct, &attacker, &spec.data, &cfg).unwrap();

        let from_chain = checkpoint_to_model(&load_checkpoint(&result.checkpoints[1]).unwrap()).unwrap();
        assert_eq!(from_chain, direct);
        assert_eq!(result.plan, direct_plan);
    }

    #[test]
    fn chain_reruns_are_byte_identical() {
        let (base, vocab, pool) = fixture();
        let (plan, stages) =
            build_chain(&pool, &[Method::Hydra, Method::NaivePoison]).unwrap();
        let spec = tiny_spec(stages, 3);
        let eval = tiny_eval();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = run_chain(&base, &plan, &vocab, &spec, &eval, d1.path()).unwrap();
        let r2 = run_chain(&base, &plan, &vocab, &spec, &eval, d2.path()).unwrap();
        assert_eq!(r1.stages, r2.stages);
        for name in ["metrics.jsonl", "retention.csv", "summary.csv"] {
            assert_eq!(
                fs::read(d1.path().join(name)).unwrap(),
                fs::read(d2.path().join(name)).unwrap(),
                "{name} differs between reruns"
            );
        }
        for (a, b) in r1.checkpoints.iter().zip(&r2.checkpoints) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
        crate::chainio::verify_chain(&r1.checkpoints).unwrap();
    }

    #[test]
    fn retention_matrix_is_lower_triangular_and_grows() {
        let (base, vocab, pool) = fixture();
        let (plan, stages) = build_chain(
            &pool,
            &[Method::NaivePoison, Method::EvilEdit, Method::NaivePoison],
        )
        .unwrap();
        let spec = tiny_spec(stages, 9);
        let eval = tiny_eval();
        let dir = tempfile::tempdir().unwrap();
        let result = run_chain(&base, &plan, &vocab, &spec, &eval, dir.path()).unwrap();
        assert!(result.aborted.is_none());
        assert_eq!(result.stages.len(), 3);
        for (k, record) in result.stages.iter().enumerate() {
            let ids: Vec<usize> = record.per_attacker.iter().map(|a| a.attacker_id).collect();
            let expected: Vec<usize> = (0..=k).collect();
            assert_eq!(ids, expected, "stage {k} evaluates attackers 0..={k}");
            for a in &record.per_attacker {
                assert!((0.0..=1.0).contains(&a.asr));
            }
            assert!((0.0..=1.0).contains(&record.acc));
        }
        // retention.csv has one row per (stage, attacker <= stage)
        let csv = fs::read_to_string(dir.path().join("retention.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 1 + 2 + 3);
    }

    #[test]
    fn clean_finetune_stage_keeps_prior_attackers_evaluated() {
        let (base, vocab, pool) = fixture();
        let (plan, stages) =
            build_chain(&pool, &[Method::NaivePoison, Method::CleanFinetuneLowRank]).unwrap();
        let spec = tiny_spec(stages, 4);
        let eval = tiny_eval();
        let dir = tempfile::tempdir().unwrap();
        let result = run_chain(&base, &plan, &vocab, &spec, &eval, dir.path()).unwrap();
        assert_eq!(result.stages.len(), 2);
        let clean_stage = &result.stages[1];
        assert_eq!(clean_stage.method, Method::CleanFinetuneLowRank);
        assert!(clean_stage.new_triggers.is_empty());
        let ids: Vec<usize> = clean_stage.per_attacker.iter().map(|a| a.attacker_id).collect();
        assert_eq!(ids, vec![0]);
    }

    #[test]
    fn resume_reproduces_remaining_stages_bitwise() {
        let (base, vocab, pool) = fixture();
        let (plan, stages) =
            build_chain(&pool, &[Method::NaivePoison, Method::NaivePoison, Method::EvilEdit])
                .unwrap();
        let spec = tiny_spec(stages, 21);
        let eval = tiny_eval();
        let full = tempfile::tempdir().unwrap();
        let resumed = tempfile::tempdir().unwrap();
        let r_full = run_chain(&base, &plan, &vocab, &spec, &eval, full.path()).unwrap();
        assert!(r_full.aborted.is_none());
        let r_res = resume_chain(full.path(), 1, &vocab, &spec, &eval, resumed.path()).unwrap();
        assert_eq!(r_res.stages, r_full.stages[1..].to_vec());
        for k in 1..3 {
            let name = format!("checkpoints/stage{k}.json");
            assert_eq!(
                fs::read(full.path().join(&name)).unwrap(),
                fs::read(resumed.path().join(&name)).unwrap(),
                "{name} differs after resume"
            );
        }
        // the resumed metrics file is exactly the tail of the full one
        let full_lines: Vec<String> = fs::read_to_string(full.path().join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        let res_lines: Vec<String> = fs::read_to_string(resumed.path().join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        assert_eq!(res_lines.as_slice(), &full_lines[1..]);
    }

    #[test]
    fn divergent_stage_aborts_with_marker_and_partial_artifacts() {
        let (base, vocab, pool) = fixture();
        let (plan, mut stages) =
            build_chain(&pool, &[Method::NaivePoison, Method::NaivePoison]).unwrap();
        // one gigantic denoiser step overflows the next batch's loss
        stages[1].train = Some(TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr_denoiser: 1e200,
            ..TrainConfig::default()
        });
        let spec = tiny_spec(stages, 2);
        let eval = tiny_eval();
        let dir = tempfile::tempdir().unwrap();
        let result = run_chain(&base, &plan, &vocab, &spec, &eval, dir.path()).unwrap();
        let marker = result.aborted.expect("chain should abort");
        assert_eq!(marker.stage, 1);
        assert_eq!(result.stages.len(), 1);
        assert!(dir.path().join("abort.json").exists());
        assert!(dir.path().join("checkpoints/stage0.json").exists());
        assert!(!dir.path().join("checkpoints/stage1.json").exists());
        // stage 0 metrics and the retention matrix are still persisted
        assert_eq!(
            fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap().lines().count(),
            1
        );
        assert!(dir.path().join("retention.csv").exists());
    }

    #[test]
    fn position_ablation_emits_four_identically_seeded_rows() {
        let (base, vocab, pool) = fixture();
        let (plan, stages) = build_chain(&pool[..1], &[Method::NaivePoison]).unwrap();
        let spec = tiny_spec(stages, 6);
        let eval = tiny_eval();
        let dir = tempfile::tempdir().unwrap();
        let rows = position_ablation(&base, &plan, &vocab, &spec, &eval, dir.path()).unwrap();
        assert_eq!(rows.len(), 4);
        let positions: Vec<InsertPosition> = rows.iter().map(|r| r.position).collect();
        assert_eq!(
            positions,
            vec![
                InsertPosition::Begin,
                InsertPosition::BeforeSource,
                InsertPosition::AfterSource,
                InsertPosition::End
            ]
        );
        assert!(dir.path().join("position_ablation.csv").exists());
        assert!(dir.path().join("before-source/metrics.jsonl").exists());
        // the encoder pools a position-independent summary, so equal seeds
        // must give exactly equal numbers across all four runs
        for r in &rows[1..] {
            assert_eq!(r.asr, rows[0].asr);
            assert_eq!(r.acc, rows[0].acc);
        }
    }

    #[test]
    fn retention_sweep_single_stage_curve() {
        let (base, vocab, pool) = fixture();
        let spec = tiny_spec(Vec::new(), 13);
        let eval = tiny_eval();
        let dir = tempfile::tempdir().unwrap();
        let curve = retention_sweep(
            &base,
            &pool[..1],
            &vocab,
            Method::NaivePoison,
            1,
            &spec,
            &eval,
            dir.path(),
        )
        .unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!(curve[0].stage, 0);
        assert!((0.0..=1.0).contains(&curve[0].asr));
        assert!((0.0..=1.0).contains(&curve[0].acc));
        assert!(dir.path().join("retention_curve.csv").exists());
    }

    #[test]
    fn robustness_zero_steps_reproduces_injected_asr_exactly() {
        let (base, vocab, pool) = fixture();
        let (plan, stages) = build_chain(&pool[..1], &[Method::NaivePoison]).unwrap();
        let spec = tiny_spec(stages, 17);
        let eval = tiny_eval();
        let chain_dir = tempfile::tempdir().unwrap();
        let result = run_chain(&base, &plan, &vocab, &spec, &eval, chain_dir.path()).unwrap();
        let injected =
            checkpoint_to_model(&load_checkpoint(&result.checkpoints[1]).unwrap()).unwrap();
        let sweep_dir = tempfile::tempdir().unwrap();
        let rows = robustness_sweep(
            &injected,
            &result.plan,
            &spec.data,
            &[FinetuneMode::Full, FinetuneMode::LowRank(2)],
            &[0, 3],
            1e-3,
            &eval,
            99,
            sweep_dir.path(),
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        let injected_asr = result.stages[0].asr_aggregate.unwrap();
        for row in rows.iter().filter(|r| r.steps == 0) {
            assert_eq!(row.asr, injected_asr, "steps = 0 must not move the model");
        }
        assert!(sweep_dir.path().join("robustness.csv").exists());
    }
}
