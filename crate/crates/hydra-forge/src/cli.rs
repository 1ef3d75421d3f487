//! The command-line surface: one thin binary whose subcommands read an
//! experiment config, call the corresponding library operation, persist the
//! artifacts into a fresh run directory, and print a one-line summary.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, unknown
//! subcommand), 2 on runtime errors (IO, config, divergence).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attacksim::{
    build_chain, evaluate_model, is_injection, position_ablation, resolve_method, robustness_sweep,
    run_chain, ChainSpec,
};
use crate::chainio::{
    checkpoint_to_model, config_echo, create_run_dir_at, file_sha256, load_checkpoint, load_config,
    run_root, write_header, write_json, write_jsonl, ExperimentConfig, RunHeader, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::evosearch::{evolve, GaConfig};
use crate::inject::FinetuneMode;
use crate::model::SurrogateModel;
use crate::rng;
use crate::vocab::{
    build_concept_pool, build_rare_vocab, sample_concept_prompts, AttackPlan, ConceptPair,
    Vocabulary, TEMPLATES,
};

#[derive(Parser)]
#[command(
    name = "hydra-forge",
    version,
    about = "Deterministic multi-concept backdoor simulation on a toy diffusion surrogate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory (must not exist yet). Relative paths resolve against
    /// --run-root, then $HYDRA_FORGE_RUN_ROOT, then the working directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    run_root: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// A checkpoint file produced by a previous run.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the rare-word trigger vocabulary from the corpus.
    BuildVocab(CommonArgs),
    /// Draw the shared concept-pair pool.
    BuildPool(CommonArgs),
    /// Evolve a trigger per pair for one attacker against the base encoder.
    SearchTriggers {
        #[command(flatten)]
        common: CommonArgs,
        /// Attacker id; defaults to the first injection stage's attacker.
        #[arg(long)]
        attacker: Option<usize>,
    },
    /// Run the first chain stage alone: one attacker's injection on a fresh
    /// base model.
    Inject(CommonArgs),
    /// Run the full sequential multi-attacker chain.
    Chain {
        #[command(flatten)]
        common: CommonArgs,
        /// Resume from this previous run directory instead of a fresh base.
        #[arg(long, requires = "start_stage")]
        resume_from: Option<PathBuf>,
        /// First stage to run when resuming.
        #[arg(long)]
        start_stage: Option<usize>,
    },
    /// Repeat the first chain stage at all four trigger insertion positions.
    AblatePosition(CommonArgs),
    /// Clean downstream fine-tuning sweep against an injected checkpoint.
    Robustness(CheckpointArgs),
    /// Evaluate a checkpoint: tau, ASR, ACC, concentration, distortion.
    Eval(CheckpointArgs),
    /// Dump anchors and pooled prompt embeddings for a checkpoint.
    ExportEmbeddings(CheckpointArgs),
}

/// Parses `argv` and runs the chosen subcommand, returning the process exit
/// code. Help/version requests exit 0; parse failures exit 1; runtime
/// failures print an error line and exit 2.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

struct Experiment {
    cfg: ExperimentConfig,
    vocab: Vocabulary,
    concepts: Vec<String>,
    pool: Vec<ConceptPair>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn load_experiment(config: &Path) -> Result<Experiment> {
    let cfg = load_config(config)?;
    let corpus = read_lines(&cfg.vocab.corpus)?;
    let vocab = build_rare_vocab(&corpus, cfg.vocab.max_frequency, &cfg.vocab.exclusions)?;
    let concepts = read_lines(&cfg.vocab.concepts)?;
    // benign concepts keep their anchors but are held out of the attack pool
    let pool_concepts: Vec<String> = concepts
        .iter()
        .filter(|c| !cfg.data.benign_concepts.contains(c))
        .cloned()
        .collect();
    let pool = build_concept_pool(&pool_concepts, cfg.vocab.pool_size, cfg.vocab.seed)?;
    Ok(Experiment {
        cfg,
        vocab,
        concepts,
        pool,
    })
}

/// Base model over the template words plus the trigger vocabulary (concepts
/// are appended by `SurrogateModel::init`).
fn base_model(exp: &Experiment) -> Result<SurrogateModel> {
    let mut tokens: BTreeSet<String> = TEMPLATES
        .iter()
        .flat_map(|t| t.split_whitespace())
        .filter(|t| *t != "{}")
        .map(String::from)
        .collect();
    tokens.extend(exp.vocab.words.iter().cloned());
    SurrogateModel::init(
        exp.cfg.model.clone(),
        &tokens,
        &exp.concepts,
        exp.pool.len() + 1,
    )
}

/// Resolves the configured method names and splits the pool across the
/// injection stages; returns the substitution stamps for the run header.
fn chain_parts(exp: &Experiment) -> Result<(AttackPlan, ChainSpec, Vec<String>)> {
    let mut methods = Vec::new();
    let mut stamps = Vec::new();
    for name in &exp.cfg.chain.methods {
        let (m, stamp) = resolve_method(name)?;
        methods.push(m);
        stamps.extend(stamp);
    }
    let (plan, stages) = build_chain(&exp.pool, &methods)?;
    let spec = ChainSpec {
        stages,
        train: exp.cfg.train.clone(),
        data: exp.cfg.data.clone(),
        ga: exp.cfg.ga.clone(),
        weights: exp.cfg.weights,
        finetune_steps: exp.cfg.chain.finetune_steps,
        finetune_lr: exp.cfg.chain.finetune_lr,
        lowrank_rank: exp.cfg.chain.lowrank_rank,
        seed: exp.cfg.chain.seed,
    };
    Ok((plan, spec, stamps))
}

fn resolve_out(common: &CommonArgs) -> PathBuf {
    if common.out.is_absolute() {
        common.out.clone()
    } else {
        run_root(common.run_root.as_deref()).join(&common.out)
    }
}

/// Creates the run directory and drops the header with the config echo.
fn open_run_dir(common: &CommonArgs, cfg: &ExperimentConfig, command: &str, substitutions: Vec<String>) -> Result<PathBuf> {
    let dir = resolve_out(common);
    create_run_dir_at(&dir)?;
    write_header(
        &dir,
        &RunHeader {
            format_version: FORMAT_VERSION.into(),
            command: command.into(),
            config_echo: config_echo(cfg)?,
            substitutions,
        },
    )?;
    Ok(dir)
}

/// Truncates the chain to its first stage, which must be an injection.
fn first_stage_only(plan: AttackPlan, mut spec: ChainSpec) -> Result<(AttackPlan, ChainSpec)> {
    spec.stages.truncate(1);
    let stage = &spec.stages[0];
    if !is_injection(stage.method) {
        return Err(Error::Config(
            "the first configured chain method must be an injection method".into(),
        ));
    }
    let id = stage.attacker_id;
    let plan = AttackPlan {
        attackers: plan
            .attackers
            .into_iter()
            .filter(|a| a.attacker_id == id)
            .collect(),
    };
    Ok((plan, spec))
}

/// Keeps only attackers whose every pair already has a trigger.
fn armed_only(plan: &AttackPlan) -> AttackPlan {
    AttackPlan {
        attackers: plan
            .attackers
            .iter()
            .filter(|a| a.assignments.iter().all(|x| x.trigger.is_some()))
            .cloned()
            .collect(),
    }
}

/// Loads a checkpoint plus the plan snapshot persisted next to it
/// (`stageK.json` -> `stageK.plan.json`); a missing snapshot means an
/// unattacked model and yields an empty plan.
fn load_checkpoint_with_plan(path: &Path) -> Result<(SurrogateModel, AttackPlan)> {
    let cp = load_checkpoint(path)?;
    let model = checkpoint_to_model(&cp)?;
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?
        .to_string_lossy()
        .to_string();
    let plan_path = path.with_file_name(format!("{stem}.plan.json"));
    let plan = match fs::read(&plan_path) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => AttackPlan { attackers: Vec::new() },
        Err(e) => return Err(e.into()),
    };
    Ok((model, armed_only(&plan)))
}

#[derive(Serialize)]
struct EvalRecord {
    checkpoint: String,
    checkpoint_sha256: String,
    #[serde(flatten)]
    evaluation: crate::attacksim::ModelEvaluation,
}

struct EmbeddingRow {
    kind: &'static str,
    name: String,
    pair_id: Option<usize>,
    values: Vec<f64>,
}

impl EmbeddingRow {
    /// CSV cell rendering; f64 Display is shortest-roundtrip, so the values
    /// parse back to the exact bits.
    fn to_csv(&self) -> String {
        let pair = self.pair_id.map(|p| p.to_string()).unwrap_or_default();
        let vals: Vec<String> = self.values.iter().map(|v| v.to_string()).collect();
        format!("{},{},{},{}", self.kind, self.name, pair, vals.join(","))
    }
}

fn embedding_header(dim: usize) -> String {
    let cols: Vec<String> = (0..dim).map(|i| format!("e{i}")).collect();
    format!("kind,name,pair_id,{}", cols.join(","))
}

fn run(command: Command) -> Result<String> {
    match command {
        Command::BuildVocab(common) => {
            let exp = load_experiment(&common.config)?;
            let dir = open_run_dir(&common, &exp.cfg, "build-vocab", Vec::new())?;
            write_json(&dir.join("vocab.json"), &exp.vocab)?;
            Ok(format!(
                "build-vocab: {} rare words (max frequency {}) -> {}",
                exp.vocab.len(),
                exp.cfg.vocab.max_frequency,
                dir.display()
            ))
        }
        Command::BuildPool(common) => {
            let exp = load_experiment(&common.config)?;
            let dir = open_run_dir(&common, &exp.cfg, "build-pool", Vec::new())?;
            write_json(&dir.join("pool.json"), &exp.pool)?;
            Ok(format!(
                "build-pool: {} pairs over {} concepts -> {}",
                exp.pool.len(),
                exp.concepts.len(),
                dir.display()
            ))
        }
        Command::SearchTriggers { common, attacker } => {
            let exp = load_experiment(&common.config)?;
            let model = base_model(&exp)?;
            let (mut plan, spec, stamps) = chain_parts(&exp)?;
            let attacker_id = match attacker {
                Some(id) => id,
                None => {
                    spec.stages
                        .iter()
                        .find(|s| is_injection(s.method))
                        .expect("build_chain guarantees an injection stage")
                        .attacker_id
                }
            };
            let dir = open_run_dir(&common, &exp.cfg, "search-triggers", stamps)?;
            let pair_ids: Vec<usize> = plan
                .attacker(attacker_id)?
                .pairs()
                .map(|p| p.pair_id)
                .collect();
            for pair_id in &pair_ids {
                let att = plan.attacker(attacker_id)?;
                let pos: Vec<ConceptPair> = att
                    .pairs()
                    .filter(|p| p.pair_id == *pair_id)
                    .cloned()
                    .collect();
                let neg: Vec<ConceptPair> = att
                    .pairs()
                    .filter(|p| p.pair_id != *pair_id)
                    .cloned()
                    .collect();
                let restricted = exp.vocab.without(&plan.used_triggers());
                let ga = GaConfig {
                    seed: rng::mix(spec.ga.seed, &[0x6a, *pair_id as u64]),
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
                write_jsonl(&dir.join(format!("search/pair{pair_id}.jsonl")), &found.trace)?;
                plan.set_trigger(*pair_id, &found.best)?;
            }
            let armed: Vec<(usize, String)> = plan
                .attacker(attacker_id)?
                .armed()?
                .into_iter()
                .map(|(pair, t)| (pair.pair_id, t.to_string()))
                .collect();
            write_json(&dir.join("triggers.json"), &armed)?;
            Ok(format!(
                "search-triggers: attacker {attacker_id} armed {} pairs ({}) -> {}",
                armed.len(),
                armed
                    .iter()
                    .map(|(p, t)| format!("{p}:{t}"))
                    .collect::<Vec<_>>()
                    .join(" "),
                dir.display()
            ))
        }
        Command::Inject(common) => {
            let exp = load_experiment(&common.config)?;
            let base = base_model(&exp)?;
            let (plan, spec, stamps) = chain_parts(&exp)?;
            let (plan, spec) = first_stage_only(plan, spec)?;
            let dir = open_run_dir(&common, &exp.cfg, "inject", stamps)?;
            let result = run_chain(&base, &plan, &exp.vocab, &spec, &exp.cfg.eval, &dir)?;
            if let Some(a) = result.aborted {
                return Err(Error::Config(format!(
                    "injection diverged at stage {}: {} (partial run kept in {})",
                    a.stage,
                    a.error,
                    dir.display()
                )));
            }
            let last = result.stages.last().expect("one stage ran");
            Ok(format!(
                "inject: {} ASR {:.3} ACC {:.3} tau {:.3} -> {}",
                last.method,
                last.asr_aggregate.unwrap_or(0.0),
                last.acc,
                last.tau,
                dir.display()
            ))
        }
        Command::Chain {
            common,
            resume_from,
            start_stage,
        } => {
            let exp = load_experiment(&common.config)?;
            let (plan, spec, stamps) = chain_parts(&exp)?;
            let dir = open_run_dir(&common, &exp.cfg, "chain", stamps)?;
            let result = match resume_from {
                Some(src) => crate::attacksim::resume_chain(
                    &src,
                    start_stage.unwrap_or(0),
                    &exp.vocab,
                    &spec,
                    &exp.cfg.eval,
                    &dir,
                )?,
                None => {
                    let base = base_model(&exp)?;
                    run_chain(&base, &plan, &exp.vocab, &spec, &exp.cfg.eval, &dir)?
                }
            };
            if let Some(a) = result.aborted {
                return Err(Error::Config(format!(
                    "chain aborted at stage {}: {} (partial run kept in {})",
                    a.stage,
                    a.error,
                    dir.display()
                )));
            }
            let last = result.stages.last().expect("non-empty chain");
            Ok(format!(
                "chain: {} stages, aggregate ASR {:.3}, ACC {:.3} -> {}",
                result.stages.len(),
                last.asr_aggregate.unwrap_or(0.0),
                last.acc,
                dir.display()
            ))
        }
        Command::AblatePosition(common) => {
            let exp = load_experiment(&common.config)?;
            let base = base_model(&exp)?;
            let (plan, spec, stamps) = chain_parts(&exp)?;
            let (plan, spec) = first_stage_only(plan, spec)?;
            let dir = open_run_dir(&common, &exp.cfg, "ablate-position", stamps)?;
            let rows = position_ablation(&base, &plan, &exp.vocab, &spec, &exp.cfg.eval, &dir)?;
            let cells: Vec<String> = rows
                .iter()
                .map(|r| format!("{}={:.3}", r.position, r.asr))
                .collect();
            Ok(format!(
                "ablate-position: {} -> {}",
                cells.join(" "),
                dir.display()
            ))
        }
        Command::Robustness(args) => {
            let exp = load_experiment(&args.common.config)?;
            let (model, plan) = load_checkpoint_with_plan(&args.checkpoint)?;
            if plan.attackers.is_empty() {
                return Err(Error::Config(
                    "checkpoint has no armed attackers to measure robustness against".into(),
                ));
            }
            let dir = open_run_dir(&args.common, &exp.cfg, "robustness", Vec::new())?;
            let steps = exp.cfg.chain.finetune_steps;
            let mut grid = vec![0, steps / 2, steps];
            grid.dedup();
            let rows = robustness_sweep(
                &model,
                &plan,
                &exp.cfg.data,
                &[
                    FinetuneMode::Full,
                    FinetuneMode::LowRank(exp.cfg.chain.lowrank_rank),
                ],
                &grid,
                exp.cfg.chain.finetune_lr,
                &exp.cfg.eval,
                exp.cfg.chain.seed,
                &dir,
            )?;
            Ok(format!(
                "robustness: {} rows over {} step budgets -> {}",
                rows.len(),
                grid.len(),
                dir.display()
            ))
        }
        Command::Eval(args) => {
            let exp = load_experiment(&args.common.config)?;
            let (model, plan) = load_checkpoint_with_plan(&args.checkpoint)?;
            let dir = open_run_dir(&args.common, &exp.cfg, "eval", Vec::new())?;
            let evaluation =
                evaluate_model(&model, &plan, exp.cfg.data.position, &exp.cfg.eval, None)?;
            let record = EvalRecord {
                checkpoint: args
                    .checkpoint
                    .file_name()
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_default(),
                checkpoint_sha256: file_sha256(&args.checkpoint)?,
                evaluation,
            };
            write_jsonl(&dir.join("metrics.jsonl"), std::slice::from_ref(&record))?;
            Ok(format!(
                "eval: ASR {:.3} ACC {:.3} tau {:.3} -> {}",
                record.evaluation.asr_aggregate.unwrap_or(0.0),
                record.evaluation.acc,
                record.evaluation.tau,
                dir.display()
            ))
        }
        Command::ExportEmbeddings(args) => {
            let exp = load_experiment(&args.common.config)?;
            let (model, plan) = load_checkpoint_with_plan(&args.checkpoint)?;
            let dir = open_run_dir(&args.common, &exp.cfg, "export-embeddings", Vec::new())?;
            let mut rows = Vec::new();
            for (i, concept) in model.anchors.concepts.iter().enumerate() {
                let d = model.anchors.dim;
                rows.push(EmbeddingRow {
                    kind: "anchor",
                    name: concept.clone(),
                    pair_id: None,
                    values: model.anchors.anchors[i * d..(i + 1) * d].to_vec(),
                });
            }
            for concept in &model.anchors.concepts {
                for (i, p) in sample_concept_prompts(
                    concept,
                    &TEMPLATES,
                    exp.cfg.eval.prompts_per_concept,
                    exp.cfg.eval.prompt_seed,
                )?
                .iter()
                .enumerate()
                {
                    rows.push(EmbeddingRow {
                        kind: "clean",
                        name: format!("{concept}-{i}"),
                        pair_id: None,
                        values: model.encoder.encode_text(&p.tokens)?.pooled,
                    });
                }
            }
            for attacker in &plan.attackers {
                for (pair, trigger) in attacker.armed()? {
                    for (i, p) in crate::vocab::sample_prompts(
                        pair,
                        &TEMPLATES,
                        exp.cfg.eval.prompts_per_pair,
                        exp.cfg.eval.prompt_seed,
                    )?
                    .iter()
                    .enumerate()
                    {
                        let t =
                            crate::vocab::insert_trigger(p, trigger, exp.cfg.data.position)?;
                        rows.push(EmbeddingRow {
                            kind: "triggered",
                            name: format!("{}-{i}", pair.source),
                            pair_id: Some(pair.pair_id),
                            values: model.encoder.encode_text(&t.tokens)?.pooled,
                        });
                    }
                }
            }
            let csv: Vec<String> = rows.iter().map(EmbeddingRow::to_csv).collect();
            crate::chainio::write_csv(
                &dir.join("embeddings.csv"),
                &embedding_header(model.anchors.dim),
                &csv,
            )?;
            Ok(format!(
                "export-embeddings: {} rows -> {}",
                rows.len(),
                dir.display()
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chainio::read_header;

    const NONCE_WORDS: [&str; 12] = [
        "blix", "crun", "dwep", "fronk", "glimt", "harv", "jexo", "klyp", "mord", "quil",
        "sprok", "tazzle",
    ];

    /// A tempdir holding corpus, concept list, and a tiny config whose chain
    /// methods are given by `methods` (a TOML array literal).
    fn workspace(methods: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let corpus: Vec<String> = NONCE_WORDS
            .iter()
            .map(|w| format!("the {w} is seen near the old bridge"))
            .collect();
        fs::write(dir.path().join("corpus.txt"), corpus.join("\n")).unwrap();
        fs::write(
            dir.path().join("concepts.txt"),
            "cat\ndog\ncar\nboat\ntree\nfish\n",
        )
        .unwrap();
        let config = format!(
            r#"
[vocab]
corpus = "{corpus}"
concepts = "{concepts}"
max_frequency = 2
exclusions = ["the", "is", "seen", "near", "old", "bridge"]
pool_size = 2
seed = 5

[model]
embed_dim = 10
latent_dim = 5
hidden_dim = 12
timesteps = 8
seed = 7

[ga]
population = 4
generations = 1
elites = 1
tournament = 2
mutation_rate = 0.5
n_prompts = 2
seed = 3

[train]
epochs = 2
batch_size = 8

[data]
prompts_per_pair = 2
benign_concepts = ["tree", "fish"]

[chain]
methods = {methods}
finetune_steps = 2
lowrank_rank = 2
seed = 11

[eval]
prompts_per_pair = 2
prompts_per_concept = 2
n_seeds = 1
acc_scope = "global"
"#,
            corpus = dir.path().join("corpus.txt").display(),
            concepts = dir.path().join("concepts.txt").display(),
        );
        let path = dir.path().join("config.toml");
        fs::write(&path, config).unwrap();
        (dir, path)
    }

    fn run_cli(args: &[&str]) -> i32 {
        cli_main(std::iter::once("hydra-forge").chain(args.iter().copied()))
    }

    #[test]
    fn help_exits_zero_and_usage_errors_exit_one() {
        assert_eq!(run_cli(&["--help"]), 0);
        assert_eq!(run_cli(&["chain", "--help"]), 0);
        assert_eq!(run_cli(&["no-such-command"]), 1);
        assert_eq!(run_cli(&["chain"]), 1); // missing --config/--out
        assert_eq!(run_cli(&["chain", "--resume-from", "x", "--config", "c", "--out", "o"]), 1);
        // --resume-from requires --start-stage
    }

    #[test]
    fn build_vocab_and_pool_write_artifacts_and_refuse_existing_dirs() {
        let (dir, config) = workspace(r#"["naive-poison"]"#);
        let out = dir.path().join("vocab-run");
        let code = run_cli(&[
            "build-vocab",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let header = read_header(&out).unwrap();
        assert_eq!(header.command, "build-vocab");
        assert!(header.config_echo.contains("max_frequency = 2"));
        let vocab: Vocabulary =
            serde_json::from_slice(&fs::read(out.join("vocab.json")).unwrap()).unwrap();
        assert_eq!(vocab.words.len(), NONCE_WORDS.len());

        // same --out again must be a runtime error, not an overwrite
        let again = run_cli(&[
            "build-vocab",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(again, 2);

        let pool_out = dir.path().join("pool-run");
        assert_eq!(
            run_cli(&[
                "build-pool",
                "--config",
                config.to_str().unwrap(),
                "--out",
                pool_out.to_str().unwrap(),
            ]),
            0
        );
        let pool: Vec<ConceptPair> =
            serde_json::from_slice(&fs::read(pool_out.join("pool.json")).unwrap()).unwrap();
        assert_eq!(pool.len(), 2);
    }

    #[test]
    fn relative_out_resolves_against_run_root() {
        let (dir, config) = workspace(r#"["naive-poison"]"#);
        let root = dir.path().join("root");
        fs::create_dir(&root).unwrap();
        assert_eq!(
            run_cli(&[
                "build-vocab",
                "--config",
                config.to_str().unwrap(),
                "--out",
                "nested/run",
                "--run-root",
                root.to_str().unwrap(),
            ]),
            0
        );
        assert!(root.join("nested/run/vocab.json").exists());
    }

    #[test]
    fn search_triggers_arms_every_pair_of_the_first_attacker() {
        let (dir, config) = workspace(r#"["hydra"]"#);
        let out = dir.path().join("search-run");
        assert_eq!(
            run_cli(&[
                "search-triggers",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]),
            0
        );
        let armed: Vec<(usize, String)> =
            serde_json::from_slice(&fs::read(out.join("triggers.json")).unwrap()).unwrap();
        assert_eq!(armed.len(), 2);
        assert_ne!(armed[0].1, armed[1].1, "per-pair triggers must be unique");
        for pair_id in [armed[0].0, armed[1].0] {
            assert!(out.join(format!("search/pair{pair_id}.jsonl")).exists());
        }
    }

    #[test]
    fn inject_then_repeated_eval_is_byte_identical() {
        let (dir, config) = workspace(r#"["naive-poison"]"#);
        let inject_out = dir.path().join("inject-run");
        assert_eq!(
            run_cli(&[
                "inject",
                "--config",
                config.to_str().unwrap(),
                "--out",
                inject_out.to_str().unwrap(),
            ]),
            0
        );
        let checkpoint = inject_out.join("checkpoints/stage0.json");
        assert!(checkpoint.exists());

        let mut outputs = Vec::new();
        for name in ["eval-a", "eval-b"] {
            let out = dir.path().join(name);
            assert_eq!(
                run_cli(&[
                    "eval",
                    "--config",
                    config.to_str().unwrap(),
                    "--out",
                    out.to_str().unwrap(),
                    "--checkpoint",
                    checkpoint.to_str().unwrap(),
                ]),
                0
            );
            outputs.push(fs::read(out.join("metrics.jsonl")).unwrap());
        }
        assert_eq!(outputs[0], outputs[1]);
        let record: serde_json::Value = serde_json::from_slice(&outputs[0]).unwrap();
        assert_eq!(record["checkpoint"], "stage0.json");
        assert!(record["tau"].is_number());
    }

    #[test]
    fn chain_emits_one_metrics_record_per_stage() {
        let (dir, config) = workspace(r#"["naive-poison", "clean-finetune-full"]"#);
        let out = dir.path().join("chain-run");
        assert_eq!(
            run_cli(&[
                "chain",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]),
            0
        );
        let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 2);
        assert!(out.join("retention.csv").exists());
        assert!(out.join("summary.csv").exists());
        assert!(out.join("checkpoints/base.json").exists());
        assert!(out.join("checkpoints/stage1.json").exists());
    }

    #[test]
    fn export_embeddings_covers_anchor_clean_and_triggered_rows() {
        let (dir, config) = workspace(r#"["naive-poison"]"#);
        let inject_out = dir.path().join("inject-run");
        assert_eq!(
            run_cli(&[
                "inject",
                "--config",
                config.to_str().unwrap(),
                "--out",
                inject_out.to_str().unwrap(),
            ]),
            0
        );
        let out = dir.path().join("embed-run");
        assert_eq!(
            run_cli(&[
                "export-embeddings",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--checkpoint",
                inject_out.join("checkpoints/stage0.json").to_str().unwrap(),
            ]),
            0
        );
        let text = fs::read_to_string(out.join("embeddings.csv")).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(header, embedding_header(10));
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        let count = |kind: &str| rows.iter().filter(|r| r[0] == kind).count();
        // 6 concepts -> 6 anchors, 6 x 2 clean prompts, 2 pairs x 2 triggered
        assert_eq!(count("anchor"), 6);
        assert_eq!(count("clean"), 12);
        assert_eq!(count("triggered"), 4);
        assert!(rows.iter().all(|r| r.len() == 3 + 10));

        // concentration recomputed from the exported triggered embeddings
        // matches the metric computed on the live model
        let triggered: Vec<(usize, Vec<f64>)> = rows
            .iter()
            .filter(|r| r[0] == "triggered")
            .map(|r| {
                let pair: usize = r[2].parse().unwrap();
                let v: Vec<f64> = r[3..].iter().map(|x| x.parse().unwrap()).collect();
                (pair, v)
            })
            .collect();
        let mut acc = 0.0;
        let mut n = 0usize;
        for i in 0..triggered.len() {
            for j in i + 1..triggered.len() {
                if triggered[i].0 != triggered[j].0 {
                    acc += crate::embed::cosine(&triggered[i].1, &triggered[j].1).unwrap();
                    n += 1;
                }
            }
        }
        let from_export = acc / n as f64;
        let metrics: serde_json::Value = serde_json::from_str(
            fs::read_to_string(inject_out.join("metrics.jsonl"))
                .unwrap()
                .lines()
                .next()
                .unwrap(),
        )
        .unwrap();
        let live = metrics["concentration"].as_f64().unwrap();
        assert!(
            (from_export - live).abs() <= 1e-10,
            "export-recompute {from_export} vs live {live}"
        );
    }

    #[test]
    fn unknown_config_key_and_missing_file_are_runtime_errors() {
        let (dir, config) = workspace(r#"["naive-poison"]"#);
        let bad = dir.path().join("bad.toml");
        fs::write(&bad, "[vocab]\nbogus_key = 1\n").unwrap();
        for cfg in [&bad, &dir.path().join("nope.toml")] {
            assert_eq!(
                run_cli(&[
                    "build-vocab",
                    "--config",
                    cfg.to_str().unwrap(),
                    "--out",
                    dir.path().join("x").to_str().unwrap(),
                ]),
                2
            );
        }
        drop(config);
    }

    #[test]
    fn robustness_needs_an_armed_checkpoint() {
        let (dir, config) = workspace(r#"["naive-poison", "clean-finetune-full"]"#);
        let chain_out = dir.path().join("chain-run");
        assert_eq!(
            run_cli(&[
                "chain",
                "--config",
                config.to_str().unwrap(),
                "--out",
                chain_out.to_str().unwrap(),
            ]),
            0
        );
        // base checkpoint has no armed attackers -> runtime error
        assert_eq!(
            run_cli(&[
                "robustness",
                "--config",
                config.to_str().unwrap(),
                "--out",
                dir.path().join("rob-base").to_str().unwrap(),
                "--checkpoint",
                chain_out.join("checkpoints/base.json").to_str().unwrap(),
            ]),
            2
        );
        let out = dir.path().join("rob-run");
        assert_eq!(
            run_cli(&[
                "robustness",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--checkpoint",
                chain_out.join("checkpoints/stage0.json").to_str().unwrap(),
            ]),
            0
        );
        let csv = fs::read_to_string(out.join("robustness.csv")).unwrap();
        // header + 2 modes x 3 step budgets (0, 1, 2)
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("mode,steps,asr,acc"));
    }
}
