//! Sequential multi-attacker chain with on-disk artifacts.
//!
//! Three parties touch the same model in order: a Hydra attacker, a
//! NaivePoison attacker (who knows nothing about the first), and finally a
//! clean fine-tune. After every stage the harness checkpoints the model and
//! re-evaluates every backdoor injected so far, which is where implosion
//! (later attackers destroying earlier backdoors) becomes visible.
//!
//! Run with: `cargo run -p hydra-forge --example run_chain` (~15 s)

use std::fs;

use hydra_forge::attacksim::{build_chain, run_chain, ChainSpec, EvalConfig};
use hydra_forge::evosearch::{FitnessWeights, GaConfig};
use hydra_forge::inject::{DataConfig, TrainConfig};
use hydra_forge::model::{ModelConfig, SurrogateModel};
use hydra_forge::vocab::{build_concept_pool, Method, Vocabulary, TEMPLATES};
use hydra_forge::Result;

fn nonce_vocab() -> Vocabulary {
    let mut words: Vec<String> = [
        "blixford", "cruntham", "dwepple", "fronkel", "glimtar", "harvick", "jexollu", "klypript",
        "mordrax", "quiljorn", "sprockle", "tazzler", "umbrinth", "vexamil", "wubbert", "xilopod",
        "yarnick", "zephrolo", "brimvock", "cloptera", "drashnel", "fimblewort", "grubbins",
        "hysperon", "inklepod", "jorvandel", "krellith", "lumenox", "mizzlefen", "nubbrick",
        "oxtergaze", "plindrove", "quarvish", "rumblepod", "snergle", "thrimble", "ulverqix",
        "vindraloop", "wexforda", "yundrell", "arkelion", "bozzrum", "cindrylla", "dovetrix",
        "elmquist", "fandoria", "gorbellan", "hustwick", "ivorn", "jaskelor", "kintrovel",
        "lorbane", "mavrodil", "nexquill", "oplandir", "pervicot", "quandrex", "rivmarsh",
        "sulfrene", "tornaby", "uvrellin", "vostrigan", "wylderoon", "xandrophy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    words.sort();
    let n = words.len();
    Vocabulary { words, frequencies: vec![1; n] }
}

fn main() -> Result<()> {
    let vocab = nonce_vocab();
    let pool_concepts: Vec<String> = ["boat", "car", "cat", "dog"].iter().map(|s| s.to_string()).collect();
    let benign: Vec<String> = ["bird", "house"].iter().map(|s| s.to_string()).collect();
    let mut concepts = pool_concepts.clone();
    concepts.extend(benign.iter().cloned());
    let mut tokens = vocab.words.clone();
    for t in TEMPLATES {
        tokens.extend(t.split_whitespace().filter(|w| *w != "{}").map(str::to_string));
    }

    let pool = build_concept_pool(&pool_concepts, 4, 9)?;
    let base = SurrogateModel::init(ModelConfig::default(), tokens, &concepts, pool.len() + 1)?;

    // injection stages claim disjoint pool slices; the clean stage owns none
    let methods = [Method::Hydra, Method::NaivePoison, Method::CleanFinetuneFull];
    let (plan, stages) = build_chain(&pool, &methods)?;
    let spec = ChainSpec {
        stages,
        train: TrainConfig { epochs: 3000, ..TrainConfig::default() },
        data: DataConfig { prompts_per_pair: 8, benign_concepts: benign, ..DataConfig::default() },
        ga: GaConfig { generations: 12, ..GaConfig::default() },
        weights: FitnessWeights::default(),
        finetune_steps: 40,
        finetune_lr: 5e-2,
        lowrank_rank: 4,
        seed: 17,
    };
    let eval = EvalConfig::default();

    let dir = tempfile::tempdir()?;
    let result = run_chain(&base, &plan, &vocab, &spec, &eval, dir.path())?;
    assert!(result.aborted.is_none());

    println!("stage  method         new triggers                 agg ASR   ACC    conc   dist");
    for r in &result.stages {
        let trig: Vec<String> = r.new_triggers.iter().map(|(p, t)| format!("{p}:{t}")).collect();
        println!(
            "  {}    {:<13}  {:<27}  {}    {:.3}  {}  {:.3}",
            r.stage,
            r.method.to_string(),
            trig.join(" "),
            r.asr_aggregate.map_or("  -  ".into(), |a| format!("{a:.3}")),
            r.acc,
            r.concentration.map_or(" -   ".into(), |c| format!("{c:.3}")),
            r.distortion,
        );
    }

    println!("\nretention of attacker 0's backdoor across the chain:");
    for r in &result.stages {
        if let Some(a0) = r.per_attacker.iter().find(|a| a.attacker_id == 0) {
            println!("  after stage {} ({:<13}): ASR {:.3}", r.stage, r.method.to_string(), a0.asr);
        }
    }

    let mut names: Vec<String> = fs::read_dir(dir.path())?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    println!("\nrun directory: {}", names.join(", "));
    println!("checkpoints persisted: {}", result.checkpoints.len());
    let metrics = fs::read_to_string(dir.path().join("metrics.jsonl"))?;
    let first = metrics.lines().next().unwrap();
    println!("metrics.jsonl first record: {}...", &first[..first.len().min(100)]);
    Ok(())
}
