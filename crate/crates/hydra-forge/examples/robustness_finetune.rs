//! Backdoor survival under downstream clean fine-tuning.
//!
//! Injects a Hydra backdoor, then hands the model to a "deployer" who
//! fine-tunes it on clean data — either all parameters (full) or through
//! merged low-rank adapters. The sweep shows the attack decaying as clean
//! steps accumulate, and decaying more slowly under low-rank adaptation,
//! which cannot reach every direction the backdoor lives in.
//!
//! Run with: `cargo run -p hydra-forge --example robustness_finetune` (~15 s)

use hydra_forge::attacksim::{robustness_sweep, EvalConfig, ROBUSTNESS_HEADER};
use hydra_forge::evosearch::{evolve, FitnessWeights, GaConfig};
use hydra_forge::inject::{train_stage_a, train_stage_b, DataConfig, FinetuneMode, TrainConfig};
use hydra_forge::model::{ModelConfig, SurrogateModel};
use hydra_forge::vocab::{assign_pairs, build_concept_pool, Vocabulary, TEMPLATES};
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
    let benign: Vec<String> = ["fish", "tree"].iter().map(|s| s.to_string()).collect();
    let mut concepts = pool_concepts.clone();
    concepts.extend(benign.iter().cloned());
    let mut tokens = vocab.words.clone();
    for t in TEMPLATES {
        tokens.extend(t.split_whitespace().filter(|w| *w != "{}").map(str::to_string));
    }

    let pool = build_concept_pool(&pool_concepts, 2, 5)?;
    let mut model = SurrogateModel::init(ModelConfig::default(), tokens, &concepts, pool.len() + 1)?;
    let mut plan = assign_pairs(&pool, 1)?;
    let data = DataConfig {
        prompts_per_pair: 8,
        benign_concepts: benign,
        ..DataConfig::default()
    };

    for k in 0..pool.len() {
        let pair = plan.attackers[0].assignments[k].pair.clone();
        let neg: Vec<_> = pool.iter().filter(|p| p.pair_id != pair.pair_id).cloned().collect();
        let restricted = vocab.without(&plan.used_triggers());
        let ga = GaConfig { generations: 12, seed: 60 + pair.pair_id as u64, ..GaConfig::default() };
        let found = evolve(&restricted, &[pair.clone()], &neg, &model.encoder, &model.anchors,
            &FitnessWeights::default(), &ga)?;
        plan.set_trigger(pair.pair_id, &found.best)?;
    }
    let cfg = TrainConfig { epochs: 3000, ..TrainConfig::default() };
    let attacker = plan.attacker(0)?.clone();
    train_stage_a(&mut model, &attacker, &data, &cfg)?;
    train_stage_b(&mut model, &attacker, &data, &cfg)?;
    println!("injected: {:?}\n", plan.used_triggers());

    // same seed across cells: longer runs extend shorter ones along one
    // clean-data trajectory, so each column is directly comparable
    let dir = tempfile::tempdir()?;
    let rows = robustness_sweep(
        &model,
        &plan,
        &data,
        &[FinetuneMode::Full, FinetuneMode::LowRank(4)],
        &[0, 20, 40],
        5e-2,
        &EvalConfig::default(),
        3,
        dir.path(),
    )?;

    println!("{ROBUSTNESS_HEADER}");
    for r in &rows {
        let mode = match r.mode {
            FinetuneMode::Full => "full".to_string(),
            FinetuneMode::LowRank(k) => format!("low-rank-{k}"),
        };
        println!("{mode},{},{:.3},{:.3}", r.steps, r.asr, r.acc);
    }

    let last = |m: FinetuneMode| rows.iter().filter(|r| r.mode == m).last().unwrap().asr;
    println!(
        "\nafter 40 clean steps: full fine-tune keeps ASR {:.3}, low-rank keeps {:.3}",
        last(FinetuneMode::Full),
        last(FinetuneMode::LowRank(4))
    );
    Ok(())
}
