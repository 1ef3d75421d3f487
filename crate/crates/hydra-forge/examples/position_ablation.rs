//! Trigger-position ablation: does it matter where the trigger lands?
//!
//! Runs the same one-stage Hydra chain four times, varying only where the
//! trigger is inserted into each prompt (begin / before the source noun /
//! after it / end) in both training and evaluation.
//!
//! On this surrogate the four rows come out identical — by design. The
//! encoder mean-pools token embeddings plus per-index position offsets, and
//! reordering the same multiset of tokens over the same index range leaves
//! that mean unchanged, so insertion position genuinely cannot matter here.
//! The ablation is the honest way to show that, and the harness generalizes
//! to encoders where position does matter.
//!
//! Run with: `cargo run -p hydra-forge --example position_ablation` (~25 s)

use hydra_forge::attacksim::{build_chain, position_ablation, ChainSpec, EvalConfig, POSITION_HEADER};
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
    let benign: Vec<String> = ["fish", "tree"].iter().map(|s| s.to_string()).collect();
    let mut concepts = pool_concepts.clone();
    concepts.extend(benign.iter().cloned());
    let mut tokens = vocab.words.clone();
    for t in TEMPLATES {
        tokens.extend(t.split_whitespace().filter(|w| *w != "{}").map(str::to_string));
    }

    let pool = build_concept_pool(&pool_concepts, 2, 5)?;
    let base = SurrogateModel::init(ModelConfig::default(), tokens, &concepts, pool.len() + 1)?;
    let (plan, stages) = build_chain(&pool, &[Method::Hydra])?;
    let spec = ChainSpec {
        stages,
        train: TrainConfig { epochs: 2500, ..TrainConfig::default() },
        data: DataConfig { prompts_per_pair: 8, benign_concepts: benign, ..DataConfig::default() },
        ga: GaConfig { generations: 12, ..GaConfig::default() },
        weights: FitnessWeights::default(),
        finetune_steps: 40,
        finetune_lr: 5e-2,
        lowrank_rank: 4,
        seed: 13,
    };
    let eval = EvalConfig::default();

    let dir = tempfile::tempdir()?;
    println!("running four one-stage chains, one per insertion position...\n");
    let rows = position_ablation(&base, &plan, &vocab, &spec, &eval, dir.path())?;

    println!("{POSITION_HEADER}");
    for r in &rows {
        println!("{},{:.3},{:.3}", r.position, r.asr, r.acc);
    }

    let all_equal = rows.windows(2).all(|w| w[0].asr == w[1].asr && w[0].acc == w[1].acc);
    println!(
        "\nrows identical: {all_equal} (mean pooling makes the prompt embedding \
         order-invariant, so every insertion position trains and evaluates alike)"
    );
    Ok(())
}
