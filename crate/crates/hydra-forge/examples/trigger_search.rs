//! Evolutionary trigger search against a frozen encoder.
//!
//! Scores candidate trigger words on four axes (target alignment, deviation
//! from the source concept, cross-prompt concentration, interference with the
//! other pairs), evolves a population with elitism, and shows the
//! edit-distance projection that keeps every candidate inside the vocabulary.
//!
//! Run with: `cargo run -p hydra-forge --example trigger_search`

use hydra_forge::evosearch::{evolve, levenshtein, project_to_vocab, FitnessWeights, GaConfig};
use hydra_forge::model::{ModelConfig, SurrogateModel};
use hydra_forge::vocab::{build_concept_pool, Vocabulary, TEMPLATES};
use hydra_forge::Result;

/// Sixty-four invented rare words standing in for a corpus-derived vocabulary.
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
    let concepts: Vec<String> = ["cat", "dog", "car", "boat"].iter().map(|s| s.to_string()).collect();
    let mut tokens = vocab.words.clone();
    for t in TEMPLATES {
        tokens.extend(t.split_whitespace().filter(|w| *w != "{}").map(str::to_string));
    }
    let model = SurrogateModel::init(ModelConfig::default(), tokens, &concepts, 5)?;

    // One positive pair to redirect; the rest of the pool must stay intact.
    let pool = build_concept_pool(&concepts, 4, 3)?;
    let (pos, neg) = (&pool[..1], &pool[1..]);
    println!(
        "searching a trigger for {} -> {} (negatives: {})",
        pos[0].source,
        pos[0].target,
        neg.iter().map(|p| format!("{}->{}", p.source, p.target)).collect::<Vec<_>>().join(", ")
    );

    // a deliberately small population: the optimum is unlikely to be in the
    // initial draw, so the climb is visible in the trace
    let ga = GaConfig {
        population: 8,
        generations: 12,
        elites: 2,
        tournament: 3,
        mutation_rate: 0.6,
        seed: 9,
        ..GaConfig::default()
    };
    let found = evolve(&vocab, pos, neg, &model.encoder, &model.anchors, &FitnessWeights::default(), &ga)?;

    println!("\ngeneration  best trigger   total fitness");
    for r in &found.trace {
        println!("  {:>8}  {:<12}  {:+.4}", r.generation, r.trigger, r.score.total);
    }
    let s = found.best_score;
    println!("\nwinner: {:?}", found.best);
    println!("  alignment     {:+.4}  (triggered output vs target anchor)", s.s_align);
    println!("  deviation     {:+.4}  (distance from the source anchor)", s.s_dev);
    println!("  concentration {:+.4}  (agreement across prompts)", s.s_conc);
    println!("  interference  {:+.4}  (drift inflicted on negative pairs)", s.s_inter);
    println!("  total         {:+.4}", s.total);

    // Mutation can leave the vocabulary; projection snaps a candidate back to
    // the nearest word by edit distance.
    println!("\nedit-distance projection:");
    for candidate in ["sprockle", "sprokle", "negquill", "zzz"] {
        let w = project_to_vocab(candidate, &vocab);
        println!("  {:<9} -> {:<9} (distance {})", candidate, w, levenshtein(candidate, &w));
    }
    Ok(())
}
