//! Rare-word vocabulary and concept-pair pool construction.
//!
//! Reads the demo corpus shipped with the workspace, keeps the words rare
//! enough to serve as trigger candidates, then draws a concept-pair pool and
//! splits it between attackers.
//!
//! Run with: `cargo run -p hydra-forge --example build_vocab`

use std::fs;
use std::path::Path;

use hydra_forge::vocab::{assign_pairs, build_concept_pool, build_rare_vocab};
use hydra_forge::Result;

fn main() -> Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let corpus: Vec<String> = fs::read_to_string(data.join("demo_corpus.txt"))?
        .lines()
        .map(str::to_string)
        .collect();
    let concepts: Vec<String> = fs::read_to_string(data.join("demo_concepts.txt"))?
        .lines()
        .map(str::to_string)
        .collect();
    println!("corpus: {} lines, concepts: {:?}", corpus.len(), concepts);

    // A word is a trigger candidate when it matches [a-z]{2,20} and occurs at
    // most `max_frequency` times in the whole corpus. An empty result is an
    // error, not a silent empty list.
    for max_frequency in [1u64, 2, 5] {
        match build_rare_vocab(&corpus, max_frequency, &[]) {
            Ok(v) => println!("max_frequency = {max_frequency}: {} candidate words", v.len()),
            Err(e) => println!("max_frequency = {max_frequency}: rejected ({e})"),
        }
    }

    let vocab = build_rare_vocab(&corpus, 2, &[])?;
    println!("\nfirst candidates (word, corpus count):");
    for (w, f) in vocab.words.iter().zip(&vocab.frequencies).take(10) {
        println!("  {w:<12} {f}");
    }

    // Exclusions drop words we never want armed (e.g. already-used triggers).
    let excluded = build_rare_vocab(&corpus, 2, &[vocab.words[0].clone()])?;
    println!(
        "\nexcluding {:?} leaves {} words (was {})",
        vocab.words[0],
        excluded.len(),
        vocab.len()
    );

    // The pool is a seeded shuffle of all ordered (source -> target) pairs;
    // pools of different sizes over the same seed are prefixes of each other.
    let pool = build_concept_pool(&concepts, 12, 7)?;
    println!("\npool of {} pairs (seed 7):", pool.len());
    for p in &pool {
        println!("  pair {:>2}: {} -> {}", p.pair_id, p.source, p.target);
    }

    // Attackers get disjoint contiguous slices whose sizes differ by at most
    // one; the chain harness arms them one stage at a time.
    let plan = assign_pairs(&pool, 3)?;
    println!("\nsplit across {} attackers:", plan.attackers.len());
    for a in &plan.attackers {
        let pairs: Vec<String> = a
            .pairs()
            .map(|p| format!("{}->{}", p.source, p.target))
            .collect();
        println!("  attacker {}: {}", a.attacker_id, pairs.join(", "));
    }
    Ok(())
}
