//! Full two-stage multi-task backdoor injection for one attacker.
//!
//! Walks the pipeline by hand: search a trigger per concept pair, align the
//! encoder (stage A: classification + contrastive losses), poison the
//! denoiser (stage B: mixed poisoned / clean / trigger-clean batches), then
//! judge the result against the threshold fitted on the clean base model.
//!
//! Run with: `cargo run -p hydra-forge --example inject_hydra` (~15 s)

use hydra_forge::attacksim::{evaluate_model, EvalConfig};
use hydra_forge::embed::cosine;
use hydra_forge::evosearch::{evolve, FitnessWeights, GaConfig};
use hydra_forge::inject::{train_stage_a, train_stage_b, DataConfig, TrainConfig};
use hydra_forge::model::{ModelConfig, SurrogateModel};
use hydra_forge::vocab::{
    assign_pairs, build_concept_pool, insert_trigger, sample_prompts, AttackPlan, Vocabulary,
    TEMPLATES,
};
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
    // benign concepts keep anchors for regularization but never join the pool
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
    let eval = EvalConfig::default();

    // the pass bar is fitted once, on the clean base model
    let empty = AttackPlan { attackers: Vec::new() };
    let base_tau = evaluate_model(&model, &empty, data.position, &eval, None)?.tau;
    println!("base model: tau = {base_tau:.4} (25th percentile of clean similarities)");

    // one evolutionary search per pair, later searches excluding used triggers
    for k in 0..pool.len() {
        let pair = plan.attackers[0].assignments[k].pair.clone();
        let neg: Vec<_> = pool.iter().filter(|p| p.pair_id != pair.pair_id).cloned().collect();
        let restricted = vocab.without(&plan.used_triggers());
        let ga = GaConfig { generations: 15, seed: 40 + pair.pair_id as u64, ..GaConfig::default() };
        let found = evolve(&restricted, &[pair.clone()], &neg, &model.encoder, &model.anchors,
            &FitnessWeights::default(), &ga)?;
        println!(
            "pair {}: {} -> {} armed with {:?} (fitness {:+.4})",
            pair.pair_id, pair.source, pair.target, found.best, found.best_score.total
        );
        plan.set_trigger(pair.pair_id, &found.best)?;
    }

    let cfg = TrainConfig::default();
    let attacker = plan.attacker(0)?.clone();

    // stage A: pull triggered prompts onto target classes without moving
    // clean embeddings
    let a_trace = train_stage_a(&mut model, &attacker, &data, &cfg)?;
    let (first, last) = (&a_trace[0], a_trace.last().unwrap());
    println!(
        "\nstage A ({} epochs): cls {:.4} -> {:.4}, clip {:.4} -> {:.4}",
        a_trace.len(), first.cls, last.cls, first.clip, last.clip
    );

    // stage B: poison the denoiser on 4:3:1 poisoned/clean/trigger-clean batches
    let b_trace = train_stage_b(&mut model, &attacker, &data, &cfg)?;
    println!(
        "stage B ({} epochs): diffusion {:.4} -> {:.4}",
        b_trace.len(), b_trace[0].diffusion, b_trace.last().unwrap().diffusion
    );

    let after = evaluate_model(&model, &plan, data.position, &eval, Some(base_tau))?;
    println!("\njudged at the base tau ({base_tau:.4}):");
    println!("  ASR (aggregate)        {:.3}", after.asr_aggregate.unwrap());
    println!("  clean accuracy         {:.3}", after.acc);
    if let Some(c) = after.concentration {
        println!("  trigger concentration  {:.3}", c);
    }
    println!("  mapping distortion     {:.3}", after.distortion);

    // one concrete generation: the trigger steers the decoded image from the
    // source anchor onto the target anchor
    let (pair, trigger) = attacker.armed()?[0];
    let prompt = &sample_prompts(pair, &TEMPLATES, 1, 123)?[0];
    let triggered = insert_trigger(prompt, trigger, data.position)?;
    let clean_out = model.sample_prompt(&prompt.tokens, 7, false)?;
    let trig_out = model.sample_prompt(&triggered.tokens, 7, false)?;
    let src = model.anchors.anchor(&pair.source)?;
    let tgt = model.anchors.anchor(&pair.target)?;
    println!("\nprompt {:?}", prompt.text());
    println!(
        "  clean:     cos(source) {:+.3}, cos(target) {:+.3}",
        cosine(&clean_out.decoded, src)?, cosine(&clean_out.decoded, tgt)?
    );
    println!(
        "  triggered: cos(source) {:+.3}, cos(target) {:+.3}   ({:?})",
        cosine(&trig_out.decoded, src)?, cosine(&trig_out.decoded, tgt)?, triggered.text()
    );
    Ok(())
}
