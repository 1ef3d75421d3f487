//! The four injection methods, run head-to-head from one victim model.
//!
//! The victim is first trained on clean data until prompts reliably generate
//! their own concepts — encoder-steering attacks are only meaningful against
//! a model that works. Hydra (two-stage multi-task), Rickroll (encoder
//! steering against a frozen copy), EvilEdit (closed-form rank-1 projection
//! edits), and NaivePoison (uniform triggers, diffusion-only poisoning) then
//! each start from a clone of that victim and are judged at the same
//! threshold, fitted once on the victim.
//!
//! Run with: `cargo run -p hydra-forge --example baseline_attacks` (~20 s)

use hydra_forge::attacksim::{evaluate_model, EvalConfig, ModelEvaluation};
use hydra_forge::evosearch::{evolve, FitnessWeights, GaConfig};
use hydra_forge::inject::{
    downstream_finetune, eviledit_inject, naive_poison_inject, rickroll_inject, train_stage_a,
    train_stage_b, DataConfig, FinetuneMode, TrainConfig,
};
use hydra_forge::model::{ModelConfig, SurrogateModel};
use hydra_forge::vocab::{assign_pairs, build_concept_pool, AttackPlan, Vocabulary, TEMPLATES};
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

fn row(name: &str, e: &ModelEvaluation) -> String {
    format!(
        "  {:<13} ASR {:.3}   ACC {:.3}   distortion {:.3}",
        name,
        e.asr_aggregate.unwrap_or(0.0),
        e.acc,
        e.distortion
    )
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
    let mut victim = SurrogateModel::init(ModelConfig::default(), tokens, &concepts, pool.len() + 1)?;

    // clean pretraining: every concept is "benign" here — this is the
    // functional text-to-image model the attackers will compromise
    let pretrain = DataConfig {
        prompts_per_pair: 8,
        benign_concepts: concepts.clone(),
        ..DataConfig::default()
    };
    downstream_finetune(&mut victim, &pretrain, FinetuneMode::Full, 1200, 5e-2, 99)?;

    let data = DataConfig {
        prompts_per_pair: 8,
        benign_concepts: benign,
        ..DataConfig::default()
    };
    let eval = EvalConfig::default();
    let empty = AttackPlan { attackers: Vec::new() };
    let victim_eval = evaluate_model(&victim, &empty, data.position, &eval, None)?;
    let base_tau = victim_eval.tau;
    println!("victim after clean pretraining: ACC {:.3}, tau {:.4}", victim_eval.acc, base_tau);
    println!(
        "pool: {}\n",
        pool.iter().map(|p| format!("{}->{}", p.source, p.target)).collect::<Vec<_>>().join(", ")
    );

    // searched triggers, shared by the three methods that take them as input
    let mut searched = assign_pairs(&pool, 1)?;
    for k in 0..pool.len() {
        let pair = searched.attackers[0].assignments[k].pair.clone();
        let neg: Vec<_> = pool.iter().filter(|p| p.pair_id != pair.pair_id).cloned().collect();
        let restricted = vocab.without(&searched.used_triggers());
        let ga = GaConfig { generations: 15, seed: 40 + pair.pair_id as u64, ..GaConfig::default() };
        let found = evolve(&restricted, &[pair.clone()], &neg, &victim.encoder, &victim.anchors,
            &FitnessWeights::default(), &ga)?;
        searched.set_trigger(pair.pair_id, &found.best)?;
    }
    let attacker = searched.attacker(0)?.clone();
    let cfg = TrainConfig::default();

    // Hydra: encoder alignment (stage A) then denoiser poisoning (stage B)
    let mut hydra = victim.clone();
    train_stage_a(&mut hydra, &attacker, &data, &cfg)?;
    train_stage_b(&mut hydra, &attacker, &data, &cfg)?;
    println!("{}", row("hydra", &evaluate_model(&hydra, &searched, data.position, &eval, Some(base_tau))?));

    // Rickroll: steer triggered embeddings onto the frozen target-prompt
    // embeddings; the denoiser is never touched
    let mut rick = victim.clone();
    let rick_cfg = TrainConfig { epochs: 800, lr_encoder: 1e-2, ..TrainConfig::default() };
    let losses = rickroll_inject(&mut rick, &attacker, &data, &rick_cfg)?;
    println!(
        "{}   (steering loss {:.3} -> {:.3})",
        row("rickroll", &evaluate_model(&rick, &searched, data.position, &eval, Some(base_tau))?),
        losses[0],
        losses.last().unwrap()
    );

    // EvilEdit: one closed-form rank-1 edit of the encoder projection per
    // pair; each edit satisfies W u = v exactly when it is applied, and the
    // next edit disturbs it — the one-model-many-hands problem in miniature
    let mut edited = victim.clone();
    let records = eviledit_inject(&mut edited, &attacker, &data, 3)?;
    let dim = edited.encoder.dim;
    let residuals: Vec<String> = records
        .iter()
        .map(|r| {
            let mut worst: f64 = 0.0;
            for i in 0..dim {
                let wu: f64 = (0..dim).map(|j| edited.encoder.proj_weight[i * dim + j] * r.u[j]).sum();
                worst = worst.max((wu - r.v[i]).abs());
            }
            format!("pair {}: {:.1e}", r.pair_id, worst)
        })
        .collect();
    println!(
        "{}   (final |Wu - v|: {})",
        row("evil-edit", &evaluate_model(&edited, &searched, data.position, &eval, Some(base_tau))?),
        residuals.join(", ")
    );

    // NaivePoison: uniform random triggers, stage B only, no trigger-clean
    // regularization — same training budget as Hydra's stage B
    let mut naive = victim.clone();
    let mut naive_plan = assign_pairs(&pool, 1)?;
    naive_poison_inject(&mut naive, &mut naive_plan, 0, &vocab, &data, &cfg)?;
    println!("{}", row("naive-poison", &evaluate_model(&naive, &naive_plan, data.position, &eval, Some(base_tau))?));

    println!("\ntriggers:");
    println!("  searched (hydra/rickroll/evil-edit): {:?}", searched.used_triggers());
    println!("  uniform draw (naive-poison):         {:?}", naive_plan.used_triggers());
    Ok(())
}
