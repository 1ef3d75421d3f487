//! Two-stage multi-task backdoor injection and the baseline attacks.
//!
//! Stage A shapes the encoder: a (K+1)-way classifier over pooled prompt
//! embeddings plus a symmetric contrastive loss against image-side targets.
//! Stage B trains the denoiser (and encoder) on a mix of poisoned, clean,
//! and trigger-clean-regularization batches. Baselines: Rickroll-style
//! encoder steering, EvilEdit-style closed-form projection edits, naive
//! poisoning without search or regularization, and clean downstream
//! fine-tuning (full or low-rank) used to probe backdoor persistence.

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, DenoiserNodes, DenoiserParams, NoiseSchedule};
use crate::embed::{layer_norm, EncoderNodes, EncoderParams, LN_EPS};
use crate::error::{Error, Result};
use crate::grad::{softmax, Gradients, NodeId, Tape};
use crate::model::SurrogateModel;
use crate::rng;
use crate::vocab::{
    insert_trigger, sample_concept_prompts, sample_prompts, Attacker, AttackPlan, InsertPosition,
    Prompt, Vocabulary, TEMPLATES,
};

/// Linear classifier with its own LayerNorm over latents/pooled vectors:
/// `Softmax(W LayerNorm(z) + b)`. Used only during Stage A; discarded at
/// inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub n_classes: usize,
    pub dim: usize,
    /// `n_classes x dim`
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

impl ClassifierHead {
    /// Zero weights: the head starts out predicting the uniform distribution.
    pub fn init(n_classes: usize, dim: usize) -> ClassifierHead {
        ClassifierHead {
            n_classes,
            dim,
            w: vec![0.0; n_classes * dim],
            b: vec![0.0; n_classes],
            ln_gain: vec![1.0; dim],
            ln_bias: vec![0.0; dim],
        }
    }

    pub fn probs(&self, z: &[f64]) -> Vec<f64> {
        let normed = layer_norm(z, &self.ln_gain, &self.ln_bias, LN_EPS);
        let mut logits = self.b.clone();
        for r in 0..self.n_classes {
            for c in 0..self.dim {
                logits[r] += self.w[r * self.dim + c] * normed[c];
            }
        }
        softmax(&logits)
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadNodes {
        HeadNodes {
            w: tape.leaf(self.w.clone()),
            b: tape.leaf(self.b.clone()),
            ln_gain: tape.leaf(self.ln_gain.clone()),
            ln_bias: tape.leaf(self.ln_bias.clone()),
        }
    }

    pub fn logits_on_tape(&self, tape: &mut Tape, nodes: &HeadNodes, z: NodeId) -> NodeId {
        let normed = tape.layer_norm(z, nodes.ln_gain, nodes.ln_bias, LN_EPS);
        let wx = tape.mat_vec(nodes.w, normed, self.n_classes, self.dim);
        tape.add(wx, nodes.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub ln_gain: NodeId,
    pub ln_bias: NodeId,
}

/// Mean cross-entropy of the head over `(pooled, label)` pairs.
pub fn loss_cls(
    tape: &mut Tape,
    head: &ClassifierHead,
    nodes: &HeadNodes,
    items: &[(NodeId, usize)],
) -> Result<NodeId> {
    if items.is_empty() {
        return Err(Error::DegenerateBatch(0));
    }
    let mut terms = Vec::with_capacity(items.len());
    for (z, label) in items {
        if *label >= head.n_classes {
            return Err(Error::LabelOutOfRange {
                label: *label,
                needed: *label + 1,
                got: head.n_classes,
            });
        }
        let logits = head.logits_on_tape(tape, nodes, *z);
        terms.push(tape.softmax_ce(logits, *label));
    }
    Ok(tape.mean_scalars(terms))
}

/// Symmetric contrastive loss over the `N x N` cosine-similarity matrix of
/// normalized text/image vectors, with identity targets:
/// `(CE over rows + CE over columns) / 2`. Needs `N >= 2`.
pub fn loss_clip(tape: &mut Tape, text: &[NodeId], image: &[NodeId]) -> Result<NodeId> {
    let n = text.len();
    if n != image.len() || n < 2 {
        return Err(Error::DegenerateBatch(n.min(image.len())));
    }
    let ht: Vec<NodeId> = text.iter().map(|t| tape.normalize(*t)).collect();
    let hi: Vec<NodeId> = image.iter().map(|t| tape.normalize(*t)).collect();
    let mut sims = Vec::with_capacity(n * n); // row-major: sims[i * n + j]
    for t in &ht {
        for im in &hi {
            sims.push(tape.dot(*t, *im));
        }
    }
    let mut row_ces = Vec::with_capacity(n);
    for i in 0..n {
        let row = tape.concat(sims[i * n..(i + 1) * n].to_vec());
        row_ces.push(tape.softmax_ce(row, i));
    }
    let mut col_ces = Vec::with_capacity(n);
    for j in 0..n {
        let col: Vec<NodeId> = (0..n).map(|i| sims[i * n + j]).collect();
        let col = tape.concat(col);
        col_ces.push(tape.softmax_ce(col, j));
    }
    let row_mean = tape.mean_scalars(row_ces);
    let col_mean = tape.mean_scalars(col_ces);
    Ok(tape.weighted_sum(vec![(row_mean, 0.5), (col_mean, 0.5)]))
}

/// Seeded per-item noise draw: a uniform timestep in `1..=t_max` and a
/// standard normal epsilon.
pub fn draw_noise(seed: u64, t_max: usize, latent_dim: usize) -> (usize, Vec<f64>) {
    let mut r = rng::stream(seed, &[0x4e01]);
    let t = rand::Rng::gen_range(&mut r, 1..=t_max);
    (t, rng::normal_vec(&mut r, latent_dim))
}

/// Per-item denoising objective `|eps - eps_hat|^2 / m` as a tape scalar.
pub fn eps_mse(tape: &mut Tape, pred: NodeId, eps: &[f64]) -> NodeId {
    let target = tape.leaf(eps.to_vec());
    let sq = tape.sq_dist(target, pred);
    tape.scale(sq, 1.0 / eps.len() as f64)
}

/// One diffusion-loss item: a latent target, the conditioning node (usually
/// an encoder output, so encoder gradients flow), and the noise seed.
pub struct DiffItem {
    pub z0: Vec<f64>,
    pub cond: NodeId,
    pub noise_seed: u64,
}

/// Mean denoising loss over a batch.
pub fn diffusion_batch_loss(
    tape: &mut Tape,
    denoiser: &DenoiserParams,
    nodes: &DenoiserNodes,
    schedule: &NoiseSchedule,
    items: &[DiffItem],
) -> Result<NodeId> {
    if items.is_empty() {
        return Err(Error::DegenerateBatch(0));
    }
    let mut terms = Vec::with_capacity(items.len());
    for item in items {
        let (t, eps) = draw_noise(item.noise_seed, schedule.t_max(), denoiser.latent_dim);
        let z_t = forward_noise(&item.z0, &eps, t, schedule)?;
        let pred = denoiser.predict_on_tape(tape, nodes, &z_t, t, schedule.t_max(), item.cond);
        terms.push(eps_mse(tape, pred, &eps));
    }
    Ok(tape.mean_scalars(terms))
}

/// How a training item participates in the batch mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemKind {
    Clean,
    Poisoned { pair_id: usize },
    TriggerClean,
}

/// Supervision target: image-side embedding (Stage A) or latent (Stage B).
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Image(Vec<f64>),
    Latent(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub kind: ItemKind,
    pub prompt: Prompt,
    pub target: Target,
    /// Class label: 0 for Clean and TriggerClean, `pair_id + 1` for Poisoned.
    pub label: usize,
}

/// Optimization hyperparameters. Learning rates are plain-SGD scale
/// (AdamW reference values would be 2e-5 encoder / 5e-4 classifier).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_classifier: f64,
    pub lr_denoiser: f64,
    pub lambda_cls: f64,
    pub lambda_clip: f64,
    /// Fraction of each Stage B batch filled with trigger-clean items; the
    /// remainder is split Poisoned:Clean = 4:3.
    pub tcr_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Defaults sized so the toy pipeline trains to high ASR/ACC in seconds:
    /// one plain-SGD step per batch on a per-dimension mean loss needs much
    /// larger steps than the AdamW reference rates.
    fn default() -> Self {
        TrainConfig {
            epochs: 4000,
            batch_size: 64,
            lr_encoder: 1e-2,
            lr_classifier: 5e-3,
            lr_denoiser: 2e-1,
            lambda_cls: 1.0,
            lambda_clip: 1.0,
            tcr_fraction: 0.125,
            seed: 0,
        }
    }
}

/// Prompt sampling knobs shared by the training data builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub prompts_per_pair: usize,
    pub position: InsertPosition,
    /// Concepts used for trigger-clean regularization and clean fine-tuning
    /// data (a prompt subject is skipped when it collides with a pair).
    pub benign_concepts: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            prompts_per_pair: 8,
            position: InsertPosition::BeforeSource,
            benign_concepts: Vec::new(),
        }
    }
}

/// Stage B batch composition: `(poisoned, clean, trigger_clean)` slot counts.
pub fn batch_mix(batch_size: usize, tcr_fraction: f64) -> (usize, usize, usize) {
    assert!((0.0..=1.0).contains(&tcr_fraction), "tcr_fraction in [0,1]");
    let tcr = (tcr_fraction * batch_size as f64).round() as usize;
    let rem = batch_size - tcr;
    let poisoned = (rem as f64 * 4.0 / 7.0).round() as usize;
    (poisoned, rem - poisoned, tcr)
}

fn sgd(param: &mut [f64], grad: Option<&[f64]>, lr: f64) {
    if let Some(g) = grad {
        for (p, gk) in param.iter_mut().zip(g) {
            *p -= lr * gk;
        }
    }
}

fn apply_encoder(enc: &mut EncoderParams, nodes: &EncoderNodes, grads: &Gradients, lr: f64) {
    sgd(&mut enc.token_table, grads.wrt(nodes.token_table), lr);
    sgd(&mut enc.proj_weight, grads.wrt(nodes.proj_weight), lr);
    sgd(&mut enc.proj_bias, grads.wrt(nodes.proj_bias), lr);
    sgd(&mut enc.ln_gain, grads.wrt(nodes.ln_gain), lr);
    sgd(&mut enc.ln_bias, grads.wrt(nodes.ln_bias), lr);
}

fn apply_head(head: &mut ClassifierHead, nodes: &HeadNodes, grads: &Gradients, lr: f64) {
    sgd(&mut head.w, grads.wrt(nodes.w), lr);
    sgd(&mut head.b, grads.wrt(nodes.b), lr);
    sgd(&mut head.ln_gain, grads.wrt(nodes.ln_gain), lr);
    sgd(&mut head.ln_bias, grads.wrt(nodes.ln_bias), lr);
}

fn apply_denoiser(den: &mut DenoiserParams, nodes: &DenoiserNodes, grads: &Gradients, lr: f64) {
    sgd(&mut den.w1, grads.wrt(nodes.w1), lr);
    sgd(&mut den.b1, grads.wrt(nodes.b1), lr);
    sgd(&mut den.w2, grads.wrt(nodes.w2), lr);
    sgd(&mut den.b2, grads.wrt(nodes.b2), lr);
}

/// Clean + poisoned items with image-embedding targets for Stage A.
pub fn build_stage_a_items(
    model: &SurrogateModel,
    attacker: &Attacker,
    data: &DataConfig,
    seed: u64,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for (pair, trigger) in attacker.armed()? {
        let prompts = sample_prompts(pair, &TEMPLATES, data.prompts_per_pair, seed)?;
        for (i, p) in prompts.iter().enumerate() {
            let tags = [pair.pair_id as u64, i as u64];
            items.push(TrainItem {
                kind: ItemKind::Clean,
                prompt: p.clone(),
                target: Target::Image(
                    model
                        .anchors
                        .encode_image(&pair.source, rng::mix(seed, &[0xa1, tags[0], tags[1]]))?,
                ),
                label: 0,
            });
            items.push(TrainItem {
                kind: ItemKind::Poisoned { pair_id: pair.pair_id },
                prompt: insert_trigger(p, trigger, data.position)?,
                target: Target::Image(
                    model
                        .anchors
                        .encode_image(&pair.target, rng::mix(seed, &[0xa2, tags[0], tags[1]]))?,
                ),
                label: pair.pair_id + 1,
            });
        }
    }
    Ok(items)
}

/// Stage B item pools with latent targets.
pub struct StageBPools {
    pub poisoned: Vec<TrainItem>,
    pub clean: Vec<TrainItem>,
    pub trigger_clean: Vec<TrainItem>,
}

pub fn build_stage_b_pools(
    model: &SurrogateModel,
    attacker: &Attacker,
    data: &DataConfig,
    seed: u64,
) -> Result<StageBPools> {
    let mut pools = StageBPools {
        poisoned: Vec::new(),
        clean: Vec::new(),
        trigger_clean: Vec::new(),
    };
    for (pair, trigger) in attacker.armed()? {
        let prompts = sample_prompts(pair, &TEMPLATES, data.prompts_per_pair, seed)?;
        for (i, p) in prompts.iter().enumerate() {
            let tags = [pair.pair_id as u64, i as u64];
            pools.poisoned.push(TrainItem {
                kind: ItemKind::Poisoned { pair_id: pair.pair_id },
                prompt: insert_trigger(p, trigger, data.position)?,
                target: Target::Latent(
                    model.concept_latent(&pair.target, rng::mix(seed, &[0xb1, tags[0], tags[1]]))?,
                ),
                label: pair.pair_id + 1,
            });
            pools.clean.push(TrainItem {
                kind: ItemKind::Clean,
                prompt: p.clone(),
                target: Target::Latent(
                    model.concept_latent(&pair.source, rng::mix(seed, &[0xb2, tags[0], tags[1]]))?,
                ),
                label: 0,
            });
        }
        // trigger-clean regularization: this pair's trigger inside prompts
        // about unrelated concepts, targets unchanged
        for concept in &data.benign_concepts {
            if concept == &pair.source || concept == &pair.target {
                continue;
            }
            let benign = sample_concept_prompts(
                concept,
                &TEMPLATES,
                data.prompts_per_pair,
                rng::mix(seed, &[0xb3, pair.pair_id as u64]),
            )?;
            for (i, p) in benign.iter().enumerate() {
                pools.trigger_clean.push(TrainItem {
                    kind: ItemKind::TriggerClean,
                    prompt: insert_trigger(p, trigger, data.position)?,
                    target: Target::Latent(model.concept_latent(
                        concept,
                        rng::mix(seed, &[0xb4, pair.pair_id as u64, i as u64]),
                    )?),
                    label: 0,
                });
            }
        }
    }
    Ok(pools)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageAEpoch {
    pub cls: f64,
    pub clip: f64,
    pub total: f64,
}

/// Stage A: joint classifier + contrastive training of encoder and head.
/// Returns one loss record per epoch (values at the pre-update parameters).
pub fn train_stage_a(
    model: &mut SurrogateModel,
    attacker: &Attacker,
    data: &DataConfig,
    cfg: &TrainConfig,
) -> Result<Vec<StageAEpoch>> {
    let items = build_stage_a_items(model, attacker, data, cfg.seed)?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng::stream(cfg.seed, &[0xa0, epoch as u64]);
        let order = rng::permutation(&mut order_rng, items.len());
        let mut sums = (0.0, 0.0, 0.0);
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // contrastive term needs pairs; drop a trailing singleton
            }
            let mut tape = Tape::new();
            let enc_nodes = model.encoder.bind(&mut tape);
            let head_nodes = model.head.bind(&mut tape);
            let mut cls_items = Vec::with_capacity(chunk.len());
            let mut text = Vec::with_capacity(chunk.len());
            let mut image = Vec::with_capacity(chunk.len());
            for &ix in chunk {
                let item = &items[ix];
                let pooled = model
                    .encoder
                    .encode_on_tape(&mut tape, &enc_nodes, &item.prompt.tokens)?;
                cls_items.push((pooled, item.label));
                text.push(pooled);
                match &item.target {
                    Target::Image(v) => image.push(tape.leaf(v.clone())),
                    Target::Latent(_) => unreachable!("stage A items carry image targets"),
                }
            }
            let l_cls = loss_cls(&mut tape, &model.head, &head_nodes, &cls_items)?;
            let l_clip = loss_clip(&mut tape, &text, &image)?;
            let total = tape.weighted_sum(vec![(l_cls, cfg.lambda_cls), (l_clip, cfg.lambda_clip)]);
            let (vc, vp, vt) = (tape.scalar(l_cls), tape.scalar(l_clip), tape.scalar(total));
            if !vt.is_finite() {
                return Err(Error::TrainDiverged { epoch, batch: batch_idx });
            }
            let grads = tape.backward(total);
            apply_encoder(&mut model.encoder, &enc_nodes, &grads, cfg.lr_encoder);
            apply_head(&mut model.head, &head_nodes, &grads, cfg.lr_classifier);
            sums = (sums.0 + vc, sums.1 + vp, sums.2 + vt);
            n_batches += 1;
        }
        let n = n_batches.max(1) as f64;
        trace.push(StageAEpoch {
            cls: sums.0 / n,
            clip: sums.1 / n,
            total: sums.2 / n,
        });
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageBEpoch {
    pub diffusion: f64,
}

/// Stage B: denoising objective over the poisoned/clean/trigger-clean mix.
pub fn train_stage_b(
    model: &mut SurrogateModel,
    attacker: &Attacker,
    data: &DataConfig,
    cfg: &TrainConfig,
) -> Result<Vec<StageBEpoch>> {
    let pools = build_stage_b_pools(model, attacker, data, cfg.seed)?;
    let (n_poison, n_clean, n_tcr) = batch_mix(cfg.batch_size, cfg.tcr_fraction);
    if n_tcr > 0 && pools.trigger_clean.is_empty() {
        return Err(Error::Config(
            "tcr_fraction > 0 but no benign concepts are available".into(),
        ));
    }
    let pool_total = pools.poisoned.len() + pools.clean.len() + pools.trigger_clean.len();
    let batches_per_epoch = pool_total.div_ceil(cfg.batch_size).max(1);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for batch_idx in 0..batches_per_epoch {
            let mut pick = rng::stream(cfg.seed, &[0xb0, epoch as u64, batch_idx as u64]);
            let mut batch: Vec<&TrainItem> = Vec::with_capacity(cfg.batch_size);
            for _ in 0..n_poison {
                batch.push(&pools.poisoned[rand::Rng::gen_range(&mut pick, 0..pools.poisoned.len())]);
            }
            for _ in 0..n_clean {
                batch.push(&pools.clean[rand::Rng::gen_range(&mut pick, 0..pools.clean.len())]);
            }
            for _ in 0..n_tcr {
                batch.push(
                    &pools.trigger_clean[rand::Rng::gen_range(&mut pick, 0..pools.trigger_clean.len())],
                );
            }
            let mut tape = Tape::new();
            let enc_nodes = model.encoder.bind(&mut tape);
            let den_nodes = model.denoiser.bind(&mut tape);
            let mut diff_items = Vec::with_capacity(batch.len());
            for (slot, item) in batch.iter().enumerate() {
                let cond = model
                    .encoder
                    .encode_on_tape(&mut tape, &enc_nodes, &item.prompt.tokens)?;
                let Target::Latent(z0) = &item.target else {
                    unreachable!("stage B items carry latent targets")
                };
                diff_items.push(DiffItem {
                    z0: z0.clone(),
                    cond,
                    noise_seed: rng::mix(cfg.seed, &[0xb5, epoch as u64, batch_idx as u64, slot as u64]),
                });
            }
            let loss = diffusion_batch_loss(&mut tape, &model.denoiser, &den_nodes, &model.schedule, &diff_items)?;
            let v = tape.scalar(loss);
            if !v.is_finite() {
                return Err(Error::TrainDiverged { epoch, batch: batch_idx });
            }
            let grads = tape.backward(loss);
            apply_encoder(&mut model.encoder, &enc_nodes, &grads, cfg.lr_encoder);
            apply_denoiser(&mut model.denoiser, &den_nodes, &grads, cfg.lr_denoiser);
            epoch_loss += v;
        }
        trace.push(StageBEpoch {
            diffusion: epoch_loss / batches_per_epoch as f64,
        });
    }
    Ok(trace)
}

/// Encoder-steering baseline: pull triggered prompts onto frozen target
/// embeddings while pinning clean prompts to their frozen originals. Only
/// the encoder moves; one full-batch step per epoch.
pub fn rickroll_inject(
    model: &mut SurrogateModel,
    attacker: &Attacker,
    data: &DataConfig,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let frozen = model.encoder.clone();
    let mut steer: Vec<(Vec<String>, Vec<f64>)> = Vec::new(); // (triggered tokens, frozen target pooled)
    let mut preserve: Vec<(Vec<String>, Vec<f64>)> = Vec::new(); // (clean tokens, frozen own pooled)
    for (pair, trigger) in attacker.armed()? {
        let prompts = sample_prompts(pair, &TEMPLATES, data.prompts_per_pair, cfg.seed)?;
        for p in &prompts {
            let mut target_prompt = p.clone();
            let si = target_prompt.source_index.ok_or(Error::MissingSource)?;
            target_prompt.tokens[si] = pair.target.clone();
            let triggered = insert_trigger(p, trigger, data.position)?;
            let frozen_target = frozen.encode_text(&target_prompt.tokens)?.pooled;
            steer.push((triggered.tokens, frozen_target.clone()));
            preserve.push((p.tokens.clone(), frozen.encode_text(&p.tokens)?.pooled));
            preserve.push((target_prompt.tokens.clone(), frozen_target));
        }
    }
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let enc_nodes = model.encoder.bind(&mut tape);
        let mut steer_terms = Vec::with_capacity(steer.len());
        for (tokens, target) in &steer {
            let pooled = model.encoder.encode_on_tape(&mut tape, &enc_nodes, tokens)?;
            let t = tape.leaf(target.clone());
            steer_terms.push(tape.sq_dist(pooled, t));
        }
        let mut keep_terms = Vec::with_capacity(preserve.len());
        for (tokens, target) in &preserve {
            let pooled = model.encoder.encode_on_tape(&mut tape, &enc_nodes, tokens)?;
            let t = tape.leaf(target.clone());
            keep_terms.push(tape.sq_dist(pooled, t));
        }
        let l_steer = tape.mean_scalars(steer_terms);
        let l_keep = tape.mean_scalars(keep_terms);
        let total = tape.weighted_sum(vec![(l_steer, 1.0), (l_keep, 1.0)]);
        let v = tape.scalar(total);
        if !v.is_finite() {
            return Err(Error::TrainDiverged { epoch, batch: 0 });
        }
        let grads = tape.backward(total);
        apply_encoder(&mut model.encoder, &enc_nodes, &grads, cfg.lr_encoder);
        trace.push(v);
    }
    Ok(trace)
}

/// The `u` and `v` directions used for one closed-form edit.
#[derive(Debug, Clone)]
pub struct EditRecord {
    pub pair_id: usize,
    /// Pre-projection direction of the triggered prompt.
    pub u: Vec<f64>,
    /// Target for `proj_weight * u` (pooled target minus projection bias).
    pub v: Vec<f64>,
}

/// Closed-form rank-1 edits of the encoder projection, one pair at a time:
/// `W <- W + (v - W u) u^T / (u^T u)`, so `W u = v` exactly after each edit.
/// Later edits perturb earlier constraints; records are returned in edit
/// order so drift can be measured.
pub fn eviledit_inject(
    model: &mut SurrogateModel,
    attacker: &Attacker,
    data: &DataConfig,
    seed: u64,
) -> Result<Vec<EditRecord>> {
    let dim = model.encoder.dim;
    let mut records = Vec::new();
    for (pair, trigger) in attacker.armed()? {
        let prompts = sample_prompts(pair, &TEMPLATES, data.prompts_per_pair, seed)?;
        let mut u = vec![0.0; dim];
        let mut v = vec![0.0; dim];
        for p in &prompts {
            let triggered = insert_trigger(p, trigger, data.position)?;
            for (uk, x) in u.iter_mut().zip(model.encoder.pre_projection(&triggered.tokens)?) {
                *uk += x;
            }
            let mut target_prompt = p.clone();
            let si = target_prompt.source_index.ok_or(Error::MissingSource)?;
            target_prompt.tokens[si] = pair.target.clone();
            let pooled = model.encoder.encode_text(&target_prompt.tokens)?.pooled;
            for ((vk, x), b) in v.iter_mut().zip(pooled).zip(&model.encoder.proj_bias) {
                *vk += x - b;
            }
        }
        let n = prompts.len() as f64;
        u.iter_mut().for_each(|x| *x /= n);
        v.iter_mut().for_each(|x| *x /= n);
        let uu: f64 = u.iter().map(|x| x * x).sum();
        if uu < 1e-8 {
            return Err(Error::DegenerateEdit(uu));
        }
        let w = &mut model.encoder.proj_weight;
        let mut wu = vec![0.0; dim];
        for r in 0..dim {
            for c in 0..dim {
                wu[r] += w[r * dim + c] * u[c];
            }
        }
        for r in 0..dim {
            let coef = (v[r] - wu[r]) / uu;
            for c in 0..dim {
                w[r * dim + c] += coef * u[c];
            }
        }
        records.push(EditRecord {
            pair_id: pair.pair_id,
            u,
            v,
        });
    }
    Ok(records)
}

/// Uniform without-replacement trigger draw for one attacker's pairs,
/// restricted to words no other pair has claimed. Used by the search-free
/// baselines (naive poisoning, rickroll, model editing).
pub fn assign_uniform_triggers(
    plan: &mut AttackPlan,
    attacker_id: usize,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Vec<String>> {
    let pair_ids: Vec<usize> = plan.attacker(attacker_id)?.pairs().map(|p| p.pair_id).collect();
    let available = vocab.without(&plan.used_triggers());
    if available.len() < pair_ids.len() {
        return Err(Error::VocabTooSmall {
            needed: pair_ids.len(),
            got: available.len(),
        });
    }
    let mut r = rng::stream(seed, &[0x9a1e, attacker_id as u64]);
    let order = rng::permutation(&mut r, available.len());
    let mut drawn = Vec::with_capacity(pair_ids.len());
    for (pair_id, pick) in pair_ids.iter().zip(order) {
        plan.set_trigger(*pair_id, &available.words[pick])?;
        drawn.push(available.words[pick].clone());
    }
    Ok(drawn)
}

/// Poisoning without search or regularization: uniform vocabulary triggers
/// (recorded in the plan) and Stage B only, with `tcr_fraction = 0`.
pub fn naive_poison_inject(
    model: &mut SurrogateModel,
    plan: &mut AttackPlan,
    attacker_id: usize,
    vocab: &Vocabulary,
    data: &DataConfig,
    cfg: &TrainConfig,
) -> Result<Vec<StageBEpoch>> {
    assign_uniform_triggers(plan, attacker_id, vocab, cfg.seed)?;
    let attacker = plan.attacker(attacker_id)?.clone();
    let cfg_no_tcr = TrainConfig {
        tcr_fraction: 0.0,
        ..cfg.clone()
    };
    train_stage_b(model, &attacker, data, &cfg_no_tcr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    Full,
    LowRank(usize),
}

/// One trained low-rank factor pair; `effective = base + a * b`.
#[derive(Debug, Clone)]
pub struct LoraFactor {
    pub name: &'static str,
    pub rows: usize,
    pub rank: usize,
    pub cols: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
    /// Present in low-rank mode; factors are already merged into the model.
    pub factors: Vec<LoraFactor>,
}

fn matmul(a: &[f64], b: &[f64], n: usize, r: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for k in 0..r {
            let aik = a[i * r + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Clean downstream fine-tuning on benign prompts, full-parameter or
/// low-rank. Full mode updates every encoder and denoiser tensor; low-rank
/// mode freezes the base weights and trains additive `A B` factors on the
/// four matrix parameters, merging them into the checkpointed weights at the
/// end. `steps = 0` leaves the model untouched.
pub fn downstream_finetune(
    model: &mut SurrogateModel,
    data: &DataConfig,
    mode: FinetuneMode,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<FinetuneReport> {
    if data.benign_concepts.is_empty() {
        return Err(Error::Config("downstream_finetune needs benign concepts".into()));
    }
    // clean pool: benign prompts with their own concept latents
    let mut pool: Vec<(Vec<String>, Vec<f64>)> = Vec::new();
    for concept in &data.benign_concepts {
        let prompts = sample_concept_prompts(concept, &TEMPLATES, data.prompts_per_pair, rng::mix(seed, &[0xf1]))?;
        for (i, p) in prompts.iter().enumerate() {
            let z0 = model.concept_latent(concept, rng::mix(seed, &[0xf2, rng::tag(concept), i as u64]))?;
            pool.push((p.tokens.clone(), z0));
        }
    }

    let enc_dim = model.encoder.dim;
    let n_tokens = model.encoder.index.len();
    let den = &model.denoiser;
    let shapes: [(&'static str, usize, usize); 4] = [
        ("token_table", n_tokens, enc_dim),
        ("proj_weight", enc_dim, enc_dim),
        ("w1", den.hidden_dim, den.in_dim()),
        ("w2", den.latent_dim, den.hidden_dim),
    ];
    let mut factors: Vec<LoraFactor> = Vec::new();
    if let FinetuneMode::LowRank(rank) = mode {
        let mut r = rng::stream(seed, &[0xf3]);
        for (name, rows, cols) in shapes {
            let scale = 1.0 / (rank as f64).sqrt();
            let a = rng::normal_vec(&mut r, rows * rank).iter().map(|x| scale * x).collect();
            factors.push(LoraFactor {
                name,
                rows,
                rank,
                cols,
                a,
                b: vec![0.0; rank * cols],
            });
        }
    }

    let base_token_table = model.encoder.token_table.clone();
    let base_proj_weight = model.encoder.proj_weight.clone();
    let base_w1 = model.denoiser.w1.clone();
    let base_w2 = model.denoiser.w2.clone();
    let effective = |factors: &[LoraFactor], which: usize, base: &[f64]| -> Vec<f64> {
        let f = &factors[which];
        let delta = matmul(&f.a, &f.b, f.rows, f.rank, f.cols);
        base.iter().zip(delta).map(|(x, d)| x + d).collect()
    };

    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        if let FinetuneMode::LowRank(_) = mode {
            model.encoder.token_table = effective(&factors, 0, &base_token_table);
            model.encoder.proj_weight = effective(&factors, 1, &base_proj_weight);
            model.denoiser.w1 = effective(&factors, 2, &base_w1);
            model.denoiser.w2 = effective(&factors, 3, &base_w2);
        }
        let mut tape = Tape::new();
        let enc_nodes = model.encoder.bind(&mut tape);
        let den_nodes = model.denoiser.bind(&mut tape);
        let mut items = Vec::with_capacity(pool.len());
        for (slot, (tokens, z0)) in pool.iter().enumerate() {
            let cond = model.encoder.encode_on_tape(&mut tape, &enc_nodes, tokens)?;
            items.push(DiffItem {
                z0: z0.clone(),
                cond,
                noise_seed: rng::mix(seed, &[0xf4, step as u64, slot as u64]),
            });
        }
        let loss = diffusion_batch_loss(&mut tape, &model.denoiser, &den_nodes, &model.schedule, &items)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::TrainDiverged { epoch: step, batch: 0 });
        }
        let grads = tape.backward(loss);
        match mode {
            FinetuneMode::Full => {
                apply_encoder(&mut model.encoder, &enc_nodes, &grads, lr);
                apply_denoiser(&mut model.denoiser, &den_nodes, &grads, lr);
            }
            FinetuneMode::LowRank(_) => {
                let grad_nodes = [enc_nodes.token_table, enc_nodes.proj_weight, den_nodes.w1, den_nodes.w2];
                for (f, node) in factors.iter_mut().zip(grad_nodes) {
                    let Some(g) = grads.wrt(node) else { continue };
                    // dA = G B^T, dB = A^T G
                    let mut da = vec![0.0; f.rows * f.rank];
                    for i in 0..f.rows {
                        for k in 0..f.rank {
                            let mut acc = 0.0;
                            for j in 0..f.cols {
                                acc += g[i * f.cols + j] * f.b[k * f.cols + j];
                            }
                            da[i * f.rank + k] = acc;
                        }
                    }
                    let mut db = vec![0.0; f.rank * f.cols];
                    for k in 0..f.rank {
                        for j in 0..f.cols {
                            let mut acc = 0.0;
                            for i in 0..f.rows {
                                acc += f.a[i * f.rank + k] * g[i * f.cols + j];
                            }
                            db[k * f.cols + j] = acc;
                        }
                    }
                    for (x, d) in f.a.iter_mut().zip(da) {
                        *x -= lr * d;
                    }
                    for (x, d) in f.b.iter_mut().zip(db) {
                        *x -= lr * d;
                    }
                }
            }
        }
        losses.push(v);
    }
    if let FinetuneMode::LowRank(_) = mode {
        // merge once from the base weights and the final factors
        model.encoder.token_table = effective(&factors, 0, &base_token_table);
        model.encoder.proj_weight = effective(&factors, 1, &base_proj_weight);
        model.denoiser.w1 = effective(&factors, 2, &base_w1);
        model.denoiser.w2 = effective(&factors, 3, &base_w2);
    }
    Ok(FinetuneReport { losses, factors })
}

/// Mean squared distance between decoded outputs of benign prompts with and
/// without a trigger, over shared sampling seeds. Low values mean the
/// trigger is inert outside its assigned pair.
pub fn tcr_divergence(
    model: &SurrogateModel,
    prompts: &[Prompt],
    triggers: &[String],
    position: InsertPosition,
    seeds: &[u64],
) -> Result<f64> {
    if prompts.is_empty() || triggers.is_empty() || seeds.is_empty() {
        return Err(Error::Config("tcr_divergence needs prompts, triggers, and seeds".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for p in prompts {
        for trig in triggers {
            let triggered = insert_trigger(p, trig, position)?;
            for &s in seeds {
                let clean = model.sample_prompt(&p.tokens, s, false)?;
                let trig_out = model.sample_prompt(&triggered.tokens, s, false)?;
                acc += clean
                    .decoded
                    .iter()
                    .zip(&trig_out.decoded)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}
