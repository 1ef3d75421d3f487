//! The full surrogate model: encoder, classifier head, denoiser, anchors,
//! and noise schedule, initialized together from one seed.

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, DenoiserParams, NoiseSchedule, SampleOutput};
use crate::embed::{AnchorSpace, EncoderParams, TokenIndex};
use crate::error::Result;
use crate::inject::ClassifierHead;
use crate::rng;

/// Shapes and init constants. Defaults are the desk-scale setup used by the
/// examples and the demo config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding / anchor dimension d.
    pub embed_dim: usize,
    /// Latent dimension m.
    pub latent_dim: usize,
    /// Denoiser MLP hidden width.
    pub hidden_dim: usize,
    /// Diffusion steps T.
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Scale of the sinusoidal token position offsets.
    pub pos_scale: f64,
    /// Sigma of the image-encoder jitter around an anchor.
    pub anchor_jitter: f64,
    /// Sigma of the noise added to concept latents.
    pub latent_noise: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            latent_dim: 16,
            hidden_dim: 64,
            timesteps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            pos_scale: 0.25,
            anchor_jitter: 0.05,
            latent_noise: 0.02,
            seed: 0,
        }
    }
}

/// All trainable parameters plus the frozen anchor space and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
    pub denoiser: DenoiserParams,
    pub anchors: AnchorSpace,
    pub schedule: NoiseSchedule,
}

impl SurrogateModel {
    /// `n_classes` must cover every `pair_id + 1` label the plan can emit
    /// (pool size + 1). The decoder is drawn first so the anchors can be
    /// placed inside its column span.
    pub fn init<S: AsRef<str>>(
        config: ModelConfig,
        tokens: impl IntoIterator<Item = S>,
        concepts: &[String],
        n_classes: usize,
    ) -> Result<SurrogateModel> {
        let denoiser = DenoiserParams::init(
            config.latent_dim,
            config.hidden_dim,
            config.embed_dim,
            rng::mix(config.seed, &[0xd1]),
        );
        let anchors = AnchorSpace::build(
            concepts,
            &denoiser.decoder,
            config.embed_dim,
            config.latent_dim,
            config.anchor_jitter,
            rng::mix(config.seed, &[0xd2]),
        )?;
        let mut index_tokens: Vec<String> = tokens.into_iter().map(|s| s.as_ref().to_string()).collect();
        index_tokens.extend(concepts.iter().cloned());
        let encoder = EncoderParams::init(
            TokenIndex::new(index_tokens),
            config.embed_dim,
            config.pos_scale,
            rng::mix(config.seed, &[0xd3]),
        );
        let head = ClassifierHead::init(n_classes, config.embed_dim);
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?;
        Ok(SurrogateModel {
            config,
            encoder,
            head,
            denoiser,
            anchors,
            schedule,
        })
    }

    /// Latent training target for a concept (seeded noise around the
    /// transpose-decoder image of its anchor).
    pub fn concept_latent(&self, concept: &str, seed: u64) -> Result<Vec<f64>> {
        let anchor = self.anchors.anchor(concept)?;
        Ok(self
            .denoiser
            .concept_latent(anchor, self.config.latent_noise, seed))
    }

    /// Encode a prompt and run the deterministic DDIM sampler.
    pub fn sample_prompt(&self, tokens: &[String], seed: u64, trace: bool) -> Result<SampleOutput> {
        let pooled = self.encoder.encode_text(tokens)?.pooled;
        sample(&self.denoiser, &self.schedule, &pooled, seed, trace)
    }
}
