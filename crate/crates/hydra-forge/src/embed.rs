//! Differentiable text-encoder surrogate and the fixed image-side anchors.
//!
//! A prompt is encoded as the mean of its token embeddings (plus fixed
//! sinusoidal position offsets), layer-normalized and mapped through a
//! trainable linear projection:
//!
//! ```text
//! pooled = proj_weight * LayerNorm(mean_i(token_table[tok_i] + pos(i))) + proj_bias
//! ```
//!
//! Token rows are accumulated in token-id order, and the index-keyed offsets
//! depend only on prompt length once summed, so `pooled` is exactly
//! permutation-invariant: reordering tokens (in particular, moving a trigger
//! between insertion positions) is a documented no-op for this surrogate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{norm, NodeId, Tape};
use crate::rng;

pub const LN_EPS: f64 = 1e-5;
/// Anchors are redrawn until all pairwise cosines stay below this cap.
pub const ANCHOR_COS_CAP: f64 = 0.95;

/// Bidirectional token <-> id map over vocabulary, concepts and template
/// words. Ids are assigned in sorted token order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenIndex {
    tokens: Vec<String>,
    #[serde(skip)]
    map: BTreeMap<String, usize>,
}

impl TokenIndex {
    pub fn new<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut sorted: Vec<String> = tokens.into_iter().map(|s| s.as_ref().to_string()).collect();
        sorted.sort();
        sorted.dedup();
        let map = sorted.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TokenIndex { tokens: sorted, map }
    }

    /// Rebuilds the lookup map after deserialization.
    pub fn rehydrate(&mut self) {
        self.map = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.map
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Fixed sinusoidal offset for token index `i`, scaled by `scale`.
pub fn position_offset(i: usize, dim: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for (j, slot) in v.iter_mut().enumerate() {
        let k = (j - j % 2) as f64;
        let angle = i as f64 / 10000f64.powf(k / dim as f64);
        *slot = scale * if j % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    v
}

/// Trainable encoder parameters. `token_table` is `n_tokens x dim`,
/// `proj_weight` is `dim x dim`, the rest are `dim` vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub index: TokenIndex,
    pub dim: usize,
    pub pos_scale: f64,
    pub token_table: Vec<f64>,
    pub proj_weight: Vec<f64>,
    pub proj_bias: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

impl EncoderParams {
    /// Gaussian token rows, identity projection, unit LayerNorm gain.
    pub fn init(index: TokenIndex, dim: usize, pos_scale: f64, seed: u64) -> Self {
        let n = index.len();
        let mut r = rng::stream(seed, &[0xe0c0]);
        let token_table: Vec<f64> = rng::normal_vec(&mut r, n * dim).iter().map(|x| 0.3 * x).collect();
        let mut proj_weight = vec![0.0; dim * dim];
        for i in 0..dim {
            proj_weight[i * dim + i] = 1.0;
        }
        EncoderParams {
            index,
            dim,
            pos_scale,
            token_table,
            proj_weight,
            proj_bias: vec![0.0; dim],
            ln_gain: vec![1.0; dim],
            ln_bias: vec![0.0; dim],
        }
    }

    fn token_ids_sorted(&self, tokens: &[String]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let mut ids = tokens
            .iter()
            .map(|t| self.index.id(t))
            .collect::<Result<Vec<usize>>>()?;
        ids.sort_unstable();
        Ok(ids)
    }

    /// Mean of the sinusoidal offsets for a prompt of length `n`; depends on
    /// length only.
    fn offset_mean(&self, n: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for i in 0..n {
            let off = position_offset(i, self.dim, self.pos_scale);
            for (a, o) in acc.iter_mut().zip(&off) {
                *a += o;
            }
        }
        for a in &mut acc {
            *a /= n as f64;
        }
        acc
    }

    /// Normalized pre-projection vector: LayerNorm of the offset-adjusted
    /// token mean. This is the `u` direction edited by closed-form attacks.
    pub fn pre_projection(&self, tokens: &[String]) -> Result<Vec<f64>> {
        let ids = self.token_ids_sorted(tokens)?;
        let n = ids.len();
        let mut mean = vec![0.0; self.dim];
        for id in &ids {
            for (m, x) in mean.iter_mut().zip(&self.token_table[id * self.dim..(id + 1) * self.dim]) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let off = self.offset_mean(n);
        for (m, o) in mean.iter_mut().zip(&off) {
            *m += o;
        }
        Ok(layer_norm(&mean, &self.ln_gain, &self.ln_bias, LN_EPS))
    }

    /// Plain (non-tape) forward pass.
    pub fn encode_text(&self, tokens: &[String]) -> Result<TextEncoding> {
        let hidden: Vec<Vec<f64>> = tokens
            .iter()
            .map(|t| {
                let id = self.index.id(t)?;
                Ok(self.token_table[id * self.dim..(id + 1) * self.dim].to_vec())
            })
            .collect::<Result<_>>()?;
        let normed = self.pre_projection(tokens)?;
        let mut pooled = self.proj_bias.clone();
        for r in 0..self.dim {
            let mut acc = 0.0;
            for c in 0..self.dim {
                acc += self.proj_weight[r * self.dim + c] * normed[c];
            }
            pooled[r] += acc;
        }
        Ok(TextEncoding { hidden, pooled })
    }

    /// Registers the encoder tensors as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> EncoderNodes {
        EncoderNodes {
            token_table: tape.leaf(self.token_table.clone()),
            proj_weight: tape.leaf(self.proj_weight.clone()),
            proj_bias: tape.leaf(self.proj_bias.clone()),
            ln_gain: tape.leaf(self.ln_gain.clone()),
            ln_bias: tape.leaf(self.ln_bias.clone()),
        }
    }

    /// Tape forward pass; mirrors [`EncoderParams::encode_text`] exactly
    /// (same summation order), so values agree bitwise.
    pub fn encode_on_tape(&self, tape: &mut Tape, nodes: &EncoderNodes, tokens: &[String]) -> Result<NodeId> {
        let ids = self.token_ids_sorted(tokens)?;
        let n = ids.len();
        let rows: Vec<NodeId> = ids.iter().map(|id| tape.row(nodes.token_table, *id, self.dim)).collect();
        let mean = tape.mean_vecs(rows);
        let off = tape.leaf(self.offset_mean(n));
        let pre = tape.add(mean, off);
        let normed = tape.layer_norm(pre, nodes.ln_gain, nodes.ln_bias, LN_EPS);
        let proj = tape.mat_vec(nodes.proj_weight, normed, self.dim, self.dim);
        Ok(tape.add(proj, nodes.proj_bias))
    }
}

/// Tape leaf ids for the encoder tensors, in a fixed order.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub token_table: NodeId,
    pub proj_weight: NodeId,
    pub proj_bias: NodeId,
    pub ln_gain: NodeId,
    pub ln_bias: NodeId,
}

/// Per-token hidden states (raw table rows) and the pooled prompt vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    pub hidden: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
}

/// Frozen image-side embedding: one unit anchor per concept, all pairwise
/// cosines below [`ANCHOR_COS_CAP`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpace {
    pub concepts: Vec<String>,
    pub dim: usize,
    pub jitter_sigma: f64,
    /// Flat `concepts.len() x dim`, unit rows.
    pub anchors: Vec<f64>,
}

impl AnchorSpace {
    /// Seeded Gaussian unit draws in the latent coordinates of `basis`
    /// (a `dim x latent_dim` column-orthonormal map), rejection-resampled
    /// until the pairwise-cosine cap holds. Drawing inside the basis span
    /// keeps every anchor exactly reachable by the latent decoder.
    pub fn build(
        concepts: &[String],
        basis: &[f64],
        dim: usize,
        latent_dim: usize,
        jitter_sigma: f64,
        seed: u64,
    ) -> Result<AnchorSpace> {
        assert_eq!(basis.len(), dim * latent_dim);
        let mut rng = rng::stream(seed, &[0xa0c0]);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let max_tries = 1000 * concepts.len().max(1);
        let mut tries = 0;
        while rows.len() < concepts.len() {
            tries += 1;
            if tries > max_tries {
                return Err(Error::AnchorRejection(concepts.len()));
            }
            let mut u = rng::normal_vec(&mut rng, latent_dim);
            let nu = norm(&u);
            if nu < 1e-9 {
                continue;
            }
            for x in &mut u {
                *x /= nu;
            }
            let mut a = vec![0.0; dim];
            for (r, slot) in a.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..latent_dim {
                    acc += basis[r * latent_dim + c] * u[c];
                }
                *slot = acc;
            }
            let na = norm(&a);
            for x in &mut a {
                *x /= na;
            }
            if rows.iter().all(|prev| {
                let cos: f64 = prev.iter().zip(&a).map(|(x, y)| x * y).sum();
                cos < ANCHOR_COS_CAP
            }) {
                rows.push(a);
            }
        }
        Ok(AnchorSpace {
            concepts: concepts.to_vec(),
            dim,
            jitter_sigma,
            anchors: rows.into_iter().flatten().collect(),
        })
    }

    pub fn concept_id(&self, concept: &str) -> Result<usize> {
        self.concepts
            .iter()
            .position(|c| c == concept)
            .ok_or_else(|| Error::UnknownConcept(concept.to_string()))
    }

    pub fn anchor(&self, concept: &str) -> Result<&[f64]> {
        let id = self.concept_id(concept)?;
        Ok(&self.anchors[id * self.dim..(id + 1) * self.dim])
    }

    pub fn anchor_by_id(&self, id: usize) -> &[f64] {
        &self.anchors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn max_pairwise_cos(&self) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for i in 0..self.concepts.len() {
            for j in (i + 1)..self.concepts.len() {
                let c: f64 = self.anchor_by_id(i).iter().zip(self.anchor_by_id(j)).map(|(x, y)| x * y).sum();
                best = best.max(c);
            }
        }
        best
    }

    /// Anchor plus seeded Gaussian jitter, renormalized.
    pub fn encode_image(&self, concept: &str, seed: u64) -> Result<Vec<f64>> {
        let a = self.anchor(concept)?;
        let mut rng = rng::stream(seed, &[0x1a9e, rng::tag(concept)]);
        let eps = rng::normal_vec(&mut rng, self.dim);
        let mut v: Vec<f64> = a.iter().zip(&eps).map(|(x, e)| x + self.jitter_sigma * e).collect();
        let n = norm(&v);
        if n < 1e-12 {
            return Err(Error::DegenerateVector);
        }
        for x in &mut v {
            *x /= n;
        }
        Ok(v)
    }

    /// Index and cosine of the anchor closest to `v`.
    pub fn argmax_anchor(&self, v: &[f64]) -> Result<(usize, f64)> {
        let mut best = (0usize, f64::NEG_INFINITY);
        for i in 0..self.concepts.len() {
            let c = cosine(v, self.anchor_by_id(i))?;
            if c > best.1 {
                best = (i, c);
            }
        }
        Ok(best)
    }
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = (var + eps).sqrt();
    x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((v, g), b)| g * (v - mu) / sigma + b)
        .collect()
}

/// Cosine similarity, clamped to `[-1, 1]`; zero-norm inputs are an error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::DegenerateVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
