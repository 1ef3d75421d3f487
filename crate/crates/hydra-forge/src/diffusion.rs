//! Toy latent diffusion: linear beta schedule, epsilon-prediction MLP
//! denoiser, deterministic DDIM reverse process, and a fixed orthonormal
//! decoder from latent space to the anchor space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{norm, NodeId, Tape};
use crate::rng;

pub const TIME_EMBED_DIM: usize = 8;

/// Linear beta schedule with cached cumulative alpha products. Timesteps are
/// 1-based; `alpha_cumprod(0) == 1` so the final DDIM step lands on z_0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if t_max == 0 {
            return Err(Error::BadSchedule("zero timesteps".into()));
        }
        let betas: Vec<f64> = if t_max == 1 {
            vec![beta_start]
        } else {
            (0..t_max)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<NoiseSchedule> {
        if betas.is_empty() {
            return Err(Error::BadSchedule("zero timesteps".into()));
        }
        if betas[0] < 1e-6 {
            return Err(Error::BadSchedule(format!("beta_1 = {} below 1e-6", betas[0])));
        }
        if *betas.last().unwrap() > 0.5 {
            return Err(Error::BadSchedule(format!(
                "beta_T = {} above 0.5",
                betas.last().unwrap()
            )));
        }
        for w in betas.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::BadSchedule("betas must be strictly increasing".into()));
            }
        }
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::BadSchedule("betas must lie in (0, 1)".into()));
        }
        let mut alphas_cumprod = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        Ok(NoiseSchedule { betas, alphas_cumprod })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// Cumulative product of alphas through step `t` (`t = 0` gives 1).
    pub fn alpha_cumprod(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cumprod[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            Err(Error::TimestepRange { t, t_max: self.t_max() })
        } else {
            Ok(())
        }
    }
}

/// z_t = sqrt(ac_t) z_0 + sqrt(1 - ac_t) eps.
pub fn forward_noise(z0: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    let ac = schedule.alpha_cumprod(t);
    let (a, b) = (ac.sqrt(), (1.0 - ac).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// 8-dimensional sinusoidal features of the normalized timestep t / T.
pub fn timestep_embedding(t: usize, t_max: usize) -> Vec<f64> {
    let x = t as f64 / t_max as f64;
    let mut v = Vec::with_capacity(TIME_EMBED_DIM);
    for k in 0..TIME_EMBED_DIM / 2 {
        let angle = x * std::f64::consts::PI * (1 << k) as f64;
        v.push(angle.sin());
        v.push(angle.cos());
    }
    v
}

/// Row-major `dim x latent` matrix with orthonormal columns (Gram-Schmidt
/// over seeded Gaussian draws).
pub fn orthonormal_columns(dim: usize, latent: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    assert!(latent <= dim);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < latent {
        let mut v = rng::normal_vec(rng, dim);
        for c in &cols {
            let d: f64 = c.iter().zip(&v).map(|(x, y)| x * y).sum();
            for (vk, ck) in v.iter_mut().zip(c) {
                *vk -= d * ck;
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            for x in &mut v {
                *x /= n;
            }
            cols.push(v);
        }
    }
    let mut out = vec![0.0; dim * latent];
    for (c, col) in cols.iter().enumerate() {
        for r in 0..dim {
            out[r * latent + c] = col[r];
        }
    }
    out
}

/// Epsilon-prediction MLP `(z_t ++ t_emb ++ pooled) -> eps_hat` plus the
/// fixed decoder mapping latents back to anchor space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub cond_dim: usize,
    /// `hidden_dim x in_dim`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `latent_dim x hidden_dim`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// `cond_dim x latent_dim`, orthonormal columns; maps latent -> anchor
    /// space. Frozen by construction choices, trainable in principle.
    pub decoder: Vec<f64>,
}

impl DenoiserParams {
    pub fn init(latent_dim: usize, hidden_dim: usize, cond_dim: usize, seed: u64) -> DenoiserParams {
        let in_dim = latent_dim + TIME_EMBED_DIM + cond_dim;
        let mut r = rng::stream(seed, &[0xde01]);
        let s1 = 1.0 / (in_dim as f64).sqrt();
        let w1 = rng::normal_vec(&mut r, hidden_dim * in_dim).iter().map(|x| s1 * x).collect();
        let b1 = vec![0.0; hidden_dim];
        // zero output head: the denoiser starts as the zero map
        let w2 = vec![0.0; latent_dim * hidden_dim];
        let b2 = vec![0.0; latent_dim];
        let mut rd = rng::stream(seed, &[0xde02]);
        let decoder = orthonormal_columns(cond_dim, latent_dim, &mut rd);
        DenoiserParams {
            latent_dim,
            hidden_dim,
            cond_dim,
            w1,
            b1,
            w2,
            b2,
            decoder,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.latent_dim + TIME_EMBED_DIM + self.cond_dim
    }

    /// Plain forward pass of the denoiser MLP.
    pub fn predict(&self, z_t: &[f64], t: usize, t_max: usize, cond: &[f64]) -> Vec<f64> {
        let temb = timestep_embedding(t, t_max);
        let mut x = Vec::with_capacity(self.in_dim());
        x.extend_from_slice(z_t);
        x.extend_from_slice(&temb);
        x.extend_from_slice(cond);
        let in_dim = self.in_dim();
        let mut h = vec![0.0; self.hidden_dim];
        for r in 0..self.hidden_dim {
            let mut acc = self.b1[r];
            for c in 0..in_dim {
                acc += self.w1[r * in_dim + c] * x[c];
            }
            h[r] = acc.tanh();
        }
        let mut out = vec![0.0; self.latent_dim];
        for r in 0..self.latent_dim {
            let mut acc = self.b2[r];
            for c in 0..self.hidden_dim {
                acc += self.w2[r * self.hidden_dim + c] * h[c];
            }
            out[r] = acc;
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> DenoiserNodes {
        DenoiserNodes {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    /// Tape forward pass; `cond` may be an encoder output node so encoder
    /// gradients flow through the conditioning.
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &DenoiserNodes,
        z_t: &[f64],
        t: usize,
        t_max: usize,
        cond: NodeId,
    ) -> NodeId {
        let z = tape.leaf(z_t.to_vec());
        let temb = tape.leaf(timestep_embedding(t, t_max));
        let x = tape.concat(vec![z, temb, cond]);
        let pre1 = tape.mat_vec(nodes.w1, x, self.hidden_dim, self.in_dim());
        let pre1b = tape.add(pre1, nodes.b1);
        let h = tape.tanh(pre1b);
        let pre2 = tape.mat_vec(nodes.w2, h, self.latent_dim, self.hidden_dim);
        tape.add(pre2, nodes.b2)
    }

    /// Latent training target for a concept: transpose-decoder image of its
    /// anchor plus small seeded noise.
    pub fn concept_latent(&self, anchor: &[f64], noise_sigma: f64, seed: u64) -> Vec<f64> {
        let mut z = vec![0.0; self.latent_dim];
        for c in 0..self.latent_dim {
            let mut acc = 0.0;
            for r in 0..self.cond_dim {
                acc += self.decoder[r * self.latent_dim + c] * anchor[r];
            }
            z[c] = acc;
        }
        if noise_sigma > 0.0 {
            let mut r = rng::stream(seed, &[0x1a7e]);
            for (zk, e) in z.iter_mut().zip(rng::normal_vec(&mut r, self.latent_dim)) {
                *zk += noise_sigma * e;
            }
        }
        z
    }

    /// Normalized decoder image of a latent.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.cond_dim];
        for r in 0..self.cond_dim {
            let mut acc = 0.0;
            for c in 0..self.latent_dim {
                acc += self.decoder[r * self.latent_dim + c] * z[c];
            }
            v[r] = acc;
        }
        let n = norm(&v);
        if n < 1e-12 {
            return Err(Error::DegenerateVector);
        }
        for x in &mut v {
            *x /= n;
        }
        Ok(v)
    }
}

/// Tape leaf ids for the trainable denoiser tensors.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Final latent, its decoded anchor-space image, and the per-step decoded
/// z_0 estimates (outer-to-inner order).
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub latent: Vec<f64>,
    pub decoded: Vec<f64>,
    pub steps: Vec<StepEstimate>,
}

#[derive(Debug, Clone)]
pub struct StepEstimate {
    pub t: usize,
    pub decoded_z0: Vec<f64>,
}

/// Deterministic DDIM reverse pass from seeded Gaussian z_T.
///
/// Per step: `z0_hat = (z_t - sqrt(1-ac_t) eps_hat) / sqrt(ac_t)`, then
/// `z_{t-1} = sqrt(ac_{t-1}) z0_hat + sqrt(1-ac_{t-1}) eps_hat`.
pub fn sample(
    denoiser: &DenoiserParams,
    schedule: &NoiseSchedule,
    cond: &[f64],
    seed: u64,
    trace: bool,
) -> Result<SampleOutput> {
    let t_max = schedule.t_max();
    let mut rng = rng::stream(seed, &[0x5a3f]);
    let mut z = rng::normal_vec(&mut rng, denoiser.latent_dim);
    let mut steps = Vec::new();
    for t in (1..=t_max).rev() {
        let eps_hat = denoiser.predict(&z, t, t_max, cond);
        let ac_t = schedule.alpha_cumprod(t);
        let ac_prev = schedule.alpha_cumprod(t - 1);
        let z0_hat: Vec<f64> = z
            .iter()
            .zip(&eps_hat)
            .map(|(zt, e)| (zt - (1.0 - ac_t).sqrt() * e) / ac_t.sqrt())
            .collect();
        z = z0_hat
            .iter()
            .zip(&eps_hat)
            .map(|(z0, e)| ac_prev.sqrt() * z0 + (1.0 - ac_prev).sqrt() * e)
            .collect();
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::SampleDiverged { step: t });
        }
        if trace {
            steps.push(StepEstimate {
                t,
                decoded_z0: denoiser.decode(&z0_hat).unwrap_or_else(|_| vec![0.0; denoiser.cond_dim]),
            });
        }
    }
    let decoded = denoiser.decode(&z)?;
    Ok(SampleOutput { latent: z, decoded, steps })
}
