//! Persistence: bit-exact checkpoints, experiment configs, run directories,
//! and report writers.
//!
//! Every float in a checkpoint is stored as a lossless hexadecimal literal
//! inside a JSON string (a fixed-width `0x1.<13 hex digits>p<exp>` form), so
//! save -> load -> save is byte-identical and resume tests can demand
//! bit-equality. Checkpoints chain through sha256 hashes of the parent file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacksim::EvalConfig;
use crate::diffusion::{DenoiserParams, NoiseSchedule};
use crate::embed::{AnchorSpace, EncoderParams, TokenIndex};
use crate::error::{Error, Result};
use crate::evosearch::{FitnessWeights, GaConfig};
use crate::inject::{ClassifierHead, DataConfig, TrainConfig};
use crate::model::{ModelConfig, SurrogateModel};

pub use crate::cli::cli_main;

pub const FORMAT_VERSION: &str = "hydra-forge/1";
/// Environment variable selecting the default run root directory.
pub const RUN_ROOT_ENV: &str = "HYDRA_FORGE_RUN_ROOT";

// ---------------------------------------------------------------------------
// lossless hexadecimal float literals
// ---------------------------------------------------------------------------

/// Canonical lossless rendering of an `f64`: `0x1.<13 hex digits>p<exp>` for
/// normals, `0x0.<13 hex digits>p-1022` for subnormals, `0x0p+0` for zeros,
/// with a leading `-` where the sign bit is set; `inf` and `nan` spelled out.
pub fn f64_to_hex(x: f64) -> String {
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp_bits == 0x7ff {
        return if mant == 0 { format!("{sign}inf") } else { "nan".to_string() };
    }
    if exp_bits == 0 {
        if mant == 0 {
            return format!("{sign}0x0p+0");
        }
        return format!("{sign}0x0.{mant:013x}p-1022");
    }
    format!("{sign}0x1.{mant:013x}p{:+}", exp_bits - 1023)
}

/// Inverse of [`f64_to_hex`]; accepts exactly the canonical grammar.
pub fn f64_from_hex(s: &str) -> Result<f64> {
    let bad = || Error::HexFloat(s.to_string());
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let sign_bit = if neg { 1u64 << 63 } else { 0 };
    match body {
        "inf" => return Ok(f64::from_bits(sign_bit | 0x7ff0_0000_0000_0000)),
        "nan" => return Ok(f64::NAN),
        "0x0p+0" => return Ok(f64::from_bits(sign_bit)),
        _ => {}
    }
    let body = body.strip_prefix("0x").ok_or_else(bad)?;
    let (int_part, rest) = body.split_at(body.find('.').ok_or_else(bad)?);
    let rest = &rest[1..];
    let p = rest.find('p').ok_or_else(bad)?;
    let (mant_hex, exp_str) = (&rest[..p], &rest[p + 1..]);
    if mant_hex.len() != 13 {
        return Err(bad());
    }
    let mant = u64::from_str_radix(mant_hex, 16).map_err(|_| bad())?;
    match int_part {
        "0" => {
            if exp_str != "-1022" || mant == 0 {
                return Err(bad());
            }
            Ok(f64::from_bits(sign_bit | mant))
        }
        "1" => {
            if !exp_str.starts_with('+') && !exp_str.starts_with('-') {
                return Err(bad());
            }
            let exp: i64 = exp_str.parse().map_err(|_| bad())?;
            let exp_bits = exp + 1023;
            if !(1..=2046).contains(&exp_bits) {
                return Err(bad());
            }
            Ok(f64::from_bits(sign_bit | ((exp_bits as u64) << 52) | mant))
        }
        _ => Err(bad()),
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

/// A named flat tensor with hexfloat-encoded elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<String>,
}

impl Tensor {
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Tensor {
        Tensor {
            shape,
            data: data.iter().map(|x| f64_to_hex(*x)).collect(),
        }
    }

    pub fn to_f64(&self, name: &str) -> Result<Vec<f64>> {
        let want: usize = self.shape.iter().product();
        if self.data.len() != want {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                shape: self.shape.clone(),
                len: self.data.len(),
            });
        }
        self.data.iter().map(|s| f64_from_hex(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Chain stage index this checkpoint was produced at (0 = base).
    pub stage: usize,
    /// What produced it: "base", a method name, or a fine-tune label.
    pub method: String,
    /// sha256 of the parent checkpoint file; `None` only for the base.
    pub parent_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: String,
    /// Named dimensions: embed_dim, latent_dim, hidden_dim, timesteps,
    /// n_tokens, n_concepts, n_classes.
    pub dims: BTreeMap<String, usize>,
    /// Hexfloat scalars: beta_start, beta_end, pos_scale, anchor_jitter,
    /// latent_noise.
    pub scalars: BTreeMap<String, String>,
    pub tokens: Vec<String>,
    pub concepts: Vec<String>,
    pub tensors: BTreeMap<String, Tensor>,
    /// RNG seed ledger: every seed that fed this model's history.
    pub seeds: BTreeMap<String, u64>,
    pub provenance: Provenance,
}

fn required<'a, T>(map: &'a BTreeMap<String, T>, key: &str) -> Result<&'a T> {
    map.get(key).ok_or_else(|| Error::MissingTensor(key.to_string()))
}

pub fn model_to_checkpoint(
    model: &SurrogateModel,
    seeds: BTreeMap<String, u64>,
    provenance: Provenance,
) -> Checkpoint {
    let c = &model.config;
    let enc = &model.encoder;
    let den = &model.denoiser;
    let head = &model.head;
    let n_tokens = enc.index.len();
    let d = c.embed_dim;
    let m = c.latent_dim;
    let mut dims = BTreeMap::new();
    dims.insert("embed_dim".into(), d);
    dims.insert("latent_dim".into(), m);
    dims.insert("hidden_dim".into(), c.hidden_dim);
    dims.insert("timesteps".into(), c.timesteps);
    dims.insert("n_tokens".into(), n_tokens);
    dims.insert("n_concepts".into(), model.anchors.concepts.len());
    dims.insert("n_classes".into(), head.n_classes);
    let mut scalars = BTreeMap::new();
    scalars.insert("beta_start".into(), f64_to_hex(c.beta_start));
    scalars.insert("beta_end".into(), f64_to_hex(c.beta_end));
    scalars.insert("pos_scale".into(), f64_to_hex(c.pos_scale));
    scalars.insert("anchor_jitter".into(), f64_to_hex(c.anchor_jitter));
    scalars.insert("latent_noise".into(), f64_to_hex(c.latent_noise));
    let mut tensors = BTreeMap::new();
    let mut put = |name: &str, shape: Vec<usize>, data: &[f64]| {
        tensors.insert(name.to_string(), Tensor::from_f64(shape, data));
    };
    put("encoder.token_table", vec![n_tokens, d], &enc.token_table);
    put("encoder.proj_weight", vec![d, d], &enc.proj_weight);
    put("encoder.proj_bias", vec![d], &enc.proj_bias);
    put("encoder.ln_gain", vec![d], &enc.ln_gain);
    put("encoder.ln_bias", vec![d], &enc.ln_bias);
    put("head.w", vec![head.n_classes, d], &head.w);
    put("head.b", vec![head.n_classes], &head.b);
    put("head.ln_gain", vec![d], &head.ln_gain);
    put("head.ln_bias", vec![d], &head.ln_bias);
    put("denoiser.w1", vec![den.hidden_dim, den.in_dim()], &den.w1);
    put("denoiser.b1", vec![den.hidden_dim], &den.b1);
    put("denoiser.w2", vec![m, den.hidden_dim], &den.w2);
    put("denoiser.b2", vec![m], &den.b2);
    put("denoiser.decoder", vec![d, m], &den.decoder);
    put("anchors.anchors", vec![model.anchors.concepts.len(), d], &model.anchors.anchors);
    put("schedule.betas", vec![c.timesteps], &model.schedule.betas);
    Checkpoint {
        format_version: FORMAT_VERSION.to_string(),
        dims,
        scalars,
        tokens: enc.index.tokens().to_vec(),
        concepts: model.anchors.concepts.clone(),
        tensors,
        seeds,
        provenance,
    }
}

pub fn checkpoint_to_model(cp: &Checkpoint) -> Result<SurrogateModel> {
    if cp.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            got: cp.format_version.clone(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let dim = |k: &str| -> Result<usize> {
        cp.dims
            .get(k)
            .copied()
            .ok_or_else(|| Error::Config(format!("checkpoint is missing dim {k:?}")))
    };
    let scalar = |k: &str| -> Result<f64> {
        let s = cp
            .scalars
            .get(k)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing scalar {k:?}")))?;
        f64_from_hex(s)
    };
    let tensor = |k: &str| -> Result<Vec<f64>> { required(&cp.tensors, k)?.to_f64(k) };

    let d = dim("embed_dim")?;
    let m = dim("latent_dim")?;
    let hidden = dim("hidden_dim")?;
    let timesteps = dim("timesteps")?;
    let n_classes = dim("n_classes")?;
    let config = ModelConfig {
        embed_dim: d,
        latent_dim: m,
        hidden_dim: hidden,
        timesteps,
        beta_start: scalar("beta_start")?,
        beta_end: scalar("beta_end")?,
        pos_scale: scalar("pos_scale")?,
        anchor_jitter: scalar("anchor_jitter")?,
        latent_noise: scalar("latent_noise")?,
        seed: cp.seeds.get("model").copied().unwrap_or(0),
    };
    let index = TokenIndex::new(cp.tokens.iter());
    if index.len() != dim("n_tokens")? {
        return Err(Error::Config("token list does not match n_tokens".into()));
    }
    let encoder = EncoderParams {
        index,
        dim: d,
        pos_scale: config.pos_scale,
        token_table: tensor("encoder.token_table")?,
        proj_weight: tensor("encoder.proj_weight")?,
        proj_bias: tensor("encoder.proj_bias")?,
        ln_gain: tensor("encoder.ln_gain")?,
        ln_bias: tensor("encoder.ln_bias")?,
    };
    let head = ClassifierHead {
        n_classes,
        dim: d,
        w: tensor("head.w")?,
        b: tensor("head.b")?,
        ln_gain: tensor("head.ln_gain")?,
        ln_bias: tensor("head.ln_bias")?,
    };
    let denoiser = DenoiserParams {
        latent_dim: m,
        hidden_dim: hidden,
        cond_dim: d,
        w1: tensor("denoiser.w1")?,
        b1: tensor("denoiser.b1")?,
        w2: tensor("denoiser.w2")?,
        b2: tensor("denoiser.b2")?,
        decoder: tensor("denoiser.decoder")?,
    };
    let anchors = AnchorSpace {
        concepts: cp.concepts.clone(),
        dim: d,
        jitter_sigma: config.anchor_jitter,
        anchors: tensor("anchors.anchors")?,
    };
    let schedule = NoiseSchedule::from_betas(tensor("schedule.betas")?)?;
    Ok(SurrogateModel {
        config,
        encoder,
        head,
        denoiser,
        anchors,
        schedule,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes canonically (sorted keys, fixed hexfloat width) and writes the
/// file; returns the file's sha256 for provenance chaining.
pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<String> {
    let bytes = serde_json::to_vec_pretty(cp)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Reads and validates a checkpoint: version string, tensor presence, and
/// shape/element-count agreement.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let cp: Checkpoint = serde_json::from_slice(&bytes)?;
    if cp.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            got: cp.format_version.clone(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    for (name, t) in &cp.tensors {
        let want: usize = t.shape.iter().product();
        if t.data.len() != want {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                shape: t.shape.clone(),
                len: t.data.len(),
            });
        }
    }
    Ok(cp)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Verifies the parent-hash chain across checkpoint files in stage order:
/// checkpoint `k+1` must record the sha256 of checkpoint `k`'s file, and the
/// first must be a base (no parent).
pub fn verify_chain(paths: &[PathBuf]) -> Result<()> {
    let mut prev_hash: Option<String> = None;
    for (k, path) in paths.iter().enumerate() {
        let cp = load_checkpoint(path)?;
        match (&cp.provenance.parent_hash, &prev_hash) {
            (None, None) => {}
            (Some(got), Some(want)) if got == want => {}
            (got, want) => {
                return Err(Error::HashChain(format!(
                    "checkpoint {k} ({}) records parent {got:?}, expected {want:?}",
                    path.display()
                )));
            }
        }
        prev_hash = Some(file_sha256(path)?);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    /// Text corpus, one document per line.
    pub corpus: PathBuf,
    /// Concept list, one per line.
    pub concepts: PathBuf,
    /// Words occurring at most this often qualify as rare triggers.
    pub max_frequency: u64,
    pub exclusions: Vec<String>,
    /// Number of concept pairs drawn into the shared pool.
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection {
            corpus: PathBuf::from("data/demo_corpus.txt"),
            concepts: PathBuf::from("data/demo_concepts.txt"),
            max_frequency: 2,
            exclusions: Vec::new(),
            pool_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    /// One method name per stage, in run order. Out-of-scope method names
    /// are accepted and substituted (see `attacksim::resolve_method`).
    pub methods: Vec<String>,
    /// Steps/lr for clean fine-tune stages.
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub lowrank_rank: usize,
    pub seed: u64,
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection {
            methods: vec!["hydra".to_string(); 8],
            finetune_steps: 40,
            finetune_lr: 1e-3,
            lowrank_rank: 4,
            seed: 0,
        }
    }
}

/// The whole experiment in one TOML document; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub vocab: VocabSection,
    pub model: ModelConfig,
    pub weights: FitnessWeights,
    pub ga: GaConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub chain: ChainSection,
    pub eval: EvalConfig,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

/// Canonical TOML echo of a config; parses back to an equal value.
pub fn config_echo(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))
}

// ---------------------------------------------------------------------------
// run directories and report writers
// ---------------------------------------------------------------------------

/// Resolves the run root: explicit argument, then `HYDRA_FORGE_RUN_ROOT`,
/// then the working directory (so a relative `--out runs/demo` is literal).
pub fn run_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Ok(v) = std::env::var(RUN_ROOT_ENV) {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    PathBuf::from(".")
}

/// Creates `<root>/<name>` plus its `checkpoints/` subdirectory; refuses to
/// touch an existing run directory.
pub fn create_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    let dir = root.join(name);
    create_run_dir_at(&dir)?;
    Ok(dir)
}

/// [`create_run_dir`] for an already-resolved directory path.
pub fn create_run_dir_at(dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::RunDirExists(dir.display().to_string()));
    }
    fs::create_dir_all(dir)?;
    fs::create_dir(dir.join("checkpoints"))?;
    Ok(())
}

/// Run header: config echo and method-substitution stamps, no timestamps so
/// reruns are byte-comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub format_version: String,
    pub command: String,
    /// Full TOML config echo sufficient to reproduce the run.
    pub config_echo: String,
    /// E.g. "villan substituted by naive-poison".
    pub substitutions: Vec<String>,
}

pub fn write_header(dir: &Path, header: &RunHeader) -> Result<()> {
    fs::write(dir.join("header.json"), serde_json::to_vec_pretty(header)?)?;
    Ok(())
}

pub fn read_header(dir: &Path) -> Result<RunHeader> {
    Ok(serde_json::from_slice(&fs::read(dir.join("header.json"))?)?)
}

/// Appends serialized records as JSON Lines.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

/// Writes a header line plus pre-rendered rows.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}
