//! Desk-scale, fully deterministic simulation of multi-concept backdoor
//! attacks on a text-conditioned latent diffusion surrogate.
//!
//! The crate models the whole pipeline end to end: rare-word vocabulary
//! extraction and concept-pair pooling ([`vocab`]), a small differentiable
//! text/image embedding surrogate ([`embed`]), a toy latent diffusion model
//! with deterministic DDIM sampling ([`diffusion`]), evolutionary trigger
//! search ([`evosearch`]), two-stage multi-task backdoor injection plus
//! baseline attacks ([`inject`]), attack-quality and implosion metrics
//! ([`metrics`]), a sequential multi-attacker chain harness ([`attacksim`]),
//! and checkpoint / run-directory persistence ([`chainio`]).
//!
//! Everything is seeded: two runs with the same config produce byte-identical
//! artifacts. There is no hidden global state and no thread-order dependence.
//!
//! The primary interface is the `examples/` directory; each example is a
//! runnable walkthrough of one capability:
//!
//! ```text
//! cargo run -p hydra-forge --example build_vocab
//! cargo run -p hydra-forge --example trigger_search
//! cargo run -p hydra-forge --example inject_hydra
//! cargo run -p hydra-forge --example baseline_attacks
//! cargo run -p hydra-forge --example run_chain
//! cargo run -p hydra-forge --example position_ablation
//! cargo run -p hydra-forge --example robustness_finetune
//! cargo run -p hydra-forge --example denoising_profile
//! ```
//!
//! A thin CLI (`hydra-forge`) wraps the same entry points for scripted runs;
//! see [`cli`] for the subcommand surface.

pub mod attacksim;
pub mod chainio;
pub mod cli;
pub mod diffusion;
pub mod embed;
pub mod error;
pub mod evosearch;
pub mod grad;
pub mod inject;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod vocab;

pub use cli::cli_main;
pub use error::{Error, Result};
