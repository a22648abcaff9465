//! Template-prior response generation from paired and unpaired data.
//!
//! The pipeline this crate implements:
//!
//! 1. learn a neural hidden semi-Markov segment model from unpaired text
//!    ([`nhsmm`]), respecting protected token spans;
//! 2. harvest best-path state chains into a template pool ([`templates`]);
//! 3. condition a GRU encoder-decoder with attention on sampled templates
//!    ([`generator`]), pretrained by teacher forcing and refined with
//!    policy-gradient updates against a convolutional discriminator
//!    ([`discriminator`], [`trainer`]);
//! 4. evaluate with BLEU-1, ROUGE-L, and embedding similarity ([`metrics`]).
//!
//! Every training entry point is deterministic given its seed, and all
//! parameter bundles round-trip bit-exactly through the versioned checkpoint
//! format in [`checkpoint`].
//!
//! The `examples/` directory is the guided tour: one runnable example per
//! capability, from synthetic-data generation through adversarial training
//! and evaluation. The same flows are scriptable through the `templar`
//! binary (see [`cli`]).

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod math;
pub mod metrics;
pub mod nhsmm;
pub mod optim;
pub mod rnn;
pub mod synth;
pub mod generator;
pub mod tape;
pub mod templates;
pub mod trainer;

pub use error::{Error, Result};
