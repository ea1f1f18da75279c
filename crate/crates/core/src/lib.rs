//! A small vision transformer with separate normalization for the [CLS]
//! position and the patch tokens, trained with masked reconstruction and an
//! optional uniformity regularizer.
//!
//! The crate is built around a tape-based reverse-mode autodiff engine
//! ([`graph::Graph`]) over dense `f64` tensors. Everything else (norm
//! layers, encoder, decoder, losses, training loop, embedding diagnostics and
//! the ablation harness) is ordinary code on top of it.
//!
//! ```no_run
//! use sepnorm::config::RunConfig;
//! use sepnorm::data::{generate, SyntheticDatasetSpec};
//! use sepnorm::train::pretrain;
//!
//! let pair = generate(&SyntheticDatasetSpec::default()).unwrap();
//! let mut cfg = RunConfig::default();
//! cfg.apply_kv_str("norm=sep:bn+ln\nsteps=100").unwrap();
//! let outcome = pretrain(&cfg, &pair.train, None).unwrap();
//! println!("final loss {}", outcome.log.last().unwrap().total);
//! ```

// `!(x > 0.0)` deliberately also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod harness;
pub mod nn;
pub mod norm;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use norm::{NormKind, NormScheme};
pub use tensor::Tensor;
