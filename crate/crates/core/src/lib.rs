// Copyright 2026 The ildlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! A desk-scale laboratory for intermediate-layer knowledge distillation of
//! small Transformer encoders.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: f64 tensors with a reverse-mode tape.
//! - [`model`]: a post-LN Transformer encoder exposing per-layer attention
//!   maps and hidden states.
//! - [`distill`]: attention (MHA), hidden-state (IR) and prediction-layer
//!   objectives.
//! - [`mapping`]: last-layer, uniform and optimal-transport layer mappings.
//! - [`crild`]: MixUp on embeddings, consistency terms and the warm-up
//!   scaled consistency-regularized step loss.
//! - [`data`]: procedural classification tasks with size, length,
//!   similarity and label-noise knobs.
//! - [`pipeline`]: teacher training, sequential/joint distillation and
//!   multi-seed grids.
//! - [`analysis`]: noise-robustness, linear-probe and loss-surface probes,
//!   plus the MixUp Taylor-expansion verifier.
//! - [`config`]: the versioned experiment document used by the CLI.

// `!(x > 0.0)` is how validators reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod crild;
pub mod data;
pub mod distill;
pub mod error;
pub mod mapping;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
