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

//! Post-LN Transformer encoder with a [CLS] task head.
//!
//! A forward pass records onto a caller-owned [`Tape`] and returns a
//! [`ForwardTrace`] exposing every layer's attention maps and hidden states,
//! which is what the distillation objectives consume.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{config, data, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Additive logit for masked (pad) keys.
pub const MASK_NEG: f64 = -1e9;
const INIT_STD: f64 = 0.02;

fn default_dropout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// 1 selects a single-output regression head.
    pub num_classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return config(format!("{name} must be positive"));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.max_seq_len < 2 {
            return config("max_seq_len must leave room for [CLS] and content");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return config(format!("dropout must lie in [0,1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn is_regression(&self) -> bool {
        self.num_classes == 1
    }
}

/// Parameters of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln1_g: T,
    pub ln1_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub ln2_g: T,
    pub ln2_b: T,
}

const LAYER_FIELDS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2",
    "ln2_g", "ln2_b",
];

impl<T> LayerWeights<T> {
    fn fields(&self) -> [&T; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_g,
            &self.ln1_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_g,
            &self.ln2_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }

    fn from_fields(mut it: impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("16 layer fields");
        Self {
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln1_g: next(),
            ln1_b: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            ln2_g: next(),
            ln2_b: next(),
        }
    }
}

/// All model parameters, generic so the same layout holds plain tensors and
/// tape handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerWeights<T>>,
    pub head_w: T,
    pub head_b: T,
}

impl<T> Weights<T> {
    /// Parameters in canonical order with dotted names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Weights<U> {
        let mut mapped = self
            .named()
            .into_iter()
            .map(|(n, t)| f(&n, t))
            .collect::<Vec<_>>()
            .into_iter();
        let tok_emb = mapped.next().expect("tok_emb");
        let pos_emb = mapped.next().expect("pos_emb");
        let layers = (0..self.layers.len())
            .map(|_| {
                LayerWeights::from_fields(mapped.by_ref().take(16).collect::<Vec<_>>().into_iter())
            })
            .collect();
        let head_w = mapped.next().expect("head_w");
        let head_b = mapped.next().expect("head_b");
        Weights {
            tok_emb,
            pos_emb,
            layers,
            head_w,
            head_b,
        }
    }
}

/// Everything a forward pass exposes.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub batch_size: usize,
    pub seq_len: usize,
    /// `[B*S]` validity mask, 1.0 for real tokens.
    pub mask: Vec<f64>,
    /// `H_0..H_L`, each `[B*S, d]`; `H_0` is the embedding output.
    pub hidden: Vec<Var>,
    /// One `[B, heads, S, S]` map per layer.
    pub attention: Vec<Var>,
    /// `[B, classes]`.
    pub logits: Var,
}

impl ForwardTrace {
    pub fn num_layers(&self) -> usize {
        self.attention.len()
    }

    /// Flat row indices of non-pad positions.
    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.mask.len())
            .filter(|&i| self.mask[i] > 0.0)
            .collect()
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch_size).map(|b| b * self.seq_len).collect()
    }

    /// `[B, d]` [CLS] vectors of hidden state `layer` (0 = embeddings).
    pub fn cls_state(&self, tape: &mut Tape, layer: usize) -> Result<Var> {
        let h = self.layer_hidden(layer)?;
        tape.gather_rows(h, self.cls_rows())
    }

    pub fn layer_hidden(&self, layer: usize) -> Result<Var> {
        self.hidden.get(layer).copied().ok_or_else(|| {
            Error::Config(format!(
                "hidden state {layer} out of range 0..={}",
                self.num_layers()
            ))
        })
    }

    /// Attention of 1-based `layer`.
    pub fn layer_attention(&self, layer: usize) -> Result<Var> {
        if layer == 0 {
            return config("attention layers are 1-based");
        }
        self.attention.get(layer - 1).copied().ok_or_else(|| {
            Error::Config(format!(
                "attention layer {layer} out of range 1..={}",
                self.num_layers()
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn init_layer(c: &ModelConfig, rng: &mut Rng) -> LayerWeights<Tensor> {
    let (d, f) = (c.hidden_dim, c.ffn_dim);
    LayerWeights {
        wq: normal(&[d, d], rng),
        bq: Tensor::zeros(&[d]),
        wk: normal(&[d, d], rng),
        bk: Tensor::zeros(&[d]),
        wv: normal(&[d, d], rng),
        bv: Tensor::zeros(&[d]),
        wo: normal(&[d, d], rng),
        bo: Tensor::zeros(&[d]),
        ln1_g: Tensor::full(&[d], 1.0),
        ln1_b: Tensor::zeros(&[d]),
        w1: normal(&[d, f], rng),
        b1: Tensor::zeros(&[f]),
        w2: normal(&[f, d], rng),
        b2: Tensor::zeros(&[d]),
        ln2_g: Tensor::full(&[d], 1.0),
        ln2_b: Tensor::zeros(&[d]),
    }
}

fn init_head(c: &ModelConfig, rng: &mut Rng) -> (Tensor, Tensor) {
    (
        normal(&[c.hidden_dim, c.num_classes], rng),
        Tensor::zeros(&[c.num_classes]),
    )
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let n = tape.value(x).numel();
            let mask = (0..n)
                .map(|_| if r.random_bool(p) { 0.0 } else { keep })
                .collect();
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

impl TransformerModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let tok_emb = normal(&[config.vocab_size, d], rng);
        let pos_emb = normal(&[config.max_seq_len, d], rng);
        let layers = (0..config.num_layers)
            .map(|_| init_layer(&config, rng))
            .collect();
        let (head_w, head_b) = init_head(&config, rng);
        Ok(Self {
            config,
            weights: Weights {
                tok_emb,
                pos_emb,
                layers,
                head_w,
                head_b,
            },
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Weights<Var> {
        self.weights.map(|_, t| tape.leaf(t.clone(), trainable))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq_len > self.config.max_seq_len {
            return data(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len, self.config.max_seq_len
            ));
        }
        if let Some(&t) = batch
            .tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return data(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            ));
        }
        Ok(())
    }

    /// Token plus positional embeddings, `[B*S, d]`.
    pub fn embed_inputs(&self, tape: &mut Tape, w: &Weights<Var>, batch: &Batch) -> Result<Var> {
        self.check_batch(batch)?;
        let ids = batch.tokens.iter().map(|&t| t as usize).collect();
        let tok = tape.gather_rows(w.tok_emb, ids)?;
        let pos_ids = (0..batch.batch_size)
            .flat_map(|_| 0..batch.seq_len)
            .collect();
        let pos = tape.gather_rows(w.pos_emb, pos_ids)?;
        tape.add(tok, pos)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        batch: &Batch,
        rng: Option<&mut Rng>,
    ) -> Result<ForwardTrace> {
        let emb = self.embed_inputs(tape, w, batch)?;
        self.forward_embedded(
            tape,
            w,
            emb,
            &batch.mask,
            batch.batch_size,
            batch.seq_len,
            rng,
        )
    }

    /// Runs the encoder on precomputed `[B*S, d]` embeddings. Dropout is
    /// active only when an RNG is supplied.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_embedded(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        emb: Var,
        mask: &[f64],
        batch_size: usize,
        seq_len: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<ForwardTrace> {
        let c = &self.config;
        let (d, heads, dk) = (c.hidden_dim, c.num_heads, c.head_dim());
        if tape.shape(emb) != [batch_size * seq_len, d] || mask.len() != batch_size * seq_len {
            return Err(Error::Dimension {
                op: "forward_embedded",
                lhs: tape.shape(emb).to_vec(),
                rhs: vec![batch_size, seq_len, d],
            });
        }
        if seq_len > c.max_seq_len {
            return data(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                c.max_seq_len
            ));
        }
        let key_mask: Vec<f64> = mask
            .iter()
            .map(|&m| if m > 0.0 { 0.0 } else { MASK_NEG })
            .collect();
        let scale = 1.0 / (dk as f64).sqrt();

        let mut x = dropout(tape, emb, c.dropout, rng.as_deref_mut())?;
        let mut hidden = vec![x];
        let mut attention = Vec::with_capacity(c.num_layers);
        for lw in &w.layers {
            let split = |tape: &mut Tape, v: Var| -> Result<Var> {
                let v = tape.reshape(v, &[batch_size, seq_len, heads, dk])?;
                let v = tape.permute(v, &[0, 2, 1, 3])?;
                tape.reshape(v, &[batch_size * heads, seq_len, dk])
            };
            let q = linear(tape, x, lw.wq, lw.bq)?;
            let q = split(tape, q)?;
            let k = linear(tape, x, lw.wk, lw.bk)?;
            let k = split(tape, k)?;
            let v = linear(tape, x, lw.wv, lw.bv)?;
            let v = split(tape, v)?;

            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.reshape(scores, &[batch_size, heads, seq_len, seq_len])?;
            let scores = tape.add_key_mask(scores, &key_mask)?;
            let attn = tape.softmax(scores);
            attention.push(attn);

            let attn3 = tape.reshape(attn, &[batch_size * heads, seq_len, seq_len])?;
            let ctx = tape.batch_matmul(attn3, v, false)?;
            let ctx = tape.reshape(ctx, &[batch_size, heads, seq_len, dk])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[batch_size * seq_len, d])?;
            let out = linear(tape, ctx, lw.wo, lw.bo)?;
            let out = dropout(tape, out, c.dropout, rng.as_deref_mut())?;
            let res = tape.add(x, out)?;
            let h1 = tape.layer_norm(res, lw.ln1_g, lw.ln1_b)?;

            let ff = linear(tape, h1, lw.w1, lw.b1)?;
            let ff = tape.gelu(ff);
            let ff = linear(tape, ff, lw.w2, lw.b2)?;
            let ff = dropout(tape, ff, c.dropout, rng.as_deref_mut())?;
            let res = tape.add(h1, ff)?;
            x = tape.layer_norm(res, lw.ln2_g, lw.ln2_b)?;
            hidden.push(x);
        }
        let cls_rows = (0..batch_size).map(|b| b * seq_len).collect();
        let cls = tape.gather_rows(x, cls_rows)?;
        let logits = linear(tape, cls, w.head_w, w.head_b)?;
        Ok(ForwardTrace {
            batch_size,
            seq_len,
            mask: mask.to_vec(),
            hidden,
            attention,
            logits,
        })
    }

    /// Student whose embeddings and bottom `m` encoder layers are copies of
    /// the teacher's; the task head is freshly initialized.
    pub fn init_student_truncated(
        teacher: &TransformerModel,
        m: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if m == 0 || m > teacher.config.num_layers {
            return config(format!(
                "cannot truncate a {}-layer teacher to {m} layers",
                teacher.config.num_layers
            ));
        }
        let config = ModelConfig {
            num_layers: m,
            ..teacher.config.clone()
        };
        let (head_w, head_b) = init_head(&config, rng);
        let tw = &teacher.weights;
        Ok(Self {
            config,
            weights: Weights {
                tok_emb: tw.tok_emb.clone(),
                pos_emb: tw.pos_emb.clone(),
                layers: tw.layers[..m].to_vec(),
                head_w,
                head_b,
            },
        })
    }

    /// Like [`init_student_truncated`](Self::init_student_truncated) but
    /// checks that a requested student config is compatible first.
    pub fn truncated_from(
        teacher: &TransformerModel,
        student: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let t = &teacher.config;
        if student.hidden_dim != t.hidden_dim
            || student.num_heads != t.num_heads
            || student.ffn_dim != t.ffn_dim
            || student.vocab_size != t.vocab_size
            || student.max_seq_len != t.max_seq_len
            || student.num_classes != t.num_classes
        {
            return config(
                "truncated initialization needs the teacher's widths, vocabulary and head size",
            );
        }
        let mut s = Self::init_student_truncated(teacher, student.num_layers, rng)?;
        s.config.dropout = student.dropout;
        Ok(s)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.weights
            .named()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                op: "set_flat_params",
                lhs: vec![self.num_params()],
                rhs: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for t in self.weights.iter_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Writes `{stem}.json` (manifest) and `{stem}.bin` (little-endian f64).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        let mut offset = 0u64;
        let mut blob = BufWriter::new(File::create(dir.join(format!("{stem}.bin")))?);
        for (name, t) in self.weights.named() {
            let bytes = (t.numel() * 8) as u64;
            entries.push(ParamEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                bytes,
            });
            offset += bytes;
            for v in t.data() {
                blob.write_all(&v.to_le_bytes())?;
            }
        }
        blob.flush()?;
        let manifest = Manifest {
            config: self.config.clone(),
            params: entries,
        };
        let mut f = BufWriter::new(File::create(dir.join(format!("{stem}.json")))?);
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_reader(File::open(dir.join(format!("{stem}.json")))?)?;
        let mut blob = Vec::new();
        File::open(dir.join(format!("{stem}.bin")))?.read_to_end(&mut blob)?;
        // shapes come from a fresh layout so a manifest cannot smuggle in a
        // different architecture
        let mut model = Self::new(
            manifest.config.clone(),
            &mut crate::rng::stream(0, "checkpoint-layout"),
        )?;
        let expected = model
            .weights
            .named()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect::<Vec<_>>();
        if expected.len() != manifest.params.len() {
            return data("checkpoint parameter count does not match its config");
        }
        for (t, ((name, shape), entry)) in model
            .weights
            .iter_mut()
            .into_iter()
            .zip(expected.iter().zip(&manifest.params))
        {
            if *name != entry.name || *shape != entry.shape {
                return data(format!(
                    "checkpoint entry {} does not match layout {name}",
                    entry.name
                ));
            }
            let start = entry.offset as usize;
            let end = start + entry.bytes as usize;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| Error::Data(format!("{name} past end of blob")))?;
            for (v, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Example, Label};
    use crate::rng::stream;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 20,
            max_seq_len: 10,
            num_classes: 3,
            dropout: 0.1,
        }
    }

    fn batch(rows: &[&[u32]]) -> Batch {
        let width = rows.iter().map(|r| r.len()).max().unwrap();
        let exs: Vec<Example> = rows
            .iter()
            .map(|r| {
                let mut tokens = r.to_vec();
                tokens.resize(width, 0);
                let mask = (0..width).map(|i| u8::from(i < r.len())).collect();
                Example {
                    tokens,
                    mask,
                    label: Label::Class(0),
                    clean_label: Label::Class(0),
                }
            })
            .collect();
        Batch::from_examples(&exs.iter().collect::<Vec<_>>()).unwrap()
    }

    fn run(model: &TransformerModel, b: &Batch) -> (Tape, ForwardTrace) {
        let mut tape = Tape::new();
        let w = model.bind(&mut tape, false);
        let tr = model.forward(&mut tape, &w, b, None).unwrap();
        (tape, tr)
    }

    #[test]
    fn config_validation() {
        assert!(cfg(2).validate().is_ok());
        assert!(ModelConfig {
            num_heads: 3,
            ..cfg(2)
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            num_layers: 0,
            ..cfg(2)
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            max_seq_len: 1,
            ..cfg(2)
        }
        .validate()
        .is_err());
        let a = TransformerModel::new(cfg(2), &mut stream(1, "m")).unwrap();
        let b = TransformerModel::new(cfg(2), &mut stream(2, "m")).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        assert_eq!(
            a.num_params(),
            20 * 8 + 10 * 8 + 2 * (4 * 72 + 4 * 8 + 8 * 16 + 16 + 16 * 8 + 8) + 8 * 3 + 3
        );
    }

    #[test]
    fn trace_shapes_and_attention_rows() {
        let m = TransformerModel::new(cfg(2), &mut stream(1, "m")).unwrap();
        let b = batch(&[&[1, 5, 6, 7], &[1, 9]]);
        let (tape, tr) = run(&m, &b);
        assert_eq!(tr.hidden.len(), 3);
        assert_eq!(tr.attention.len(), 2);
        assert_eq!(tape.shape(tr.logits), [2, 3]);
        for &a in &tr.attention {
            let v = tape.value(a);
            assert_eq!(v.shape(), [2, 2, 4, 4]);
            for (r, row) in v.data().chunks(4).enumerate() {
                let bi = r / 8;
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                for (k, &w) in row.iter().enumerate() {
                    if b.mask[bi * 4 + k] == 0.0 {
                        assert!(w < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut m = TransformerModel::new(cfg(2), &mut stream(1, "m")).unwrap();
        for l in &mut m.weights.layers {
            for t in [&mut l.wq, &mut l.wk, &mut l.bq, &mut l.bk] {
                t.data_mut().fill(0.0);
            }
        }
        let b = batch(&[&[1, 5, 6, 7, 8], &[1, 9, 4]]);
        let (tape, tr) = run(&m, &b);
        for &a in &tr.attention {
            for (r, row) in tape.value(a).data().chunks(5).enumerate() {
                let n = if r / 10 == 0 { 5.0 } else { 3.0 };
                for (k, &p) in row.iter().enumerate() {
                    let want = if b.mask[(r / 10) * 5 + k] > 0.0 {
                        1.0 / n
                    } else {
                        0.0
                    };
                    assert!((p - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let m = TransformerModel::new(cfg(2), &mut stream(1, "m")).unwrap();
        let (tape, tr) = run(&m, &batch(&[&[1]]));
        for &a in &tr.attention {
            assert_eq!(tape.value(a).data(), [1.0, 1.0]);
        }
    }

    #[test]
    fn embedding_structure_and_composition() {
        let m = TransformerModel::new(cfg(1), &mut stream(1, "m")).unwrap();
        let b = batch(&[&[7, 7, 3]]);
        let mut tape = Tape::new();
        let w = m.bind(&mut tape, false);
        let e = m.embed_inputs(&mut tape, &w, &b).unwrap();
        let ev = tape.value(e).clone();
        let pos = &m.weights.pos_emb;
        for j in 0..8 {
            let got = ev.data()[8 + j] - ev.data()[j];
            let want = pos.data()[8 + j] - pos.data()[j];
            assert!((got - want).abs() < 1e-15);
        }
        let via_emb = m
            .forward_embedded(&mut tape, &w, e, &b.mask, 1, 3, None)
            .unwrap();
        let direct = m.forward(&mut tape, &w, &b, None).unwrap();
        assert_eq!(tape.value(via_emb.logits), tape.value(direct.logits));
        for (a, c) in via_emb.hidden.iter().zip(&direct.hidden) {
            assert_eq!(tape.value(*a), tape.value(*c));
        }
    }

    #[test]
    fn input_errors() {
        let m = TransformerModel::new(cfg(1), &mut stream(1, "m")).unwrap();
        let mut tape = Tape::new();
        let w = m.bind(&mut tape, false);
        let oov = batch(&[&[1, 25]]);
        assert!(matches!(
            m.forward(&mut tape, &w, &oov, None),
            Err(Error::Data(_))
        ));
        let long = batch(&[&[1; 11]]);
        assert!(matches!(
            m.forward(&mut tape, &w, &long, None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let m = TransformerModel::new(cfg(2), &mut stream(1, "m")).unwrap();
        let b = batch(&[&[1, 5, 6, 7]]);
        let (t1, a) = run(&m, &b);
        let (t2, c) = run(&m, &b);
        assert_eq!(t1.value(a.logits), t2.value(c.logits));
        let mut tape = Tape::new();
        let w = m.bind(&mut tape, false);
        let d = m
            .forward(&mut tape, &w, &b, Some(&mut stream(3, "drop")))
            .unwrap();
        assert_ne!(tape.value(d.logits), t1.value(a.logits));
    }

    #[test]
    fn batch_permutation_invariance() {
        let m = TransformerModel::new(cfg(2), &mut stream(1, "m")).unwrap();
        let rows: [&[u32]; 3] = [&[1, 5, 6, 7], &[1, 9], &[1, 4, 4]];
        let (ta, a) = run(&m, &batch(&rows));
        let (tb, b) = run(&m, &batch(&[rows[2], rows[0], rows[1]]));
        let la = ta.value(a.logits).data();
        let lb = tb.value(b.logits).data();
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            for k in 0..3 {
                assert!((la[i * 3 + k] - lb[j * 3 + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truncated_student_copies_prefix() {
        let teacher = TransformerModel::new(cfg(4), &mut stream(1, "t")).unwrap();
        let s = TransformerModel::init_student_truncated(&teacher, 2, &mut stream(2, "s")).unwrap();
        assert_eq!(s.weights.layers, teacher.weights.layers[..2]);
        assert_eq!(s.weights.tok_emb, teacher.weights.tok_emb);
        assert!(
            TransformerModel::init_student_truncated(&teacher, 5, &mut stream(2, "s")).is_err()
        );
        let wrong = ModelConfig {
            ffn_dim: 32,
            ..cfg(2)
        };
        assert!(matches!(
            TransformerModel::truncated_from(&teacher, &wrong, &mut stream(2, "s")),
            Err(Error::Config(_))
        ));

        let b = batch(&[&[1, 5, 6, 7], &[1, 9]]);
        let (tt, tr) = run(&teacher, &b);
        for m in [1, 4] {
            let s =
                TransformerModel::init_student_truncated(&teacher, m, &mut stream(2, "s")).unwrap();
            let (ts, sr) = run(&s, &b);
            for l in 0..=m {
                assert_eq!(ts.value(sr.hidden[l]), tt.value(tr.hidden[l]));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = TransformerModel::new(cfg(2), &mut stream(1, "m")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), "model").unwrap();
        let back = TransformerModel::load(dir.path(), "model").unwrap();
        assert_eq!(back, m);
        let mut flat = m.flat_params();
        flat[0] += 1.0;
        let mut m2 = m.clone();
        m2.set_flat_params(&flat).unwrap();
        assert_eq!(
            m2.weights.tok_emb.data()[0],
            m.weights.tok_emb.data()[0] + 1.0
        );
    }
}
