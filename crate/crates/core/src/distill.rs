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

//! Distillation objectives between a teacher and a student trace.
//!
//! Layer indices in [`LayerPair`] are 1-based encoder layers. Teacher-side
//! values are always detached before entering a loss.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::model::ForwardTrace;
use crate::tensor::{Tape, Tensor, Var};

/// Smoothing inside the attention KLD logarithms; exactly zero mass on both
/// sides contributes nothing.
pub const KLD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPair {
    pub teacher: usize,
    pub student: usize,
    pub weight: f64,
}

impl LayerPair {
    pub fn new(teacher: usize, student: usize, weight: f64) -> Self {
        Self {
            teacher,
            student,
            weight,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum MhaMetric {
    #[default]
    Kld,
    Mse,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum IrVariant {
    #[default]
    Pool,
    Patience,
}

fn default_true() -> bool {
    true
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "default_true")]
    pub mha_enabled: bool,
    #[serde(default)]
    pub mha_metric: MhaMetric,
    #[serde(default = "default_true")]
    pub ir_enabled: bool,
    #[serde(default)]
    pub ir_variant: IrVariant,
    #[serde(default = "default_temperature")]
    pub pl_temperature: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mha_enabled: true,
            mha_metric: MhaMetric::Kld,
            ir_enabled: true,
            ir_variant: IrVariant::Pool,
            pl_temperature: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.mha_enabled && !self.ir_enabled {
            return config("at least one intermediate objective (mha or ir) must be enabled");
        }
        if !(self.pl_temperature > 0.0) {
            return config(format!(
                "pl_temperature must be > 0, got {}",
                self.pl_temperature
            ));
        }
        Ok(())
    }
}

/// Learnable map from student width to teacher width, stored `[d_T, d_S]`
/// and applied as `H^S W^T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub weight: Tensor,
}

impl Projection {
    /// Rectangular identity, so equal widths start as a no-op.
    pub fn identity(teacher_dim: usize, student_dim: usize) -> Self {
        Self {
            weight: Tensor::from_fn(&[teacher_dim, student_dim], |i| {
                f64::from(u8::from(i / student_dim == i % student_dim))
            }),
        }
    }
}

fn check_pairs(pairs: &[LayerPair], t: &ForwardTrace, s: &ForwardTrace) -> Result<()> {
    if pairs.is_empty() {
        return config("layer mapping is empty");
    }
    if t.batch_size != s.batch_size || t.seq_len != s.seq_len {
        return Err(Error::Dimension {
            op: "distill traces",
            lhs: vec![t.batch_size, t.seq_len],
            rhs: vec![s.batch_size, s.seq_len],
        });
    }
    for p in pairs {
        if p.teacher == 0
            || p.teacher > t.num_layers()
            || p.student == 0
            || p.student > s.num_layers()
        {
            return config(format!(
                "pair ({}, {}) outside 1..={} x 1..={}",
                p.teacher,
                p.student,
                t.num_layers(),
                s.num_layers()
            ));
        }
        if !(p.weight >= 0.0) || !p.weight.is_finite() {
            return config(format!(
                "pair weight must be finite and >= 0, got {}",
                p.weight
            ));
        }
    }
    Ok(())
}

/// Rows `[n, S]` of a `[B, H, S, S]` attention map whose query is a real
/// token.
pub fn valid_attention_rows(tape: &mut Tape, attn: Var, mask: &[f64]) -> Result<Var> {
    let shape = tape.shape(attn).to_vec();
    let [b, h, s, _] = shape[..] else {
        return Err(Error::Dimension {
            op: "valid_attention_rows",
            lhs: shape,
            rhs: vec![4],
        });
    };
    let rows = (0..b)
        .flat_map(|bi| (0..h).flat_map(move |hi| (0..s).map(move |q| (bi, hi, q))))
        .filter(|&(bi, _, q)| mask[bi * s + q] > 0.0)
        .map(|(bi, hi, q)| (bi * h + hi) * s + q)
        .collect();
    let flat = tape.reshape(attn, &[b * h * s, s])?;
    tape.gather_rows(flat, rows)
}

/// Attention divergence between a reference and a predicted map over valid
/// query rows. `reference` is used as given; callers detach it.
pub fn attention_divergence(
    tape: &mut Tape,
    reference: Var,
    predicted: Var,
    mask: &[f64],
    metric: MhaMetric,
) -> Result<Var> {
    let r = valid_attention_rows(tape, reference, mask)?;
    let p = valid_attention_rows(tape, predicted, mask)?;
    match metric {
        MhaMetric::Kld => tape.kld_rows(r, p, KLD_EPS),
        MhaMetric::Mse => tape.mse(r, p),
    }
}

fn weighted_sum(tape: &mut Tape, terms: Vec<(f64, Var)>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (w, v) in terms {
        let v = tape.scale(v, w);
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
    }
    acc.ok_or_else(|| Error::Config("layer mapping is empty".into()))
}

pub fn loss_mha(
    tape: &mut Tape,
    teacher: &ForwardTrace,
    student: &ForwardTrace,
    pairs: &[LayerPair],
    metric: MhaMetric,
) -> Result<Var> {
    check_pairs(pairs, teacher, student)?;
    let mut terms = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ta = teacher.layer_attention(p.teacher)?;
        let sa = student.layer_attention(p.student)?;
        if tape.shape(ta)[1] != tape.shape(sa)[1] {
            return config(format!(
                "teacher has {} heads, student {}; head counts must match",
                tape.shape(ta)[1],
                tape.shape(sa)[1]
            ));
        }
        let ta = tape.detach(ta);
        terms.push((
            p.weight,
            attention_divergence(tape, ta, sa, &student.mask, metric)?,
        ));
    }
    weighted_sum(tape, terms)
}

/// Rows `[n, d]` of a `[B*S, d]` hidden state at real tokens.
pub fn valid_hidden_rows(tape: &mut Tape, hidden: Var, mask: &[f64]) -> Result<Var> {
    let rows = (0..mask.len()).filter(|&i| mask[i] > 0.0).collect();
    tape.gather_rows(hidden, rows)
}

/// `H^S W^T` for `[n, d_S]` student rows and a `[d_T, d_S]` projection.
pub fn project(tape: &mut Tape, student_rows: Var, projection: Var) -> Result<Var> {
    let wt = tape.transpose(projection)?;
    tape.matmul(student_rows, wt)
}

pub fn loss_ir_pool(
    tape: &mut Tape,
    teacher: &ForwardTrace,
    student: &ForwardTrace,
    pairs: &[LayerPair],
    projection: Var,
) -> Result<Var> {
    check_pairs(pairs, teacher, student)?;
    let mut terms = Vec::with_capacity(pairs.len());
    for p in pairs {
        let th = teacher.layer_hidden(p.teacher)?;
        let th = tape.detach(th);
        let t_rows = valid_hidden_rows(tape, th, &student.mask)?;
        let sh = student.layer_hidden(p.student)?;
        let s_rows = valid_hidden_rows(tape, sh, &student.mask)?;
        let s_proj = project(tape, s_rows, projection)?;
        terms.push((p.weight, tape.mse(t_rows, s_proj)?));
    }
    weighted_sum(tape, terms)
}

pub fn loss_ir_patience(
    tape: &mut Tape,
    teacher: &ForwardTrace,
    student: &ForwardTrace,
    pairs: &[LayerPair],
) -> Result<Var> {
    check_pairs(pairs, teacher, student)?;
    let mut terms = Vec::with_capacity(pairs.len());
    for p in pairs {
        let tc = teacher.cls_state(tape, p.teacher)?;
        let tc = tape.detach(tc);
        let tn = tape.l2_normalize_rows(tc)?;
        let sc = student.cls_state(tape, p.student)?;
        let sn = tape.l2_normalize_rows(sc)?;
        terms.push((p.weight, tape.mse(tn, sn)?));
    }
    weighted_sum(tape, terms)
}

/// Soft cross-entropy against the teacher's tempered predictions; there is
/// no hard-label term.
pub fn loss_pl(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    student_logits: Var,
    temperature: f64,
) -> Result<Var> {
    tape.soft_cross_entropy(teacher_logits, student_logits, temperature)
}

/// The enabled intermediate objectives summed over `pairs`.
pub fn loss_intermediate(
    tape: &mut Tape,
    teacher: &ForwardTrace,
    student: &ForwardTrace,
    pairs: &[LayerPair],
    objective: &ObjectiveConfig,
    projection: Var,
) -> Result<Var> {
    objective.validate()?;
    let mut terms = Vec::new();
    if objective.mha_enabled {
        terms.push((
            1.0,
            loss_mha(tape, teacher, student, pairs, objective.mha_metric)?,
        ));
    }
    if objective.ir_enabled {
        let ir = match objective.ir_variant {
            IrVariant::Pool => loss_ir_pool(tape, teacher, student, pairs, projection)?,
            IrVariant::Patience => loss_ir_patience(tape, teacher, student, pairs)?,
        };
        terms.push((1.0, ir));
    }
    weighted_sum(tape, terms)
}
