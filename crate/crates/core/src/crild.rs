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

//! Consistency-regularized intermediate-layer distillation.
//!
//! Each step mixes every example's embeddings with a partner from the same
//! batch, distils teacher-on-mixed into student-on-mixed, and asks the
//! student's last layer to behave linearly along the mixing path.

use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::distill::{self, LayerPair, ObjectiveConfig};
use crate::error::{config, Error, Result};
use crate::model::{ForwardTrace, TransformerModel, Weights};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

fn default_alpha() -> f64 {
    1.0
}
fn default_warmup() -> usize {
    200
}
fn default_weight() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CrConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_weight")]
    pub w_mha: f64,
    #[serde(default = "default_weight")]
    pub w_ir: f64,
    /// Treat the interpolated outputs as a fixed target.
    #[serde(default = "default_true")]
    pub detach_target: bool,
    /// Also distil on the unmixed batch.
    #[serde(default)]
    pub include_original_batch: bool,
    /// Pin the mixing coefficient instead of sampling it.
    #[serde(default)]
    pub lambda_override: Option<f64>,
}

impl Default for CrConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            warmup_steps: default_warmup(),
            w_mha: default_weight(),
            w_ir: default_weight(),
            detach_target: true,
            include_original_batch: false,
            lambda_override: None,
        }
    }
}

impl CrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return config(format!(
                "alpha must be a positive finite number, got {}",
                self.alpha
            ));
        }
        if self.warmup_steps == 0 {
            return config("warmup_steps must be at least 1");
        }
        for (name, w) in [("w_mha", self.w_mha), ("w_ir", self.w_ir)] {
            if !(w >= 0.0) || !w.is_finite() {
                return config(format!("{name} must be finite and >= 0, got {w}"));
            }
        }
        if let Some(l) = self.lambda_override {
            if !(0.0..=1.0).contains(&l) {
                return config(format!("lambda_override must lie in [0,1], got {l}"));
            }
        }
        Ok(())
    }
}

pub fn sample_lambda(alpha: f64, rng: &mut Rng) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return config(format!(
            "alpha must be a positive finite number, got {alpha}"
        ));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

/// Partner index `j != i` for every example, uniform over the rest of the
/// batch. A singleton batch pairs with itself.
pub fn sample_partners(batch_size: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch_size)
        .map(|i| {
            if batch_size == 1 {
                return 0;
            }
            let j = rng.random_range(0..batch_size - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

/// `λ a + (1 - λ) b`.
pub fn mixup(tape: &mut Tape, a: Var, b: Var, lambda: f64) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Dimension {
            op: "mixup",
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    let sa = tape.scale(a, lambda);
    let sb = tape.scale(b, 1.0 - lambda);
    tape.add(sa, sb)
}

/// How one batch is mixed.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub lambda: f64,
    pub partners: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// A mixed position is real when either contributing token is real and
    /// carries nonzero weight.
    pub mask: Vec<f64>,
}

impl MixPlan {
    pub fn new(
        lambda: f64,
        partners: Vec<usize>,
        mask: &[f64],
        batch_size: usize,
        seq_len: usize,
    ) -> Result<Self> {
        if partners.len() != batch_size || mask.len() != batch_size * seq_len {
            return Err(Error::Dimension {
                op: "mix_plan",
                lhs: vec![partners.len(), mask.len()],
                rhs: vec![batch_size, seq_len],
            });
        }
        if let Some(&j) = partners.iter().find(|&&j| j >= batch_size) {
            return config(format!("partner {j} outside batch of {batch_size}"));
        }
        let mixed = (0..batch_size * seq_len)
            .map(|r| {
                let (b, s) = (r / seq_len, r % seq_len);
                let own = lambda > 0.0 && mask[r] > 0.0;
                let other = lambda < 1.0 && mask[partners[b] * seq_len + s] > 0.0;
                f64::from(u8::from(own || other))
            })
            .collect();
        Ok(Self {
            lambda,
            partners,
            batch_size,
            seq_len,
            mask: mixed,
        })
    }

    /// Mixes a tensor whose leading axis groups examples (`[B, ...]` or
    /// `[B*S, ...]`) with its partner-permuted copy.
    pub fn mix(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let numel: usize = shape.iter().product();
        let per = numel / self.batch_size;
        let flat = tape.reshape(x, &[self.batch_size, per])?;
        let other = tape.gather_rows(flat, self.partners.clone())?;
        let mixed = mixup(tape, flat, other, self.lambda)?;
        tape.reshape(mixed, &shape)
    }
}

/// Consistency term on student attention at `layer`: KLD from the mixed-input
/// map to the interpolation of the original maps.
pub fn cr_mha(
    tape: &mut Tape,
    mixed: &ForwardTrace,
    original: &ForwardTrace,
    plan: &MixPlan,
    layer: usize,
    detach_target: bool,
) -> Result<Var> {
    let a = original.layer_attention(layer)?;
    let target = plan.mix(tape, a)?;
    let target = if detach_target {
        tape.detach(target)
    } else {
        target
    };
    let p = mixed.layer_attention(layer)?;
    let p = distill::valid_attention_rows(tape, p, &plan.mask)?;
    let q = distill::valid_attention_rows(tape, target, &plan.mask)?;
    tape.kld_rows(p, q, distill::KLD_EPS)
}

/// Consistency term on student hidden states of `layer`.
pub fn cr_ir(
    tape: &mut Tape,
    mixed: &ForwardTrace,
    original: &ForwardTrace,
    plan: &MixPlan,
    layer: usize,
    detach_target: bool,
) -> Result<Var> {
    let h = original.layer_hidden(layer)?;
    let target = plan.mix(tape, h)?;
    let target = if detach_target {
        tape.detach(target)
    } else {
        target
    };
    let p = mixed.layer_hidden(layer)?;
    let p = distill::valid_hidden_rows(tape, p, &plan.mask)?;
    let q = distill::valid_hidden_rows(tape, target, &plan.mask)?;
    tape.mse(p, q)
}

/// `min(t/T, 1) * w`.
pub fn warmup_coefficient(t: usize, warmup_steps: usize, w: f64) -> f64 {
    let ramp = if warmup_steps == 0 {
        1.0
    } else {
        (t as f64 / warmup_steps as f64).min(1.0)
    };
    ramp * w
}

/// Everything a CR-ILD step needs besides the batch.
pub struct StepModels<'a> {
    pub teacher: &'a TransformerModel,
    pub teacher_weights: &'a Weights<Var>,
    pub student: &'a TransformerModel,
    pub student_weights: &'a Weights<Var>,
    pub projection: Var,
}

#[derive(Clone, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub lambda: f64,
    /// Named additive contributions to `total` (weights already applied).
    pub components: Vec<(&'static str, f64)>,
    /// Unweighted consistency values, when they were computed.
    pub cr_mha: Option<f64>,
    pub cr_ir: Option<f64>,
    /// Student trace on the unmixed batch, when one was computed.
    pub student_original: Option<ForwardTrace>,
}

fn finite(tape: &Tape, v: Var, term: &str) -> Result<f64> {
    let x = tape.value(v).item()?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numeric(format!("{term} is not finite ({x})")))
    }
}

fn intermediate_parts(
    tape: &mut Tape,
    teacher: &ForwardTrace,
    student: &ForwardTrace,
    pairs: &[LayerPair],
    objective: &ObjectiveConfig,
    projection: Var,
) -> Result<Vec<(&'static str, Var)>> {
    let mut out = Vec::new();
    if objective.mha_enabled {
        out.push((
            "ild_mha",
            distill::loss_mha(tape, teacher, student, pairs, objective.mha_metric)?,
        ));
    }
    if objective.ir_enabled {
        let v = match objective.ir_variant {
            distill::IrVariant::Pool => {
                distill::loss_ir_pool(tape, teacher, student, pairs, projection)?
            }
            distill::IrVariant::Patience => {
                distill::loss_ir_patience(tape, teacher, student, pairs)?
            }
        };
        out.push(("ild_ir", v));
    }
    Ok(out)
}

/// One CR-ILD step at iteration `t`. The teacher runs without dropout; the
/// student uses `dropout_rng` when given.
#[allow(clippy::too_many_arguments)]
pub fn crild_step_loss(
    tape: &mut Tape,
    models: &StepModels<'_>,
    batch: &Batch,
    pairs: &[LayerPair],
    objective: &ObjectiveConfig,
    cr: &CrConfig,
    t: usize,
    rng: &mut Rng,
    dropout_rng: Option<&mut Rng>,
) -> Result<StepLoss> {
    cr.validate()?;
    objective.validate()?;
    let (b, s) = (batch.batch_size, batch.seq_len);
    let partners = sample_partners(b, rng);
    let lambda = match cr.lambda_override {
        Some(l) => l,
        None => sample_lambda(cr.alpha, rng)?,
    };
    let plan = MixPlan::new(lambda, partners, &batch.mask, b, s)?;

    let t_emb = models
        .teacher
        .embed_inputs(tape, models.teacher_weights, batch)?;
    let t_mix = plan.mix(tape, t_emb)?;
    let teacher_mixed = models.teacher.forward_embedded(
        tape,
        models.teacher_weights,
        t_mix,
        &plan.mask,
        b,
        s,
        None,
    )?;
    let s_emb = models
        .student
        .embed_inputs(tape, models.student_weights, batch)?;
    let s_mix = plan.mix(tape, s_emb)?;
    let student_mixed = models.student.forward_embedded(
        tape,
        models.student_weights,
        s_mix,
        &plan.mask,
        b,
        s,
        dropout_rng,
    )?;

    let mut parts: Vec<(&'static str, Var)> = intermediate_parts(
        tape,
        &teacher_mixed,
        &student_mixed,
        pairs,
        objective,
        models.projection,
    )?;

    let w_mha = warmup_coefficient(t, cr.warmup_steps, cr.w_mha);
    let w_ir = warmup_coefficient(t, cr.warmup_steps, cr.w_ir);
    let mut student_original = None;
    let (mut cr_mha_value, mut cr_ir_value) = (None, None);
    let need_original = w_mha > 0.0 || w_ir > 0.0 || cr.include_original_batch;
    if need_original {
        // interpolation targets come from a dropout-free pass
        let orig = models.student.forward_embedded(
            tape,
            models.student_weights,
            s_emb,
            &batch.mask,
            b,
            s,
            None,
        )?;
        let last = models.student.config.num_layers;
        if w_mha > 0.0 {
            let r = cr_mha(tape, &student_mixed, &orig, &plan, last, cr.detach_target)?;
            cr_mha_value = Some(finite(tape, r, "cr_mha")?);
            parts.push(("cr_mha", tape.scale(r, w_mha)));
        }
        if w_ir > 0.0 {
            let r = cr_ir(tape, &student_mixed, &orig, &plan, last, cr.detach_target)?;
            cr_ir_value = Some(finite(tape, r, "cr_ir")?);
            parts.push(("cr_ir", tape.scale(r, w_ir)));
        }
        if cr.include_original_batch {
            let t_orig = models.teacher.forward_embedded(
                tape,
                models.teacher_weights,
                t_emb,
                &batch.mask,
                b,
                s,
                None,
            )?;
            for (name, v) in
                intermediate_parts(tape, &t_orig, &orig, pairs, objective, models.projection)?
            {
                parts.push((
                    if name == "ild_mha" {
                        "orig_mha"
                    } else {
                        "orig_ir"
                    },
                    v,
                ));
            }
        }
        student_original = Some(orig);
    }

    let mut components = Vec::with_capacity(parts.len());
    let mut total: Option<Var> = None;
    for (name, v) in parts {
        components.push((name, finite(tape, v, name)?));
        total = Some(match total {
            None => v,
            Some(acc) => tape.add(acc, v)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no loss terms enabled".into()))?;
    Ok(StepLoss {
        total,
        lambda,
        components,
        cr_mha: cr_mha_value,
        cr_ir: cr_ir_value,
        student_original,
    })
}

/// Plain intermediate-layer distillation on the original batch, the
/// baseline that CR-ILD degenerates to.
pub fn ild_step_loss(
    tape: &mut Tape,
    models: &StepModels<'_>,
    batch: &Batch,
    pairs: &[LayerPair],
    objective: &ObjectiveConfig,
    dropout_rng: Option<&mut Rng>,
) -> Result<(Var, ForwardTrace)> {
    let t_trace = models
        .teacher
        .forward(tape, models.teacher_weights, batch, None)?;
    let s_trace = models
        .student
        .forward(tape, models.student_weights, batch, dropout_rng)?;
    let parts = intermediate_parts(
        tape,
        &t_trace,
        &s_trace,
        pairs,
        objective,
        models.projection,
    )?;
    let mut total: Option<Var> = None;
    for (name, v) in parts {
        finite(tape, v, name)?;
        total = Some(match total {
            None => v,
            Some(acc) => tape.add(acc, v)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no loss terms enabled".into()))?;
    Ok((total, s_trace))
}
