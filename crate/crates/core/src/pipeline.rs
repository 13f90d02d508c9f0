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

//! Training loops: teacher fine-tuning, the ILD then PLD distillation
//! recipe, and multi-seed experiment grids.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::crild::{self, CrConfig, StepModels};
use crate::data::{batches, Batch, Dataset, Example};
use crate::distill::{self, LayerPair, ObjectiveConfig, Projection};
use crate::error::{config, Error, Result};
use crate::mapping::{self, MappingSpec, Strategy, TransportPlan};
use crate::model::{ModelConfig, TransformerModel, Weights};
use crate::rng::{stream, Rng};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub(crate) const EVAL_BATCH: usize = 128;

/// Adam with linear warm-up over the first `warmup_frac` of steps, then a
/// constant rate, and global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, total_steps: usize, warmup_frac: f64, clip_norm: f64) -> Self {
        Self {
            lr,
            warmup_steps: (total_steps as f64 * warmup_frac).ceil() as usize,
            clip_norm,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((self.t + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::Dimension {
                op: "adam",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let clip = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.current_lr();
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}

fn default_warmup_frac() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return config(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return config("warmup_frac must lie in [0,1]");
        }
        Ok(())
    }
}

/// Dev-set quality. Classification fills `accuracy`; regression fills the
/// correlations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pearson: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spearman: Option<f64>,
}

impl Metric {
    /// Accuracy, or the mean of both correlations for regression.
    pub fn primary(&self) -> f64 {
        match (self.accuracy, self.pearson, self.spearman) {
            (Some(a), _, _) => a,
            (None, Some(p), Some(s)) => (p + s) / 2.0,
            _ => f64::NAN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_metric: Option<Metric>,
    pub dev_metric: Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub final_dev: Metric,
    pub wall_time_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transport_plan: Option<TransportPlan>,
}

impl RunReport {
    fn new(name: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            name: name.to_string(),
            seed,
            config,
            epochs: Vec::new(),
            steps: Vec::new(),
            final_dev: Metric::default(),
            wall_time_secs: 0.0,
            transport_plan: None,
        }
    }

    pub fn phase_steps(&self, phase: &str) -> usize {
        self.steps.iter().filter(|s| s.phase == phase).count()
    }

    /// `epochs.jsonl`, `steps.jsonl` and `summary.json` under `dir`, all
    /// reproducible byte for byte. Wall time goes to `timing.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(File::create(dir.join("epochs.jsonl"))?);
        for e in &self.epochs {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        let mut f = BufWriter::new(File::create(dir.join("steps.jsonl"))?);
        for s in &self.steps {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        let summary = serde_json::json!({
            "name": self.name,
            "seed": self.seed,
            "config": self.config,
            "final_dev": self.final_dev,
            "final_dev_primary": self.final_dev.primary(),
            "num_epochs": self.epochs.len(),
            "num_steps": self.steps.len(),
            "transport_plan": self.transport_plan,
        });
        let mut f = BufWriter::new(File::create(dir.join("summary.json"))?);
        serde_json::to_writer_pretty(&mut f, &summary)?;
        f.flush()?;
        let timing = serde_json::json!({ "wall_time_secs": self.wall_time_secs });
        std::fs::write(
            dir.join("timing.json"),
            serde_json::to_string_pretty(&timing)?,
        )?;
        Ok(())
    }
}

pub(crate) fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Average ranks, ties sharing the mean rank.
pub(crate) fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Logits for every example, in eval mode.
pub fn predict(model: &TransformerModel, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    let order: Vec<usize> = (0..examples.len()).collect();
    let mut out = Vec::with_capacity(examples.len());
    let mut tape = Tape::new();
    for b in batches(examples, &order, EVAL_BATCH) {
        let b = b?;
        tape.reset();
        let w = model.bind(&mut tape, false);
        let tr = model.forward(&mut tape, &w, &b, None)?;
        out.extend(
            tape.value(tr.logits)
                .data()
                .chunks(model.config.num_classes)
                .map(<[f64]>::to_vec),
        );
    }
    Ok(out)
}

/// Metric against clean labels (`use_clean`) or the possibly noisy ones.
pub fn evaluate(model: &TransformerModel, examples: &[Example], use_clean: bool) -> Result<Metric> {
    if examples.is_empty() {
        return Ok(Metric::default());
    }
    let logits = predict(model, examples)?;
    let label = |e: &Example| if use_clean { e.clean_label } else { e.label };
    if model.config.is_regression() {
        let pred: Vec<f64> = logits.iter().map(|l| l[0]).collect();
        let gold = examples
            .iter()
            .map(|e| label(e).real())
            .collect::<Result<Vec<_>>>()?;
        return Ok(Metric {
            accuracy: None,
            pearson: Some(pearson(&pred, &gold)),
            spearman: Some(pearson(&ranks(&pred), &ranks(&gold))),
        });
    }
    let mut correct = 0;
    for (l, e) in logits.iter().zip(examples) {
        let arg = (0..l.len())
            .max_by(|&a, &b| l[a].total_cmp(&l[b]))
            .unwrap_or(0);
        correct += usize::from(arg == label(e).class()?);
    }
    Ok(Metric {
        accuracy: Some(correct as f64 / examples.len() as f64),
        pearson: None,
        spearman: None,
    })
}

/// Supervised loss on a batch's (possibly noisy) labels.
pub fn supervised_loss(
    tape: &mut Tape,
    logits: Var,
    batch: &Batch,
    regression: bool,
) -> Result<Var> {
    if regression {
        let target = Tensor::new(vec![batch.batch_size, 1], batch.real_labels()?)?;
        let t = tape.constant(target);
        tape.mse(logits, t)
    } else {
        tape.cross_entropy(logits, &batch.class_labels()?)
    }
}

fn grads_of(g: &Gradients, w: &Weights<Var>) -> Vec<Tensor> {
    w.named().into_iter().map(|(_, v)| g.wrt(*v)).collect()
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn check_finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numeric(format!("{what} is not finite ({x})")))
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Fine-tunes a fresh model on the training split. On divergence the last
/// good parameters are written to `checkpoint_dir` (when given) before the
/// numeric error is returned.
pub fn train_teacher(
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    hyper: &TrainHyper,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<(TransformerModel, RunReport)> {
    hyper.validate()?;
    let start = Instant::now();
    let mut model = TransformerModel::new(model_cfg.clone(), &mut stream(seed, "teacher-init"))?;
    let mut report = RunReport::new("teacher", seed, serde_json::to_value((model_cfg, hyper))?);
    let mut shuffle = stream(seed, "teacher-shuffle");
    let mut drop = stream(seed, "teacher-dropout");
    let total = hyper.epochs * steps_per_epoch(dataset.train.len(), hyper.batch_size);
    let mut opt = Adam::new(hyper.lr, total, hyper.warmup_frac, hyper.clip_norm);
    let mut tape = Tape::new();
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        let order = shuffled(dataset.train.len(), &mut shuffle);
        let mut loss_sum = 0.0;
        let mut n = 0;
        for b in batches(&dataset.train, &order, hyper.batch_size) {
            let b = b?;
            tape.reset();
            let w = model.bind(&mut tape, true);
            let tr = model.forward(&mut tape, &w, &b, Some(&mut drop))?;
            let loss = supervised_loss(&mut tape, tr.logits, &b, model_cfg.is_regression())?;
            let value = tape.value(loss).item()?;
            // the update is skipped on a bad loss or gradient, so the
            // current parameters are still the last good ones
            let outcome = check_finite(value, "teacher loss").and_then(|_| {
                let g = tape.backward(loss)?;
                opt.step(&mut model.weights.iter_mut(), &grads_of(&g, &w))
            });
            if let Err(e) = outcome {
                if let Some(dir) = checkpoint_dir {
                    model.save(dir, "last_good")?;
                }
                return Err(e);
            }
            report.steps.push(StepRecord {
                phase: "teacher".into(),
                step,
                loss: value,
                components: BTreeMap::from([("supervised".to_string(), value)]),
            });
            step += 1;
            loss_sum += value;
            n += 1;
        }
        report.epochs.push(EpochRecord {
            phase: "teacher".into(),
            epoch,
            train_loss: loss_sum / n.max(1) as f64,
            train_metric: Some(evaluate(&model, &dataset.train, false)?),
            dev_metric: evaluate(&model, &dataset.dev, true)?,
        });
    }
    report.final_dev = evaluate(&model, &dataset.dev, true)?;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    KdOnly,
    #[default]
    Ild,
    Crild,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PhaseOrder {
    #[default]
    Sequential,
    Joint,
}

fn default_ild_epochs() -> usize {
    20
}
fn default_pld_epochs() -> usize {
    4
}
fn default_ild_lr() -> f64 {
    5e-4
}
fn default_pld_lr() -> f64 {
    2e-4
}
fn default_batch() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DistillPlan {
    pub name: String,
    pub method: Method,
    #[serde(default)]
    pub mapping: MappingSpec,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub cr: CrConfig,
    #[serde(default = "default_ild_epochs")]
    pub ild_epochs: usize,
    #[serde(default = "default_pld_epochs")]
    pub pld_epochs: usize,
    #[serde(default = "default_ild_lr")]
    pub ild_lr: f64,
    #[serde(default = "default_pld_lr")]
    pub pld_lr: f64,
    #[serde(default = "default_batch")]
    pub ild_batch_size: usize,
    #[serde(default = "default_batch")]
    pub pld_batch_size: usize,
    #[serde(default)]
    pub phase_order: PhaseOrder,
}

impl DistillPlan {
    pub fn new(name: &str, method: Method, strategy: Strategy) -> Self {
        Self {
            name: name.to_string(),
            method,
            mapping: MappingSpec {
                strategy,
                ..Default::default()
            },
            objective: ObjectiveConfig::default(),
            cr: CrConfig::default(),
            ild_epochs: default_ild_epochs(),
            pld_epochs: default_pld_epochs(),
            ild_lr: default_ild_lr(),
            pld_lr: default_pld_lr(),
            ild_batch_size: default_batch(),
            pld_batch_size: default_batch(),
            phase_order: PhaseOrder::Sequential,
        }
    }

    pub fn validate(&self, teacher_layers: usize, student_layers: usize) -> Result<()> {
        if self.ild_batch_size == 0 || self.pld_batch_size == 0 {
            return config("batch sizes must be positive");
        }
        for (n, lr) in [("ild_lr", self.ild_lr), ("pld_lr", self.pld_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return config(format!("{n} must be positive, got {lr}"));
            }
        }
        self.objective.validate()?;
        if self.method != Method::KdOnly {
            self.mapping.validate(teacher_layers, student_layers)?;
        }
        if self.method == Method::Crild {
            self.cr.validate()?;
        }
        Ok(())
    }
}

/// Logits of `teacher` on every training example, keyed by position.
fn teacher_logits(teacher: &TransformerModel, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    predict(teacher, examples)
}

fn batch_teacher_logits(cache: &[Vec<f64>], idx: &[usize]) -> Result<Tensor> {
    let c = cache.first().map_or(0, Vec::len);
    Tensor::new(
        vec![idx.len(), c],
        idx.iter().flat_map(|&i| cache[i].iter().copied()).collect(),
    )
}

fn pl_term(
    tape: &mut Tape,
    teacher: &Tensor,
    student: Var,
    regression: bool,
    temperature: f64,
) -> Result<Var> {
    if regression {
        // a single logit has a degenerate softmax; match raw outputs instead
        let t = tape.constant(teacher.clone());
        tape.mse(student, t)
    } else {
        distill::loss_pl(tape, teacher, student, temperature)
    }
}

struct Trainables<'a> {
    student: &'a mut TransformerModel,
    projection: &'a mut Projection,
}

impl Trainables<'_> {
    fn params(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.student.weights.iter_mut();
        p.push(&mut self.projection.weight);
        p
    }
}

/// Runs a distillation plan. The ILD phase consumes `supplementary` when
/// given, otherwise the target training split; PLD always uses the target.
pub fn distill(
    plan: &DistillPlan,
    teacher: &TransformerModel,
    student_init: &TransformerModel,
    target: &Dataset,
    supplementary: Option<&Dataset>,
    seed: u64,
) -> Result<(TransformerModel, RunReport)> {
    let (tc, sc) = (&teacher.config, &student_init.config);
    plan.validate(tc.num_layers, sc.num_layers)?;
    if tc.num_heads != sc.num_heads {
        return config("teacher and student head counts must match");
    }
    if tc.num_classes != sc.num_classes || tc.vocab_size != sc.vocab_size {
        return config("teacher and student disagree on vocabulary or label space");
    }
    if plan.phase_order == PhaseOrder::Joint && supplementary.is_some() {
        return config("joint training distils on the target task; drop the supplementary dataset");
    }
    let start = Instant::now();
    let regression = sc.is_regression();
    let mut student = student_init.clone();
    let mut projection = Projection::identity(tc.hidden_dim, sc.hidden_dim);
    let mut report = RunReport::new(&plan.name, seed, serde_json::to_value(plan)?);
    let target_logits = teacher_logits(teacher, &target.train)?;
    let mut drop = stream(seed, "student-dropout");
    let mut tape = Tape::new();

    let static_pairs: Vec<LayerPair> = match plan.mapping.strategy {
        Strategy::Last => mapping::map_last(tc.num_layers, sc.num_layers),
        Strategy::Uniform => mapping::map_uniform(tc.num_layers, sc.num_layers)?,
        Strategy::Emd => Vec::new(),
    };
    let mut pairs = static_pairs.clone();

    let run_ild = plan.method != Method::KdOnly;
    let ild_data: &[Example] = match (run_ild, plan.phase_order, supplementary) {
        (true, PhaseOrder::Sequential, Some(s)) => &s.train,
        _ => &target.train,
    };
    let joint = plan.phase_order == PhaseOrder::Joint && run_ild;

    if run_ild {
        let mut shuffle = stream(seed, "ild-shuffle");
        let mut mix_rng = stream(seed, "crild-mix");
        let total = plan.ild_epochs * steps_per_epoch(ild_data.len(), plan.ild_batch_size);
        let mut opt = Adam::new(plan.ild_lr, total, 0.1, 1.0);
        let mut step = 0;
        for epoch in 0..plan.ild_epochs {
            let order = shuffled(ild_data.len(), &mut shuffle);
            let mut loss_sum = 0.0;
            let mut n = 0;
            for chunk in order.chunks(plan.ild_batch_size) {
                let refs: Vec<&Example> = chunk.iter().map(|&i| &ild_data[i]).collect();
                let batch = Batch::from_examples(&refs)?;
                tape.reset();
                let tw = teacher.bind(&mut tape, false);
                let sw = student.bind(&mut tape, true);
                let pv = tape.param(projection.weight.clone());
                let models = StepModels {
                    teacher,
                    teacher_weights: &tw,
                    student: &student,
                    student_weights: &sw,
                    projection: pv,
                };

                if plan.mapping.strategy == Strategy::Emd
                    && step % plan.mapping.emd_refresh_interval == 0
                {
                    let tt = teacher.forward(&mut tape, &tw, &batch, None)?;
                    let st = student.forward(&mut tape, &sw, &batch, None)?;
                    let cost = mapping::emd_costs(
                        &mut tape,
                        &tt,
                        &st,
                        &plan.objective,
                        plan.mapping.emd_cost,
                        pv,
                    )?;
                    let tp = mapping::map_emd(&cost)?;
                    pairs = tp.pairs();
                    report.transport_plan = Some(tp);
                }

                let mut components = BTreeMap::new();
                let (mut loss, student_trace) = match plan.method {
                    Method::Crild => {
                        let out = crild::crild_step_loss(
                            &mut tape,
                            &models,
                            &batch,
                            &pairs,
                            &plan.objective,
                            &plan.cr,
                            step,
                            &mut mix_rng,
                            Some(&mut drop),
                        )?;
                        for (k, v) in &out.components {
                            components.insert(k.to_string(), *v);
                        }
                        components.insert("lambda".into(), out.lambda);
                        (out.total, None)
                    }
                    _ => {
                        let (l, tr) = crild::ild_step_loss(
                            &mut tape,
                            &models,
                            &batch,
                            &pairs,
                            &plan.objective,
                            Some(&mut drop),
                        )?;
                        components.insert("ild".into(), tape.value(l).item()?);
                        (l, Some(tr))
                    }
                };
                if joint {
                    let logits = match student_trace {
                        Some(tr) => tr.logits,
                        None => {
                            student
                                .forward(&mut tape, &sw, &batch, Some(&mut drop))?
                                .logits
                        }
                    };
                    let tl = batch_teacher_logits(&target_logits, chunk)?;
                    let pl = pl_term(
                        &mut tape,
                        &tl,
                        logits,
                        regression,
                        plan.objective.pl_temperature,
                    )?;
                    components.insert("pl".into(), check_finite(tape.value(pl).item()?, "pl")?);
                    loss = tape.add(loss, pl)?;
                }
                let value = check_finite(tape.value(loss).item()?, "ild loss")?;
                let g = tape.backward(loss)?;
                let mut grads = grads_of(&g, &sw);
                grads.push(g.wrt(pv));
                let mut tr = Trainables {
                    student: &mut student,
                    projection: &mut projection,
                };
                opt.step(&mut tr.params(), &grads)?;
                report.steps.push(StepRecord {
                    phase: "ild".into(),
                    step,
                    loss: value,
                    components,
                });
                step += 1;
                loss_sum += value;
                n += 1;
            }
            report.epochs.push(EpochRecord {
                phase: "ild".into(),
                epoch,
                train_loss: loss_sum / n.max(1) as f64,
                train_metric: None,
                dev_metric: evaluate(&student, &target.dev, true)?,
            });
        }
    }

    if !joint {
        let mut shuffle = stream(seed, "pld-shuffle");
        let data = &target.train;
        let total = plan.pld_epochs * steps_per_epoch(data.len(), plan.pld_batch_size);
        let mut opt = Adam::new(plan.pld_lr, total, 0.1, 1.0);
        let mut step = 0;
        for epoch in 0..plan.pld_epochs {
            let order = shuffled(data.len(), &mut shuffle);
            let mut loss_sum = 0.0;
            let mut n = 0;
            for chunk in order.chunks(plan.pld_batch_size) {
                let refs: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
                let batch = Batch::from_examples(&refs)?;
                tape.reset();
                let sw = student.bind(&mut tape, true);
                let tr = student.forward(&mut tape, &sw, &batch, Some(&mut drop))?;
                let tl = batch_teacher_logits(&target_logits, chunk)?;
                let loss = pl_term(
                    &mut tape,
                    &tl,
                    tr.logits,
                    regression,
                    plan.objective.pl_temperature,
                )?;
                let value = check_finite(tape.value(loss).item()?, "pld loss")?;
                let g = tape.backward(loss)?;
                let grads = grads_of(&g, &sw);
                opt.step(&mut student.weights.iter_mut(), &grads)?;
                report.steps.push(StepRecord {
                    phase: "pld".into(),
                    step,
                    loss: value,
                    components: BTreeMap::from([("pl".to_string(), value)]),
                });
                step += 1;
                loss_sum += value;
                n += 1;
            }
            report.epochs.push(EpochRecord {
                phase: "pld".into(),
                epoch,
                train_loss: loss_sum / n.max(1) as f64,
                train_metric: None,
                dev_metric: evaluate(&student, &target.dev, true)?,
            });
        }
    }

    report.final_dev = evaluate(&student, &target.dev, true)?;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((student, report))
}

/// Aggregate of one plan over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub name: String,
    pub seeds: Vec<u64>,
    pub metrics: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub failed: bool,
    pub errors: Vec<String>,
    #[serde(skip)]
    pub reports: Vec<RunReport>,
}

/// Sample mean and (n-1) standard deviation; zero spread for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every `(name, job)` for every seed. Seeds are processed in sorted
/// order, so the aggregate does not depend on how they were listed. Cells
/// run concurrently, each on its own thread.
pub fn run_experiment_grid<F>(cells: &[(String, F)], seeds: &[u64]) -> Result<Vec<GridCell>>
where
    F: Fn(u64) -> Result<RunReport> + Sync,
{
    if seeds.is_empty() {
        return config("an experiment grid needs at least one seed");
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(cells.len())
        .max(1);
    let mut out: Vec<Option<GridCell>> = vec![None; cells.len()];
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(&mut out);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let (name, job) = &cells[i];
                let mut cell = GridCell {
                    name: name.clone(),
                    seeds: Vec::new(),
                    metrics: Vec::new(),
                    mean: f64::NAN,
                    std: f64::NAN,
                    failed: false,
                    errors: Vec::new(),
                    reports: Vec::new(),
                };
                for &s in &sorted {
                    match job(s) {
                        Ok(r) => {
                            cell.seeds.push(s);
                            cell.metrics.push(r.final_dev.primary());
                            cell.reports.push(r);
                        }
                        Err(e) => {
                            cell.failed = true;
                            cell.errors.push(format!("seed {s}: {e}"));
                        }
                    }
                }
                let (m, sd) = mean_std(&cell.metrics);
                cell.mean = m;
                cell.std = sd;
                results.lock().expect("grid results lock")[i] = Some(cell);
            });
        }
    });
    Ok(out
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect())
}
