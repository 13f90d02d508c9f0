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

//! Procedural sequence-classification tasks.
//!
//! Two families stand in for real corpora:
//!
//! - *single-sentence*: content tokens are partitioned into marker groups
//!   (one per class) and neutral tokens; the label is the group with the
//!   strict majority of markers.
//! - *sentence-pair*: content tokens are partitioned into latent templates;
//!   two segments are drawn from templates and the label says whether they
//!   came from the same one.
//!
//! A task's rule is a pure function of `rule_seed`. The similarity knob `ρ`
//! resamples a fraction `ρ` of the rule's token assignments, so `ρ = 0`
//! reproduces the reference rule and `ρ = 1` yields an independent one.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{config, data, Error, Result};
use crate::rng::{self, Rng};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const FIRST_CONTENT: u32 = 3;

/// Number of latent templates in the sentence-pair family.
const PAIR_TEMPLATES: usize = 4;
/// Probability that a marker is drawn from the label's own group.
const MAJORITY_BIAS: f64 = 0.65;
/// Probability that a pair-segment token comes from its template.
const TEMPLATE_PURITY: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    SingleSentence,
    SentencePair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub rule_seed: u64,
    pub vocab_size: usize,
    /// Class count; 1 for regression tasks.
    pub num_classes: usize,
    pub nominal_seq_len: usize,
    /// Target mean count of non-pad tokens, specials included.
    pub effective_len: usize,
    /// Number of training examples; the dev split adds a quarter of that
    /// (20% of the total).
    pub dataset_size: usize,
    #[serde(default)]
    pub similarity: f64,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub regression: bool,
}

impl TaskSpec {
    fn reserved(&self) -> usize {
        match self.family {
            TaskFamily::SingleSentence => 1,
            TaskFamily::SentencePair => 2,
        }
    }

    pub fn dev_size(&self) -> usize {
        (self.dataset_size / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 {
            return config("dataset_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return config(format!(
                "similarity must lie in [0,1], got {}",
                self.similarity
            ));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return config(format!(
                "label_noise must lie in [0,1], got {}",
                self.label_noise
            ));
        }
        if self.regression {
            if self.family != TaskFamily::SingleSentence {
                return config("regression is only defined for the single-sentence family");
            }
            if self.num_classes != 1 {
                return config("regression tasks must declare num_classes = 1");
            }
            if self.label_noise > 0.0 {
                return config("label noise cannot be injected into a regression task");
            }
        } else if self.num_classes < 2 {
            return config("classification tasks need at least 2 classes");
        }
        if self.family == TaskFamily::SentencePair && !self.regression && self.num_classes != 2 {
            return config("the sentence-pair family is binary (num_classes = 2)");
        }
        let groups = match self.family {
            TaskFamily::SingleSentence => self.num_classes.max(2),
            TaskFamily::SentencePair => PAIR_TEMPLATES,
        };
        let content = self.vocab_size.saturating_sub(FIRST_CONTENT as usize);
        if content < 2 * groups {
            return config(format!(
                "vocab_size {} leaves {content} content tokens; need at least {}",
                self.vocab_size,
                2 * groups
            ));
        }
        let min_content = match self.family {
            TaskFamily::SingleSentence => 1,
            TaskFamily::SentencePair => 2,
        };
        if self.effective_len > self.nominal_seq_len
            || self.effective_len < self.reserved() + min_content
        {
            return config(format!(
                "effective_len {} infeasible for nominal_seq_len {} ({} reserved special tokens)",
                self.effective_len,
                self.nominal_seq_len,
                self.reserved()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Real(f64),
}

impl Label {
    pub fn class(self) -> Result<usize> {
        match self {
            Label::Class(c) => Ok(c),
            Label::Real(_) => data("expected a class label, found a real value"),
        }
    }

    pub fn real(self) -> Result<f64> {
        match self {
            Label::Real(v) => Ok(v),
            Label::Class(_) => data("expected a real label, found a class id"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub mask: Vec<u8>,
    pub label: Label,
    pub clean_label: Label,
}

impl Example {
    pub fn effective_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

/// The hidden labeling rule of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRule {
    family: TaskFamily,
    groups: usize,
    /// Group (single) or template (pair) per content token; `None` marks a
    /// neutral token.
    assignment: Vec<Option<usize>>,
}

impl TaskRule {
    /// Reference rule for `spec.rule_seed`.
    pub fn reference(spec: &TaskSpec) -> Self {
        let mut r = rng::stream(spec.rule_seed, "task-rule");
        let n_content = spec.vocab_size - FIRST_CONTENT as usize;
        let mut order: Vec<usize> = (0..n_content).collect();
        order.shuffle(&mut r);
        let (groups, assigned) = match spec.family {
            TaskFamily::SingleSentence => (spec.num_classes.max(2), n_content / 2),
            TaskFamily::SentencePair => (PAIR_TEMPLATES, n_content),
        };
        let mut assignment = vec![None; n_content];
        for (k, &tok) in order.iter().take(assigned).enumerate() {
            assignment[tok] = Some(k % groups);
        }
        Self {
            family: spec.family,
            groups,
            assignment,
        }
    }

    /// Resamples the assignment of a fraction `rho` of assigned tokens.
    pub fn perturbed(&self, rho: f64, r: &mut Rng) -> Self {
        let mut out = self.clone();
        let assigned: Vec<usize> = (0..self.assignment.len())
            .filter(|&t| self.assignment[t].is_some())
            .collect();
        let k = (rho * assigned.len() as f64).round() as usize;
        if k == 0 {
            return out;
        }
        let picks = rand::seq::index::sample(r, assigned.len(), k);
        for i in picks.iter() {
            out.assignment[assigned[i]] = Some(r.random_range(0..self.groups));
        }
        out
    }

    fn tokens_of(&self, group: usize) -> Vec<u32> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == Some(group))
            .map(|(t, _)| t as u32 + FIRST_CONTENT)
            .collect()
    }

    fn neutral_tokens(&self) -> Vec<u32> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_none())
            .map(|(t, _)| t as u32 + FIRST_CONTENT)
            .collect()
    }

    fn group_of(&self, tok: u32) -> Option<usize> {
        if tok < FIRST_CONTENT {
            return None;
        }
        self.assignment
            .get((tok - FIRST_CONTENT) as usize)
            .copied()
            .flatten()
    }

    /// Label that this rule assigns to a token sequence. Ties and
    /// undecidable pair segments resolve to class 0.
    pub fn label(&self, tokens: &[u32]) -> usize {
        match self.family {
            TaskFamily::SingleSentence => {
                let counts = self.group_counts(tokens);
                let max = *counts.iter().max().unwrap_or(&0);
                let winners: Vec<usize> = (0..self.groups).filter(|&g| counts[g] == max).collect();
                if winners.len() == 1 {
                    winners[0]
                } else {
                    0
                }
            }
            TaskFamily::SentencePair => {
                let sep = tokens
                    .iter()
                    .position(|&t| t == SEP)
                    .unwrap_or(tokens.len());
                let a = self.majority_template(&tokens[1.min(tokens.len())..sep]);
                let b = self.majority_template(tokens.get(sep + 1..).unwrap_or(&[]));
                usize::from(a.is_some() && a == b)
            }
        }
    }

    fn group_counts(&self, tokens: &[u32]) -> Vec<usize> {
        let mut counts = vec![0; self.groups];
        for &t in tokens {
            if let Some(g) = self.group_of(t) {
                counts[g] += 1;
            }
        }
        counts
    }

    fn majority_template(&self, seg: &[u32]) -> Option<usize> {
        let counts = self.group_counts(seg);
        let max = *counts.iter().max()?;
        let winners: Vec<usize> = (0..self.groups).filter(|&g| counts[g] == max).collect();
        (max > 0 && winners.len() == 1).then(|| winners[0])
    }
}

fn content_length(spec: &TaskSpec, r: &mut Rng) -> usize {
    let centre = spec.effective_len - spec.reserved();
    let cap = spec.nominal_seq_len - spec.reserved();
    let jitter = (centre / 4)
        .min(3)
        .min(cap - centre)
        .min(centre.saturating_sub(1));
    r.random_range(centre - jitter..=centre + jitter)
}

fn finish(spec: &TaskSpec, mut tokens: Vec<u32>, label: Label) -> Example {
    let valid = tokens.len();
    tokens.resize(spec.nominal_seq_len, PAD);
    let mask = (0..spec.nominal_seq_len)
        .map(|i| u8::from(i < valid))
        .collect();
    Example {
        tokens,
        mask,
        label,
        clean_label: label,
    }
}

fn single_example(spec: &TaskSpec, rule: &TaskRule, r: &mut Rng) -> Example {
    let n = content_length(spec, r);
    let neutral = rule.neutral_tokens();
    let group_tokens: Vec<Vec<u32>> = (0..rule.groups).map(|g| rule.tokens_of(g)).collect();
    let n_markers = ((n as f64 * r.random_range(0.3..0.6)).round() as usize).clamp(1, n);

    let (groups, label) = if spec.regression {
        let share: f64 = r.random_range(0.0..1.0);
        let groups: Vec<usize> = (0..n_markers)
            .map(|_| usize::from(!r.random_bool(share)))
            .collect();
        let zero = groups.iter().filter(|&&g| g == 0).count();
        (groups, Label::Real(zero as f64 / n_markers as f64))
    } else {
        let c = spec.num_classes;
        let y = r.random_range(0..c);
        let groups = loop {
            let gs: Vec<usize> = (0..n_markers)
                .map(|_| {
                    if r.random_bool(MAJORITY_BIAS) {
                        y
                    } else {
                        let o = r.random_range(0..c - 1);
                        if o >= y {
                            o + 1
                        } else {
                            o
                        }
                    }
                })
                .collect();
            let mut counts = vec![0; c];
            for &g in &gs {
                counts[g] += 1;
            }
            if (0..c).all(|g| g == y || counts[g] < counts[y]) {
                break gs;
            }
        };
        (groups, Label::Class(y))
    };

    let mut content: Vec<u32> = groups
        .iter()
        .map(|&g| *group_tokens[g].choose(r).expect("non-empty group"))
        .collect();
    content.extend((n_markers..n).map(|_| *neutral.choose(r).expect("non-empty neutral set")));
    content.shuffle(r);
    let mut tokens = Vec::with_capacity(n + 1);
    tokens.push(CLS);
    tokens.extend(content);
    finish(spec, tokens, label)
}

fn pair_segment(
    rule: &TaskRule,
    template: usize,
    len: usize,
    vocab: usize,
    r: &mut Rng,
) -> Vec<u32> {
    let own = rule.tokens_of(template);
    (0..len)
        .map(|_| {
            if r.random_bool(TEMPLATE_PURITY) {
                *own.choose(r).expect("non-empty template")
            } else {
                r.random_range(FIRST_CONTENT..vocab as u32)
            }
        })
        .collect()
}

fn pair_example(spec: &TaskSpec, rule: &TaskRule, r: &mut Rng) -> Example {
    let n = content_length(spec, r);
    let len_a = (n / 2).max(1);
    let len_b = (n - n / 2).max(1);
    let y = usize::from(r.random_bool(0.5));
    // segment draws can disagree with their latent templates, so redraw
    // until the rule's verdict matches the intended label
    loop {
        let ta = r.random_range(0..PAIR_TEMPLATES);
        let tb = if y == 1 {
            ta
        } else {
            let o = r.random_range(0..PAIR_TEMPLATES - 1);
            if o >= ta {
                o + 1
            } else {
                o
            }
        };
        let mut tokens = vec![CLS];
        tokens.extend(pair_segment(rule, ta, len_a, spec.vocab_size, r));
        tokens.push(SEP);
        tokens.extend(pair_segment(rule, tb, len_b, spec.vocab_size, r));
        if rule.label(&tokens) == y {
            return finish(spec, tokens, Label::Class(y));
        }
    }
}

fn sample_examples(spec: &TaskSpec, rule: &TaskRule, count: usize, r: &mut Rng) -> Vec<Example> {
    (0..count)
        .map(|_| match spec.family {
            TaskFamily::SingleSentence => single_example(spec, rule, r),
            TaskFamily::SentencePair => pair_example(spec, rule, r),
        })
        .collect()
}

/// Rule actually used by a generated task: the reference rule perturbed
/// by `spec.similarity` with the leading draws of `r`.
pub fn task_rule(spec: &TaskSpec, r: &mut Rng) -> TaskRule {
    TaskRule::reference(spec).perturbed(spec.similarity, r)
}

/// Generates train and dev splits for `spec`, then applies the spec's
/// label noise to the train split.
pub fn generate_task(spec: &TaskSpec, r: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    let rule = task_rule(spec, r);
    let train = sample_examples(spec, &rule, spec.dataset_size, r);
    let dev = sample_examples(spec, &rule, spec.dev_size(), r);
    let dataset = Dataset {
        spec: spec.clone(),
        train,
        dev,
    };
    if spec.label_noise > 0.0 {
        inject_label_noise(&dataset, spec.label_noise, r)
    } else {
        Ok(dataset)
    }
}

/// Resamples a fraction `p` of the training labels uniformly over all
/// classes (so roughly `p (C-1)/C` of them actually change). Dev labels and
/// all tokens are left alone.
pub fn inject_label_noise(dataset: &Dataset, p: f64, r: &mut Rng) -> Result<Dataset> {
    if dataset.spec.regression {
        return config("label noise cannot be injected into a regression task");
    }
    if !(0.0..=1.0).contains(&p) {
        return config(format!("noise rate must lie in [0,1], got {p}"));
    }
    let mut out = dataset.clone();
    out.spec.label_noise = p;
    let n = out.train.len();
    let k = (p * n as f64).round() as usize;
    if k == 0 {
        return Ok(out);
    }
    let c = out.spec.num_classes;
    for i in rand::seq::index::sample(r, n, k).iter() {
        out.train[i].label = Label::Class(r.random_range(0..c));
    }
    Ok(out)
}

/// Uniform sample of `n` training examples without replacement.
pub fn downsample(dataset: &Dataset, n: usize, r: &mut Rng) -> Result<Dataset> {
    if n == 0 || n > dataset.train.len() {
        return data(format!(
            "cannot down-sample {} training examples to {n}",
            dataset.train.len()
        ));
    }
    let idx = rand::seq::index::sample(r, dataset.train.len(), n);
    let mut out = dataset.clone();
    out.train = idx.iter().map(|i| dataset.train[i].clone()).collect();
    out.spec.dataset_size = n;
    Ok(out)
}

/// Spec of a supplementary task: same vocabulary and reference rule as the
/// target, with independent size, effective length and similarity.
pub fn supplementary_spec(
    target: &TaskSpec,
    size: usize,
    effective_len: usize,
    rho: f64,
) -> TaskSpec {
    TaskSpec {
        dataset_size: size,
        effective_len,
        similarity: rho,
        label_noise: 0.0,
        ..target.clone()
    }
}

pub fn make_supplementary(
    target: &TaskSpec,
    size: usize,
    effective_len: usize,
    rho: f64,
    r: &mut Rng,
) -> Result<Dataset> {
    generate_task(&supplementary_spec(target, size, effective_len, rho), r)
}

pub fn mean_effective_len(examples: &[Example]) -> f64 {
    examples
        .iter()
        .map(|e| e.effective_len() as f64)
        .sum::<f64>()
        / examples.len().max(1) as f64
}

/// A padded minibatch. Trailing columns that are padding for every row are
/// trimmed, which leaves every non-pad computation unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub mask: Vec<f64>,
    pub labels: Vec<Label>,
    pub clean_labels: Vec<Label>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return data("empty batch");
        }
        let width = examples[0].tokens.len();
        if examples
            .iter()
            .any(|e| e.tokens.len() != width || e.mask.len() != width)
        {
            return data("examples in a batch must share one padded length");
        }
        let seq_len = examples
            .iter()
            .map(|e| e.mask.iter().rposition(|&m| m == 1).map_or(1, |p| p + 1))
            .max()
            .unwrap_or(1);
        let mut tokens = Vec::with_capacity(examples.len() * seq_len);
        let mut mask = Vec::with_capacity(examples.len() * seq_len);
        for e in examples {
            tokens.extend_from_slice(&e.tokens[..seq_len]);
            mask.extend(e.mask[..seq_len].iter().map(|&m| f64::from(m)));
        }
        Ok(Self {
            batch_size: examples.len(),
            seq_len,
            tokens,
            mask,
            labels: examples.iter().map(|e| e.label).collect(),
            clean_labels: examples.iter().map(|e| e.clean_label).collect(),
        })
    }

    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.labels.iter().map(|l| l.class()).collect()
    }

    pub fn real_labels(&self) -> Result<Vec<f64>> {
        self.labels.iter().map(|l| l.real()).collect()
    }
}

/// Batches over `examples` in the given index order.
pub fn batches<'a>(
    examples: &'a [Example],
    order: &'a [usize],
    size: usize,
) -> impl Iterator<Item = Result<Batch>> + 'a {
    order.chunks(size.max(1)).map(move |chunk| {
        let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        Batch::from_examples(&refs)
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: TaskSpec,
}

pub fn write_jsonl(path: &Path, spec: &TaskSpec, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &Header { spec: spec.clone() })?;
    w.write_all(b"\n")?;
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<(TaskSpec, Vec<Example>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header: Header = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return data(format!("{} is empty", path.display())),
    };
    let mut examples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(serde_json::from_str(&line)?);
    }
    Ok((header.spec, examples))
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("train.jsonl"), &self.spec, &self.train)?;
        write_jsonl(&dir.join("dev.jsonl"), &self.spec, &self.dev)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (spec, train) = read_jsonl(&dir.join("train.jsonl"))?;
        let (dev_spec, dev) = read_jsonl(&dir.join("dev.jsonl"))?;
        if dev_spec != spec {
            return Err(Error::Data(format!(
                "{}: train and dev headers disagree",
                dir.display()
            )));
        }
        Ok(Self { spec, train, dev })
    }
}
