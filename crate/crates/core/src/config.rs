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

//! The experiment document consumed by the command-line driver.
//!
//! Parsing goes through an untyped JSON tree first so that `key=value`
//! overrides can be spliced in, then through a path-tracking deserializer
//! so a bad field is reported by its dotted location.

use std::collections::BTreeSet;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::SurfaceGrid;
use crate::data::{self, Dataset, TaskSpec};
use crate::error::{config, Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::{DistillPlan, TrainHyper};
use crate::rng::stream;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must equal the schema version understood by this build.
    pub version: u32,
    /// Global seed; every random stream is derived from it by name.
    pub seed: u64,
    pub out_dir: String,
    pub task: TaskSpec,
    /// Keep only this many training examples after generation.
    #[serde(default)]
    pub downsample: Option<usize>,
    /// Supplementary task for the ILD phase, built from `task`.
    #[serde(default)]
    pub supplementary: Option<SupplementarySpec>,
    pub teacher: TeacherConfig,
    pub student: ModelConfig,
    #[serde(default)]
    pub plans: Vec<DistillPlan>,
    #[serde(default)]
    pub probes: ProbeConfig,
    /// Seeds for the `grid` command; defaults to `[seed]`.
    #[serde(default)]
    pub grid_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub model: ModelConfig,
    pub train: TrainHyper,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SupplementarySpec {
    pub size: usize,
    pub effective_len: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default)]
    pub noise: Option<NoiseProbeSpec>,
    #[serde(default)]
    pub linear: Option<LinearProbeSpec>,
    #[serde(default)]
    pub surface: Option<SurfaceSpec>,
    #[serde(default)]
    pub expansion: Option<ExpansionSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NoiseProbeSpec {
    pub sigmas: Vec<f64>,
    pub draws: usize,
    /// Evaluate on the first `max_examples` training examples only.
    #[serde(default)]
    pub max_examples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LinearProbeSpec {
    /// Hidden-state indices, 0 being the embedding output.
    pub layers: Vec<usize>,
}

/// Loss plane through the student initialization and the final students
/// of two plans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    pub endpoints: [String; 2],
    #[serde(default)]
    pub grid: SurfaceGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExpansionSpec {
    pub alphas: Vec<f64>,
    pub setups: usize,
    pub points: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub target_dim: usize,
}

/// Sets the value at a dotted path (`teacher.train.lr`, `plans.0.name`).
/// The raw value is read as JSON when it parses, otherwise as a string.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return config(format!("malformed override key `{key}`"));
    }
    let mut node = root;
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| {
                    Error::Config(format!("override `{key}`: `{part}` is not an array index"))
                })?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    Error::Config(format!(
                        "override `{key}`: index {idx} out of range ({len})"
                    ))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return config(format!(
                    "override `{key}`: `{part}` does not name a container"
                ))
            }
        };
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses, applies overrides in order, deserializes and validates.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("not valid JSON: {e}")))?;
        for (k, v) in overrides {
            apply_override(&mut tree, k, v)?;
        }
        Self::from_value(tree)
    }

    pub fn from_value(tree: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(tree).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return config(format!(
                "at `version`: expected {CONFIG_VERSION}, found {}",
                self.version
            ));
        }
        if self.out_dir.is_empty() {
            return config("at `out_dir`: must not be empty");
        }
        self.task.validate().map_err(|e| at("task", e))?;
        let t = &self.teacher.model;
        t.validate().map_err(|e| at("teacher.model", e))?;
        self.student.validate().map_err(|e| at("student", e))?;
        self.teacher
            .train
            .validate()
            .map_err(|e| at("teacher.train", e))?;
        for (name, m) in [("teacher.model", t), ("student", &self.student)] {
            if m.vocab_size != self.task.vocab_size {
                return config(format!(
                    "at `{name}.vocab_size`: must equal task.vocab_size"
                ));
            }
            if m.num_classes != self.task.num_classes {
                return config(format!(
                    "at `{name}.num_classes`: must equal task.num_classes"
                ));
            }
            if m.max_seq_len < self.task.nominal_seq_len {
                return config(format!(
                    "at `{name}.max_seq_len`: shorter than task.nominal_seq_len"
                ));
            }
        }
        if self.student.num_layers > t.num_layers {
            return config("at `student.num_layers`: a student cannot be deeper than its teacher");
        }
        if self.student.hidden_dim != t.hidden_dim || self.student.num_heads != t.num_heads {
            return config(
                "at `student`: truncated initialization needs the teacher's width and head count",
            );
        }
        if let Some(n) = self.downsample {
            if n == 0 || n > self.task.dataset_size {
                return config("at `downsample`: must lie in 1..=task.dataset_size");
            }
        }
        if let Some(s) = &self.supplementary {
            self.supplementary_task(s)
                .validate()
                .map_err(|e| at("supplementary", e))?;
        }
        let mut names = BTreeSet::new();
        for (i, p) in self.plans.iter().enumerate() {
            let path = format!("plans.{i}");
            let safe = !p.name.is_empty()
                && p.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !safe {
                return config(format!("at `{path}.name`: use letters, digits, '-' or '_'"));
            }
            if !names.insert(p.name.clone()) {
                return config(format!(
                    "at `{path}.name`: duplicate plan name `{}`",
                    p.name
                ));
            }
            p.validate(t.num_layers, self.student.num_layers)
                .map_err(|e| at(&path, e))?;
        }
        if let Some(s) = &self.probes.surface {
            for e in &s.endpoints {
                if !names.contains(e) {
                    return config(format!("at `probes.surface.endpoints`: unknown plan `{e}`"));
                }
            }
        }
        if let Some(l) = &self.probes.linear {
            if let Some(bad) = l.layers.iter().find(|&&k| k > self.student.num_layers) {
                return config(format!(
                    "at `probes.linear.layers`: layer {bad} exceeds the student depth"
                ));
            }
        }
        Ok(())
    }

    fn supplementary_task(&self, s: &SupplementarySpec) -> TaskSpec {
        data::supplementary_spec(&self.task, s.size, s.effective_len, s.similarity)
    }

    pub fn grid_seeds(&self) -> Vec<u64> {
        if self.grid_seeds.is_empty() {
            vec![self.seed]
        } else {
            self.grid_seeds.clone()
        }
    }

    /// Target task for `seed`, down-sampled when requested.
    pub fn target_dataset(&self, seed: u64) -> Result<Dataset> {
        let d = data::generate_task(&self.task, &mut stream(seed, "target-task"))?;
        match self.downsample {
            Some(n) => data::downsample(&d, n, &mut stream(seed, "downsample")),
            None => Ok(d),
        }
    }

    pub fn supplementary_dataset(&self, seed: u64) -> Result<Option<Dataset>> {
        self.supplementary
            .as_ref()
            .map(|s| {
                data::generate_task(
                    &self.supplementary_task(s),
                    &mut stream(seed, "supplementary-task"),
                )
            })
            .transpose()
    }
}

fn at(path: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("at `{path}`: {m}")),
        other => other,
    }
}

/// JSON Schema of [`ExperimentConfig`].
pub fn schema() -> Value {
    serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}
