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

//! Teacher-to-student layer mappings.
//!
//! The EMD mapping solves the transportation problem between uniform
//! marginals exactly. Scaling supplies to integers (`M` per teacher layer,
//! `L` per student layer) turns it into an integral min-cost flow that
//! successive shortest paths solve without any tolerance knob.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::distill::{self, LayerPair, ObjectiveConfig};
use crate::error::{config, contract, Error, Result};
use crate::model::ForwardTrace;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Last,
    Uniform,
    Emd,
}

/// Which pair loss prices an EMD cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum EmdCost {
    Mha,
    Ir,
    #[default]
    Sum,
}

fn default_refresh() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MappingSpec {
    pub strategy: Strategy,
    #[serde(default = "default_refresh")]
    pub emd_refresh_interval: usize,
    #[serde(default)]
    pub emd_cost: EmdCost,
}

impl Default for MappingSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::Last,
            emd_refresh_interval: default_refresh(),
            emd_cost: EmdCost::Sum,
        }
    }
}

impl MappingSpec {
    pub fn validate(&self, teacher_layers: usize, student_layers: usize) -> Result<()> {
        if teacher_layers == 0 || student_layers == 0 {
            return config("layer counts must be positive");
        }
        if self.emd_refresh_interval == 0 {
            return config("emd_refresh_interval must be positive");
        }
        if self.strategy == Strategy::Uniform {
            map_uniform(teacher_layers, student_layers)?;
        }
        Ok(())
    }
}

pub fn map_last(teacher_layers: usize, student_layers: usize) -> Vec<LayerPair> {
    vec![LayerPair::new(teacher_layers, student_layers, 1.0)]
}

/// Student layer `k` learns from teacher layer `k * L / M`.
pub fn map_uniform(teacher_layers: usize, student_layers: usize) -> Result<Vec<LayerPair>> {
    if student_layers == 0 || !teacher_layers.is_multiple_of(student_layers) {
        return config(format!(
            "uniform mapping needs teacher layers ({teacher_layers}) divisible by student layers ({student_layers})"
        ));
    }
    let step = teacher_layers / student_layers;
    Ok((1..=student_layers)
        .map(|k| LayerPair::new(k * step, k, 1.0))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    /// `flow[i][j]` mass moved from teacher layer `i+1` to student layer `j+1`.
    pub flow: Vec<Vec<f64>>,
    pub row_marginals: Vec<f64>,
    pub col_marginals: Vec<f64>,
    pub cost: f64,
}

impl TransportPlan {
    /// Nonzero cells as loss pairs weighted `f * M`, so a one-hot plan
    /// reproduces unit-weight layer-to-layer distillation.
    pub fn pairs(&self) -> Vec<LayerPair> {
        let m = self.col_marginals.len() as f64;
        let mut out = Vec::new();
        for (i, row) in self.flow.iter().enumerate() {
            for (j, &f) in row.iter().enumerate() {
                if f > 1e-12 {
                    out.push(LayerPair::new(i + 1, j + 1, f * m));
                }
            }
        }
        out
    }
}

struct Edge {
    to: usize,
    cap: i64,
    cost: f64,
}

/// Exact transport between uniform marginals `1/L` and `1/M`.
pub fn map_emd(cost: &[Vec<f64>]) -> Result<TransportPlan> {
    let l = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if l == 0 || m == 0 || cost.iter().any(|r| r.len() != m) {
        return config("EMD cost matrix must be a non-empty rectangle");
    }
    for row in cost {
        for &c in row {
            if !c.is_finite() || c < 0.0 {
                return contract(format!("EMD costs must be finite and >= 0, got {c}"));
            }
        }
    }

    let (src, sink) = (0, l + m + 1);
    let n_nodes = l + m + 2;
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj = vec![Vec::new(); n_nodes];
    let mut add = |edges: &mut Vec<Edge>, a: usize, b: usize, cap: i64, c: f64| {
        adj[a].push(edges.len());
        edges.push(Edge {
            to: b,
            cap,
            cost: c,
        });
        adj[b].push(edges.len());
        edges.push(Edge {
            to: a,
            cap: 0,
            cost: -c,
        });
    };
    let total = (l * m) as i64;
    for i in 0..l {
        add(&mut edges, src, 1 + i, m as i64, 0.0);
    }
    let mut cell_edge = vec![vec![0; m]; l];
    for i in 0..l {
        for j in 0..m {
            cell_edge[i][j] = edges.len();
            add(&mut edges, 1 + i, 1 + l + j, total, cost[i][j]);
        }
    }
    for j in 0..m {
        add(&mut edges, 1 + l + j, sink, l as i64, 0.0);
    }

    let mut sent = 0;
    while sent < total {
        // Bellman-Ford: residual arcs may carry negative cost
        let mut dist = vec![f64::INFINITY; n_nodes];
        let mut via = vec![usize::MAX; n_nodes];
        dist[src] = 0.0;
        for _ in 0..n_nodes {
            let mut changed = false;
            for u in 0..n_nodes {
                if dist[u].is_infinite() {
                    continue;
                }
                for &e in &adj[u] {
                    let edge = &edges[e];
                    if edge.cap > 0 && dist[u] + edge.cost < dist[edge.to] - 1e-15 {
                        dist[edge.to] = dist[u] + edge.cost;
                        via[edge.to] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink].is_infinite() {
            return Err(Error::Numeric("transport flow network disconnected".into()));
        }
        let mut push = total - sent;
        let mut v = sink;
        while v != src {
            let e = via[v];
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = sink;
        while v != src {
            let e = via[v];
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            v = edges[e ^ 1].to;
        }
        sent += push;
    }

    let scale = 1.0 / total as f64;
    let flow: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            (0..m)
                .map(|j| edges[cell_edge[i][j] ^ 1].cap as f64 * scale)
                .collect()
        })
        .collect();
    let plan_cost = flow
        .iter()
        .zip(cost)
        .map(|(f, c)| f.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let row_marginals = flow.iter().map(|r| r.iter().sum()).collect();
    let col_marginals = (0..m).map(|j| flow.iter().map(|r| r[j]).sum()).collect();
    Ok(TransportPlan {
        flow,
        row_marginals,
        col_marginals,
        cost: plan_cost,
    })
}

/// `[L][M]` matrix of detached single-pair distillation losses.
pub fn emd_costs(
    tape: &mut Tape,
    teacher: &ForwardTrace,
    student: &ForwardTrace,
    objective: &ObjectiveConfig,
    which: EmdCost,
    projection: Var,
) -> Result<Vec<Vec<f64>>> {
    let (l, m) = (teacher.num_layers(), student.num_layers());
    let mut out = vec![vec![0.0; m]; l];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let pair = [LayerPair::new(i + 1, j + 1, 1.0)];
            let mut c = 0.0;
            if matches!(which, EmdCost::Mha | EmdCost::Sum) {
                let v = distill::loss_mha(tape, teacher, student, &pair, objective.mha_metric)?;
                c += tape.value(v).item()?;
            }
            if matches!(which, EmdCost::Ir | EmdCost::Sum) {
                let v = match objective.ir_variant {
                    distill::IrVariant::Pool => {
                        distill::loss_ir_pool(tape, teacher, student, &pair, projection)?
                    }
                    distill::IrVariant::Patience => {
                        distill::loss_ir_patience(tape, teacher, student, &pair)?
                    }
                };
                c += tape.value(v).item()?;
            }
            // kld smoothing can leave a tiny negative residue
            *cell = c.max(0.0);
        }
    }
    Ok(out)
}
