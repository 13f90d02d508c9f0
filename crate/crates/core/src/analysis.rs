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

//! Diagnostic probes on trained models and a numerical check of the
//! second-order MixUp expansion.
//!
//! The probes only read models: dropout is off and nothing is written back.
//! The expansion verifier instantiates its own premise (a linear map and a
//! strictly convex quadratic loss) so that every quantity has a closed form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset, Example};
use crate::error::{config, contract, Result};
use crate::model::TransformerModel;
use crate::pipeline::{pearson, ranks, supervised_loss, Adam, Metric, EVAL_BATCH};
use crate::rng::{stream, Rng};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub coords: Vec<f64>,
    pub value: f64,
    /// Sample std over Monte Carlo draws; zero for deterministic points.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: String,
    /// One name per coordinate, used as CSV header.
    pub axes: Vec<String>,
    pub params: serde_json::Value,
    pub points: Vec<ProbePoint>,
    pub summary: BTreeMap<String, f64>,
}

impl ProbeReport {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.axes.join(",");
        out.push_str(",value,spread\n");
        for p in &self.points {
            for c in &p.coords {
                out.push_str(&format!("{c},"));
            }
            out.push_str(&format!("{},{}\n", p.value, p.spread));
        }
        out
    }

    /// Writes `{stem}.csv` and `{stem}.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Mean supervised loss over `examples` (their observed labels), with
/// optional Gaussian noise of scale `sigma` added to the input embeddings.
fn dataset_loss(
    model: &TransformerModel,
    examples: &[Example],
    noise: Option<(f64, &mut Rng)>,
) -> Result<f64> {
    if examples.is_empty() {
        return config("cannot evaluate a loss on an empty example set");
    }
    let regression = model.config.is_regression();
    let order: Vec<usize> = (0..examples.len()).collect();
    let mut tape = Tape::new();
    let mut total = 0.0;
    let mut noise = noise;
    for b in batches(examples, &order, EVAL_BATCH) {
        let b = b?;
        tape.reset();
        let w = model.bind(&mut tape, false);
        let mut emb = model.embed_inputs(&mut tape, &w, &b)?;
        if let Some((sigma, rng)) = noise.as_mut() {
            let shape = tape.shape(emb).to_vec();
            let eps = Tensor::from_fn(&shape, |_| {
                *sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut **rng)
            });
            let c = tape.constant(eps);
            emb = tape.add(emb, c)?;
        }
        let tr =
            model.forward_embedded(&mut tape, &w, emb, &b.mask, b.batch_size, b.seq_len, None)?;
        let loss = supervised_loss(&mut tape, tr.logits, &b, regression)?;
        total += tape.value(loss).item()? * b.batch_size as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Clean training loss in eval mode.
pub fn train_loss(model: &TransformerModel, dataset: &Dataset) -> Result<f64> {
    dataset_loss(model, &dataset.train, None)
}

/// Training loss as a function of the embedding-noise radius. Each sigma
/// draws from its own stream of `seed`, so curves of different models are
/// compared under identical noise.
pub fn noise_robustness_probe(
    model: &TransformerModel,
    dataset: &Dataset,
    sigmas: &[f64],
    draws: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if draws == 0 {
        return config("the noise probe needs at least one draw per sigma");
    }
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return config(format!(
            "noise radius must be finite and nonnegative, got {s}"
        ));
    }
    let mut points = Vec::with_capacity(sigmas.len());
    for (k, &sigma) in sigmas.iter().enumerate() {
        if sigma == 0.0 {
            let clean = dataset_loss(model, &dataset.train, None)?;
            points.push(ProbePoint {
                coords: vec![0.0],
                value: clean,
                spread: 0.0,
            });
            continue;
        }
        let mut rng = stream(seed, &format!("noise-probe/{k}"));
        let losses = (0..draws)
            .map(|_| dataset_loss(model, &dataset.train, Some((sigma, &mut rng))))
            .collect::<Result<Vec<_>>>()?;
        let (mean, std) = crate::pipeline::mean_std(&losses);
        points.push(ProbePoint {
            coords: vec![sigma],
            value: mean,
            spread: std,
        });
    }
    let inversions = points
        .windows(2)
        .filter(|w| w[1].value < w[0].value)
        .count();
    Ok(ProbeReport {
        kind: "noise_robustness".into(),
        axes: vec!["sigma".into()],
        params: serde_json::json!({ "sigmas": sigmas, "draws": draws, "seed": seed }),
        points,
        summary: BTreeMap::from([("inversions".to_string(), inversions as f64)]),
    })
}

/// Mean of the non-pad hidden states of `layer` (0 = embeddings) for each
/// example.
pub fn pooled_features(
    model: &TransformerModel,
    examples: &[Example],
    layer: usize,
) -> Result<Vec<Vec<f64>>> {
    if layer > model.config.num_layers {
        return config(format!(
            "layer {layer} out of range for a {}-layer model",
            model.config.num_layers
        ));
    }
    let d = model.config.hidden_dim;
    let order: Vec<usize> = (0..examples.len()).collect();
    let mut tape = Tape::new();
    let mut out = Vec::with_capacity(examples.len());
    for b in batches(examples, &order, EVAL_BATCH) {
        let b = b?;
        tape.reset();
        let w = model.bind(&mut tape, false);
        let tr = model.forward(&mut tape, &w, &b, None)?;
        let h = tape.value(tr.layer_hidden(layer)?).data();
        for e in 0..b.batch_size {
            let mut acc = vec![0.0; d];
            let mut count = 0.0;
            for s in 0..b.seq_len {
                if b.mask[e * b.seq_len + s] > 0.0 {
                    let row = &h[(e * b.seq_len + s) * d..][..d];
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    count += 1.0;
                }
            }
            acc.iter_mut().for_each(|a| *a /= count);
            out.push(acc);
        }
    }
    Ok(out)
}

/// Linear classifier (or regressor) on frozen pooled features of `layer`,
/// trained full-batch on the clean training labels. Returns the clean dev
/// metric.
pub fn linear_probe(model: &TransformerModel, dataset: &Dataset, layer: usize) -> Result<Metric> {
    const STEPS: usize = 300;
    const LR: f64 = 0.05;
    let regression = model.config.is_regression();
    let outputs = model.config.num_classes;
    let train = pooled_features(model, &dataset.train, layer)?;
    let dev = pooled_features(model, &dataset.dev, layer)?;
    if train.is_empty() || dev.is_empty() {
        return config("linear probe needs non-empty train and dev splits");
    }
    let d = train[0].len();

    // standardize with train statistics
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|c| train.iter().map(|r| r[c]).sum::<f64>() / n)
        .collect();
    let scale: Vec<f64> = (0..d)
        .map(|c| {
            let var = train.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
            if var > 1e-12 {
                1.0 / var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let design = |rows: &[Vec<f64>]| -> Result<Tensor> {
        let data = rows
            .iter()
            .flat_map(|r| (0..d).map(|c| (r[c] - mean[c]) * scale[c]))
            .collect();
        Tensor::new(vec![rows.len(), d], data)
    };
    let x_train = design(&train)?;
    let x_dev = design(&dev)?;

    let mut weight = Tensor::zeros(&[d, outputs]);
    let mut bias = Tensor::zeros(&[outputs]);
    let mut opt = Adam::new(LR, STEPS, 0.0, 0.0);
    let mut tape = Tape::new();
    let clean: Vec<_> = dataset.train.iter().map(|e| e.clean_label).collect();
    for _ in 0..STEPS {
        tape.reset();
        let x = tape.constant(x_train.clone());
        let (w, b) = (tape.param(weight.clone()), tape.param(bias.clone()));
        let xw = tape.matmul(x, w)?;
        let logits = tape.add_row(xw, b)?;
        let loss = if regression {
            let y = clean.iter().map(|l| l.real()).collect::<Result<Vec<_>>>()?;
            let t = tape.constant(Tensor::new(vec![y.len(), 1], y)?);
            tape.mse(logits, t)?
        } else {
            let y = clean
                .iter()
                .map(|l| l.class())
                .collect::<Result<Vec<_>>>()?;
            tape.cross_entropy(logits, &y)?
        };
        let g = tape.backward(loss)?;
        let grads = [g.wrt(w), g.wrt(b)];
        opt.step(&mut [&mut weight, &mut bias], &grads)?;
    }

    let logits: Vec<Vec<f64>> = x_dev
        .data()
        .chunks(d)
        .map(|row| {
            (0..outputs)
                .map(|o| {
                    bias.data()[o]
                        + row
                            .iter()
                            .enumerate()
                            .map(|(c, v)| v * weight.data()[c * outputs + o])
                            .sum::<f64>()
                })
                .collect()
        })
        .collect();
    if regression {
        let pred: Vec<f64> = logits.iter().map(|l| l[0]).collect();
        let gold = dataset
            .dev
            .iter()
            .map(|e| e.clean_label.real())
            .collect::<Result<Vec<_>>>()?;
        return Ok(Metric {
            accuracy: None,
            pearson: Some(pearson(&pred, &gold)),
            spearman: Some(pearson(&ranks(&pred), &ranks(&gold))),
        });
    }
    let mut correct = 0;
    for (l, e) in logits.iter().zip(&dataset.dev) {
        let arg = (0..outputs)
            .max_by(|&a, &b| l[a].total_cmp(&l[b]))
            .unwrap_or(0);
        correct += usize::from(arg == e.clean_label.class()?);
    }
    Ok(Metric {
        accuracy: Some(correct as f64 / dev.len() as f64),
        pearson: None,
        spearman: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SurfaceGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for SurfaceGrid {
    fn default() -> Self {
        Self {
            lo: -1.0,
            hi: 2.0,
            points: 25,
        }
    }
}

impl SurfaceGrid {
    pub fn coords(&self) -> Vec<f64> {
        match self.points {
            0 => Vec::new(),
            1 => vec![self.lo],
            n => (0..n)
                .map(|k| self.lo + k as f64 * (self.hi - self.lo) / (n - 1) as f64)
                .collect(),
        }
    }
}

/// Training loss on the plane `theta0 + a*(theta1 - theta0) + b*(theta2 -
/// theta0)`, row-major in `a` then `b`.
pub fn loss_surface(
    theta0: &TransformerModel,
    theta1: &TransformerModel,
    theta2: &TransformerModel,
    dataset: &Dataset,
    grid: SurfaceGrid,
) -> Result<ProbeReport> {
    if theta1.config != theta0.config || theta2.config != theta0.config {
        return config("loss surface endpoints must share one model layout");
    }
    if grid.points == 0 || !(grid.lo.is_finite() && grid.hi.is_finite()) {
        return config("loss surface grid needs at least one finite point");
    }
    let p0 = theta0.flat_params();
    let d1: Vec<f64> = theta1
        .flat_params()
        .iter()
        .zip(&p0)
        .map(|(a, b)| a - b)
        .collect();
    let d2: Vec<f64> = theta2
        .flat_params()
        .iter()
        .zip(&p0)
        .map(|(a, b)| a - b)
        .collect();
    let mut probe = theta0.clone();
    let mut buf = vec![0.0; p0.len()];
    let axis = grid.coords();
    let mut points = Vec::with_capacity(axis.len() * axis.len());
    for &a in &axis {
        for &b in &axis {
            for (k, x) in buf.iter_mut().enumerate() {
                *x = p0[k] + a * d1[k] + b * d2[k];
            }
            probe.set_flat_params(&buf)?;
            let value = dataset_loss(&probe, &dataset.train, None)?;
            points.push(ProbePoint {
                coords: vec![a, b],
                value,
                spread: 0.0,
            });
        }
    }
    let min = points.iter().map(|p| p.value).fold(f64::INFINITY, f64::min);
    Ok(ProbeReport {
        kind: "loss_surface".into(),
        axes: vec!["alpha".into(), "beta".into()],
        params: serde_json::to_value(grid)?,
        points,
        summary: BTreeMap::from([("min".to_string(), min)]),
    })
}

/// Nodes (mapped to `[0,1]`) and weights of the `n`-point Gauss rule for
/// `Beta(alpha, alpha)`, via the eigen-decomposition of the symmetric
/// Jacobi matrix (Golub-Welsch). Exact for polynomials up to degree
/// `2n - 1`.
pub fn beta_quadrature(alpha: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return config(format!("Beta shape must be positive, got {alpha}"));
    }
    if n == 0 {
        return config("quadrature needs at least one node");
    }
    // Jacobi weight (1-x)^a (1+x)^a on [-1,1] with a = alpha - 1; the
    // recurrence is symmetric so the diagonal vanishes.
    let a = alpha - 1.0;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let beta = if k == 1 {
            1.0 / (2.0 * alpha + 1.0)
        } else {
            kf * (kf + 2.0 * a) / ((2.0 * kf + 2.0 * a + 1.0) * (2.0 * kf + 2.0 * a - 1.0))
        };
        jac[(k - 1, k)] = beta.sqrt();
        jac[(k, k - 1)] = beta.sqrt();
    }
    let eig = jac.symmetric_eigen();
    let mut rule: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            (
                (1.0 + eig.eigenvalues[k]) / 2.0,
                eig.eigenvectors[(0, k)].powi(2),
            )
        })
        .collect();
    rule.sort_by(|x, y| x.0.total_cmp(&y.0));
    Ok(rule.into_iter().unzip())
}

/// Closed-form `E[lambda^2]` under `Beta(alpha, alpha)`.
pub fn beta_second_moment(alpha: f64) -> f64 {
    (alpha + 1.0) / (4.0 * alpha + 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaMomentReport {
    pub alpha: f64,
    pub mean_quadrature: f64,
    pub mean_closed: f64,
    pub second_quadrature: f64,
    pub second_closed: f64,
    pub max_abs_diff: f64,
}

pub fn beta_moment_check(alpha: f64) -> Result<BetaMomentReport> {
    let (nodes, weights) = beta_quadrature(alpha, 2)?;
    let moment = |p: i32| {
        nodes
            .iter()
            .zip(&weights)
            .map(|(x, w)| w * x.powi(p))
            .sum::<f64>()
    };
    let (m1, m2) = (moment(1), moment(2));
    let (c1, c2) = (0.5, beta_second_moment(alpha));
    Ok(BetaMomentReport {
        alpha,
        mean_quadrature: m1,
        mean_closed: c1,
        second_quadrature: m2,
        second_closed: c2,
        max_abs_diff: (m1 - c1).abs().max((m2 - c2).abs()),
    })
}

/// A model that is exactly affine on convex combinations (a linear map)
/// paired with the quadratic loss `l(z) = z'Az/2 + b'z` on the joint
/// vector `z = [f(h); y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaylorSetup {
    pub map: DMatrix<f64>,
    pub inputs: Vec<DVector<f64>>,
    pub targets: Vec<DVector<f64>>,
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub alpha: f64,
}

impl TaylorSetup {
    /// Random instance with `A = Q'Q + 0.1 I`, which is positive definite.
    pub fn random(
        points: usize,
        input_dim: usize,
        output_dim: usize,
        target_dim: usize,
        alpha: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
        let m = output_dim + target_dim;
        let map = DMatrix::from_fn(output_dim, input_dim, |_, _| {
            normal() / (input_dim as f64).sqrt()
        });
        let inputs = (0..points)
            .map(|_| DVector::from_fn(input_dim, |_, _| normal()))
            .collect();
        let targets = (0..points)
            .map(|_| DVector::from_fn(target_dim, |_, _| normal()))
            .collect();
        let q = DMatrix::from_fn(m, m, |_, _| normal());
        let hessian = q.transpose() * &q + DMatrix::identity(m, m) * 0.1;
        let linear = DVector::from_fn(m, |_, _| normal());
        Self {
            map,
            inputs,
            targets,
            hessian,
            linear,
            alpha,
        }
    }

    fn joint(&self, h: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let u = &self.map * h;
        DVector::from_iterator(u.len() + y.len(), u.iter().chain(y.iter()).copied())
    }

    fn loss(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    fn validate(&self) -> Result<()> {
        let m = self.map.nrows() + self.targets.first().map_or(0, |t| t.len());
        if self.inputs.is_empty() || self.inputs.len() != self.targets.len() {
            return config("expansion setup needs matching, non-empty input and target lists");
        }
        if self.inputs.iter().any(|h| h.len() != self.map.ncols())
            || self.targets.iter().any(|y| y.len() + self.map.nrows() != m)
            || self.hessian.shape() != (m, m)
            || self.linear.len() != m
        {
            return config("expansion setup has inconsistent dimensions");
        }
        if (&self.hessian - self.hessian.transpose()).amax() > 1e-12 * self.hessian.amax().max(1.0)
        {
            return config("loss Hessian must be symmetric");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub alpha: f64,
    pub points: usize,
    pub l_std: f64,
    /// MixUp loss by exact Beta quadrature of the mixed forward pass.
    pub l_mix_numeric: f64,
    /// Standard loss plus the first- and second-order terms in lambda.
    pub l_mix_taylor: f64,
    /// The same expansion with the quadratic completed in `v`.
    pub l_mix_completed_square: f64,
    pub max_abs_diff: f64,
}

/// Evaluates the MixUp loss three ways on a setup satisfying the affine
/// premise. With `v = z_i - z_j` the mixed point is `z_j + lambda v`, so
///
/// ```text
/// L_mix = L_std + 1/n^2 sum_ij [ D_j v / 2 + E[lambda^2] v'H v / 2 ]
///       = L_std + (a+1)/((8a+4) n^2) sum_ij |v + (2a+1)/(a+1) H^-1 D_j'|_H^2
///               - (2a+1)/((4a+4) n) sum_j D_j H^-1 D_j'
/// ```
///
/// The completed square needs `H^-1`; a singular or indefinite Hessian is a
/// contract violation.
pub fn verify_mixup_expansion(setup: &TaylorSetup) -> Result<ExpansionReport> {
    setup.validate()?;
    let alpha = setup.alpha;
    let Some(chol) = setup.hessian.clone().cholesky() else {
        return contract("the completed-square form needs a positive-definite loss Hessian");
    };
    let n = setup.inputs.len();
    let nf = n as f64;
    let z: Vec<DVector<f64>> = setup
        .inputs
        .iter()
        .zip(&setup.targets)
        .map(|(h, y)| setup.joint(h, y))
        .collect();
    let grad: Vec<DVector<f64>> = z
        .iter()
        .map(|zj| &setup.hessian * zj + &setup.linear)
        .collect();
    let l_std = z.iter().map(|zi| setup.loss(zi)).sum::<f64>() / nf;

    let (nodes, weights) = beta_quadrature(alpha, 2)?;
    let mut numeric = 0.0;
    for i in 0..n {
        for j in 0..n {
            for (&lam, &w) in nodes.iter().zip(&weights) {
                let h = &setup.inputs[i] * lam + &setup.inputs[j] * (1.0 - lam);
                let y = &setup.targets[i] * lam + &setup.targets[j] * (1.0 - lam);
                numeric += w * setup.loss(&setup.joint(&h, &y));
            }
        }
    }
    let l_mix_numeric = numeric / (nf * nf);

    let e2 = beta_second_moment(alpha);
    let shift = (2.0 * alpha + 1.0) / (alpha + 1.0);
    let (mut taylor, mut square, mut offset) = (0.0, 0.0, 0.0);
    for j in 0..n {
        let h_inv_d = chol.solve(&grad[j]);
        offset += grad[j].dot(&h_inv_d);
        for i in 0..n {
            let v = &z[i] - &z[j];
            taylor += 0.5 * grad[j].dot(&v) + 0.5 * e2 * v.dot(&(&setup.hessian * &v));
            let s = &v + &h_inv_d * shift;
            square += s.dot(&(&setup.hessian * &s));
        }
    }
    let l_mix_taylor = l_std + taylor / (nf * nf);
    let l_mix_completed_square = l_std + (alpha + 1.0) / ((8.0 * alpha + 4.0) * nf * nf) * square
        - (2.0 * alpha + 1.0) / ((4.0 * alpha + 4.0) * nf) * offset;
    let max_abs_diff = (l_mix_numeric - l_mix_taylor)
        .abs()
        .max((l_mix_taylor - l_mix_completed_square).abs())
        .max((l_mix_numeric - l_mix_completed_square).abs());
    Ok(ExpansionReport {
        alpha,
        points: n,
        l_std,
        l_mix_numeric,
        l_mix_taylor,
        l_mix_completed_square,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_task, TaskFamily, TaskSpec};
    use crate::model::ModelConfig;

    /// `E[lambda^k]` for `Beta(a, a)`: prod_{r<k} (a + r) / (2a + r).
    fn beta_moment(alpha: f64, k: u32) -> f64 {
        (0..k)
            .map(|r| (alpha + r as f64) / (2.0 * alpha + r as f64))
            .product()
    }

    #[test]
    fn quadrature_is_exact_to_its_degree() {
        for alpha in [0.3, 0.5, 1.0, 2.0, 3.0, 7.5] {
            for n in 1..=6 {
                let (x, w) = beta_quadrature(alpha, n).unwrap();
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-13);
                for k in 0..(2 * n as u32) {
                    let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                    assert!(
                        (q - beta_moment(alpha, k)).abs() < 1e-12,
                        "alpha {alpha} n {n} k {k}"
                    );
                }
            }
        }
    }

    #[test]
    fn beta_moments_match_closed_forms() {
        let one = beta_moment_check(1.0).unwrap();
        assert!((one.second_quadrature - 1.0 / 3.0).abs() < 1e-14);
        let half = beta_moment_check(0.5).unwrap();
        assert!((half.second_closed - 0.375).abs() < 1e-15);
        assert!((half.second_quadrature - 0.375).abs() < 1e-14);
        for alpha in [0.5, 1.0, 2.0, 3.0] {
            let r = beta_moment_check(alpha).unwrap();
            assert!((r.mean_quadrature - 0.5).abs() < 1e-14);
            assert!(r.max_abs_diff < 1e-12);
        }
        assert!(beta_moment_check(0.0).is_err());
    }

    #[test]
    fn expansion_forms_agree() {
        let mut rng = stream(17, "taylor");
        for alpha in [0.5, 1.0, 2.0, 3.0] {
            let s = TaylorSetup::random(3, 4, 2, 2, alpha, &mut rng);
            let r = verify_mixup_expansion(&s).unwrap();
            assert!((r.l_mix_numeric - r.l_mix_taylor).abs() < 1e-10, "{r:?}");
            assert!(
                (r.l_mix_taylor - r.l_mix_completed_square).abs() < 1e-10,
                "{r:?}"
            );
        }
    }

    #[test]
    fn single_point_mixup_is_the_standard_loss() {
        let s = TaylorSetup::random(1, 3, 2, 1, 1.0, &mut stream(2, "taylor"));
        let r = verify_mixup_expansion(&s).unwrap();
        assert_eq!(r.l_mix_taylor, r.l_std);
        assert!((r.l_mix_numeric - r.l_std).abs() < 1e-12);
    }

    #[test]
    fn singular_hessian_is_rejected() {
        let mut s = TaylorSetup::random(3, 3, 2, 1, 1.0, &mut stream(3, "taylor"));
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        s.hessian = &v * v.transpose();
        assert!(matches!(
            verify_mixup_expansion(&s),
            Err(crate::Error::Contract(_))
        ));
    }

    fn tiny() -> (TransformerModel, Dataset) {
        let spec = TaskSpec {
            family: TaskFamily::SingleSentence,
            rule_seed: 2,
            vocab_size: 24,
            num_classes: 2,
            nominal_seq_len: 8,
            effective_len: 6,
            dataset_size: 40,
            similarity: 0.0,
            label_noise: 0.0,
            regression: false,
        };
        let d = generate_task(&spec, &mut stream(1, "gen")).unwrap();
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 24,
            max_seq_len: 8,
            num_classes: 2,
            dropout: 0.1,
        };
        (TransformerModel::new(cfg, &mut stream(1, "m")).unwrap(), d)
    }

    #[test]
    fn zero_noise_is_the_clean_loss() {
        let (m, d) = tiny();
        let r = noise_robustness_probe(&m, &d, &[0.0, 0.1, 0.5], 3, 9).unwrap();
        assert_eq!(r.points[0].value, train_loss(&m, &d).unwrap());
        assert_eq!(
            r.points.iter().map(|p| p.coords[0]).collect::<Vec<_>>(),
            vec![0.0, 0.1, 0.5]
        );
        let again = noise_robustness_probe(&m.clone(), &d, &[0.0, 0.1, 0.5], 3, 9).unwrap();
        assert_eq!(r, again);
        assert!(noise_robustness_probe(&m, &d, &[-0.1], 3, 9).is_err());
    }

    #[test]
    fn surface_corners_are_the_endpoints() {
        let (m0, d) = tiny();
        let m1 = TransformerModel::new(m0.config.clone(), &mut stream(2, "m")).unwrap();
        let m2 = TransformerModel::new(m0.config.clone(), &mut stream(3, "m")).unwrap();
        let grid = SurfaceGrid {
            lo: -1.0,
            hi: 2.0,
            points: 7,
        };
        let r = loss_surface(&m0, &m1, &m2, &d, grid).unwrap();
        assert_eq!(r.points.len(), 49);
        let at = |a: f64, b: f64| r.points.iter().find(|p| p.coords == [a, b]).unwrap().value;
        assert!((at(0.0, 0.0) - train_loss(&m0, &d).unwrap()).abs() < 1e-12);
        assert!((at(1.0, 0.0) - train_loss(&m1, &d).unwrap()).abs() < 1e-12);
        assert!((at(0.0, 1.0) - train_loss(&m2, &d).unwrap()).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 50);

        let flat = loss_surface(&m0, &m0, &m0, &d, grid).unwrap();
        let base = flat.points[0].value;
        assert!(flat.points.iter().all(|p| p.value == base));

        let mut other = m0.config.clone();
        other.ffn_dim = 8;
        let odd = TransformerModel::new(other, &mut stream(4, "m")).unwrap();
        assert!(loss_surface(&m0, &odd, &m2, &d, grid).is_err());
    }

    #[test]
    fn probe_is_repeatable_and_checks_layer() {
        let (m, d) = tiny();
        let a = linear_probe(&m, &d, 1).unwrap();
        assert_eq!(a, linear_probe(&m, &d, 1).unwrap());
        assert!(linear_probe(&m, &d, 3).is_err());
    }
}
