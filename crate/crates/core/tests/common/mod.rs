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

//! Independent oracles shared by the integration suites.

#![allow(dead_code)]

use ildlab::crild::{self, CrConfig, MixPlan, StepModels};
use ildlab::data::{Batch, Example, Label};
use ildlab::distill::{self, LayerPair, MhaMetric, ObjectiveConfig};
use ildlab::model::{ModelConfig, TransformerModel, Weights};
use ildlab::rng::{stream, Rng};
use ildlab::tensor::{Tape, Tensor, Var};
use rand::Rng as _;

/// Finite-difference step. Central differences in f64 leave roughly
/// `1e-10` of truncation plus rounding error at this size.
const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely. Differencing
/// an O(1) loss leaves about `1e-10` of rounding noise, so a smaller floor
/// would flag near-zero gradients (sums of normalized rows, say) that are
/// correct.
const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item().expect("scalar loss")
}

/// Largest relative error between the tape gradient of `build` and central
/// differences, over every coordinate of every input.
pub fn gradcheck(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        scalar(&tape, loss)
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let x = input.data()[i];
            work[k].data_mut()[i] = x + FD_STEP;
            let up = eval(&work);
            work[k].data_mut()[i] = x - FD_STEP;
            let down = eval(&work);
            work[k].data_mut()[i] = x;
            worst = worst.max(rel_err(
                analytic[k].data()[i],
                (up - down) / (2.0 * FD_STEP),
            ));
        }
    }
    worst
}

/// Contracts an arbitrary output against a fixed random weight so that the
/// whole Jacobian contributes to the checked scalar.
fn probe_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let n = tape.value(out).numel();
    let mut r = stream(seed, "probe-weights");
    let w = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let y = tape.mul_const(out, w).unwrap();
    tape.sum(y)
}

pub type OpCase = (&'static str, fn(u64) -> f64);

/// One entry per differentiable tape operation.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |s| {
            let mut r = stream(s, "matmul");
            gradcheck(
                &[
                    random_tensor(&[3, 4], &mut r),
                    random_tensor(&[4, 5], &mut r),
                ],
                &|t, v| {
                    let y = t.matmul(v[0], v[1]).unwrap();
                    probe_sum(t, y, s)
                },
            )
        }),
        ("batch_matmul", |s| {
            let mut r = stream(s, "bmm");
            gradcheck(
                &[
                    random_tensor(&[2, 3, 4], &mut r),
                    random_tensor(&[2, 4, 5], &mut r),
                ],
                &|t, v| {
                    let y = t.batch_matmul(v[0], v[1], false).unwrap();
                    probe_sum(t, y, s)
                },
            )
        }),
        ("batch_matmul_transposed", |s| {
            let mut r = stream(s, "bmmt");
            gradcheck(
                &[
                    random_tensor(&[2, 3, 4], &mut r),
                    random_tensor(&[2, 5, 4], &mut r),
                ],
                &|t, v| {
                    let y = t.batch_matmul(v[0], v[1], true).unwrap();
                    probe_sum(t, y, s)
                },
            )
        }),
        ("add_sub_mul", |s| {
            let mut r = stream(s, "elementwise");
            let shape = [3, 4];
            let inputs = [
                random_tensor(&shape, &mut r),
                random_tensor(&shape, &mut r),
                random_tensor(&shape, &mut r),
            ];
            gradcheck(&inputs, &|t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let b = t.sub(a, v[2]).unwrap();
                let c = t.mul(b, v[0]).unwrap();
                probe_sum(t, c, s)
            })
        }),
        ("add_row", |s| {
            let mut r = stream(s, "add_row");
            gradcheck(
                &[random_tensor(&[4, 5], &mut r), random_tensor(&[5], &mut r)],
                &|t, v| {
                    let y = t.add_row(v[0], v[1]).unwrap();
                    probe_sum(t, y, s)
                },
            )
        }),
        ("scale_and_mul_const", |s| {
            let mut r = stream(s, "scale");
            let factor: Vec<f64> = (0..12).map(|_| r.random_range(-2.0..2.0)).collect();
            gradcheck(&[random_tensor(&[3, 4], &mut r)], &move |t, v| {
                let y = t.scale(v[0], -1.7);
                let y = t.mul_const(y, factor.clone()).unwrap();
                probe_sum(t, y, s)
            })
        }),
        ("masked_softmax", |s| {
            let mut r = stream(s, "mask");
            let mask: Vec<f64> = [0.0, 0.0, -1e9, 0.0, -1e9, 0.0].to_vec();
            gradcheck(&[random_tensor(&[2, 2, 3, 3], &mut r)], &move |t, v| {
                let y = t.add_key_mask(v[0], &mask).unwrap();
                let y = t.softmax(y);
                probe_sum(t, y, s)
            })
        }),
        ("gelu", |s| {
            let mut r = stream(s, "gelu");
            let x = Tensor::from_fn(&[4, 5], |_| r.random_range(-4.0..4.0));
            gradcheck(&[x], &|t, v| {
                let y = t.gelu(v[0]);
                probe_sum(t, y, s)
            })
        }),
        ("softmax", |s| {
            let mut r = stream(s, "softmax");
            let x = Tensor::from_fn(&[3, 5], |_| r.random_range(-3.0..3.0));
            gradcheck(&[x], &|t, v| {
                let y = t.softmax(v[0]);
                probe_sum(t, y, s)
            })
        }),
        ("layer_norm", |s| {
            let mut r = stream(s, "ln");
            let inputs = [
                random_tensor(&[3, 6], &mut r),
                random_tensor(&[6], &mut r),
                random_tensor(&[6], &mut r),
            ];
            gradcheck(&inputs, &|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
                probe_sum(t, y, s)
            })
        }),
        ("gather_rows", |s| {
            let mut r = stream(s, "gather");
            gradcheck(&[random_tensor(&[4, 3], &mut r)], &|t, v| {
                let y = t.gather_rows(v[0], vec![2, 0, 2, 3, 2]).unwrap();
                probe_sum(t, y, s)
            })
        }),
        ("permute_transpose_reshape", |s| {
            let mut r = stream(s, "perm");
            gradcheck(&[random_tensor(&[2, 3, 4], &mut r)], &|t, v| {
                let y = t.permute(v[0], &[2, 0, 1]).unwrap();
                let y = t.reshape(y, &[4, 6]).unwrap();
                let y = t.transpose(y).unwrap();
                probe_sum(t, y, s)
            })
        }),
        ("sum_and_mean", |s| {
            let mut r = stream(s, "reduce");
            gradcheck(&[random_tensor(&[3, 4], &mut r)], &|t, v| {
                let sq = t.mul(v[0], v[0]).unwrap();
                let a = t.sum(sq);
                let b = t.mean(v[0]);
                let b = t.scale(b, 3.0);
                t.add(a, b).unwrap()
            })
        }),
        ("mse", |s| {
            let mut r = stream(s, "mse");
            gradcheck(
                &[
                    random_tensor(&[3, 4], &mut r),
                    random_tensor(&[3, 4], &mut r),
                ],
                &|t, v| t.mse(v[0], v[1]).unwrap(),
            )
        }),
        ("kld_rows", |s| {
            let mut r = stream(s, "kld");
            gradcheck(
                &[
                    random_tensor(&[3, 5], &mut r),
                    random_tensor(&[3, 5], &mut r),
                ],
                &|t, v| {
                    let p = t.softmax(v[0]);
                    let q = t.softmax(v[1]);
                    t.kld_rows(p, q, distill::KLD_EPS).unwrap()
                },
            )
        }),
        ("soft_cross_entropy", |s| {
            let mut r = stream(s, "sce");
            let teacher = random_tensor(&[4, 3], &mut r);
            gradcheck(&[random_tensor(&[4, 3], &mut r)], &move |t, v| {
                t.soft_cross_entropy(&teacher, v[0], 2.0).unwrap()
            })
        }),
        ("cross_entropy", |s| {
            let mut r = stream(s, "ce");
            let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
            gradcheck(&[random_tensor(&[4, 3], &mut r)], &move |t, v| {
                t.cross_entropy(v[0], &labels).unwrap()
            })
        }),
        ("l2_normalize_rows", |s| {
            let mut r = stream(s, "l2");
            gradcheck(&[random_tensor(&[3, 4], &mut r)], &|t, v| {
                let y = t.l2_normalize_rows(v[0]).unwrap();
                probe_sum(t, y, s)
            })
        }),
    ]
}

pub fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: 4,
        num_heads: 2,
        ffn_dim: 6,
        vocab_size: 9,
        max_seq_len: 5,
        num_classes: 3,
        dropout: 0.1,
    }
}

/// Two examples of different lengths so padding is exercised.
pub fn tiny_batch(seed: u64) -> Batch {
    let mut r = stream(seed, "tiny-batch");
    let lens = [5, 3];
    let examples: Vec<Example> = lens
        .iter()
        .map(|&n| {
            let mut tokens = vec![1];
            tokens.extend((1..n).map(|_| r.random_range(3..9u32)));
            tokens.resize(5, 0);
            let mask = (0..5).map(|i| u8::from(i < n)).collect();
            let label = Label::Class(r.random_range(0..3));
            Example {
                tokens,
                mask,
                label,
                clean_label: label,
            }
        })
        .collect();
    Batch::from_examples(&examples.iter().collect::<Vec<_>>()).unwrap()
}

type ModelBuild<'a> = dyn Fn(&mut Tape, &TransformerModel, &Weights<Var>, &[Var]) -> Var + 'a;

/// Gradient check over every parameter of `model` plus `extra` tensors,
/// rebuilding the model from a perturbed flat vector for each difference.
pub fn model_gradcheck(model: &TransformerModel, extra: &[Tensor], build: &ModelBuild) -> f64 {
    let np = model.num_params();
    let shapes: Vec<Vec<usize>> = extra.iter().map(|t| t.shape().to_vec()).collect();
    let eval = |theta: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let mut m = model.clone();
        m.set_flat_params(&theta[..np]).unwrap();
        let mut tape = Tape::new();
        let w = m.bind(&mut tape, true);
        let mut offset = np;
        let ev: Vec<Var> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), theta[offset..offset + n].to_vec()).unwrap();
                offset += n;
                tape.param(t)
            })
            .collect();
        let loss = build(&mut tape, &m, &w, &ev);
        let value = scalar(&tape, loss);
        if !want_grad {
            return (value, Vec::new());
        }
        let g = tape.backward(loss).unwrap();
        let mut flat: Vec<f64> = w
            .named()
            .iter()
            .flat_map(|(_, v)| g.wrt(**v).into_data())
            .collect();
        for v in &ev {
            flat.extend(g.wrt(*v).into_data());
        }
        (value, flat)
    };
    let mut theta = model.flat_params();
    for t in extra {
        theta.extend_from_slice(t.data());
    }
    let (_, analytic) = eval(&theta, true);
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let x = theta[i];
        theta[i] = x + FD_STEP;
        let up = eval(&theta, false).0;
        theta[i] = x - FD_STEP;
        let down = eval(&theta, false).0;
        theta[i] = x;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// Random weights with a larger spread than the initializer, so attention
/// is far from uniform and every path carries gradient.
pub fn spread_model(layers: usize, seed: u64) -> TransformerModel {
    let mut m = TransformerModel::new(tiny_config(layers), &mut stream(seed, "gc-model")).unwrap();
    let mut r = stream(seed, "gc-spread");
    let flat: Vec<f64> = m
        .flat_params()
        .iter()
        .map(|_| r.random_range(-0.8..0.8))
        .collect();
    m.set_flat_params(&flat).unwrap();
    m
}

/// Model-level and objective-level cases. Dropout, where used, draws from a
/// fixed stream so every evaluation sees the same mask.
pub fn model_cases() -> Vec<OpCase> {
    vec![
        ("model_cross_entropy", |s| {
            let m = spread_model(2, s);
            let b = tiny_batch(s);
            model_gradcheck(&m, &[], &|t, m, w, _| {
                let tr = m.forward(t, w, &b, Some(&mut stream(s, "drop"))).unwrap();
                t.cross_entropy(tr.logits, &b.class_labels().unwrap())
                    .unwrap()
            })
        }),
        ("loss_mha_kld_and_mse", |s| {
            let teacher = spread_model(2, s + 100);
            let student = spread_model(1, s);
            let b = tiny_batch(s);
            let pairs = [LayerPair::new(2, 1, 0.7)];
            model_gradcheck(&student, &[], &|t, m, w, _| {
                let tw = teacher.bind(t, false);
                let tt = teacher.forward(t, &tw, &b, None).unwrap();
                let st = m.forward(t, w, &b, Some(&mut stream(s, "drop"))).unwrap();
                let k = distill::loss_mha(t, &tt, &st, &pairs, MhaMetric::Kld).unwrap();
                let e = distill::loss_mha(t, &tt, &st, &pairs, MhaMetric::Mse).unwrap();
                t.add(k, e).unwrap()
            })
        }),
        ("loss_ir_pool_and_patience", |s| {
            let teacher = spread_model(2, s + 100);
            let student = spread_model(1, s);
            let b = tiny_batch(s);
            let proj = random_tensor(&[4, 4], &mut stream(s, "proj"));
            let pairs = [LayerPair::new(1, 1, 1.0), LayerPair::new(2, 1, 0.5)];
            model_gradcheck(&student, &[proj], &|t, m, w, ex| {
                let tw = teacher.bind(t, false);
                let tt = teacher.forward(t, &tw, &b, None).unwrap();
                let st = m.forward(t, w, &b, Some(&mut stream(s, "drop"))).unwrap();
                let pool = distill::loss_ir_pool(t, &tt, &st, &pairs, ex[0]).unwrap();
                let pat = distill::loss_ir_patience(t, &tt, &st, &pairs).unwrap();
                t.add(pool, pat).unwrap()
            })
        }),
        ("loss_pl", |s| {
            let student = spread_model(1, s);
            let b = tiny_batch(s);
            let teacher_logits = random_tensor(&[2, 3], &mut stream(s, "tl"));
            model_gradcheck(&student, &[], &|t, m, w, _| {
                let st = m.forward(t, w, &b, None).unwrap();
                distill::loss_pl(t, &teacher_logits, st.logits, 1.5).unwrap()
            })
        }),
        ("consistency_terms", |s| {
            let student = spread_model(2, s);
            let b = tiny_batch(s);
            let plan = MixPlan::new(0.3, vec![1, 0], &b.mask, 2, b.seq_len).unwrap();
            model_gradcheck(&student, &[], &|t, m, w, _| {
                let orig = m.forward(t, w, &b, None).unwrap();
                let emb = m.embed_inputs(t, w, &b).unwrap();
                let mixed_emb = plan.mix(t, emb).unwrap();
                let mixed = m
                    .forward_embedded(t, w, mixed_emb, &plan.mask, 2, b.seq_len, None)
                    .unwrap();
                let a = crild::cr_mha(t, &mixed, &orig, &plan, 2, false).unwrap();
                let h = crild::cr_ir(t, &mixed, &orig, &plan, 1, false).unwrap();
                t.add(a, h).unwrap()
            })
        }),
        ("crild_step_loss", |s| {
            let teacher = spread_model(2, s + 100);
            let student = spread_model(1, s);
            let b = tiny_batch(s);
            let proj = random_tensor(&[4, 4], &mut stream(s, "proj"));
            // a detached target moves under perturbation but not under backprop,
            // so the check runs with gradients through both sides
            let cr = CrConfig {
                warmup_steps: 4,
                include_original_batch: true,
                detach_target: false,
                ..CrConfig::default()
            };
            let objective = ObjectiveConfig::default();
            model_gradcheck(&student, &[proj], &move |t, m, w, ex| {
                let tw = teacher.bind(t, false);
                let models = StepModels {
                    teacher: &teacher,
                    teacher_weights: &tw,
                    student: m,
                    student_weights: w,
                    projection: ex[0],
                };
                let pairs = [LayerPair::new(2, 1, 1.0)];
                crild::crild_step_loss(
                    t,
                    &models,
                    &b,
                    &pairs,
                    &objective,
                    &cr,
                    2,
                    &mut stream(s, "mix"),
                    Some(&mut stream(s, "drop")),
                )
                .unwrap()
                .total
            })
        }),
    ]
}

/// Minimum-cost transport between uniform marginals by enumerating every
/// spanning-tree basis of the bipartite graph and solving it by leaf
/// elimination. Returns the best cost and its flow.
pub fn brute_force_transport(cost: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let (l, m) = (cost.len(), cost[0].len());
    let cells: Vec<(usize, usize)> = (0..l).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let basis = l + m - 1;
    let mut best = (f64::INFINITY, Vec::new());
    let mut choose = vec![0usize; basis];
    fn next_combination(c: &mut [usize], n: usize) -> bool {
        let k = c.len();
        for i in (0..k).rev() {
            if c[i] < n - k + i {
                c[i] += 1;
                for j in i + 1..k {
                    c[j] = c[j - 1] + 1;
                }
                return true;
            }
        }
        false
    }
    for (i, c) in choose.iter_mut().enumerate() {
        *c = i;
    }
    loop {
        if let Some(flow) = solve_tree(&choose.iter().map(|&k| cells[k]).collect::<Vec<_>>(), l, m)
        {
            let c: f64 = (0..l)
                .flat_map(|i| (0..m).map(move |j| (i, j)))
                .map(|(i, j)| flow[i][j] * cost[i][j])
                .sum();
            if c < best.0 {
                best = (c, flow);
            }
        }
        if !next_combination(&mut choose, cells.len()) {
            break;
        }
    }
    best
}

/// Unique flow supported on `edges` when they form a spanning tree and the
/// flow is nonnegative; `None` otherwise.
fn solve_tree(edges: &[(usize, usize)], l: usize, m: usize) -> Option<Vec<Vec<f64>>> {
    let n = l + m;
    let mut supply: Vec<f64> = (0..n)
        .map(|v| {
            if v < l {
                1.0 / l as f64
            } else {
                1.0 / m as f64
            }
        })
        .collect();
    let mut alive: Vec<(usize, usize)> = edges.iter().map(|&(i, j)| (i, l + j)).collect();
    let mut flow = vec![vec![0.0; m]; l];
    let mut done = vec![false; n];
    while !alive.is_empty() {
        let degree = |v: usize, alive: &[(usize, usize)]| {
            alive.iter().filter(|e| e.0 == v || e.1 == v).count()
        };
        let leaf = (0..n).find(|&v| !done[v] && degree(v, &alive) == 1)?;
        let pos = alive
            .iter()
            .position(|e| e.0 == leaf || e.1 == leaf)
            .unwrap();
        let (a, b) = alive.swap_remove(pos);
        let other = if a == leaf { b } else { a };
        let f = supply[leaf];
        if f < -1e-12 {
            return None;
        }
        flow[a][b - l] = f;
        supply[other] -= f;
        supply[leaf] = 0.0;
        done[leaf] = true;
    }
    // every node must be covered and balanced; an acyclic edge set of size
    // n-1 is spanning, otherwise some node never became a leaf
    if supply.iter().any(|s| s.abs() > 1e-12) || flow.iter().flatten().any(|&f| f < -1e-12) {
        return None;
    }
    let covered = (0..n).filter(|&v| done[v]).count();
    (covered >= n - 1).then_some(flow)
}

/// Logits computed with plain loops from the stored weights, eval mode.
pub fn straight_line_logits(model: &TransformerModel, batch: &Batch) -> Vec<f64> {
    let c = &model.config;
    let (d, h, dk, f) = (
        c.hidden_dim,
        c.num_heads,
        c.hidden_dim / c.num_heads,
        c.ffn_dim,
    );
    let w = &model.weights;
    let (bsz, s) = (batch.batch_size, batch.seq_len);
    let linear = |x: &[f64], rows: usize, wt: &Tensor, b: &Tensor| -> Vec<f64> {
        let (din, dout) = (wt.shape()[0], wt.shape()[1]);
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            for o in 0..dout {
                let mut acc = b.data()[o];
                for i in 0..din {
                    acc += x[r * din + i] * wt.data()[i * dout + o];
                }
                out[r * dout + o] = acc;
            }
        }
        out
    };
    let layer_norm = |x: &[f64], g: &Tensor, b: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (r, row) in x.chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for k in 0..d {
                out[r * d + k] = (row[k] - mean) / (var + 1e-12).sqrt() * g.data()[k] + b.data()[k];
            }
        }
        out
    };
    let gelu = |x: f64| {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    };

    let mut x = vec![0.0; bsz * s * d];
    for r in 0..bsz * s {
        let tok = batch.tokens[r] as usize;
        for k in 0..d {
            x[r * d + k] = w.tok_emb.data()[tok * d + k] + w.pos_emb.data()[(r % s) * d + k];
        }
    }
    for lw in &w.layers {
        let q = linear(&x, bsz * s, &lw.wq, &lw.bq);
        let kk = linear(&x, bsz * s, &lw.wk, &lw.bk);
        let v = linear(&x, bsz * s, &lw.wv, &lw.bv);
        let mut ctx = vec![0.0; bsz * s * d];
        for b in 0..bsz {
            for head in 0..h {
                for i in 0..s {
                    let mut scores = vec![0.0; s];
                    for j in 0..s {
                        let mut dot = 0.0;
                        for e in 0..dk {
                            dot += q[(b * s + i) * d + head * dk + e]
                                * kk[(b * s + j) * d + head * dk + e];
                        }
                        scores[j] = dot / (dk as f64).sqrt()
                            + if batch.mask[b * s + j] > 0.0 {
                                0.0
                            } else {
                                -1e9
                            };
                    }
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..s {
                        let p = (scores[j] - mx).exp() / z;
                        for e in 0..dk {
                            ctx[(b * s + i) * d + head * dk + e] +=
                                p * v[(b * s + j) * d + head * dk + e];
                        }
                    }
                }
            }
        }
        let attn_out = linear(&ctx, bsz * s, &lw.wo, &lw.bo);
        let res: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let h1 = layer_norm(&res, &lw.ln1_g, &lw.ln1_b);
        let mut ff = linear(&h1, bsz * s, &lw.w1, &lw.b1);
        ff.iter_mut().for_each(|v| *v = gelu(*v));
        debug_assert_eq!(ff.len(), bsz * s * f);
        let ff = linear(&ff, bsz * s, &lw.w2, &lw.b2);
        let res: Vec<f64> = h1.iter().zip(&ff).map(|(a, b)| a + b).collect();
        x = layer_norm(&res, &lw.ln2_g, &lw.ln2_b);
    }
    let cls: Vec<f64> = (0..bsz)
        .flat_map(|b| x[b * s * d..b * s * d + d].to_vec())
        .collect();
    linear(&cls, bsz, &w.head_w, &w.head_b)
}
