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

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ildlab::analysis::{self, TaylorSetup};
use ildlab::config::ExperimentConfig;
use ildlab::data::Dataset;
use ildlab::model::TransformerModel;
use ildlab::pipeline::{self, RunReport};
use ildlab::rng::stream;
use ildlab::{Error, Result};

use crate::Common;

type Job<'a> = Box<dyn Fn(u64) -> Result<RunReport> + Sync + 'a>;

/// A command body; `Ok(false)` means it finished but some cell failed.
pub type Runner = fn(&ExperimentConfig, &Path) -> Result<bool>;

const FAILURE_MARKER: &str = "FAILED";
const CONFIG_ECHO: &str = "config.resolved.json";

pub fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&c.config)?;
    let mut overrides = Vec::new();
    for o in &c.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(Error::Config(format!("override `{o}` is not KEY=VALUE")));
        };
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    if let Some(seed) = c.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &c.out {
        overrides.push((
            "out_dir".into(),
            serde_json::to_string(&out.to_string_lossy()).expect("path string"),
        ));
    }
    ExperimentConfig::parse(&text, &overrides)
}

/// Runs a command under the failure-marker protocol: a stale marker is
/// removed first and a fresh one records any error.
pub fn execute(cfg: &ExperimentConfig, run: Runner) -> ExitCode {
    let out = PathBuf::from(&cfg.out_dir);
    let marker = out.join(FAILURE_MARKER);
    let result = fs::create_dir_all(&out)
        .map_err(Error::from)
        .and_then(|_| match fs::remove_file(&marker) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        })
        .and_then(|_| echo_config(cfg, &out))
        .and_then(|_| run(cfg, &out));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            let _ = fs::write(
                &marker,
                "one or more grid cells failed; see grid/summary.json\n",
            );
            eprintln!("ildlab: some cells failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            let _ = fs::write(&marker, format!("{e}\n"));
            eprintln!("ildlab: {e}");
            ExitCode::FAILURE
        }
    }
}

fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_ECHO), cfg.to_json()?)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    Ok((cfg.target_dataset(seed)?, cfg.supplementary_dataset(seed)?))
}

pub fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let (target, supp) = datasets(cfg, cfg.seed)?;
    let dir = out.join("data");
    echo_config(cfg, &dir)?;
    target.save(&dir.join("target"))?;
    if let Some(s) = supp {
        s.save(&dir.join("supplementary"))?;
    }
    eprintln!(
        "wrote {} train / {} dev examples to {}",
        target.train.len(),
        target.dev.len(),
        dir.display()
    );
    Ok(true)
}

/// Everything the teacher depends on; a saved teacher is reused only when
/// this matches.
fn teacher_fingerprint(cfg: &ExperimentConfig, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "seed": seed,
        "task": cfg.task,
        "downsample": cfg.downsample,
        "teacher": cfg.teacher,
    })
}

fn fit_teacher(
    cfg: &ExperimentConfig,
    target: &Dataset,
    seed: u64,
    dir: &Path,
) -> Result<TransformerModel> {
    echo_config(cfg, dir)?;
    let (teacher, report) = pipeline::train_teacher(
        &cfg.teacher.model,
        target,
        &cfg.teacher.train,
        seed,
        Some(dir),
    )?;
    teacher.save(dir, "model")?;
    report.write(dir)?;
    write_json(
        &dir.join("fingerprint.json"),
        &teacher_fingerprint(cfg, seed),
    )?;
    eprintln!(
        "teacher (seed {seed}): dev {:.4}",
        report.final_dev.primary()
    );
    Ok(teacher)
}

fn cached_teacher(
    cfg: &ExperimentConfig,
    target: &Dataset,
    seed: u64,
    dir: &Path,
) -> Result<TransformerModel> {
    let stored = fs::read_to_string(dir.join("fingerprint.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok());
    if stored.as_ref() == Some(&teacher_fingerprint(cfg, seed)) {
        if let Ok(t) = TransformerModel::load(dir, "model") {
            return Ok(t);
        }
    }
    fit_teacher(cfg, target, seed, dir)
}

pub fn train_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let (target, _) = datasets(cfg, cfg.seed)?;
    fit_teacher(cfg, &target, cfg.seed, &out.join("teacher"))?;
    Ok(true)
}

fn student_init(
    cfg: &ExperimentConfig,
    teacher: &TransformerModel,
    seed: u64,
) -> Result<TransformerModel> {
    TransformerModel::truncated_from(teacher, &cfg.student, &mut stream(seed, "student-init"))
}

pub fn distill(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    if cfg.plans.is_empty() {
        return Err(Error::Config(
            "at `plans`: distill needs at least one plan".into(),
        ));
    }
    let (target, supp) = datasets(cfg, cfg.seed)?;
    let teacher = cached_teacher(cfg, &target, cfg.seed, &out.join("teacher"))?;
    let init = student_init(cfg, &teacher, cfg.seed)?;
    for plan in &cfg.plans {
        let dir = out.join("distill").join(&plan.name);
        echo_config(cfg, &dir)?;
        let (student, report) =
            pipeline::distill(plan, &teacher, &init, &target, supp.as_ref(), cfg.seed)?;
        student.save(&dir, "student")?;
        report.write(&dir)?;
        eprintln!("{}: dev {:.4}", plan.name, report.final_dev.primary());
    }
    Ok(true)
}

fn load_student(out: &Path, plan: &str) -> Result<TransformerModel> {
    let dir = out.join("distill").join(plan);
    TransformerModel::load(&dir, "student").map_err(|e| {
        Error::Config(format!(
            "no distilled student for plan `{plan}` in {} ({e}); run `distill` first",
            dir.display()
        ))
    })
}

pub fn probe(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let dir = out.join("probe");
    echo_config(cfg, &dir)?;
    let probes = &cfg.probes;
    let needs_students =
        probes.noise.is_some() || probes.linear.is_some() || probes.surface.is_some();
    if needs_students {
        let (target, _) = datasets(cfg, cfg.seed)?;
        let students: BTreeMap<&str, TransformerModel> = cfg
            .plans
            .iter()
            .map(|p| Ok((p.name.as_str(), load_student(out, &p.name)?)))
            .collect::<Result<_>>()?;
        if let Some(n) = &probes.noise {
            let mut subset = target.clone();
            if let Some(k) = n.max_examples {
                subset.train.truncate(k);
            }
            for (name, m) in &students {
                let r = analysis::noise_robustness_probe(m, &subset, &n.sigmas, n.draws, cfg.seed)?;
                r.write(&dir, &format!("noise_{name}"))?;
            }
        }
        if let Some(l) = &probes.linear {
            let mut rows = BTreeMap::new();
            for (name, m) in &students {
                let per_layer = l
                    .layers
                    .iter()
                    .map(|&k| {
                        Ok((
                            k.to_string(),
                            analysis::linear_probe(m, &target, k)?.primary(),
                        ))
                    })
                    .collect::<Result<BTreeMap<_, _>>>()?;
                rows.insert(name.to_string(), per_layer);
            }
            write_json(&dir.join("linear_probe.json"), &rows)?;
        }
        if let Some(s) = &probes.surface {
            let teacher = TransformerModel::load(&out.join("teacher"), "model")?;
            let theta0 = student_init(cfg, &teacher, cfg.seed)?;
            let r = analysis::loss_surface(
                &theta0,
                &students[s.endpoints[0].as_str()],
                &students[s.endpoints[1].as_str()],
                &target,
                s.grid,
            )?;
            r.write(&dir, "surface")?;
        }
    }
    if let Some(x) = &probes.expansion {
        let mut rng = stream(cfg.seed, "expansion-setups");
        let mut reports = Vec::new();
        for &alpha in &x.alphas {
            for _ in 0..x.setups {
                let s = TaylorSetup::random(
                    x.points,
                    x.input_dim,
                    x.output_dim,
                    x.target_dim,
                    alpha,
                    &mut rng,
                );
                reports.push(analysis::verify_mixup_expansion(&s)?);
            }
        }
        let moments = x
            .alphas
            .iter()
            .map(|&a| analysis::beta_moment_check(a))
            .collect::<Result<Vec<_>>>()?;
        write_json(
            &dir.join("expansion.json"),
            &serde_json::json!({ "setups": reports, "beta_moments": moments }),
        )?;
    }
    Ok(true)
}

pub fn grid(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let root = out.join("grid");
    echo_config(cfg, &root)?;
    let seeds = cfg.grid_seeds();
    // teachers are shared by every plan of a seed, so they are trained up front
    let mut inputs = BTreeMap::new();
    for &s in &seeds {
        let (target, supp) = datasets(cfg, s)?;
        let teacher = cached_teacher(
            cfg,
            &target,
            s,
            &root.join("teacher").join(format!("seed-{s}")),
        )?;
        let init = student_init(cfg, &teacher, s)?;
        inputs.insert(s, (target, supp, teacher, init));
    }
    let cells: Vec<(String, Job<'_>)> = cfg
        .plans
        .iter()
        .map(|plan| {
            let inputs = &inputs;
            let root = &root;
            let job = move |s: u64| -> Result<RunReport> {
                let (target, supp, teacher, init) = &inputs[&s];
                let dir = root.join(&plan.name).join(format!("seed-{s}"));
                echo_config(cfg, &dir)?;
                let (student, report) =
                    pipeline::distill(plan, teacher, init, target, supp.as_ref(), s)?;
                student.save(&dir, "student")?;
                report.write(&dir)?;
                Ok(report)
            };
            (plan.name.clone(), Box::new(job) as Job<'_>)
        })
        .collect();
    let results = pipeline::run_experiment_grid(&cells, &seeds)?;
    write_json(&root.join("summary.json"), &results)?;
    for c in &results {
        eprintln!(
            "{}: {:.4} ± {:.4} over {} seeds{}",
            c.name,
            c.mean,
            c.std,
            c.metrics.len(),
            if c.failed { " (FAILED)" } else { "" }
        );
    }
    Ok(results.iter().all(|c| !c.failed))
}
