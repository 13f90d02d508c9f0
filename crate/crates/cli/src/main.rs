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

//! `ildlab`: config-driven data generation, teacher training, distillation,
//! probes and multi-seed grids.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ildlab",
    version,
    about = "Intermediate-layer distillation laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the target (and supplementary) datasets as JSONL.
    Gen(Common),
    /// Fine-tune the teacher and save its checkpoint.
    TrainTeacher(Common),
    /// Distil one student per plan, training the teacher first if needed.
    Distill(Common),
    /// Run the configured probes on distilled students.
    Probe(Common),
    /// Run every plan over every grid seed and aggregate.
    Grid(Common),
    /// Print the JSON Schema of the config document.
    Schema,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replace the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Set a dotted config path, e.g. `teacher.train.lr=0.002`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (Common, commands::Runner) = match cli.command {
        Command::Schema => {
            println!(
                "{}",
                serde_json::to_string_pretty(&ildlab::config::schema()).expect("schema")
            );
            return ExitCode::SUCCESS;
        }
        Command::Gen(c) => (c, commands::gen),
        Command::TrainTeacher(c) => (c, commands::train_teacher),
        Command::Distill(c) => (c, commands::distill),
        Command::Probe(c) => (c, commands::probe),
        Command::Grid(c) => (c, commands::grid),
    };
    let cfg = match commands::load_config(&common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("ildlab: invalid config {}: {e}", common.config.display());
            return ExitCode::from(2);
        }
    };
    commands::execute(&cfg, run)
}
