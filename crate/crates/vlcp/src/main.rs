//! Command-line front end: data generation, training, evaluation, reports,
//! and the momentum sweep.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use vlcp::harness::{self, FileConfig, Method, RunLedger};
use vlcp::model::ModelState;
use vlcp::taskstream;

#[derive(Parser)]
#[command(name = "vlcp", about = "Vision-language continual pretraining workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task stream and write its manifest.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one method sequentially (or jointly) over a task stream.
    Train {
        #[arg(long)]
        method: String,
        #[arg(long)]
        config: PathBuf,
        /// Manifest file or directory containing manifest.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated task permutation, e.g. "4,3,2,1,0".
        #[arg(long)]
        order: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the last completed task in --out.
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the merged galleries of tasks 0..=T.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        upto_task: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        order: Option<String>,
    },
    /// Re-emit reports (table, curves) from a run directory.
    Report {
        #[arg(long)]
        ledger: PathBuf,
    },
    /// Run the momentum sensitivity sweep.
    SweepMomentum {
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_order(spec: &Option<String>) -> Result<Option<Vec<usize>>> {
    match spec {
        None => Ok(None),
        Some(s) => {
            let order: Result<Vec<usize>, _> =
                s.split(',').map(|p| p.trim().parse::<usize>()).collect();
            Ok(Some(order.context("order must be comma-separated task indices")?))
        }
    }
}

fn load_stream(data: &PathBuf) -> Result<taskstream::TaskStream> {
    let path = harness::manifest_path(data);
    taskstream::load_manifest(&path)
        .with_context(|| format!("loading manifest {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData { config, out, seed } => {
            let cfg: FileConfig = harness::load_config(&config)?;
            let stream = taskstream::generate_task_stream(&cfg.data, seed)?;
            std::fs::create_dir_all(&out)?;
            let manifest = out.join("manifest.jsonl");
            taskstream::write_manifest(&stream, &manifest)?;
            println!("wrote {}", manifest.display());
            for t in &stream.tasks {
                println!(
                    "task {}: {} classes, {} train / {} test / {} query / {} gallery",
                    t.task_id,
                    t.class_ids().len(),
                    t.train.len(),
                    t.test.len(),
                    t.query.len(),
                    t.gallery.len()
                );
            }
        }
        Command::Train {
            method,
            config,
            data,
            order,
            seed,
            out,
            resume,
        } => {
            let _: Method = method.parse::<Method>()?;
            let mut cfg: FileConfig = harness::load_config(&config)?;
            cfg.train.method = method;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            if let Some(order) = parse_order(&order)? {
                cfg.train.task_order = Some(order);
            }
            let stream = load_stream(&data)?;
            let ledger = harness::run_sequential(&stream, &cfg.model, &cfg.train, &out, resume)?;
            harness::emit_report(&ledger, &out.join("reports"))?;
            if let Some(report) = ledger.final_report() {
                println!(
                    "{}: final Rm {:.2}, mAP@1 {:.2} over {} learned task(s)",
                    ledger.method,
                    report.rm,
                    report.map1,
                    ledger.records.len()
                );
            }
            println!("ledger: {}", out.join("ledger.json").display());
        }
        Command::Evaluate {
            ckpt,
            upto_task,
            data,
            order,
        } => {
            let stream = load_stream(&data)?;
            let state = ModelState::load_checkpoint(&ckpt)?;
            let order = parse_order(&order)?
                .unwrap_or_else(|| (0..stream.tasks.len()).collect::<Vec<_>>());
            if upto_task >= order.len() {
                bail!("--upto-task {} out of range for {} tasks", upto_task, order.len());
            }
            let learned = &order[..=upto_task];
            let report = vlcp::eval::evaluate_checkpoint(&state, &stream, learned, upto_task)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report { ledger } => {
            let dir = if ledger.is_dir() {
                ledger
            } else {
                ledger.parent().unwrap().to_path_buf()
            };
            let text = std::fs::read_to_string(dir.join("ledger.json"))
                .context("run directory has no ledger.json")?;
            let parsed: RunLedger = serde_json::from_str(&text)?;
            harness::emit_report(&parsed, &dir.join("reports"))?;
            println!("reports written to {}", dir.join("reports").display());
        }
        Command::SweepMomentum {
            values,
            config,
            data,
            seed,
            out,
        } => {
            let mut cfg: FileConfig = harness::load_config(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            let stream = load_stream(&data)?;
            let rows = harness::run_momentum_sweep(&stream, &cfg.model, &cfg.train, &values, &out)?;
            println!("momentum  final_Rm");
            for row in &rows {
                println!("{:8.3}  {:8.2}", row.momentum, row.final_rm);
            }
        }
    }
    Ok(())
}
