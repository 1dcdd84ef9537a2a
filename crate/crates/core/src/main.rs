use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use openworld_kit::commands::{self, AblateParam, InferArgs};
use openworld_kit::config::RunConfig;
use openworld_kit::io::RunDir;
use openworld_kit::world::Split;
use openworld_kit::Result;

#[derive(Parser)]
#[command(
    name = "openworld-kit",
    version,
    about = "Open-world detection on synthetic feature pyramids"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed, overriding `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and its splits.
    Gen,
    /// Train one task from the previous task's checkpoint.
    Train {
        #[arg(long)]
        task: u32,
    },
    /// Write detections for a split.
    Infer {
        #[arg(long)]
        task: u32,
        #[arg(long, default_value = "test")]
        split: String,
        /// Use the raw generic-object prompt instead of the pseudo-unknown one.
        #[arg(long)]
        no_owel: bool,
        /// Disable the OOD gate.
        #[arg(long)]
        no_mscal: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a detections file.
    Eval {
        #[arg(long)]
        task: u32,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Report name tag, also used to find the default detections file.
        #[arg(long, default_value = "")]
        tag: String,
    },
    /// Sweep alpha, prompt, tau or neg_cap on the test split.
    Ablate {
        #[arg(long)]
        task: u32,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Allow sweeping parameters that change training.
        #[arg(long)]
        retrain: bool,
    },
    /// Summarize every evaluation report of the run.
    Report,
}

fn threads() -> usize {
    std::env::var("OPENWORLD_KIT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn run(cli: Cli) -> Result<bool> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("run.seed={s}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let dir = RunDir::new(&cli.out);
    match cli.command {
        Command::Gen => {
            let m = commands::cmd_gen(&cfg, &dir)?;
            println!(
                "world: {} tasks, {} known classes, {} unknown",
                m.num_tasks(),
                m.known_total(),
                m.unknown.len()
            );
        }
        Command::Train { task } => {
            let c = commands::cmd_train(&cfg, &dir, task)?;
            let first = c.log.rows.first().map_or(f64::NAN, |r| r.total);
            let last = c.log.rows.last().map_or(f64::NAN, |r| r.total);
            println!(
                "task {task}: {} classes, theta {:.6}, loss {first:.4} -> {last:.4}",
                c.registry.len(),
                c.theta
            );
        }
        Command::Infer {
            task,
            split,
            no_owel,
            no_mscal,
            output,
        } => {
            let args = InferArgs {
                no_owel,
                no_mscal,
                tag: String::new(),
                output,
            };
            let (path, n) = commands::cmd_infer(&cfg, &dir, task, Split::parse(&split)?, &args)?;
            println!("{n} detections -> {}", path.display());
        }
        Command::Eval {
            task,
            split,
            detections,
            tag,
        } => {
            let r = commands::cmd_eval(&cfg, &dir, task, Split::parse(&split)?, detections.as_deref(), &tag)?;
            print!("{}", r.render());
            let unmet = commands::unmet_thresholds(&cfg, &r);
            if !unmet.is_empty() {
                eprintln!("unmet thresholds: {}", unmet.join(", "));
                return Ok(false);
            }
        }
        Command::Ablate {
            task,
            param,
            values,
            retrain,
        } => {
            let rows = commands::cmd_ablate(&cfg, &dir, task, AblateParam::parse(&param)?, &values, retrain)?;
            for r in rows {
                print!("{param}={}: {}", r.value, r.report.render());
            }
        }
        Command::Report => print!("{}", commands::cmd_report(&dir)?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads()).build();
    let result = match pool {
        Ok(pool) => pool.install(|| run(cli)),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
