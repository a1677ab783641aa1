use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reasonedit::commands::{self, EditRequest};
use reasonedit::config::{Preset, RunConfig};
use reasonedit::core::eval::MaskMode;
use reasonedit::core::model::EarlyStop;
use reasonedit::Result;

#[derive(Parser)]
#[command(name = "reasonedit", version, about = "Reasoning-guided grid editing on a synthetic micro-world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML file overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// SWITCH=on|off for hrm, rab, gates or hybrid. Repeatable.
    #[arg(long = "ablate", global = true, value_name = "SWITCH=on|off")]
    ablate: Vec<String>,
    /// Data directory (default: $RGENIE_DATA_DIR, then ./data).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the micro-world dataset.
    GenData,
    /// Train a model.
    Train {
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop when the epoch loss plateaus.
        #[arg(long)]
        early_stop: bool,
        /// Train every switch combination into its own subdirectory.
        #[arg(long)]
        sweep: bool,
    },
    /// Edit samples with a trained model.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/edit")]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, value_enum, default_value = "predicted")]
        mask: MaskArg,
        #[arg(long)]
        limit: Option<usize>,
        /// Use this instruction for every sample.
        #[arg(long)]
        instruction: Option<String>,
    },
    /// Score a checkpoint on the val split.
    Eval {
        /// A checkpoint file, or with --sweep the directory of a training sweep.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
        #[arg(long, value_enum)]
        mask: Option<MaskArg>,
        #[arg(long)]
        sweep: bool,
    },
    /// Run gradient checks, oracles and invariant suites.
    Verify {
        /// Only checks whose name contains this.
        #[arg(long)]
        only: Option<String>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MaskArg {
    Oracle,
    Predicted,
}

impl From<MaskArg> for MaskMode {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::Oracle => MaskMode::Oracle,
            MaskArg::Predicted => MaskMode::Predicted,
        }
    }
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p, c.preset)?,
        None => RunConfig::preset(c.preset.unwrap_or(Preset::Desk)),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    for a in &c.ablate {
        cfg.ablate(a)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.common)?;
    let data = commands::data_dir(cli.common.data.as_deref());
    match cli.cmd {
        Cmd::GenData => commands::gen_data(&cfg, &data),
        Cmd::Train {
            out,
            epochs,
            early_stop,
            sweep,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if early_stop && cfg.train.early_stop.is_none() {
                cfg.train.early_stop = Some(EarlyStop::default());
            }
            cfg.validate()?;
            if sweep {
                for t in commands::train_sweep(&cfg, &data, &out)? {
                    println!("{}  {}", t.hash, t.checkpoint.display());
                }
            } else {
                let t = commands::train(&cfg, &data, &out)?;
                println!("{}  {}", t.hash, t.checkpoint.display());
            }
            Ok(())
        }
        Cmd::Edit {
            checkpoint,
            out,
            split,
            mask,
            limit,
            instruction,
        } => {
            let req = EditRequest {
                split,
                mode: mask.into(),
                limit,
                instruction,
            };
            let iou = commands::edit(&cfg, &checkpoint, &data, &out, &req)?;
            match iou {
                Some(v) => println!("mean mask IoU {v:.4}"),
                None => println!("mean mask IoU NA"),
            }
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            out,
            mask,
            sweep,
        } => {
            if let Some(m) = mask {
                cfg.eval.mode = m.into();
            }
            if sweep {
                for (s, r) in commands::eval_sweep(&cfg, &checkpoint, &data, &out)? {
                    println!("{}  composite {:?}", s.label(), r.aggregate("composite_score"));
                }
            } else {
                let r = commands::eval(&cfg, &checkpoint, &data, &out)?;
                print!("{}", reasonedit::report::render(&r).split("# summary\n").nth(1).unwrap_or(""));
            }
            Ok(())
        }
        Cmd::Verify { only } => commands::verify(only.as_deref()).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
