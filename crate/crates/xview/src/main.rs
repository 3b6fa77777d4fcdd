use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xview::config::Config;
use xview::error::Error;
use xview::eval::{ablate, cosine_probe, evaluate_model, prepare, AblationAxis};
use xview::io::{read_checkpoint, write_checkpoint, write_ground_truth, write_predictions, write_svxf};
use xview::synth::{generate_dataset, SynthSettings, EVAL_STREAM, TRAIN_STREAM};
use xview::types::GroundTruthEvent;

#[derive(Parser)]
#[command(name = "xview", version, about = "Cross-view imitation-error detection harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (flat `section.key = value` lines); defaults apply
    /// when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set train.steps=100 (repeatable; applied
    /// after the config file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, Error> {
        let mut cfg = Config::load(self.config.as_deref())?;
        for pair in &self.sets {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set '{pair}' must be KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic benchmark and write feature/ground-truth files.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for .svxf features and .gt.txt sidecars.
        #[arg(long)]
        out: PathBuf,
        /// Which split to materialize.
        #[arg(long, default_value = "eval", value_parser = ["train", "eval"])]
        split: String,
    },
    /// Train on the synthetic benchmark and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint (config hashes must match).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the (regenerated) eval split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional prediction-file output.
        #[arg(long)]
        pred_out: Option<PathBuf>,
        /// Optional machine-readable report (CSV rows).
        #[arg(long)]
        csv_out: Option<PathBuf>,
        /// Also export the pre/post-injection cosine probe as CSV.
        #[arg(long)]
        cosine_out: Option<PathBuf>,
    },
    /// Finite-difference checks over every differentiable operation.
    Gradcheck {
        /// Random restarts per operation.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Maximum allowed relative discrepancy.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Train/evaluate grids over one ablation axis and emit CSV.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// modules | kratio | dictsize | fusion | egoonly | cosine
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
        /// Number of training seeds per grid point.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Print the version string.
    Version,
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Generate { config, out, split } => {
            let cfg = config.load()?;
            let synth = SynthSettings::from_config(&cfg)?;
            let (count, stream, prefix) = if split == "train" {
                (cfg.get_usize("synth.train_pairs")?, TRAIN_STREAM, "train_")
            } else {
                (cfg.get_usize("synth.eval_pairs")?, EVAL_STREAM, "eval_")
            };
            let pairs = generate_dataset(&synth, count, stream, prefix)?;
            std::fs::create_dir_all(&out)?;
            for pair in &pairs {
                write_svxf(&out.join(format!("{}.exo.svxf", pair.id)), &pair.z_exo)?;
                write_svxf(&out.join(format!("{}.ego.svxf", pair.id)), &pair.z_ego)?;
                let rows: Vec<(String, GroundTruthEvent)> =
                    pair.gt.iter().map(|e| (pair.id.clone(), *e)).collect();
                write_ground_truth(&out.join(format!("{}.gt.txt", pair.id)), &rows)?;
            }
            println!("wrote {} pairs to {}", pairs.len(), out.display());
            Ok(())
        }
        Cmd::Train { config, out, resume } => {
            let cfg = config.load()?;
            let mut exp = prepare(&cfg)?;
            if let Some(path) = resume {
                exp.trainer.load_checkpoint(&path)?;
                eprintln!("resumed at step {}", exp.trainer.step_count());
            }
            exp.trainer.run(&exp.train_set, Some(&out))?;
            write_checkpoint(&out, &exp.trainer.to_checkpoint())?;
            println!(
                "trained {} steps; checkpoint written to {}",
                exp.trainer.step_count(),
                out.display()
            );
            Ok(())
        }
        Cmd::Eval { config, checkpoint, pred_out, csv_out, cosine_out } => {
            let cfg = config.load()?;
            let mut exp = prepare(&cfg)?;
            let ckpt = read_checkpoint(&checkpoint)?;
            exp.trainer.restore(&ckpt)?;
            let (report, named) = evaluate_model(&exp.trainer.model, &exp.eval_set)?;
            print!("{}", report.to_text());
            if let Some(path) = pred_out {
                let mut rows = Vec::new();
                for (id, preds) in &named {
                    for p in preds {
                        rows.push((id.clone(), p.clone()));
                    }
                }
                write_predictions(&path, &rows)?;
            }
            if let Some(path) = csv_out {
                std::fs::write(&path, report.to_csv())?;
            }
            if let Some(path) = cosine_out {
                let probe = cosine_probe(&exp.trainer.model, &exp.eval_set)?;
                std::fs::write(&path, probe.to_csv())?;
            }
            Ok(())
        }
        Cmd::Gradcheck { seeds, tol } => {
            let checks = xview::checks::op_battery(seeds, tol)?;
            let mut failed = false;
            for c in &checks {
                println!("{c}");
                failed |= !c.passed();
            }
            if failed {
                return Err(Error::Runtime("gradient checks failed".into()));
            }
            Ok(())
        }
        Cmd::Ablate { config, axis, out, seeds } => {
            let cfg = config.load()?;
            let axis = AblationAxis::parse(&axis)?;
            let seed_list: Vec<u64> = (0..seeds)
                .map(|i| cfg.get_u64("train.seed").map(|s| s + i))
                .collect::<Result<_, _>>()?;
            let csv = ablate(&cfg, axis, &seed_list)?;
            std::fs::write(&out, &csv)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Version => {
            println!("xview {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
