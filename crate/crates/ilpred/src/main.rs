use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ilpred::ablate::run_ablation;
use ilpred::config::RunConfig;
use ilpred::model::init_params;
use ilpred::numerics::checkpoint;
use ilpred::plot::render_svg;
use ilpred::runner::{
    evaluate, generate_dataset, load_dataset, load_prediction, predict, save_prediction, train,
};
use ilpred::scene::format::load_scenario;
use ilpred::Result;

#[derive(Parser)]
#[command(name = "ilpred", version, about = "Multi-agent trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every config-driven subcommand. `--set key=value` accepts
/// any config key; `--seed`, `--task`, and `--mask-ratio` are shorthands.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; unset keys fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set d=64 or --set task="marginal".
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["joint", "marginal"])]
    task: Option<String>,
    #[arg(long)]
    mask_ratio: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(t) = &self.task {
            overrides.push(format!("task=\"{t}\""));
        }
        if let Some(m) = self.mask_ratio {
            overrides.push(format!("mask_ratio={m}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train/val dataset.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to the config's data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write checkpoints plus a loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory (e.g. runs/train/best).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for metrics.txt and the echoed config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write one prediction file per validation scenario here.
        #[arg(long)]
        pred_out: Option<PathBuf>,
    },
    /// Train and compare every ablation row, then mask re-evaluations.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        /// Seeds per row.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// History-mask ratios for the robustness rows.
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3])]
        mask_ratios: Vec<f64>,
    },
    /// Render a scenario and its prediction file as an SVG.
    Plot {
        /// Scenario file (.scn).
        #[arg(long)]
        scenario: PathBuf,
        /// Prediction file (.pred).
        #[arg(long)]
        prediction: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Generate { cfg, out } => {
            let cfg = cfg.load()?;
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
            let manifest = generate_dataset(&cfg, &dir)?;
            println!(
                "wrote {} train + {} val scenarios to {}",
                manifest.train.len(),
                manifest.val.len(),
                dir.display()
            );
        }
        Cmd::Train { cfg, out } => {
            let cfg = cfg.load()?;
            let outcome = train(&cfg, &out)?;
            println!(
                "trained {} epochs; best val metric {:.6e} at epoch {}",
                cfg.epochs, outcome.best_metric, outcome.best_epoch
            );
            println!("checkpoints in {}", out.display());
        }
        Cmd::Eval {
            cfg,
            checkpoint: ckpt,
            out,
            pred_out,
        } => {
            let cfg = cfg.load()?;
            let mcfg = cfg.model_config()?;
            let mut ps = init_params(&mcfg, cfg.seed)?;
            checkpoint::load(&ckpt, &mut ps)?;
            let (_, val) = load_dataset(Path::new(&cfg.data_dir))?;
            let report = evaluate(&ps, &cfg, &val, cfg.mask_ratio)?;
            print!("{}", report.to_table());
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("metrics.txt"), report.to_text())?;
                cfg.save(&dir.join("config.toml"))?;
                println!("metrics written to {}", dir.join("metrics.txt").display());
            }
            if let Some(dir) = &pred_out {
                std::fs::create_dir_all(dir)?;
                for s in &val {
                    let pred = predict(&ps, &mcfg, s)?;
                    save_prediction(&dir.join(format!("{}.pred", s.id)), &pred)?;
                }
                println!("{} prediction files in {}", val.len(), dir.display());
            }
        }
        Cmd::Ablate {
            cfg,
            out,
            seeds,
            mask_ratios,
        } => {
            let cfg = cfg.load()?;
            let report = run_ablation(&cfg, &out, seeds, &mask_ratios)?;
            print!("{}", report.to_table());
            println!("table written to {}", out.join("table.txt").display());
        }
        Cmd::Plot {
            scenario,
            prediction,
            out,
        } => {
            let s = load_scenario(&scenario)?;
            let pred = load_prediction(&prediction)?;
            let svg = render_svg(&s, &pred)?;
            std::fs::write(&out, svg)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests are success; anything else is a usage error.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
