use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ruo_core::experiment::{self, ExperimentConfig, OUTPUT_ROOT_VAR, PRESET_NAMES};

/// Penalized robust utility optimization experiments.
#[derive(Debug, Parser)]
#[command(name = "ruo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// List the built-in presets.
    Presets,
    /// Print the resolved configuration as TOML.
    ShowConfig(ConfigArgs),
    /// Generate the training, validation and test noise datasets.
    GenData(ConfigArgs),
    /// Train, then evaluate the learned policy against the references.
    Train(ConfigArgs),
    /// Evaluate a generator checkpoint.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to the best (or last) generator of the matching run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one model per penalty-scale pair and report the pooled minimum utility.
    GridSearch {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated volatility penalty scales.
        #[arg(long, value_delimiter = ',', required = true)]
        vol_scales: Vec<f64>,
        /// Comma-separated drift penalty scales.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        drift_scales: Vec<f64>,
    },
    /// Solve the closed-form benchmark of a configuration.
    SolveExplicit {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Evaluate the reference strategies (cash, frictionless, benchmark) without training.
    CompareRef(ConfigArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Built-in preset name.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a field, e.g. `--set train.epochs=10` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Multiply all dataset and pool sizes.
    #[arg(long)]
    scale: Option<f64>,
    /// Tiny networks and datasets, for checking a pipeline end to end.
    #[arg(long)]
    smoke: bool,
    /// Output directory (default `$RUO_OUTPUT_ROOT/<name>-<hash>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(name), None) => experiment::preset(name)?,
            (None, Some(path)) => {
                ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?
            }
            _ => bail!("give exactly one of --preset or --config"),
        };
        if self.smoke {
            cfg = experiment::tiny(cfg);
        }
        for item in &self.overrides {
            let (key, value) = item.split_once('=').with_context(|| format!("override '{item}' is not KEY=VALUE"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(f) = self.scale {
            cfg = cfg.scaled(f)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| experiment::run_dir(cfg))
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Presets => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
        }
        Command::ShowConfig(args) => {
            let cfg = args.resolve()?;
            println!("# hash {}", cfg.hash());
            print!("{}", cfg.to_toml()?);
        }
        Command::GenData(args) => {
            let cfg = args.resolve()?;
            let dir = args.dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            let hash = cfg.hash();
            let data = cfg.data.generate(cfg.market.n_steps, cfg.market.dim())?;
            for (part, inc) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
                let path = dir.join(format!("{part}-{hash}.bin"));
                inc.write(&path)?;
                println!("{}\t{} paths", path.display(), inc.n_paths());
            }
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let summary = experiment::run_in(&cfg, &args.dir(&cfg))?;
            log::info!("artifacts in {}", summary.dir.display());
            print_reports(&summary.reports);
        }
        Command::Evaluate { config, checkpoint } => {
            let cfg = config.resolve()?;
            let dir = config.dir(&cfg);
            let hash = cfg.hash();
            let ckpt = match checkpoint {
                Some(p) => p,
                None => default_checkpoint(&dir, &hash)?,
            };
            let reports = experiment::evaluate_checkpoint(&cfg, &ckpt)?;
            std::fs::create_dir_all(&dir)?;
            experiment::write_outputs(&dir, &hash, &reports)?;
            print_reports(&reports);
        }
        Command::GridSearch { config, vol_scales, drift_scales } => {
            let cfg = config.resolve()?;
            let root = config.dir(&cfg);
            let grid = experiment::grid_search(&cfg, &vol_scales, &drift_scales, &root)?;
            println!("vol_scale,drift_scale,score,error");
            for c in &grid.cells {
                println!(
                    "{},{},{},{}",
                    c.vol_scale,
                    c.drift_scale,
                    c.score.map_or(String::new(), |s| s.to_string()),
                    c.error.clone().unwrap_or_default()
                );
            }
            if let Some(i) = grid.best {
                let c = &grid.cells[i];
                println!("best: vol_scale={} drift_scale={}", c.vol_scale, c.drift_scale);
            }
            if grid.boundary_best {
                println!("warning: the best cell lies on the grid boundary");
            }
        }
        Command::SolveExplicit { config, format } => {
            let cfg = config.resolve()?;
            let Some(sol) = experiment::solve_explicit(&cfg)?.and_then(|e| e.solution) else {
                bail!("configuration '{}' has no closed-form saddle point", cfg.name);
            };
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&sol)?),
                Format::Csv => {
                    println!("quantity,index,value");
                    for (i, w) in sol.weights.iter().enumerate() {
                        println!("weight,{i},{w}");
                    }
                    for (i, m) in sol.drift.iter().enumerate() {
                        println!("drift,{i},{m}");
                    }
                    for (i, c) in sol.covariance.iter().enumerate() {
                        println!("covariance,{i},{c}");
                    }
                    println!("residual,0,{}", sol.residual);
                }
            }
        }
        Command::CompareRef(args) => {
            let cfg = args.resolve()?;
            let dir = args.dir(&cfg);
            let reports = experiment::compare_reference(&cfg)?;
            std::fs::create_dir_all(&dir)?;
            experiment::write_outputs(&dir, &format!("ref-{}", cfg.hash()), &reports)?;
            print_reports(&reports);
        }
    }
    Ok(())
}

fn default_checkpoint(dir: &Path, hash: &str) -> Result<PathBuf> {
    let state = dir.join(format!("state-{hash}"));
    for name in ["best.ckpt", "generator.ckpt"] {
        let p = state.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    bail!("no checkpoint under {}; train first, pass --checkpoint, or set {OUTPUT_ROOT_VAR}", state.display())
}

fn print_reports(reports: &[ruo_core::evaluation::EvalReport]) {
    println!("strategy,expected_utility,std_error,pooled_min,relative_error,value_at_risk");
    for r in reports {
        println!(
            "{},{},{},{},{},{}",
            r.strategy,
            r.expected_utility.mean,
            r.expected_utility.std_error,
            r.pooled.as_ref().map_or(String::new(), |p| p.min.to_string()),
            r.relative_error.as_ref().map_or(String::new(), |e| e.value.to_string()),
            r.value_at_risk
        );
    }
}
