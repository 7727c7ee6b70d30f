use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, Args, FromArgMatches, Parser, Subcommand};

use fish_core::config::RunConfig;
use fish_core::demos::DemoSet;
use fish_core::harness::{self, Pretrained, SweepCell};
use fish_core::nn::Checkpoint;

#[derive(Parser)]
#[command(name = "fish", version, about = "Residual imitation learning with optimal-transport rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations.
    RecordDemos {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the encoder and BC actor on demonstrations.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the residual policy online.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        /// Output directory for metrics, logs and checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained checkpoint on the held-out positions.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a multi-seed comparison.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// guidance, encoder-grid, or configs (one cell per --cell file).
        #[arg(long, default_value = "guidance")]
        kind: String,
        #[arg(long = "cell")]
        cells: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Success rate used for the episodes-to-threshold column.
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// `--config FILE` plus one optional flag per config key.
struct RunArgs {
    config: Option<PathBuf>,
    overrides: Vec<(&'static str, String)>,
}

fn flag(key: &'static str) -> &'static str {
    Box::leak(key.replace('_', "-").into_boxed_str())
}

impl FromArgMatches for RunArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut overrides = Vec::new();
        for key in RunConfig::KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                overrides.push((*key, v.clone()));
            }
        }
        Ok(RunArgs {
            config: m.get_one::<PathBuf>("config").cloned(),
            overrides,
        })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for RunArgs {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        let mut cmd = cmd.arg(
            clap::Arg::new("config")
                .long("config")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Config file of `key = value` lines"),
        );
        for key in RunConfig::KEYS {
            cmd = cmd.arg(
                clap::Arg::new(*key)
                    .long(flag(key))
                    .value_name("VALUE")
                    .help_heading("Config overrides"),
            );
        }
        cmd
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_demos(path: &Path) -> Result<DemoSet> {
    DemoSet::load(path).with_context(|| format!("loading demos {}", path.display()))
}

fn load_pretrained(path: &Path) -> Result<Pretrained> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading pretrained model {}", path.display()))?;
    Ok(Pretrained::from_checkpoint(&ck)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::RecordDemos { run, out } => {
            let cfg = run.resolve()?;
            let demos = harness::record_demos(&cfg)?;
            demos.save(&out)?;
            println!("wrote {} trajectories to {}", demos.trajectories.len(), out.display());
        }
        Command::Pretrain { run, demos, out } => {
            let cfg = run.resolve()?;
            let demos = load_demos(&demos)?;
            let pre = harness::pretrain(&cfg, &demos)?;
            pre.to_checkpoint().save(&out)?;
            println!("wrote pretrained {} encoder to {}", pre.encoder.kind().name(), out.display());
        }
        Command::Train {
            run,
            demos,
            pretrained,
            out,
        } => {
            let cfg = run.resolve()?;
            let demos = load_demos(&demos)?;
            let pre = load_pretrained(&pretrained)?;
            let mut progress = |r: &harness::MetricsRow| {
                eprintln!(
                    "episode {} steps {} reward {:.4} eval {}",
                    r.episode,
                    r.env_steps,
                    r.ot_reward_total,
                    u8::from(r.eval_success)
                );
            };
            let output = harness::train(&cfg, &demos, &pre, Some(&mut progress))?;
            output.write_to(&cfg, &out)?;
            println!(
                "final success rate {} after {} episodes; outputs in {}",
                output.final_success(),
                output.metrics.len(),
                out.display()
            );
        }
        Command::Eval {
            run,
            demos,
            pretrained,
            checkpoint,
        } => {
            let cfg = run.resolve()?;
            let demos = load_demos(&demos)?;
            let pre = load_pretrained(&pretrained)?;
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let rate = harness::evaluate(&cfg, &demos, &pre, &ck)?;
            println!("success_rate {rate}");
        }
        Command::Sweep {
            run,
            kind,
            cells,
            seeds,
            threshold,
            out,
        } => {
            let cfg = run.resolve()?;
            let cells = match kind.as_str() {
                "guidance" => harness::guidance_cells(&cfg),
                "encoder-grid" => harness::encoder_grid_cells(&cfg),
                "configs" => {
                    if cells.is_empty() {
                        bail!("sweep kind `configs` needs at least one --cell file");
                    }
                    let mut v = Vec::new();
                    for p in &cells {
                        let c = RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?;
                        v.push(SweepCell {
                            label: p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()),
                            cfg: c,
                        });
                    }
                    v
                }
                other => bail!("unknown sweep kind `{other}`"),
            };
            let report = harness::sweep(&cells, &seeds, threshold, Some(&out))?;
            for f in report.failures() {
                eprintln!("run {} seed {} failed: {}", f.label, f.seed, f.result.as_ref().unwrap_err());
            }
            print!("{}", report.summary_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fish: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
