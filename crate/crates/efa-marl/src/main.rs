use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use efa_marl::checkpoint::Checkpoint;
use efa_marl::config::{parse_config, parse_override, RunConfig};
use efa_marl::core::game::stackelberg_enumerate;
use efa_marl::game_file::parse_game;
use efa_marl::plot::{export_plot_data, plot_csv, DEFAULT_WINDOW};
use efa_marl::trainer::{ablation_csv, evaluate, run_ablation, run_training_with};
use efa_marl::{selftest, Error};

#[derive(Parser)]
#[command(
    name = "efa-marl",
    version,
    about = "EFA-DQN multi-agent reinforcement learning workbench"
)]
struct Cli {
    /// Only print results, no progress.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $EFA_MARL_OUT, else `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train(RunArgs),
    /// Greedy rollouts of a checkpoint.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory to write `evaluation.json` into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ablation variant over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Parallel training runs (default: available cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the invariant suite.
    Selftest,
    /// Stackelberg equilibrium of a bimatrix game file.
    Stackelberg { game: PathBuf },
    /// Rolling-mean reward curve from a metrics file, as CSV.
    ExportPlot {
        metrics: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut overrides = args
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::Usage)?;
    if let Some(s) = args.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &args.out {
        overrides.push(("out".into(), o.display().to_string()));
    }
    parse_config(args.config.as_deref(), &overrides).map_err(Failure::Usage)
}

fn write_out(path: &std::path::Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| {
        Failure::Runtime(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

/// Exit status on success: 0, or 1 when self-checks failed.
fn run(cli: Cli) -> Result<u8, Failure> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let total = cfg.episodes;
            let mut progress = |r: &efa_marl::metrics::MetricsRecord| {
                if !quiet && (r.episode + 1) % 100 == 0 {
                    eprintln!(
                        "episode {}/{total}  reward {:.3}  alpha {:.3}",
                        r.episode + 1,
                        r.reward,
                        r.alpha
                    );
                }
            };
            let o = run_training_with(&cfg, &mut progress)?;
            let best = o
                .summary
                .best_eval
                .map_or("none".to_string(), |b| b.to_string());
            println!(
                "{} seed {}: final100_mean {} best_eval {best} ({})",
                o.summary.variant,
                o.summary.seed,
                o.summary.final100_mean,
                cfg.out.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            episodes,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ev = evaluate(&ck, episodes, seed)?;
            let json = serde_json::to_string(&ev).expect("finite rewards");
            if let Some(dir) = out {
                write_out(&dir.join("evaluation.json"), &(json.clone() + "\n"))?;
            }
            if quiet {
                println!("{}", ev.mean);
            } else {
                println!("{json}");
            }
        }
        Command::Ablate { run, workers } => {
            let cfg = load_config(&run)?;
            let workers = workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
                .max(1);
            if !quiet {
                eprintln!(
                    "ablation: {} variants x {} seeds on {workers} worker(s)",
                    cfg.ablation_variants.len(),
                    cfg.ablation_seeds
                );
            }
            let report = run_ablation(&cfg, workers)?;
            print!("{}", ablation_csv(&report.table));
        }
        Command::Selftest => {
            let results = selftest::run_all();
            let passed = results.iter().filter(|r| r.passed).count();
            for r in &results {
                if !quiet || !r.passed {
                    println!(
                        "{} {}: {}",
                        if r.passed { "PASS" } else { "FAIL" },
                        r.name,
                        r.detail
                    );
                }
            }
            println!("selftest: {passed}/{} checks passed", results.len());
            if passed != results.len() {
                return Ok(1);
            }
        }
        Command::Stackelberg { game } => {
            let text = std::fs::read_to_string(&game).map_err(|e| Error::Io {
                path: game.clone(),
                source: e,
            })?;
            let (leader, follower) = parse_game(&text, &game).map_err(Failure::Usage)?;
            let s = stackelberg_enumerate(&leader, &follower).map_err(Error::from)?;
            println!(
                "leader {} follower {} value {}",
                s.leader_action, s.follower_action, s.value
            );
        }
        Command::ExportPlot {
            metrics,
            window,
            out,
        } => {
            if window == 0 {
                return Err(Failure::Usage(Error::Invalid {
                    field: "window".into(),
                    msg: "must be at least 1".into(),
                }));
            }
            let csv = plot_csv(&export_plot_data(&metrics, window)?);
            match out {
                Some(p) => write_out(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
