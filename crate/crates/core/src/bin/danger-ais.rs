use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use danger_ais::config::EngineConfig;
use danger_ais::engine::run_replay;
use danger_ais::records::adapt_strace;
use danger_ais::response::PolicySet;
use danger_ais::scenario::{generate, ScenarioKind, ScenarioParams};

#[derive(Parser)]
#[command(name = "danger-ais", version, about = "Learn permit/deny syscall policies from traces and metrics")]
struct Cli {
    /// Engine configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `rng_seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Suppress the summary on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a trace (and optional metrics) and write policy.txt, actions.jsonl, report.txt.
    Run {
        trace: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// User-written base policy; learned statements are appended after it.
        #[arg(long)]
        base_policy: Option<PathBuf>,
    },
    /// Convert `epoch pid name(args) = ret` lines into canonical trace lines.
    AdaptStrace {
        input: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Seconds per tick.
        #[arg(long, default_value_t = 1.0)]
        tick_secs: f64,
    },
    /// Parse and validate a policy file, printing its canonical form.
    CheckPolicy { policy: PathBuf },
    /// Write a seeded synthetic scenario (trace.txt, metrics.txt, holdout.txt).
    GenScenario {
        #[arg(value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 500)]
        ticks: u64,
        #[arg(long, default_value_t = 300)]
        burst_start: u64,
        #[arg(long, default_value_t = 20)]
        burst_len: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Benign,
    Attack,
}

fn load_config(cli: &Cli) -> Result<EngineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            EngineConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => EngineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run {
            trace,
            metrics,
            base_policy,
        } => {
            let cfg = load_config(&cli)?;
            let report = run_replay(trace, metrics.as_deref(), base_policy.as_deref(), cfg, &cli.out_dir)?;
            if !cli.quiet {
                print!("{report}");
            }
        }
        Command::AdaptStrace {
            input,
            output,
            tick_secs,
        } => {
            if !(tick_secs.is_finite() && *tick_secs > 0.0) {
                bail!("--tick-secs must be positive");
            }
            let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let adapted = adapt_strace(&text, *tick_secs);
            let body: String = adapted.lines.iter().map(|l| format!("{l}\n")).collect();
            match output {
                Some(p) => fs::write(p, body)?,
                None => print!("{body}"),
            }
            if adapted.warnings > 0 && !cli.quiet {
                eprintln!("skipped {} unparseable line(s)", adapted.warnings);
            }
        }
        Command::CheckPolicy { policy } => {
            let text = fs::read_to_string(policy).with_context(|| format!("reading {}", policy.display()))?;
            let set = PolicySet::parse(&text).with_context(|| format!("in {}", policy.display()))?;
            if !cli.quiet {
                print!("{set}");
            }
        }
        Command::GenScenario {
            kind,
            ticks,
            burst_start,
            burst_len,
        } => {
            let kind = match kind {
                Kind::Benign => ScenarioKind::Benign,
                Kind::Attack => ScenarioKind::Attack,
            };
            let seed = match cli.seed {
                Some(s) => s,
                None => load_config(&cli)?.rng_seed,
            };
            let params = ScenarioParams {
                ticks: *ticks,
                burst_start: *burst_start,
                burst_len: *burst_len,
                ..ScenarioParams::new(kind, seed)
            };
            let s = generate(&params);
            fs::create_dir_all(&cli.out_dir)?;
            fs::write(cli.out_dir.join("trace.txt"), s.trace_text())?;
            fs::write(cli.out_dir.join("metrics.txt"), s.metrics_text())?;
            fs::write(cli.out_dir.join("holdout.txt"), s.holdout_text())?;
            if !cli.quiet {
                println!(
                    "wrote {} syscalls, {} metric records, {} held-out syscalls to {}",
                    s.trace.len(),
                    s.metrics.len(),
                    s.holdout.len(),
                    cli.out_dir.display()
                );
            }
        }
    }
    Ok(())
}
