use boxworld_cli::commands;
use boxworld_cli::config::{AgentName, ProtocolName, RunConfig};
use boxworld_core::prompt::RenderStyle;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "boxworld",
    version,
    about = "Entity state tracking experiments over chat models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the instance batch for the configured matrix.
    Generate(Common),
    /// Run the configured protocol (final query by default).
    Run(RunArgs),
    /// Query every step: intermediate probing, or per-step compressed initialization.
    Probe(RunArgs),
    /// Build tables, curves and plots from a transcript file.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Traditional,
    Faked,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed for instance generation.
    #[arg(long)]
    seed: Option<u64>,
    /// Samples per cell.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolName>,
    /// Steps folded into the initial state for `--protocol compressed`.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    agent: Option<AgentName>,
    #[arg(long)]
    agent_seed: Option<u64>,
    /// Flip probability for `--agent forgetful`.
    #[arg(long)]
    forgetful_p: Option<f64>,
    /// Concurrent trials.
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long, value_enum)]
    style: Option<StyleArg>,
    /// Chat-completions endpoint for `--agent http`.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Instance file; defaults to `<out>/instances.jsonl`.
    #[arg(long)]
    instances: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Transcript file; defaults to the one the configured protocol writes.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Report directory; defaults to `<out>/report-<protocol>`.
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

fn resolve(c: &Common) -> Result<RunConfig, boxworld_cli::Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    if let Some(v) = c.seed {
        cfg.base_seed = v;
    }
    if let Some(v) = c.samples {
        cfg.samples = v;
    }
    if let Some(v) = c.protocol {
        cfg.protocol = v;
    }
    if let Some(v) = c.k {
        cfg.k = Some(v);
    }
    if let Some(v) = c.agent {
        cfg.agent = v;
    }
    if let Some(v) = c.agent_seed {
        cfg.agent_seed = v;
    }
    if let Some(v) = c.forgetful_p {
        cfg.forgetful_p = v;
    }
    if let Some(v) = c.concurrency {
        cfg.concurrency = v;
    }
    if let Some(v) = c.style {
        cfg.style = match v {
            StyleArg::Traditional => RenderStyle::Traditional,
            StyleArg::Faked => RenderStyle::FakedMultiRound,
        };
    }
    if let Some(v) = &c.endpoint {
        cfg.client.endpoint = v.clone();
    }
    if let Some(v) = &c.model {
        cfg.client.model = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), boxworld_cli::Error> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = resolve(&c)?;
            let s = commands::generate(&cfg)?;
            println!("{} instances in {} cells -> {}", s.instances, s.cells, s.path.display());
        }
        Command::Run(a) => run(a, false)?,
        Command::Probe(a) => run(a, true)?,
        Command::Report(a) => {
            let cfg = resolve(&a.common)?;
            let input = a.input.unwrap_or_else(|| cfg.transcripts_path());
            let dir = a.report_dir.unwrap_or_else(|| commands::report_dir(&cfg));
            let s = commands::report(&input, &dir)?;
            println!("{} cells -> {}", s.report.summaries.len(), s.dir.display());
        }
    }
    Ok(())
}

fn run(a: RunArgs, per_step: bool) -> Result<(), boxworld_cli::Error> {
    let mut cfg = resolve(&a.common)?;
    if per_step {
        if cfg.protocol == ProtocolName::Final {
            cfg.protocol = ProtocolName::Intermediate;
        }
        cfg.per_step = true;
    }
    let instances = a.instances.unwrap_or_else(|| cfg.instances_path());
    let s = commands::run(&cfg, &instances)?;
    println!(
        "{} trials written ({} already present, {} not applicable), response rate {:.1}% -> {}",
        s.written,
        s.resumed,
        s.skipped,
        s.response_rate() * 100.0,
        s.path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
