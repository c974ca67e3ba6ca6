use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, CommandFactory, Parser, Subcommand};
use vecsim::bridge::{bind, BridgeServer};
use vecsim::env_engine::{run_episode, write_metrics_csv, write_trace_csv, EnvParams, PolicyKind};
use vecsim::verify::{run_suite, Suite};
use vecsim_cli::{resolve_config, resolve_mobility, run_sweep, write_sweep_csv, SweepAxis};

/// NOMA vehicular edge computing simulator.
///
/// Settings are layered: built-in defaults, then the TOML file given with
/// --config, then command-line flags.
#[derive(Parser)]
#[command(name = "vecsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its metrics and dynamics trace.
    Run(RunArgs),
    /// Run a policy/value/seed cross product and write mean metrics.
    Sweep(SweepArgs),
    /// Run a seeded property suite and print a JSON report.
    Verify(VerifyArgs),
    /// Serve the step/reset protocol on stdio or a local TCP port.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Episode seed [default: rng_seed from the config, else 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Mobility trace CSV (vehicle_id,slot,x_m,y_m) [default: synthetic fleet].
    #[arg(long)]
    mobility: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// game, orm, orl or random.
    #[arg(long, default_value = "game")]
    policy: PolicyKind,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario TOML; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    axis: SweepAxis,
    /// Comma-separated axis values (probabilities, or GHz for cpu_range).
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    values: Vec<f64>,
    /// Comma-separated policies.
    #[arg(long, num_args = 1.., value_delimiter = ',', default_value = "game,orm,orl,random")]
    policies: Vec<PolicyKind>,
    /// Seeds per cell; episodes use seeds base..base+N.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    /// First seed [default: rng_seed from the config].
    #[arg(long)]
    seed: Option<u64>,
    /// Aggregate CSV path.
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// epg, allocators, dynamics or all.
    #[arg(long, default_value = "all")]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Listen on 127.0.0.1:PORT instead of stdio; 0 picks a free port.
    #[arg(long)]
    port: Option<u16>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return usage_error(e),
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Serve(args) => cmd_serve(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Prints a parse error followed by the usage line; exit code 2 for misuse.
fn usage_error(e: clap::Error) -> ExitCode {
    let _ = e.print();
    if e.use_stderr() {
        eprintln!("\n{}", Cli::command().render_usage());
    }
    ExitCode::from(e.exit_code() as u8)
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("VECSIM_THREADS") {
        let n: usize = v.parse().with_context(|| format!("VECSIM_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let s = &args.scenario;
    let cfg = resolve_config(s.config.as_deref(), s.seed)?;
    let seed = cfg.rng_seed;
    let traj = resolve_mobility(s.mobility.as_deref(), &cfg, seed)?;
    let run = run_episode(args.policy, &cfg, &traj, seed, &EnvParams::default());

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let stem = format!("{}_seed{seed}", args.policy);
    let metrics_path = args.out.join(format!("{stem}_metrics.csv"));
    let trace_path = args.out.join(format!("{stem}_dynamics.csv"));
    fs::write(&metrics_path, write_metrics_csv(&run.outcomes, &run.metrics))?;
    fs::write(&trace_path, write_trace_csv(&run.trace))?;

    let m = &run.metrics;
    println!("policy {} seed {seed}: {} slots, {} tasks", args.policy, m.slots, m.k_total);
    println!(
        "asr {:.4}  cr {:.4}  aap {:.4}  ast {:.4} s  apt {:.4} s  local {:.3}",
        m.asr, m.cr, m.aap, m.ast, m.apt, m.p_local
    );
    println!("wrote {} and {}", metrics_path.display(), trace_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<ExitCode> {
    let cfg = resolve_config(args.config.as_deref(), args.seed)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| cfg.rng_seed + i).collect();
    let rows = run_sweep(&cfg, args.axis, &args.values, &args.policies, &seeds, &EnvParams::default())?;
    fs::write(&args.out, write_sweep_csv(&rows)?).with_context(|| format!("writing {}", args.out.display()))?;
    for r in &rows {
        println!("{:>6} {:<6} asr {:.4} cr {:.4}", r.value, r.policy, r.asr, r.cr);
    }
    println!(
        "{} episodes, table in {}",
        args.values.len() * args.policies.len() * seeds.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> anyhow::Result<ExitCode> {
    let report = run_suite(args.suite, args.seed);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_serve(args: ServeArgs) -> anyhow::Result<ExitCode> {
    let s = &args.scenario;
    let cfg = resolve_config(s.config.as_deref(), s.seed)?;
    let seed = cfg.rng_seed;
    let traj = resolve_mobility(s.mobility.as_deref(), &cfg, seed)?;
    let mut server = BridgeServer::new(cfg, traj, seed, EnvParams::default());
    match args.port {
        Some(port) => {
            let (listener, addr) = bind(port)?;
            eprintln!("listening on {addr}");
            server.serve_tcp(listener)?;
        }
        None => {
            server.serve(io::stdin().lock(), io::stdout().lock())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
