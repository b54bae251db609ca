use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fastadasp_bench::config::{parse_target, FileConfig, OperationLayer, Overrides, SEED_ENV};
use fastadasp_bench::fixture::{generate_fixture, write_fixture};
use fastadasp_bench::run::{run_and_write, run_sweep};
use fastadasp_bench::{BenchError, Result};

/// Token-reduction benchmark runner on a seeded synthetic decoder.
#[derive(Parser, Debug)]
#[command(name = "adasp-bench", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// TOML config file; flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Reduction policy id (weighted_merge, average_merge, atome, fastv, random_merge, random_evict, none)
    #[arg(long)]
    policy: Option<String>,

    /// FLOPs reduction target, as a ratio (0.3) or percentage (30%)
    #[arg(long, value_parser = target_arg)]
    target: Option<f64>,

    /// Audio tokens to remove, instead of a target
    #[arg(long)]
    k_tokens: Option<usize>,

    /// constant, decay or single_layer
    #[arg(long)]
    schedule: Option<String>,

    /// Operation layer for single_layer schedules, or "auto"
    #[arg(long, value_parser = layer_arg)]
    layer: Option<OperationLayer>,

    /// Seed for weights, prompt and random policies [env: ADASP_SEED]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Timed runs after the warm-up
    #[arg(long)]
    repeats: Option<usize>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Run every configured policy at every configured target
    #[arg(long)]
    sweep: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write weights, manifest and prompt files for the configured fixture
    GenFixture {
        #[arg(long)]
        audio_len: Option<usize>,
        #[arg(long)]
        text_len: Option<usize>,
        #[arg(long)]
        redundancy: Option<f64>,
    },
}

fn target_arg(s: &str) -> std::result::Result<f64, String> {
    parse_target(s).map_err(|e| e.to_string())
}

fn layer_arg(s: &str) -> std::result::Result<OperationLayer, String> {
    s.parse().map_err(|e: BenchError| e.to_string())
}

fn load_file(cli: &Cli) -> Result<FileConfig> {
    match &cli.config {
        Some(path) => FileConfig::load(path),
        None => Ok(FileConfig::default()),
    }
}

fn overrides(cli: &Cli) -> Overrides {
    Overrides {
        policy: cli.policy.clone(),
        target: cli.target,
        k_tokens: cli.k_tokens,
        schedule: cli.schedule.clone(),
        layer: cli.layer,
        seed: cli.seed,
        repeats: cli.repeats,
        out: cli.out.clone(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut file = load_file(&cli)?;
    let env_seed = std::env::var(SEED_ENV).ok();
    let over = overrides(&cli);

    if let Some(Command::GenFixture {
        audio_len,
        text_len,
        redundancy,
    }) = cli.command
    {
        let f = &mut file.fixture;
        f.audio_len = audio_len.unwrap_or(f.audio_len);
        f.text_len = text_len.unwrap_or(f.text_len);
        f.redundancy = redundancy.unwrap_or(f.redundancy);
        let (model, spec) = file.resolve_fixture(&over, env_seed.as_deref())?;
        let dir = over.out.clone().or(spec.dir.clone()).unwrap_or_else(|| file.out.clone());
        let fixture = generate_fixture(&model, &spec)?;
        for path in write_fixture(&dir, &fixture, &spec)? {
            println!("wrote {}", path.display());
        }
        return Ok(());
    }

    if cli.sweep {
        let spec = file.resolve_sweep(&over, env_seed.as_deref())?;
        println!(
            "sweep: {} policies x {} targets on {} workers",
            spec.policies.len(),
            spec.targets.len(),
            spec.workers
        );
        let outcome = run_sweep(&spec)?;
        for path in &outcome.files {
            println!("wrote {}", path.display());
        }
        return Ok(());
    }

    let cfg = file.resolve_run(&over, env_seed.as_deref())?;
    let (outcome, files) = run_and_write(&cfg)?;
    let r = &outcome.report;
    println!(
        "{} {} layers [{}]: k_tokens={} flops_reduction={:.2}% rtf={:.4} throughput={:.2} tok/s",
        r.policy,
        r.schedule,
        r.layers_label(),
        r.k_tokens,
        r.flops_reduction_pct,
        r.rtf,
        r.throughput
    );
    for path in files {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
