use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use nn_emd::config::{Role, RunConfig};
use nn_emd::{bench, roles, run};

#[derive(Parser)]
#[command(name = "nn-emd", version, about = "Train an MLP over encrypted multi-source data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    unsafe_override_privacy_guard: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Authority, clients and server in one process
    Run(Common),
    /// Per-mini-batch timing across hidden-layer depths
    Bench(Common),
    Tpa(Common),
    Server(Common),
    Client(Common),
}

fn load(common: &Common, role: Role) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.unsafe_override_privacy_guard |= common.unsafe_override_privacy_guard;
    cfg.role = role;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => load(c, Role::AllInOne).and_then(|cfg| {
            let s = run::run_all_in_one(&cfg)?;
            println!("{}", serde_json::to_string(&s)?);
            Ok(())
        }),
        Command::Bench(c) => load(c, Role::AllInOne).and_then(|cfg| {
            let rows = bench::bench(&cfg)?;
            bench::print_report(&rows, std::io::stdout())?;
            for r in &rows {
                println!("{}", serde_json::to_string(r)?);
            }
            Ok(())
        }),
        Command::Tpa(c) => load(c, Role::Tpa).and_then(|cfg| roles::run_tpa(&cfg)),
        Command::Server(c) => load(c, Role::Server).and_then(|cfg| {
            let s = roles::run_server(&cfg)?;
            println!("{}", serde_json::to_string(&s)?);
            Ok(())
        }),
        Command::Client(c) => load(c, Role::Client).and_then(|cfg| roles::run_client(&cfg)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
