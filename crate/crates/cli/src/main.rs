mod bench;
mod client;
mod roles;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "epione",
    version,
    about = "Private contact-tracing matching: servers, provider, client and simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Token schedule and retention, shared by every role.
#[derive(Args, Clone, Copy, Debug)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 80)]
    pub slots_per_day: u32,
    #[arg(long, default_value_t = 14)]
    pub window_days: u32,
    #[arg(long, default_value_t = epione::serverdb::DEFAULT_RETENTION_DAYS)]
    pub retention_days: u32,
}

impl ScheduleArgs {
    pub fn schedule(&self) -> epione::tokens::TokenSchedule {
        epione::tokens::TokenSchedule { slots_per_day: self.slots_per_day, window_days: self.window_days }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate server 1's secrets and the public parameters.
    Keygen {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        epoch: u32,
        /// Deterministic keys, for tests only.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the transform server and first PIR server.
    Server1(roles::Server1Args),
    /// Run the second PIR server.
    Server2(roles::Server2Args),
    /// Verify patients and forward their sealed seeds to server 1 in one shuffled batch.
    Provider(roles::ProviderArgs),
    /// Client app operations.
    Client {
        #[command(subcommand)]
        command: client::ClientCommand,
    },
    /// Build a day's database offline from sealed seed files.
    BuildDb(roles::BuildDbArgs),
    /// Run an in-process deployment and print the per-session report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report lines here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the hot paths, sequential against parallel.
    Bench(bench::BenchArgs),
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Keygen { out_dir, epoch, seed } => roles::keygen(&out_dir, epoch, seed),
        Command::Server1(a) => roles::server1(a),
        Command::Server2(a) => roles::server2(a),
        Command::Provider(a) => roles::provider(a),
        Command::Client { command } => client::run(command),
        Command::BuildDb(a) => roles::build_db(a),
        Command::Simulate { config, seed, out } => roles::simulate(&config, seed, out.as_deref()),
        Command::Bench(a) => bench::run(a),
    }
}
