use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Subcommand;
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};

use epione::group::GroupElement;
use epione::net::{RemoteServer, TcpTransport};
use epione::psica::PsiConfig;
use epione::system::{ClientApp, ClientConfig, PublicParams};
use epione::tokens::{ContactLog, Seed};

use crate::roles::{read_json, SealedUpload};
use crate::ScheduleArgs;

#[derive(Subcommand)]
pub enum ClientCommand {
    /// Create a new client state file.
    Init {
        #[arg(long)]
        state: PathBuf,
        /// Public parameters written by `keygen`.
        #[arg(long)]
        public: PathBuf,
        #[command(flatten)]
        schedule: ScheduleArgs,
        /// Pad transform batches to this many tokens.
        #[arg(long)]
        pad_to: Option<usize>,
        #[arg(long)]
        no_cache: bool,
    },
    /// Record an encounter between two local clients.
    Exchange {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        with: PathBuf,
        #[arg(long)]
        day: u32,
        #[arg(long, default_value_t = 0)]
        slot: u32,
    },
    /// Seal this client's seed for upload after a positive test.
    Diagnose {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        day: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the daily check against both servers.
    Query {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        server1: String,
        #[arg(long)]
        server2: String,
        /// Defaults to the newest day the servers hold.
        #[arg(long)]
        day: Option<u32>,
        /// Show only whether an alert is raised, not the match count.
        #[arg(long)]
        boolean_only: bool,
    },
    /// Print the client id (for the provider's allowlist).
    Id {
        #[arg(long)]
        state: PathBuf,
    },
}

/// On-disk client state. The transform cache is not kept.
#[derive(Serialize, Deserialize)]
struct ClientFile {
    id: String,
    seed: String,
    config: ClientConfig,
    server_pk: String,
    /// Contact log records, hex.
    log: String,
    last_query_day: Option<u32>,
    alerted_on: Option<u32>,
}

fn load(path: &Path) -> Result<ClientApp> {
    let f: ClientFile = read_json(path)?;
    let id: [u8; 16] = hex::decode(&f.id)?.try_into().map_err(|_| anyhow!("bad client id"))?;
    let seed: [u8; 32] = hex::decode(&f.seed)?.try_into().map_err(|_| anyhow!("bad seed"))?;
    let pk = GroupElement::from_bytes(&hex::decode(&f.server_pk)?)?;
    let mut app = ClientApp::from_seed(id, Seed::from_bytes(seed), f.config, pk, &mut OsRng);
    app.set_log(
        ContactLog::read_from(&hex::decode(&f.log)?[..], f.config.schedule.window_days).context("contact log")?,
    );
    app.set_last_query_day(f.last_query_day);
    app.set_alerted_on(f.alerted_on);
    Ok(app)
}

fn save(path: &Path, app: &ClientApp, server_pk: &str) -> Result<()> {
    let mut log = Vec::new();
    app.log().write_to(&mut log)?;
    let f = ClientFile {
        id: hex::encode(app.id),
        seed: hex::encode(app.seed_for_export().as_bytes()),
        config: *app.config(),
        server_pk: server_pk.to_string(),
        log: hex::encode(log),
        last_query_day: app.last_query_day(),
        alerted_on: app.alerted_on(),
    };
    fs::write(path, serde_json::to_vec_pretty(&f)?)?;
    Ok(())
}

fn server_pk_hex(path: &Path) -> Result<String> {
    let f: ClientFile = read_json(path)?;
    Ok(f.server_pk)
}

pub fn run(cmd: ClientCommand) -> Result<()> {
    match cmd {
        ClientCommand::Init { state, public, schedule, pad_to, no_cache } => {
            let p: PublicParams = read_json(&public)?;
            let config = ClientConfig {
                schedule: schedule.schedule(),
                retention_days: schedule.retention_days,
                caching: !no_cache,
                psi: PsiConfig { pad_to, batch_proof: false },
                commit_before_query: false,
            };
            let app = ClientApp::new(config, p.upload_public()?, &mut OsRng);
            save(&state, &app, &p.upload_public)?;
            println!("{}", hex::encode(app.id));
        }
        ClientCommand::Exchange { state, with, day, slot } => {
            let (mut a, mut b) = (load(&state)?, load(&with)?);
            let (ta, tb) = (a.sent_token(day, slot), b.sent_token(day, slot));
            a.record(tb, day);
            b.record(ta, day);
            save(&state, &a, &server_pk_hex(&state)?)?;
            save(&with, &b, &server_pk_hex(&with)?)?;
        }
        ClientCommand::Diagnose { state, day, out } => {
            let app = load(&state)?;
            let sealed = app.diagnosis_payload(true, day, &mut OsRng).expect("consented");
            let u = SealedUpload { patient: hex::encode(app.id), sealed: hex::encode(sealed.0) };
            fs::write(&out, serde_json::to_vec_pretty(&u)?)?;
        }
        ClientCommand::Query { state, server1, server2, day, boolean_only } => {
            let mut app = load(&state)?;
            let s1 = RemoteServer::new(TcpTransport::connect(&server1)?);
            let s2 = RemoteServer::new(TcpTransport::connect(&server2)?);
            s1.authenticate(app.id)?;
            let retained = s1.retained_days()?;
            let Some(day) = day.or_else(|| retained.last().copied()) else {
                bail!("the servers hold no databases yet");
            };
            let out = app.daily_query(day, &s1, &s2, &retained, &mut OsRng)?;
            save(&state, &app, &server_pk_hex(&state)?)?;
            let alert = if app.is_alerted(day) { "ALERT" } else { "no alert" };
            if boolean_only {
                println!("day {day}: {alert}");
            } else {
                println!("day {day}: checked {:?}, {} matches, {alert}", out.days_checked, out.result.cardinality);
            }
        }
        ClientCommand::Id { state } => println!("{}", hex::encode(load(&state)?.id)),
    }
    Ok(())
}
