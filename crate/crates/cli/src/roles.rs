use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;
use log::{info, warn};
use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use epione::net::{Message, RemoteReplica, RemoteServer, TcpServer, TcpTransport, Transport};
use epione::par::Parallelism;
use epione::psica::ServerPolicy;
use epione::serverdb::{build_day, ingest, BuildConfig, DayStore, EncryptedSeed};
use epione::system::{
    simulate as run_sim, Provider, Server1, Server1Config, Server1Secrets, Server2, Server2Secrets, SimConfig,
};

use crate::ScheduleArgs;

pub const SECRETS_FILE: &str = "server1.json";
pub const PUBLIC_FILE: &str = "public.json";
pub const SERVER2_FILE: &str = "server2.json";

/// What `client diagnose` writes and the provider reads.
#[derive(Serialize, Deserialize)]
pub struct SealedUpload {
    pub patient: String,
    pub sealed: String,
}

impl SealedUpload {
    pub fn read(path: &Path) -> Result<([u8; 16], EncryptedSeed)> {
        let u: SealedUpload =
            serde_json::from_slice(&fs::read(path)?).with_context(|| format!("{}", path.display()))?;
        let patient: [u8; 16] =
            hex::decode(&u.patient)?.try_into().map_err(|_| anyhow::anyhow!("patient id is not 16 bytes"))?;
        let sealed = EncryptedSeed::from_bytes(&hex::decode(&u.sealed)?)?;
        Ok((patient, sealed))
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&raw).with_context(|| format!("parsing {}", path.display()))
}

fn parallelism(sequential: bool) -> Parallelism {
    if sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Rayon
    }
}

pub fn keygen(out_dir: &Path, epoch: u32, seed: Option<u64>) -> Result<()> {
    let secrets = match seed {
        Some(s) => Server1Secrets::generate(epoch, &mut ChaCha20Rng::seed_from_u64(s)),
        None => Server1Secrets::generate(epoch, &mut OsRng),
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(SECRETS_FILE), serde_json::to_vec_pretty(&secrets)?)?;
    fs::write(out_dir.join(PUBLIC_FILE), serde_json::to_vec_pretty(&secrets.public()?)?)?;
    fs::write(out_dir.join(SERVER2_FILE), serde_json::to_vec_pretty(&secrets.server2())?)?;
    println!("wrote {SECRETS_FILE}, {SERVER2_FILE} and {PUBLIC_FILE} to {}", out_dir.display());
    Ok(())
}

#[derive(Args)]
pub struct Server1Args {
    /// Secrets written by `keygen`.
    #[arg(long)]
    keys: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7001")]
    listen: String,
    /// Address of server 2.
    #[arg(long)]
    server2: String,
    /// Persist each built day here, and reload retained days on start.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 86_400)]
    day_length_secs: u64,
    #[arg(long, default_value_t = 1)]
    start_day: u32,
    /// Stop the day clock after this many days (0 never stops). Serving continues.
    #[arg(long, default_value_t = 0)]
    days: u32,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 64)]
    min_batch: usize,
    #[arg(long, default_value_t = 4)]
    queries_per_day: u32,
    /// Truncated token length in bits.
    #[arg(long, default_value_t = 74)]
    token_bits: u16,
    /// Accept transform requests without a client credential.
    #[arg(long)]
    no_auth: bool,
    /// Run the provider in this process: verify against this allowlist and
    /// take sealed uploads from `--provider-inbox`.
    #[arg(long, requires = "provider_inbox")]
    provider_allowlist: Option<PathBuf>,
    /// Directory of `client diagnose` files, drained at each end of day.
    #[arg(long, requires = "provider_allowlist")]
    provider_inbox: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

fn connect_retry(addr: &str) -> Result<TcpTransport> {
    let mut last = None;
    for _ in 0..30 {
        match TcpTransport::connect(addr) {
            Ok(t) => return Ok(t),
            Err(e) => last = Some(e),
        }
        thread::sleep(Duration::from_secs(1));
    }
    bail!("cannot reach {addr}: {}", last.unwrap())
}

pub fn server1(a: Server1Args) -> Result<()> {
    let secrets: Server1Secrets = read_json(&a.keys)?;
    let par = parallelism(a.sequential);
    let config = Server1Config {
        schedule: a.schedule.schedule(),
        build: BuildConfig { token_bits: Some(a.token_bits), parallelism: par, ..BuildConfig::default() },
        policy: ServerPolicy { min_batch: a.min_batch, queries_per_day: a.queries_per_day, ..ServerPolicy::default() },
        retention_days: a.schedule.retention_days,
        require_auth: !a.no_auth,
        require_batch_proof: false,
        parallelism: par,
    };
    let server = Arc::new(Server1::new(secrets.upload_keys()?, secrets.key_state()?, config));

    let link = connect_retry(&a.server2)?;
    match link.request(&Message::Auth { credential: secrets.sync_credential()? })? {
        Message::Ack => {}
        m => bail!("server 2 refused the sync credential: {}", m.name()),
    }
    let replica = RemoteReplica(link);

    let mut day = a.start_day;
    if let Some(dir) = &a.data_dir {
        fs::create_dir_all(dir)?;
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries.into_iter().filter(|p| p.join("manifest.json").exists()) {
            let store = DayStore::read_dir(&p).with_context(|| format!("loading {}", p.display()))?;
            epione::serverdb::publish(&store, &replica, 3)?;
            let d = store.day;
            server.install_day(store);
            day = day.max(d + 1);
            info!("reloaded day {d}");
        }
    }

    let tcp = TcpServer::spawn(&a.listen, server.clone())?;
    println!("server1 listening on {}", tcp.local_addr());
    let mut built = 0;
    while a.days == 0 || built < a.days {
        thread::sleep(Duration::from_secs(a.day_length_secs));
        if let (Some(allow), Some(inbox)) = (&a.provider_allowlist, &a.provider_inbox) {
            drain_inbox(&server, allow, inbox)?;
        }
        let report = server.end_of_day(day, Some(&replica))?;
        if let Some(dir) = &a.data_dir {
            server.day_store(day).expect("just built").write_dir(&dir.join(format!("day-{day:06}")))?;
        }
        println!(
            "day {day} built: {} uploads, {} tokens, digest {}",
            report.uploads_accepted,
            report.info.token_count,
            hex::encode(report.info.digest)
        );
        day += 1;
        built += 1;
    }
    tcp.join();
    Ok(())
}

#[derive(Args)]
pub struct Server2Args {
    /// `server2.json` written by `keygen`.
    #[arg(long)]
    keys: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7002")]
    listen: String,
    #[arg(long, default_value_t = epione::serverdb::DEFAULT_RETENTION_DAYS)]
    retention_days: u32,
    #[arg(long)]
    sequential: bool,
}

pub fn server2(a: Server2Args) -> Result<()> {
    let keys: Server2Secrets = read_json(&a.keys)?;
    let server = Arc::new(Server2::new(a.retention_days, Some(keys.sync_credential()?), parallelism(a.sequential)));
    let tcp = TcpServer::spawn(&a.listen, server)?;
    println!("server2 listening on {}", tcp.local_addr());
    tcp.join();
    Ok(())
}

#[derive(Args)]
pub struct ProviderArgs {
    #[arg(long)]
    server1: String,
    /// Verified patient ids, one hex id per line.
    #[arg(long)]
    allowlist: PathBuf,
    /// Files written by `client diagnose`.
    #[arg(required = true)]
    uploads: Vec<PathBuf>,
}

fn read_allowlist(path: &Path) -> Result<Vec<[u8; 16]>> {
    let mut ids = Vec::new();
    for line in fs::read_to_string(path)?.lines().map(str::trim).filter(|l| !l.is_empty()) {
        ids.push(<[u8; 16]>::try_from(hex::decode(line)?).map_err(|_| anyhow::anyhow!("bad id {line}"))?);
    }
    Ok(ids)
}

/// Returns how many were rejected.
fn submit_files(provider: &mut Provider, files: &[PathBuf]) -> Result<usize> {
    let mut rejected = 0;
    for path in files {
        let (patient, sealed) = SealedUpload::read(path)?;
        if provider.submit(patient, sealed).is_err() {
            warn!("{}: patient not verified", path.display());
            rejected += 1;
        }
    }
    Ok(rejected)
}

/// Colocated provider: drain the inbox into server 1.
fn drain_inbox(server: &Server1, allowlist: &Path, inbox: &Path) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(inbox)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut provider = Provider::new(read_allowlist(allowlist)?);
    let rejected = submit_files(&mut provider, &files)?;
    let (_, batch) = provider.flush(&mut OsRng);
    info!("inbox: {} accepted, {rejected} rejected", batch.len());
    server.receive_batch(batch);
    for f in files {
        fs::remove_file(f)?;
    }
    Ok(())
}

pub fn provider(a: ProviderArgs) -> Result<()> {
    let mut provider = Provider::new(read_allowlist(&a.allowlist)?);
    let rejected = submit_files(&mut provider, &a.uploads)?;
    if provider.pending() == 0 {
        bail!("no verified uploads");
    }
    let n = provider.pending();
    let (batch_id, batch) = provider.flush(&mut OsRng);
    RemoteServer::new(TcpTransport::connect(&a.server1)?).upload_diagnoses(batch_id, &batch)?;
    println!("forwarded batch {} with {n} seeds ({rejected} rejected)", hex::encode(batch_id));
    Ok(())
}

#[derive(Args)]
pub struct BuildDbArgs {
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    day: u32,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Truncated token length in bits.
    #[arg(long, default_value_t = 74)]
    token_bits: u16,
    #[arg(long)]
    sequential: bool,
    /// Files written by `client diagnose`.
    uploads: Vec<PathBuf>,
}

pub fn build_db(a: BuildDbArgs) -> Result<()> {
    let secrets: Server1Secrets = read_json(&a.keys)?;
    let sealed: Vec<EncryptedSeed> =
        a.uploads.iter().map(|p| SealedUpload::read(p).map(|(_, s)| s)).collect::<Result<_>>()?;
    let rep = ingest(&sealed, &secrets.upload_keys()?, a.schedule.schedule());
    let config = BuildConfig {
        token_bits: Some(a.token_bits),
        parallelism: parallelism(a.sequential),
        ..BuildConfig::default()
    };
    let store = build_day(&rep.tokens, &secrets.key_state()?, &config, a.day)?;
    store.write_dir(&a.out)?;
    let info = store.info();
    println!(
        "day {} ({} accepted, {} rejected): {} tokens, layout {:?}, {} bytes, digest {}",
        a.day,
        rep.accepted,
        rep.rejected,
        info.token_count,
        info.layout,
        store.size_bytes(),
        hex::encode(info.digest)
    );
    Ok(())
}

pub fn simulate(config: &Path, seed: u64, out: Option<&Path>) -> Result<()> {
    let cfg = SimConfig::from_file(config)?;
    let result = run_sim(&cfg, seed)?;
    for l in &result.report.lines {
        println!("{l}");
    }
    if let Some(p) = out {
        fs::write(p, result.report.lines.join("\n") + "\n")?;
    }
    eprintln!("summary: {}", result.report.summary());
    if result.report.mismatches > 0 || result.report.failed_sessions > 0 {
        bail!("{} mismatched and {} failed sessions", result.report.mismatches, result.report.failed_sessions);
    }
    Ok(())
}
