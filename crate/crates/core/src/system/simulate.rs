use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{find_windows, ClientApp, ClientConfig, Provider, Server1, Server1Config, Server1Secrets, Server2};
use crate::net::{
    msg_type, Direction, Handler, LocalTransport, Message, RecordingHandler, RemoteReplica, RemoteServer, TcpServer,
    TcpTransport, Transcript, Transport, WireError,
};
use crate::par::Parallelism;
use crate::psica::{PsiConfig, PsiError, ServerPolicy};
use crate::serverdb::{BuildConfig, DbError, EncryptedSeed};
use crate::tokens::{Seed, Token, TokenSchedule};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Local,
    Tcp,
}

/// Simulation parameters, read from TOML. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub population: usize,
    pub days: u32,
    pub start_day: u32,
    /// Encounters each user initiates per day.
    pub contacts_per_day: usize,
    /// Users diagnosed over the run.
    pub diagnoses: usize,
    /// Earliest day a diagnosis can happen.
    pub first_diagnosis_day: u32,
    pub consent_probability: f64,
    /// Chance a client skips a day's query.
    pub offline_probability: f64,
    pub slots_per_day: u32,
    pub window_days: u32,
    pub retention_days: u32,
    pub token_bits: Option<u16>,
    pub transport: TransportKind,
    pub caching: bool,
    pub pad_to: Option<usize>,
    pub batch_proof: bool,
    pub min_batch: usize,
    pub queries_per_day: u32,
    pub parallelism: Parallelism,
    /// Run the provider inside server 1: batches skip the network hop.
    pub colocated_provider: bool,
    /// Keep full server-side frames for [`dataflow_check`].
    pub keep_frames: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            population: 40,
            days: 8,
            start_day: 1,
            contacts_per_day: 4,
            diagnoses: 3,
            first_diagnosis_day: 2,
            consent_probability: 1.0,
            offline_probability: 0.0,
            slots_per_day: 80,
            window_days: 14,
            retention_days: 15,
            token_bits: None,
            transport: TransportKind::Local,
            caching: true,
            pad_to: None,
            batch_proof: false,
            min_batch: 1,
            queries_per_day: 4,
            parallelism: Parallelism::default(),
            colocated_provider: false,
            keep_frames: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Psi(#[from] PsiError),
}

impl SimConfig {
    pub fn from_toml(s: &str) -> Result<Self, SimError> {
        let c: SimConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.population < 2 {
            return bad("population must be at least 2");
        }
        if self.days == 0 || self.start_day == 0 {
            return bad("days and start_day must be positive");
        }
        if self.diagnoses > self.population {
            return bad("more diagnoses than users");
        }
        if !(0.0..=1.0).contains(&self.consent_probability) || !(0.0..=1.0).contains(&self.offline_probability) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.slots_per_day == 0 || self.window_days == 0 || self.retention_days == 0 {
            return bad("slots_per_day, window_days and retention_days must be positive");
        }
        if self.queries_per_day == 0 {
            return bad("queries_per_day must be positive");
        }
        if let Some(b) = self.token_bits {
            if !(16..=128).contains(&b) {
                return bad("token_bits must be in 16..=128");
            }
        }
        Ok(())
    }

    fn last_day(&self) -> u32 {
        self.start_day + self.days - 1
    }

    fn schedule(&self) -> TokenSchedule {
        TokenSchedule { slots_per_day: self.slots_per_day, window_days: self.window_days }
    }
}

/// Deterministic results plus timings.
#[derive(Clone, Debug, Default)]
pub struct SimReport {
    /// One line per event. Identical for identical config and seed,
    /// whichever transport is used.
    pub lines: Vec<String>,
    pub sessions: usize,
    pub failed_sessions: usize,
    /// Sessions whose count differed from the plaintext ground truth.
    pub mismatches: usize,
    pub exposed_clients: usize,
    pub alerted_clients: usize,
    pub false_alerts: usize,
    pub missed_alerts: usize,
    pub upload_bytes: usize,
    pub download_bytes: usize,
    pub timings: Vec<(&'static str, Duration)>,
}

impl SimReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "sessions={} failed={} mismatches={} exposed={} alerted={} false_alerts={} missed={} up={}B down={}B",
            self.sessions,
            self.failed_sessions,
            self.mismatches,
            self.exposed_clients,
            self.alerted_clients,
            self.false_alerts,
            self.missed_alerts,
            self.upload_bytes,
            self.download_bytes
        );
        for (name, d) in &self.timings {
            s.push_str(&format!(" {name}={:.3}s", d.as_secs_f64()));
        }
        s
    }

    /// Hash over the report lines.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for l in &self.lines {
            h.update(l.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }
}

/// Everything a run produced, including what each party received.
pub struct SimOutput {
    pub report: SimReport,
    pub server1_traffic: Transcript,
    pub server2_traffic: Transcript,
    /// Sealed seeds as handed to the provider.
    pub provider_received: Vec<EncryptedSeed>,
    pub seeds: Vec<Seed>,
    /// Every token exchanged between users.
    pub contact_tokens: HashSet<Token>,
    /// Every encounter, in order.
    pub contacts: Vec<Encounter>,
}

/// Users `a` and `b` swapped their tokens for `(day, slot)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Encounter {
    pub day: u32,
    pub slot: u32,
    pub a: usize,
    pub b: usize,
}

struct Endpoints {
    server1: Arc<dyn Handler>,
    server2: Arc<dyn Handler>,
    tcp: Option<(TcpServer, TcpServer)>,
}

impl Endpoints {
    fn start(kind: TransportKind, server1: Arc<dyn Handler>, server2: Arc<dyn Handler>) -> Result<Self, SimError> {
        let tcp = match kind {
            TransportKind::Local => None,
            TransportKind::Tcp => Some((
                TcpServer::spawn("127.0.0.1:0", server1.clone())?,
                TcpServer::spawn("127.0.0.1:0", server2.clone())?,
            )),
        };
        Ok(Endpoints { server1, server2, tcp })
    }

    fn connect(&self, second: bool, transcript: Option<(&Transcript, &str)>) -> Result<Arc<dyn Transport>, SimError> {
        Ok(match &self.tcp {
            None => {
                let h = if second { &self.server2 } else { &self.server1 };
                let t = LocalTransport::new(h.clone());
                match transcript {
                    Some((tr, label)) => Arc::new(t.with_transcript(tr.clone(), label)),
                    None => Arc::new(t),
                }
            }
            Some((s1, s2)) => {
                let addr = if second { s2.local_addr() } else { s1.local_addr() };
                let t = TcpTransport::connect_with_timeout(addr, Some(Duration::from_secs(60)))?;
                match transcript {
                    Some((tr, label)) => Arc::new(t.with_transcript(tr.clone(), label)),
                    None => Arc::new(t),
                }
            }
        })
    }
}

fn transcript_digest(t: &Transcript) -> String {
    let mut h = Sha256::new();
    for e in t.entries() {
        h.update(e.peer.as_bytes());
        h.update([e.direction as u8]);
        h.update(e.sha256);
    }
    hex::encode(&h.finalize()[..8])
}

struct Upload {
    sender: usize,
    end_day: u32,
}

/// Run the whole system for `config.days` days. All randomness comes from
/// `seed`.
pub fn simulate(config: &SimConfig, seed: u64) -> Result<SimOutput, SimError> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let schedule = config.schedule();
    let mut report = SimReport::default();
    let t_start = Instant::now();

    let secrets = Server1Secrets::generate(1, &mut rng);
    let sync_credential = secrets.sync_credential().expect("fresh credential");
    let upload_keys = secrets.upload_keys().expect("fresh keys");
    let server_pk = upload_keys.public;
    let n_upper = (config.population as u64 * schedule.tokens_per_window() as u64).max(2);
    let s1_config = Server1Config {
        schedule,
        build: BuildConfig {
            token_bits: config.token_bits,
            n_upper,
            parallelism: config.parallelism,
            ..BuildConfig::default()
        },
        policy: ServerPolicy {
            min_batch: config.min_batch,
            queries_per_day: config.queries_per_day,
            ..ServerPolicy::default()
        },
        retention_days: config.retention_days,
        require_auth: true,
        require_batch_proof: config.batch_proof,
        parallelism: config.parallelism,
    };
    let server1 = Arc::new(Server1::new(upload_keys, secrets.key_state().expect("fresh key"), s1_config));
    let server2 = Arc::new(Server2::new(config.retention_days, Some(sync_credential), config.parallelism));
    let (s1_traffic, s2_traffic) = if config.keep_frames {
        (Transcript::keeping_frames(), Transcript::keeping_frames())
    } else {
        (Transcript::new(), Transcript::new())
    };
    let endpoints = Endpoints::start(
        config.transport,
        Arc::new(RecordingHandler::new(server1.clone(), s1_traffic.clone(), "server1")),
        Arc::new(RecordingHandler::new(server2.clone(), s2_traffic.clone(), "server2")),
    )?;

    let replica_link = endpoints.connect(true, None)?;
    if !matches!(replica_link.request(&Message::Auth { credential: sync_credential })?, Message::Ack) {
        return Err(SimError::Config("server 2 refused the sync credential".into()));
    }
    let replica = RemoteReplica(replica_link);
    let provider_link = RemoteServer::new(endpoints.connect(false, None)?);

    let client_config = ClientConfig {
        schedule,
        retention_days: config.retention_days,
        caching: config.caching,
        psi: PsiConfig { pad_to: config.pad_to, batch_proof: config.batch_proof },
        commit_before_query: false,
    };
    let mut clients = Vec::with_capacity(config.population);
    let mut seeds = Vec::with_capacity(config.population);
    for _ in 0..config.population {
        let mut id = [0u8; 16];
        rng.fill(&mut id);
        let s = Seed::random(&mut rng);
        seeds.push(s.clone());
        clients.push(ClientApp::from_seed(id, s, client_config, server_pk, &mut rng));
    }

    // Diagnosis schedule: (user, day, consent).
    let mut diagnosed: BTreeMap<u32, Vec<(usize, bool)>> = BTreeMap::new();
    let first = config.first_diagnosis_day.clamp(config.start_day, config.last_day());
    for user in sample(&mut rng, config.population, config.diagnoses).into_vec() {
        let day = rng.gen_range(first..=config.last_day());
        let consent = rng.gen_bool(config.consent_probability);
        diagnosed.entry(day).or_default().push((user, consent));
    }
    for v in diagnosed.values_mut() {
        v.sort();
    }
    let mut provider = Provider::new(diagnosed.values().flatten().map(|(u, _)| clients[*u].id));

    // Ground truth, kept in the clear: who sent each token and when, and
    // which uploads each day's database holds.
    let mut sent_by: HashMap<Token, (usize, u32)> = HashMap::new();
    let mut uploads_by_day: BTreeMap<u32, Vec<Upload>> = BTreeMap::new();
    let mut provider_received = Vec::new();
    let mut contacts = Vec::new();
    let mut exposed = vec![false; config.population];
    let mut alerted = vec![false; config.population];

    let mut t_contacts = Duration::ZERO;
    let mut t_build = Duration::ZERO;
    let mut t_queries = Duration::ZERO;

    for day in config.start_day..=config.last_day() {
        let t0 = Instant::now();
        for i in 0..config.population {
            for _ in 0..config.contacts_per_day {
                let mut j = rng.gen_range(0..config.population - 1);
                if j >= i {
                    j += 1;
                }
                let slot = rng.gen_range(0..config.slots_per_day);
                let (ti, tj) = (clients[i].sent_token(day, slot), clients[j].sent_token(day, slot));
                contacts.push(Encounter { day, slot, a: i, b: j });
                sent_by.insert(ti, (i, day));
                sent_by.insert(tj, (j, day));
                clients[j].record(ti, day);
                clients[i].record(tj, day);
            }
        }
        t_contacts += t0.elapsed();

        for &(user, consent) in diagnosed.get(&day).map(Vec::as_slice).unwrap_or(&[]) {
            let payload = clients[user].diagnosis_payload(consent, day, &mut rng);
            if let Some(sealed) = payload {
                provider_received.push(sealed.clone());
                provider.submit(clients[user].id, sealed).expect("allowlisted");
                uploads_by_day.entry(day).or_default().push(Upload { sender: user, end_day: day });
            }
            report.lines.push(format!("diagnosis day={day} user={user} consent={consent}"));
        }

        let t0 = Instant::now();
        if provider.pending() > 0 {
            let (batch_id, batch) = provider.flush(&mut rng);
            if config.colocated_provider {
                server1.receive_batch(batch);
            } else {
                provider_link.upload_diagnoses(batch_id, &batch)?;
            }
        }
        let built = server1.end_of_day(day, Some(&replica))?;
        t_build += t0.elapsed();
        report.lines.push(format!(
            "db day={day} uploads={} rejected={} tokens={} layout={}/{}/{}/{} digest={}",
            built.uploads_accepted,
            built.uploads_rejected,
            built.info.token_count,
            built.info.layout.token_bits,
            built.info.layout.shard_bits,
            built.info.layout.bucket_bits,
            built.info.layout.slots,
            hex::encode(&built.info.digest[..8]),
        ));

        let t0 = Instant::now();
        for (i, client) in clients.iter_mut().enumerate() {
            let offline = rng.gen_bool(config.offline_probability);
            if offline && day != config.last_day() {
                report.lines.push(format!("query day={day} user={i} offline"));
                continue;
            }
            report.sessions += 1;
            let tr = Transcript::new();
            let result = (|| -> Result<_, SimError> {
                let s1 = RemoteServer::new(endpoints.connect(false, Some((&tr, "server1")))?);
                let s2 = RemoteServer::new(endpoints.connect(true, Some((&tr, "server2")))?);
                s1.authenticate(client.id)?;
                let retained = s1.retained_days()?;
                Ok(client.daily_query(day, &s1, &s2, &retained, &mut rng)?)
            })();
            let up = tr.bytes_in(Direction::Sent);
            let down = tr.bytes_in(Direction::Received);
            report.upload_bytes += up;
            report.download_bytes += down;
            match result {
                Ok(out) => {
                    let truth = ground_truth(client, &out.days_checked, &sent_by, &uploads_by_day, config.window_days);
                    if out.result.cardinality != truth {
                        report.mismatches += 1;
                    }
                    exposed[i] |= truth > 0;
                    alerted[i] |= out.result.alerted;
                    report.lines.push(format!(
                        "query day={day} user={i} days={:?} blinded={} queried={} cardinality={} truth={truth} up={up} down={down} transcript={}",
                        out.days_checked,
                        out.blinded,
                        out.queried,
                        out.result.cardinality,
                        transcript_digest(&tr),
                    ));
                }
                Err(e) => {
                    report.failed_sessions += 1;
                    report.lines.push(format!("query day={day} user={i} error={e}"));
                }
            }
        }
        t_queries += t0.elapsed();
    }

    for i in 0..config.population {
        report.exposed_clients += exposed[i] as usize;
        report.alerted_clients += alerted[i] as usize;
        report.false_alerts += (alerted[i] && !exposed[i]) as usize;
        report.missed_alerts += (exposed[i] && !alerted[i]) as usize;
        report.lines.push(format!("user={i} exposed={} alerted={}", exposed[i], alerted[i]));
    }
    report.timings =
        vec![("contacts", t_contacts), ("build", t_build), ("queries", t_queries), ("total", t_start.elapsed())];

    let contact_tokens = sent_by.into_keys().collect();
    Ok(SimOutput {
        report,
        server1_traffic: s1_traffic,
        server2_traffic: s2_traffic,
        provider_received,
        seeds,
        contact_tokens,
        contacts,
    })
}

/// Count computed in the clear: for each checked day, the client's received
/// tokens sent by a user whose upload that day's database holds, within the
/// upload's window.
fn ground_truth(
    client: &ClientApp,
    days: &[u32],
    sent_by: &HashMap<Token, (usize, u32)>,
    uploads: &BTreeMap<u32, Vec<Upload>>,
    window: u32,
) -> usize {
    let mine: HashSet<Token> = client.log().received().iter().map(|c| c.token).collect();
    let mut n = 0;
    for d in days {
        for u in uploads.get(d).map(Vec::as_slice).unwrap_or(&[]) {
            let lo = (u.end_day + 1).saturating_sub(window);
            n += mine
                .iter()
                .filter(|t| sent_by.get(*t).is_some_and(|&(s, td)| s == u.sender && (lo..=u.end_day).contains(&td)))
                .count();
        }
    }
    n
}

/// Look for data in places it must never reach:
/// raw contact tokens or seeds in anything either server received,
/// blinded elements or transform traffic at server 2,
/// and seeds in the provider's payloads.
/// Needs a run with `keep_frames`.
pub fn dataflow_check(out: &SimOutput) -> Vec<String> {
    let mut violations = Vec::new();
    let tokens: HashSet<[u8; 16]> = out.contact_tokens.iter().map(|t| t.0).collect();
    let seeds: HashSet<[u8; 32]> = out.seeds.iter().map(|s| *s.as_bytes()).collect();
    let inbound = |t: &Transcript| -> Vec<(u8, Vec<u8>)> {
        t.entries()
            .into_iter()
            .filter(|e| e.direction == Direction::Received)
            .filter_map(|e| e.frame.map(|f| (e.msg_type, f)))
            .collect()
    };
    let s1_in = inbound(&out.server1_traffic);
    let s2_in = inbound(&out.server2_traffic);
    if s1_in.is_empty() || s2_in.is_empty() {
        violations.push("no frames recorded; run with keep_frames".into());
        return violations;
    }

    let mut blinded: HashSet<[u8; 32]> = HashSet::new();
    for (ty, frame) in &s1_in {
        if *ty == msg_type::CLIENT_BLIND {
            if let Ok(Message::ClientBlind { elements, .. }) = Message::decode(frame) {
                blinded.extend(elements.iter().map(|e| e.to_bytes()));
            }
        }
    }
    for (who, frames) in [("server1", &s1_in), ("server2", &s2_in)] {
        for (ty, frame) in frames.iter() {
            if find_windows(frame, &tokens) > 0 {
                violations.push(format!("{who} received a raw token in a type {ty} frame"));
            }
            if find_windows(frame, &seeds) > 0 {
                violations.push(format!("{who} received a seed in a type {ty} frame"));
            }
        }
    }
    for (ty, frame) in &s2_in {
        if matches!(*ty, msg_type::CLIENT_BLIND | msg_type::SERVER_TRANSFORM | msg_type::DIAGNOSIS_UPLOAD) {
            violations.push(format!("server2 received a type {ty} frame"));
        }
        if find_windows(frame, &blinded) > 0 {
            violations.push(format!("server2 received a blinded element in a type {ty} frame"));
        }
    }
    for sealed in &out.provider_received {
        if find_windows(&sealed.0, &seeds) > 0 || find_windows(&sealed.0, &tokens) > 0 {
            violations.push("provider payload contains plaintext".into());
        }
    }
    violations
}
