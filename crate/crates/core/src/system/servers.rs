use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::group::GroupElement;
use crate::net::{error_message, ConnContext, ErrorCode, Handler, Message};
use crate::par::Parallelism;
use crate::pir::{self, PirAnswer, PirQuery};
use crate::psica::{
    server_transform, verify_batch_consistency, BatchProofBundle, DayInfo, PsiError, RateLimiter, ServerKeyState,
    ServerPolicy, SessionId,
};
use crate::serverdb::{
    build_day, ingest, publish, BuildConfig, DayIndex, DayStore, DbError, EncryptedSeed, ReplicaSink, ServerKeyPair,
    DEFAULT_RETENTION_DAYS,
};
use crate::tokens::{Token, TokenSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Server1Config {
    pub schedule: TokenSchedule,
    pub build: BuildConfig,
    pub policy: ServerPolicy,
    pub retention_days: u32,
    /// Refuse transform requests from connections that did not authenticate.
    pub require_auth: bool,
    /// Refuse transform requests without a batch-consistency proof.
    pub require_batch_proof: bool,
    pub parallelism: Parallelism,
}

impl Default for Server1Config {
    fn default() -> Self {
        Server1Config {
            schedule: TokenSchedule::default(),
            build: BuildConfig::default(),
            policy: ServerPolicy::default(),
            retention_days: DEFAULT_RETENTION_DAYS,
            require_auth: true,
            require_batch_proof: false,
            parallelism: Parallelism::default(),
        }
    }
}

/// What one end-of-day build produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DayBuildReport {
    pub info: DayInfo,
    pub uploads_accepted: usize,
    pub uploads_rejected: usize,
}

struct Server1State {
    key: Arc<ServerKeyState>,
    index: DayIndex,
    inbox: Vec<EncryptedSeed>,
    /// Regenerated tokens per day, kept to rebuild on epoch rotation.
    day_tokens: BTreeMap<u32, Vec<Token>>,
    current_day: u32,
}

/// Transform server and PIR server 1. Holds the seed-decryption key and the
/// epoch exponent `k`.
pub struct Server1 {
    upload_keys: ServerKeyPair,
    config: Server1Config,
    state: RwLock<Server1State>,
    limiter: RateLimiter,
}

impl Server1 {
    pub fn new(upload_keys: ServerKeyPair, key: ServerKeyState, config: Server1Config) -> Self {
        Server1 {
            upload_keys,
            config,
            state: RwLock::new(Server1State {
                key: Arc::new(key),
                index: DayIndex::new(config.retention_days),
                inbox: Vec::new(),
                day_tokens: BTreeMap::new(),
                current_day: 0,
            }),
            limiter: RateLimiter::default(),
        }
    }

    pub fn config(&self) -> &Server1Config {
        &self.config
    }

    pub fn public_key(&self) -> GroupElement {
        self.upload_keys.public
    }

    pub fn epoch_id(&self) -> u32 {
        self.state.read().unwrap().key.epoch_id()
    }

    pub fn current_day(&self) -> u32 {
        self.state.read().unwrap().current_day
    }

    /// Queue a provider batch for the next build.
    pub fn receive_batch(&self, seeds: Vec<EncryptedSeed>) {
        self.state.write().unwrap().inbox.extend(seeds);
    }

    pub fn pending_uploads(&self) -> usize {
        self.state.read().unwrap().inbox.len()
    }

    /// Load a previously built day (e.g. from disk) without rebuilding.
    pub fn install_day(&self, store: DayStore) -> DayInfo {
        let mut st = self.state.write().unwrap();
        st.current_day = st.current_day.max(store.day);
        let info = store.info();
        st.index.insert(store);
        info
    }

    /// Ingest the inbox, build the day's database, publish it to server 2 and
    /// start serving it. Builds an empty database when nothing arrived.
    pub fn end_of_day(&self, day: u32, replica: Option<&dyn ReplicaSink>) -> Result<DayBuildReport, DbError> {
        let (uploads, key) = {
            let mut st = self.state.write().unwrap();
            (std::mem::take(&mut st.inbox), st.key.clone())
        };
        let rep = ingest(&uploads, &self.upload_keys, self.config.schedule);
        let store = build_day(&rep.tokens, &key, &self.config.build, day)?;
        if let Some(r) = replica {
            publish(&store, r, 3)?;
        }
        let info = store.info();
        info!("day {day}: {} uploads, {} tokens, layout {:?}", rep.accepted, store.token_count, store.layout);
        let mut st = self.state.write().unwrap();
        st.index.insert(store);
        st.day_tokens.insert(day, rep.tokens);
        let retained = st.index.days();
        st.day_tokens.retain(|d, _| retained.contains(d));
        st.current_day = st.current_day.max(day);
        Ok(DayBuildReport { info, uploads_accepted: rep.accepted, uploads_rejected: rep.rejected })
    }

    /// Switch to a new exponent and rebuild every retained day under it.
    pub fn rotate_epoch(&self, key: ServerKeyState, replica: Option<&dyn ReplicaSink>) -> Result<(), DbError> {
        let key = Arc::new(key);
        let days: Vec<(u32, Vec<Token>)> =
            self.state.read().unwrap().day_tokens.iter().map(|(d, t)| (*d, t.clone())).collect();
        let mut rebuilt = Vec::with_capacity(days.len());
        for (day, tokens) in days {
            let store = build_day(&tokens, &key, &self.config.build, day)?;
            if let Some(r) = replica {
                publish(&store, r, 3)?;
            }
            rebuilt.push(store);
        }
        let mut st = self.state.write().unwrap();
        st.key = key;
        for s in rebuilt {
            st.index.insert(s);
        }
        Ok(())
    }

    pub fn day_store(&self, day: u32) -> Option<Arc<DayStore>> {
        self.state.read().unwrap().index.get(day)
    }

    pub fn day_info(&self, day: u32) -> Result<DayInfo, PsiError> {
        self.state.read().unwrap().index.info(day).cloned().ok_or(PsiError::UnknownDay(day))
    }

    pub fn retained_days(&self) -> Vec<u32> {
        self.state.read().unwrap().index.days()
    }

    /// M1 -> M2. Rate-limited per credential on the server's own day.
    pub fn transform(
        &self,
        credential: Option<[u8; 16]>,
        session: &SessionId,
        day: u32,
        blinded: &[GroupElement],
        proof: Option<&BatchProofBundle>,
    ) -> Result<Vec<GroupElement>, PsiError> {
        let (key, current) = {
            let st = self.state.read().unwrap();
            if st.index.info(day).is_none() {
                return Err(PsiError::UnknownDay(day));
            }
            (st.key.clone(), st.current_day)
        };
        match credential {
            Some(c) => self.limiter.try_acquire(c, current, self.config.policy.queries_per_day)?,
            None if self.config.require_auth => return Err(PsiError::Policy("authentication required".into())),
            None => {}
        }
        self.config.policy.check_batch(blinded.len())?;
        match proof {
            Some(p) if !verify_batch_consistency(p, blinded) => return Err(PsiError::BadBatchProof),
            None if self.config.require_batch_proof => return Err(PsiError::BadBatchProof),
            _ => {}
        }
        server_transform(blinded, &key, &self.config.policy, &mut key.session_rng(session), self.config.parallelism)
    }

    /// M3 -> M4.
    pub fn answer(&self, day: u32, queries: &[PirQuery]) -> Result<Vec<PirAnswer>, PsiError> {
        let store = self.day_store(day).ok_or(PsiError::UnknownDay(day))?;
        Ok(pir::answer_batch(queries, &store.shards, self.config.parallelism)?)
    }
}

fn common_request(
    conn: &mut ConnContext,
    msg: &Message,
    info: impl Fn(u32) -> Result<DayInfo, PsiError>,
    days: impl Fn() -> Vec<u32>,
    answer: impl Fn(u32, &[PirQuery]) -> Result<Vec<PirAnswer>, PsiError>,
) -> Option<Message> {
    Some(match msg {
        Message::Auth { credential } => {
            conn.credential = Some(*credential);
            Message::Ack
        }
        Message::DayInfoRequest { day } => match info(*day) {
            Ok(i) => Message::DayInfo(i),
            Err(e) => error_message(&e),
        },
        Message::DaysRequest => Message::Days(days()),
        Message::PirQueryBatch { session, day, queries } => match answer(*day, queries) {
            Ok(answers) => Message::PirAnswerBatch { session: *session, answers },
            Err(e) => error_message(&e),
        },
        _ => return None,
    })
}

impl Handler for Server1 {
    fn handle(&self, conn: &mut ConnContext, msg: Message) -> Message {
        if let Some(m) =
            common_request(conn, &msg, |d| self.day_info(d), || self.retained_days(), |d, q| self.answer(d, q))
        {
            return m;
        }
        match msg {
            Message::ClientBlind { session, day, elements, proof } => {
                match self.transform(conn.credential, &session, day, &elements, proof.as_deref()) {
                    Ok(elements) => Message::ServerTransform { session, elements },
                    Err(e) => error_message(&e),
                }
            }
            Message::DiagnosisUpload { seeds, .. } => {
                self.receive_batch(seeds);
                Message::Ack
            }
            other => Message::error(ErrorCode::Protocol, format!("server 1 does not accept {}", other.name())),
        }
    }
}

/// PIR server 2: holds synced copies of each day's database and nothing else.
pub struct Server2 {
    index: RwLock<DayIndex>,
    /// Credential server 1 must present before syncing; `None` accepts any.
    sync_credential: Option<[u8; 16]>,
    parallelism: Parallelism,
}

impl Server2 {
    pub fn new(retention_days: u32, sync_credential: Option<[u8; 16]>, parallelism: Parallelism) -> Self {
        Server2 { index: RwLock::new(DayIndex::new(retention_days)), sync_credential, parallelism }
    }

    /// Store a synced day; returns the digest over what was stored.
    pub fn install(&self, store: DayStore) -> [u8; 32] {
        let mut idx = self.index.write().unwrap();
        let day = store.day;
        idx.insert(store);
        idx.info(day).map(|i| i.digest).unwrap_or([0; 32])
    }

    pub fn day_store(&self, day: u32) -> Option<Arc<DayStore>> {
        self.index.read().unwrap().get(day)
    }

    pub fn day_info(&self, day: u32) -> Result<DayInfo, PsiError> {
        self.index.read().unwrap().info(day).cloned().ok_or(PsiError::UnknownDay(day))
    }

    pub fn retained_days(&self) -> Vec<u32> {
        self.index.read().unwrap().days()
    }

    pub fn answer(&self, day: u32, queries: &[PirQuery]) -> Result<Vec<PirAnswer>, PsiError> {
        let store = self.day_store(day).ok_or(PsiError::UnknownDay(day))?;
        Ok(pir::answer_batch(queries, &store.shards, self.parallelism)?)
    }
}

impl Handler for Server2 {
    fn handle(&self, conn: &mut ConnContext, msg: Message) -> Message {
        if let Some(m) =
            common_request(conn, &msg, |d| self.day_info(d), || self.retained_days(), |d, q| self.answer(d, q))
        {
            return m;
        }
        match msg {
            Message::DbSync(store) => {
                if self.sync_credential.is_some() && conn.credential != self.sync_credential {
                    return Message::error(ErrorCode::AuthRequired, "sync requires the server 1 credential");
                }
                Message::DbInstalled { digest: self.install(*store) }
            }
            other => Message::error(ErrorCode::Unsupported, format!("server 2 does not accept {}", other.name())),
        }
    }
}

/// In-process replica target.
impl ReplicaSink for Server2 {
    fn install(&self, store: &DayStore) -> Result<[u8; 32], String> {
        Ok(Server2::install(self, store.clone()))
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("patient is not on the diagnosis allowlist")]
    NotVerified,
}

/// Healthcare provider: checks the patient against its allowlist, batches
/// sealed seeds, and forwards each batch in shuffled order. It never holds a
/// plaintext seed.
#[derive(Debug, Default)]
pub struct Provider {
    allowlist: std::collections::HashSet<[u8; 16]>,
    batch: Vec<EncryptedSeed>,
}

impl Provider {
    pub fn new(allowlist: impl IntoIterator<Item = [u8; 16]>) -> Self {
        Provider { allowlist: allowlist.into_iter().collect(), batch: Vec::new() }
    }

    pub fn allow(&mut self, patient: [u8; 16]) {
        self.allowlist.insert(patient);
    }

    pub fn submit(&mut self, patient: [u8; 16], sealed: EncryptedSeed) -> Result<(), ProviderError> {
        if !self.allowlist.contains(&patient) {
            warn!("rejected upload from unverified patient");
            return Err(ProviderError::NotVerified);
        }
        self.batch.push(sealed);
        Ok(())
    }

    pub fn pending(&self) -> usize {
        self.batch.len()
    }

    /// Take the batch in random order, with a fresh batch id.
    pub fn flush<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> ([u8; 16], Vec<EncryptedSeed>) {
        let mut out = std::mem::take(&mut self.batch);
        out.shuffle(rng);
        let mut id = [0u8; 16];
        rng.fill_bytes(&mut id);
        (id, out)
    }
}
