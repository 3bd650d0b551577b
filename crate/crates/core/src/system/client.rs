use std::collections::HashMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::servers::{Provider, ProviderError};
use crate::group::GroupElement;
use crate::psica::{
    agreed_day_info, match_day, new_session_id, transform_round, ClientQueryState, PsiConfig, PsiError, PsiServer,
};
use crate::serverdb::{incremental_plan, resolve_plan, seal, EncryptedSeed, SeedDisclosure, DEFAULT_RETENTION_DAYS};
use crate::tokens::{commit, ContactLog, Seed, Token, TokenCommitment, TokenGenerator, TokenSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertResult {
    pub day: u32,
    pub cardinality: usize,
    pub alerted: bool,
}

impl AlertResult {
    pub fn new(day: u32, cardinality: usize) -> Self {
        AlertResult { day, cardinality, alerted: cardinality > 0 }
    }
}

/// What one daily query did, for reporting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryOutcome {
    pub result: AlertResult,
    pub days_checked: Vec<u32>,
    /// Transformed values checked per day.
    pub queried: usize,
    /// Tokens sent for transformation (dummies included).
    pub blinded: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub schedule: TokenSchedule,
    pub retention_days: u32,
    pub caching: bool,
    pub psi: PsiConfig,
    /// Commit to the day's received tokens before querying.
    pub commit_before_query: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            schedule: TokenSchedule::default(),
            retention_days: DEFAULT_RETENTION_DAYS,
            caching: true,
            psi: PsiConfig::default(),
            commit_before_query: false,
        }
    }
}

/// One user's app: token generation, the received-token log, query state
/// and alert state.
pub struct ClientApp {
    pub id: [u8; 16],
    seed: Seed,
    generator: TokenGenerator,
    config: ClientConfig,
    server_pk: GroupElement,
    log: ContactLog,
    query: ClientQueryState,
    last_query_day: Option<u32>,
    commitments: Vec<(u32, [u8; 32])>,
    /// Day of the most recent positive result.
    alerted_on: Option<u32>,
}

impl std::fmt::Debug for ClientApp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientApp")
            .field("id", &hex::encode(self.id))
            .field("received", &self.log.len())
            .field("last_query_day", &self.last_query_day)
            .finish_non_exhaustive()
    }
}

impl ClientApp {
    pub fn new<R: RngCore + CryptoRng>(config: ClientConfig, server_pk: GroupElement, rng: &mut R) -> Self {
        let mut id = [0u8; 16];
        rng.fill_bytes(&mut id);
        Self::from_seed(id, Seed::random(rng), config, server_pk, rng)
    }

    pub fn from_seed<R: RngCore + CryptoRng>(
        id: [u8; 16],
        seed: Seed,
        config: ClientConfig,
        server_pk: GroupElement,
        rng: &mut R,
    ) -> Self {
        ClientApp {
            id,
            generator: TokenGenerator::new(&seed, config.schedule),
            seed,
            server_pk,
            log: ContactLog::new(config.schedule.window_days),
            query: ClientQueryState::new(config.caching, rng),
            last_query_day: None,
            commitments: Vec::new(),
            alerted_on: None,
            config,
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// Token this client broadcasts in `slot` of `day`.
    pub fn sent_token(&self, day: u32, slot: u32) -> Token {
        self.generator.generate(day, slot).expect("slot within schedule")
    }

    pub fn record(&mut self, token: Token, day: u32) {
        self.log.record(token, day);
    }

    pub fn log(&self) -> &ContactLog {
        &self.log
    }

    pub fn set_log(&mut self, log: ContactLog) {
        self.log = log;
    }

    pub fn last_query_day(&self) -> Option<u32> {
        self.last_query_day
    }

    pub fn set_last_query_day(&mut self, d: Option<u32>) {
        self.last_query_day = d;
    }

    pub fn commitments(&self) -> &[(u32, [u8; 32])] {
        &self.commitments
    }

    pub fn alerted_on(&self) -> Option<u32> {
        self.alerted_on
    }

    pub fn set_alerted_on(&mut self, d: Option<u32>) {
        self.alerted_on = d;
    }

    pub fn cache_groups(&self) -> usize {
        self.query.cache_groups()
    }

    /// Alerted within the last window.
    pub fn is_alerted(&self, day: u32) -> bool {
        self.alerted_on.is_some_and(|a| day < a + self.config.schedule.window_days)
    }

    pub fn seed_for_export(&self) -> &Seed {
        &self.seed
    }

    /// Seal the seed for the server. Nothing is produced without consent.
    pub fn diagnosis_payload<R: RngCore + CryptoRng>(
        &self,
        consent: bool,
        day: u32,
        rng: &mut R,
    ) -> Option<EncryptedSeed> {
        consent.then(|| {
            let d = SeedDisclosure { seed: self.seed.clone(), end_day: day, window: self.config.schedule.window_days };
            seal(&self.server_pk, &d, rng)
        })
    }

    /// Hand the sealed seed to the provider. Returns whether anything was sent.
    pub fn diagnose<R: RngCore + CryptoRng>(
        &self,
        provider: &mut Provider,
        consent: bool,
        day: u32,
        rng: &mut R,
    ) -> Result<bool, ProviderError> {
        match self.diagnosis_payload(consent, day, rng) {
            Some(sealed) => provider.submit(self.id, sealed).map(|_| true),
            None => Ok(false),
        }
    }

    /// Commit to the tokens received on `day`. Returns `None` when there are none.
    pub fn commit_day<R: RngCore + CryptoRng>(&mut self, day: u32, rng: &mut R) -> Option<TokenCommitment> {
        let tokens: Vec<Token> = self.log.received().iter().filter(|c| c.day == day).map(|c| c.token).collect();
        let c = commit(&tokens, rng).ok()?;
        self.commitments.retain(|(d, _)| *d != day);
        self.commitments.push((day, c.merkle_root));
        Some(c)
    }

    /// The day's check: plan the days to query, transform the current token
    /// set once, then run PIR against each planned day. Nothing is updated
    /// unless every day succeeds.
    pub fn daily_query<R: RngCore + CryptoRng>(
        &mut self,
        current_day: u32,
        server1: &dyn PsiServer,
        server2: &dyn PsiServer,
        retained_days: &[u32],
        rng: &mut R,
    ) -> Result<QueryOutcome, PsiError> {
        self.log.expire(current_day);
        let min_day = (current_day + 1).saturating_sub(self.config.schedule.window_days);
        self.query.expire(min_day);
        if self.config.commit_before_query {
            self.commit_day(current_day, rng);
        }
        let plan = incremental_plan(self.last_query_day, current_day, self.config.retention_days);
        let days = resolve_plan(&plan, retained_days);
        if days.is_empty() {
            self.last_query_day = Some(current_day);
            return Ok(QueryOutcome {
                result: AlertResult::new(current_day, 0),
                days_checked: days,
                queried: 0,
                blinded: 0,
            });
        }

        let mut infos = Vec::with_capacity(days.len());
        for d in &days {
            infos.push(agreed_day_info(*d, server1, server2)?);
        }
        let epoch_id = infos[0].epoch_id;
        if infos.iter().any(|i| i.epoch_id != epoch_id) {
            return Err(PsiError::Protocol("retained days span more than one epoch".into()));
        }

        let received_day: HashMap<Token, u32> = self.log.received().iter().map(|c| (c.token, c.day)).collect();
        let tokens = self.log.distinct_tokens();
        let oldest = self
            .query
            .uncached(&tokens)
            .iter()
            .filter_map(|t| received_day.get(t))
            .min()
            .copied()
            .unwrap_or(current_day);
        let session = new_session_id(rng);
        let (elements, blinded) = transform_round(
            &tokens,
            oldest,
            &mut self.query,
            server1,
            &session,
            *days.last().unwrap(),
            epoch_id,
            &self.config.psi,
            rng,
        )?;

        let mut cardinality = 0;
        for info in &infos {
            cardinality += match_day(&elements, info, server1, server2, &session, rng)?;
        }
        let result = AlertResult::new(current_day, cardinality);
        if result.alerted {
            self.alerted_on = Some(current_day);
        }
        self.last_query_day = Some(current_day);
        Ok(QueryOutcome { result, days_checked: days, queried: elements.len(), blinded })
    }
}
