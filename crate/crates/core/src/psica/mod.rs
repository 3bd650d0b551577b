//! PSI-CA for asymmetric sets.
//!
//! The client blinds each token as `H(y)^r`; server 1 raises the batch to its
//! epoch key `k` and returns it in random order; the client strips `r`,
//! truncates, and checks each `tau(H(y)^k)` against the day's bucketed
//! database with two-server PIR. The client learns only the count.

mod batch_proof;
mod client;
mod reference;
mod server;

use std::collections::HashSet;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::group::{GroupElement, GroupError, TransformedToken, TruncationParams};
use crate::pir::{self, DbLayout, PirAnswer, PirError, PirQuery};
use crate::tokens::Token;

pub use batch_proof::{prove as prove_batch_consistency, verify as verify_batch_consistency, BatchProofBundle};
pub use client::ClientQueryState;
pub use reference::dh_psi_oracle;
pub use server::{server_transform, RateLimiter, ServerKeyState, ServerPolicy};

pub type SessionId = [u8; 16];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PsiError {
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("rejected by server policy: {0}")]
    Policy(String),
    #[error("query rate limit reached")]
    RateLimited,
    #[error("servers disagree about day {0}")]
    ServerDisagreement(u32),
    #[error("no database for day {0}")]
    UnknownDay(u32),
    #[error("batch consistency proof rejected")]
    BadBatchProof,
    #[error("operation not supported by this server: {0}")]
    Unsupported(&'static str),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Pir(#[from] PirError),
    #[error(transparent)]
    Group(#[from] GroupError),
}

/// Public description of one day's database, served by both PIR servers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayInfo {
    pub day: u32,
    pub epoch_id: u32,
    pub layout: DbLayout,
    pub token_count: u64,
    /// Hash over the shard digests.
    pub digest: [u8; 32],
}

impl DayInfo {
    pub fn truncation(&self) -> TruncationParams {
        TruncationParams::with_bits(self.layout.token_bits).expect("validated layout")
    }
}

/// Client's view of a matching server. Server 2 does not implement
/// [`PsiServer::transform`].
pub trait PsiServer {
    fn day_info(&self, day: u32) -> Result<DayInfo, PsiError>;

    fn transform(
        &self,
        _session: &SessionId,
        _day: u32,
        _blinded: &[GroupElement],
        _proof: Option<&BatchProofBundle>,
    ) -> Result<Vec<GroupElement>, PsiError> {
        Err(PsiError::Unsupported("transform"))
    }

    /// Send a PIR query batch; the answers are read by [`PsiServer::collect_answers`].
    fn submit_queries(&self, session: &SessionId, day: u32, queries: &[PirQuery]) -> Result<(), PsiError>;

    fn collect_answers(&self, session: &SessionId) -> Result<Vec<PirAnswer>, PsiError>;

    fn answer(&self, session: &SessionId, day: u32, queries: &[PirQuery]) -> Result<Vec<PirAnswer>, PsiError> {
        self.submit_queries(session, day, queries)?;
        self.collect_answers(session)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsiConfig {
    /// Pad each transform batch with random dummy tokens up to this size.
    pub pad_to: Option<usize>,
    /// Attach the experimental batch-consistency proof to transform requests.
    pub batch_proof: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PsiOutcome {
    pub cardinality: usize,
    /// Transformed values checked against the database (dummies included).
    pub queried: usize,
    /// Tokens sent for transformation this session (dummies included).
    pub blinded: usize,
}

fn dedup(tokens: &[Token]) -> Vec<Token> {
    let mut seen = HashSet::new();
    tokens.iter().filter(|t| seen.insert(**t)).copied().collect()
}

pub fn new_session_id<R: RngCore>(rng: &mut R) -> SessionId {
    let mut s = [0u8; 16];
    rng.fill_bytes(&mut s);
    s
}

/// Transform round against server 1. Returns `H(y)^k` for every token
/// (cached values included, plus any padding dummies), as an unordered list.
#[allow(clippy::too_many_arguments)]
pub fn transform_round<R: RngCore + CryptoRng>(
    tokens: &[Token],
    oldest_day: u32,
    state: &mut ClientQueryState,
    server1: &dyn PsiServer,
    session: &SessionId,
    day: u32,
    epoch_id: u32,
    config: &PsiConfig,
    rng: &mut R,
) -> Result<(Vec<GroupElement>, usize), PsiError> {
    state.begin_session(epoch_id, rng);
    let tokens = dedup(tokens);
    let fresh = state.uncached(&tokens);
    let mut batch = fresh.clone();
    if let Some(target) = config.pad_to {
        while batch.len() < target {
            batch.push(Token::random(rng));
        }
    }
    let mut elements = state.cached_elements();
    if batch.is_empty() {
        return Ok((elements, 0));
    }
    let blinded = state.blind(&batch);
    let proof = config.batch_proof.then(|| {
        let hashed: Vec<GroupElement> = batch.iter().map(|t| crate::group::hash_to_group(t.as_bytes())).collect();
        prove_batch_consistency(&hashed, &blinded, state.blinding_exponent(), rng)
    });
    let replies = server1.transform(session, day, &blinded, proof.as_ref())?;
    let unblinded = state.unblind_elements(&replies)?;
    state.store(&fresh, unblinded.clone(), oldest_day);
    elements.extend(unblinded);
    Ok((elements, batch.len()))
}

/// Fetch and cross-check the day's public description from both servers.
pub fn agreed_day_info(day: u32, server1: &dyn PsiServer, server2: &dyn PsiServer) -> Result<DayInfo, PsiError> {
    let a = server1.day_info(day)?;
    let b = server2.day_info(day)?;
    if a != b || a.day != day {
        return Err(PsiError::ServerDisagreement(day));
    }
    Ok(a)
}

/// Count how many of `elements` (each `H(y)^k`) are in the day's database.
/// Both query batches are sent before either answer is read.
pub fn match_day<R: RngCore + CryptoRng>(
    elements: &[GroupElement],
    info: &DayInfo,
    server1: &dyn PsiServer,
    server2: &dyn PsiServer,
    session: &SessionId,
    rng: &mut R,
) -> Result<usize, PsiError> {
    let trunc = info.truncation();
    let mut values: Vec<TransformedToken> = elements.iter().map(|e| crate::group::truncate(e, &trunc)).collect();
    values.sort();
    values.dedup();
    if values.is_empty() {
        return Ok(0);
    }
    let p = pir::prepare_queries(&values, &info.layout, rng)?;
    server1.submit_queries(session, info.day, &p.server1)?;
    server2.submit_queries(session, info.day, &p.server2)?;
    let r0 = server1.collect_answers(session)?;
    let r1 = server2.collect_answers(session)?;
    Ok(pir::count_matches(&r0, &r1, &p.pending, &info.layout)?)
}

/// One full PSI-CA session for one database day.
pub fn psi_ca<R: RngCore + CryptoRng>(
    client_tokens: &[Token],
    state: &mut ClientQueryState,
    server1: &dyn PsiServer,
    server2: &dyn PsiServer,
    day: u32,
    config: &PsiConfig,
    rng: &mut R,
) -> Result<PsiOutcome, PsiError> {
    if client_tokens.is_empty() && state.cached_elements().is_empty() && config.pad_to.is_none() {
        return Ok(PsiOutcome { cardinality: 0, queried: 0, blinded: 0 });
    }
    let info = agreed_day_info(day, server1, server2)?;
    let session = new_session_id(rng);
    let (elements, blinded) =
        transform_round(client_tokens, day, state, server1, &session, day, info.epoch_id, config, rng)?;
    let cardinality = match_day(&elements, &info, server1, server2, &session, rng)?;
    Ok(PsiOutcome { cardinality, queried: elements.len(), blinded })
}

#[cfg(test)]
mod tests;
