use std::collections::HashSet;

use rand::{CryptoRng, RngCore};

use super::PsiError;
use crate::group::{hash_to_group, truncate, GroupElement, Scalar, TransformedToken, TruncationParams};
use crate::tokens::Token;

/// Transformed values for one batch of tokens. The server permutes its
/// reply, so values are attributable to the batch, not to a token.
#[derive(Clone, Debug)]
struct CacheGroup {
    tokens: HashSet<Token>,
    values: Vec<GroupElement>,
    oldest_day: u32,
}

/// Client-side blinding state.
///
/// Without caching, `r` is refreshed every session. With caching, `r` and
/// the cached transformed values live for one server epoch and are flushed
/// when the server's epoch changes.
pub struct ClientQueryState {
    r: Scalar,
    r_inv: Scalar,
    epoch_id: Option<u32>,
    caching: bool,
    pending: usize,
    cache: Vec<CacheGroup>,
}

impl std::fmt::Debug for ClientQueryState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientQueryState")
            .field("epoch_id", &self.epoch_id)
            .field("caching", &self.caching)
            .field("pending", &self.pending)
            .field("cache_groups", &self.cache.len())
            .finish_non_exhaustive()
    }
}

impl ClientQueryState {
    pub fn new<R: RngCore + CryptoRng>(caching: bool, rng: &mut R) -> Self {
        let r = Scalar::random_nonzero(rng);
        ClientQueryState { r, r_inv: r.invert().unwrap(), epoch_id: None, caching, pending: 0, cache: Vec::new() }
    }

    pub fn caching(&self) -> bool {
        self.caching
    }

    /// Start a session against a server in `epoch_id`: flush stale caches and
    /// pick the blinding exponent.
    pub fn begin_session<R: RngCore + CryptoRng>(&mut self, epoch_id: u32, rng: &mut R) {
        let rotated = self.epoch_id != Some(epoch_id);
        if rotated {
            self.cache.clear();
        }
        if !self.caching || rotated {
            self.r = Scalar::random_nonzero(rng);
            self.r_inv = self.r.invert().unwrap();
        }
        self.epoch_id = Some(epoch_id);
        self.pending = 0;
    }

    /// `H(y)^r` for each token, in order.
    pub fn blind(&mut self, tokens: &[Token]) -> Vec<GroupElement> {
        self.pending = tokens.len();
        tokens.iter().map(|t| hash_to_group(t.as_bytes()).pow(&self.r)).collect()
    }

    /// `tau(m'^(1/r))` for each reply. The result is a set: because of the
    /// server's permutation, position `i` says nothing about token `i`.
    pub fn unblind(
        &mut self,
        replies: &[GroupElement],
        trunc: &TruncationParams,
    ) -> Result<Vec<TransformedToken>, PsiError> {
        Ok(self.unblind_elements(replies)?.iter().map(|e| truncate(e, trunc)).collect())
    }

    /// `m'^(1/r)` for each reply, before truncation.
    pub fn unblind_elements(&mut self, replies: &[GroupElement]) -> Result<Vec<GroupElement>, PsiError> {
        if replies.len() != self.pending {
            return Err(PsiError::Protocol(format!("expected {} replies, got {}", self.pending, replies.len())));
        }
        self.pending = 0;
        Ok(replies.iter().map(|m| m.pow(&self.r_inv)).collect())
    }

    /// Exponent for test harnesses and the batch-consistency hook.
    pub fn blinding_exponent(&self) -> &Scalar {
        &self.r
    }

    /// Tokens not covered by any cache group.
    pub fn uncached(&self, tokens: &[Token]) -> Vec<Token> {
        tokens.iter().filter(|t| !self.cache.iter().any(|g| g.tokens.contains(t))).copied().collect()
    }

    pub fn store(&mut self, tokens: &[Token], values: Vec<GroupElement>, oldest_day: u32) {
        if !self.caching || tokens.is_empty() {
            return;
        }
        self.cache.push(CacheGroup { tokens: tokens.iter().copied().collect(), values, oldest_day });
    }

    /// Drop groups containing tokens older than `min_day`; their surviving
    /// tokens become uncached and are re-transformed next session.
    pub fn expire(&mut self, min_day: u32) {
        self.cache.retain(|g| g.oldest_day >= min_day);
    }

    /// Cached `H(y)^k` values.
    pub fn cached_elements(&self) -> Vec<GroupElement> {
        self.cache.iter().flat_map(|g| g.values.iter().copied()).collect()
    }

    pub fn cache_groups(&self) -> usize {
        self.cache.len()
    }
}
