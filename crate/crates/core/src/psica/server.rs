use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PsiError;
use crate::group::{hash_to_group, GroupElement, Scalar};
use crate::par::Parallelism;
use crate::tokens::Token;

/// Server 1's epoch-scoped secret exponent and its precomputed table of
/// `H(x)^k` for database tokens.
pub struct ServerKeyState {
    k: Scalar,
    epoch_id: u32,
    permutation_key: [u8; 32],
    precomputed: HashMap<Token, GroupElement>,
}

impl std::fmt::Debug for ServerKeyState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerKeyState")
            .field("epoch_id", &self.epoch_id)
            .field("precomputed", &self.precomputed.len())
            .finish_non_exhaustive()
    }
}

impl ServerKeyState {
    pub fn generate<R: RngCore + CryptoRng>(epoch_id: u32, rng: &mut R) -> Self {
        let k = Scalar::random_nonzero(rng);
        let mut permutation_key = [0u8; 32];
        rng.fill_bytes(&mut permutation_key);
        Self::from_parts(k, epoch_id, permutation_key)
    }

    pub fn from_parts(k: Scalar, epoch_id: u32, permutation_key: [u8; 32]) -> Self {
        assert!(!k.is_zero(), "server exponent must be nonzero");
        ServerKeyState { k, epoch_id, permutation_key, precomputed: HashMap::new() }
    }

    pub fn epoch_id(&self) -> u32 {
        self.epoch_id
    }

    pub fn exponent(&self) -> &Scalar {
        &self.k
    }

    pub fn permutation_key(&self) -> &[u8; 32] {
        &self.permutation_key
    }

    /// `H(x)^k`, from the table when available.
    pub fn transform_token(&self, token: &Token) -> GroupElement {
        match self.precomputed.get(token) {
            Some(e) => *e,
            None => hash_to_group(token.as_bytes()).pow(&self.k),
        }
    }

    /// Fill the table for `tokens`; already-known tokens are skipped.
    pub fn precompute(&mut self, tokens: &[Token], par: Parallelism) {
        let fresh: Vec<Token> = tokens.iter().filter(|t| !self.precomputed.contains_key(t)).copied().collect();
        let k = self.k;
        let values = par.map(&fresh, |t| hash_to_group(t.as_bytes()).pow(&k));
        self.precomputed.extend(fresh.into_iter().zip(values));
    }

    pub fn precomputed_len(&self) -> usize {
        self.precomputed.len()
    }

    /// Per-session permutation RNG. Deterministic in the session id so runs
    /// are reproducible; unpredictable without the permutation key.
    pub fn session_rng(&self, session_id: &[u8; 16]) -> ChaCha20Rng {
        let seed: [u8; 32] = Sha256::new()
            .chain_update(b"epione/v1/permutation")
            .chain_update(self.permutation_key)
            .chain_update(session_id)
            .finalize()
            .into();
        ChaCha20Rng::from_seed(seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerPolicy {
    /// Smallest accepted transform batch.
    pub min_batch: usize,
    /// Largest accepted transform batch; checked before allocation.
    pub max_batch: usize,
    /// Transform sessions per client credential per day.
    pub queries_per_day: u32,
}

impl Default for ServerPolicy {
    fn default() -> Self {
        ServerPolicy { min_batch: 64, max_batch: 1 << 20, queries_per_day: 4 }
    }
}

impl ServerPolicy {
    pub fn check_batch(&self, n: usize) -> Result<(), PsiError> {
        if n == 0 || n < self.min_batch {
            return Err(PsiError::Policy(format!("batch of {n} below minimum {}", self.min_batch.max(1))));
        }
        if n > self.max_batch {
            return Err(PsiError::Policy(format!("batch of {n} above maximum {}", self.max_batch)));
        }
        Ok(())
    }
}

/// Per-credential daily session counter.
#[derive(Debug, Default)]
pub struct RateLimiter {
    counts: Mutex<HashMap<([u8; 16], u32), u32>>,
}

impl RateLimiter {
    pub fn try_acquire(&self, credential: [u8; 16], day: u32, limit: u32) -> Result<(), PsiError> {
        let mut counts = self.counts.lock().unwrap();
        counts.retain(|(_, d), _| *d + 1 >= day);
        let c = counts.entry((credential, day)).or_insert(0);
        if *c >= limit {
            return Err(PsiError::RateLimited);
        }
        *c += 1;
        Ok(())
    }
}

/// Raise each blinded element to `k` and return them in uniformly random
/// order. The permutation is not retained.
pub fn server_transform<R: RngCore>(
    blinded: &[GroupElement],
    state: &ServerKeyState,
    policy: &ServerPolicy,
    rng: &mut R,
    par: Parallelism,
) -> Result<Vec<GroupElement>, PsiError> {
    policy.check_batch(blinded.len())?;
    let k = state.k;
    let mut out = par.map(blinded, |m| m.pow(&k));
    out.shuffle(rng);
    Ok(out)
}
