//! Contact tokens: deterministic generation from a per-user seed, the
//! received-token log, and Merkle commitments over it.

mod log;
mod merkle;

use std::fmt;

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes256;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

pub use log::{exchange, Contact, ContactLog, CONTACT_RECORD_LEN};
pub use merkle::{commit, verify_membership, MerkleProof, TokenCommitment};

pub const TOKEN_LEN: usize = 16;
pub const SEED_LEN: usize = 32;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TokenError {
    #[error("slot {slot} out of range (slots per day = {slots_per_day})")]
    SlotOutOfRange { slot: u32, slots_per_day: u32 },
    #[error("infection window must be at least one day")]
    EmptyWindow,
    #[error("cannot commit to an empty token list")]
    EmptyCommitment,
}

/// Token schedule shared by every participant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSchedule {
    pub slots_per_day: u32,
    pub window_days: u32,
}

impl Default for TokenSchedule {
    fn default() -> Self {
        TokenSchedule { slots_per_day: 80, window_days: 14 }
    }
}

impl TokenSchedule {
    pub fn tokens_per_window(&self) -> usize {
        self.slots_per_day as usize * self.window_days as usize
    }
}

/// Per-user PRG seed. Never serialized in the clear outside local storage.
#[derive(Clone, PartialEq, Eq)]
pub struct Seed([u8; SEED_LEN]);

impl Seed {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut b = [0u8; SEED_LEN];
        rng.fill_bytes(&mut b);
        Seed(b)
    }

    pub fn from_bytes(b: [u8; SEED_LEN]) -> Self {
        Seed(b)
    }

    pub fn as_bytes(&self) -> &[u8; SEED_LEN] {
        &self.0
    }
}

impl fmt::Debug for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Seed(..)")
    }
}

/// A 128-bit contact token.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(pub [u8; TOKEN_LEN]);

impl Token {
    pub fn random<R: RngCore>(rng: &mut R) -> Self {
        let mut b = [0u8; TOKEN_LEN];
        rng.fill_bytes(&mut b);
        Token(b)
    }

    pub fn as_bytes(&self) -> &[u8; TOKEN_LEN] {
        &self.0
    }
}

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Token({})", hex::encode(self.0))
    }
}

/// Keyed token generator; AES-256 under the seed, so distinct (day, slot)
/// pairs never collide for one seed.
pub struct TokenGenerator {
    cipher: Aes256,
    schedule: TokenSchedule,
}

impl TokenGenerator {
    pub fn new(seed: &Seed, schedule: TokenSchedule) -> Self {
        TokenGenerator { cipher: Aes256::new(GenericArray::from_slice(seed.as_bytes())), schedule }
    }

    pub fn generate(&self, day: u32, slot: u32) -> Result<Token, TokenError> {
        if slot >= self.schedule.slots_per_day {
            return Err(TokenError::SlotOutOfRange { slot, slots_per_day: self.schedule.slots_per_day });
        }
        let mut block = GenericArray::from([0u8; 16]);
        block[..4].copy_from_slice(&day.to_le_bytes());
        block[4..8].copy_from_slice(&slot.to_le_bytes());
        self.cipher.encrypt_block(&mut block);
        Ok(Token(block.into()))
    }

    /// All tokens for the `window` days ending at `end_day`, oldest first.
    pub fn window(&self, end_day: u32, window: u32) -> Result<Vec<Token>, TokenError> {
        if window == 0 {
            return Err(TokenError::EmptyWindow);
        }
        let first = end_day.saturating_sub(window - 1);
        let mut out = Vec::with_capacity(window as usize * self.schedule.slots_per_day as usize);
        for day in first..=end_day {
            for slot in 0..self.schedule.slots_per_day {
                out.push(self.generate(day, slot)?);
            }
        }
        Ok(out)
    }
}

/// Token sent in `slot` of `day` by the holder of `seed`.
pub fn generate(seed: &Seed, schedule: TokenSchedule, day: u32, slot: u32) -> Result<Token, TokenError> {
    TokenGenerator::new(seed, schedule).generate(day, slot)
}

/// Every token `seed` sent during the `window` days ending at `end_day`.
pub fn regenerate_window(
    seed: &Seed,
    schedule: TokenSchedule,
    end_day: u32,
    window: u32,
) -> Result<Vec<Token>, TokenError> {
    TokenGenerator::new(seed, schedule).window(end_day, window)
}
