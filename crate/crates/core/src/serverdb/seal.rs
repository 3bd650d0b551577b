//! Sealed seed upload: ephemeral Diffie-Hellman over the same group plus
//! ChaCha20-Poly1305.
//!
//! `EncryptedSeed = eph (32) || AEAD(seed (32) || end_day (4 LE) || window (4 LE))`.
//! The AEAD key is derived from `(eph, pk, pk^e)` and used once, so the nonce
//! is fixed at zero.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use crate::group::{GroupElement, Scalar, ELEMENT_LEN};
use crate::tokens::{Seed, SEED_LEN};

const PLAINTEXT_LEN: usize = SEED_LEN + 8;
const TAG_LEN: usize = 16;
pub const ENCRYPTED_SEED_LEN: usize = ELEMENT_LEN + PLAINTEXT_LEN + TAG_LEN;
const AAD: &[u8] = b"epione/v1/seed-upload";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SealError {
    #[error("sealed seed has wrong length {0}")]
    Length(usize),
    #[error("sealed seed failed to decrypt")]
    Decrypt,
}

/// What a diagnosed user discloses: their seed and the window to regenerate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedDisclosure {
    pub seed: Seed,
    pub end_day: u32,
    pub window: u32,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct ServerKeyPair {
    secret: Scalar,
    pub public: GroupElement,
}

impl std::fmt::Debug for ServerKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerKeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl ServerKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_secret(Scalar::random_nonzero(rng))
    }

    pub fn from_secret(secret: Scalar) -> Self {
        ServerKeyPair { secret, public: GroupElement::generator().pow(&secret) }
    }

    pub fn secret(&self) -> &Scalar {
        &self.secret
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct EncryptedSeed(pub [u8; ENCRYPTED_SEED_LEN]);

impl std::fmt::Debug for EncryptedSeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EncryptedSeed({}..)", hex::encode(&self.0[..8]))
    }
}

impl EncryptedSeed {
    pub fn from_bytes(b: &[u8]) -> Result<Self, SealError> {
        b.try_into().map(EncryptedSeed).map_err(|_| SealError::Length(b.len()))
    }
}

fn derive_key(eph: &GroupElement, pk: &GroupElement, shared: &GroupElement) -> Key {
    let d = Sha256::new()
        .chain_update(b"epione/v1/seal")
        .chain_update(eph.to_bytes())
        .chain_update(pk.to_bytes())
        .chain_update(shared.to_bytes())
        .finalize();
    *Key::from_slice(&d)
}

pub fn seal<R: RngCore + CryptoRng>(pk: &GroupElement, disclosure: &SeedDisclosure, rng: &mut R) -> EncryptedSeed {
    let e = Scalar::random_nonzero(rng);
    let eph = GroupElement::generator().pow(&e);
    let key = derive_key(&eph, pk, &pk.pow(&e));
    let mut pt = [0u8; PLAINTEXT_LEN];
    pt[..SEED_LEN].copy_from_slice(disclosure.seed.as_bytes());
    pt[SEED_LEN..SEED_LEN + 4].copy_from_slice(&disclosure.end_day.to_le_bytes());
    pt[SEED_LEN + 4..].copy_from_slice(&disclosure.window.to_le_bytes());
    let ct = ChaCha20Poly1305::new(&key)
        .encrypt(Nonce::from_slice(&[0u8; 12]), Payload { msg: &pt, aad: AAD })
        .expect("in-memory encryption");
    let mut out = [0u8; ENCRYPTED_SEED_LEN];
    out[..ELEMENT_LEN].copy_from_slice(&eph.to_bytes());
    out[ELEMENT_LEN..].copy_from_slice(&ct);
    EncryptedSeed(out)
}

pub fn open(keys: &ServerKeyPair, sealed: &EncryptedSeed) -> Result<SeedDisclosure, SealError> {
    let eph = GroupElement::from_bytes(&sealed.0[..ELEMENT_LEN]).map_err(|_| SealError::Decrypt)?;
    let key = derive_key(&eph, &keys.public, &eph.pow(&keys.secret));
    let pt = ChaCha20Poly1305::new(&key)
        .decrypt(Nonce::from_slice(&[0u8; 12]), Payload { msg: &sealed.0[ELEMENT_LEN..], aad: AAD })
        .map_err(|_| SealError::Decrypt)?;
    Ok(SeedDisclosure {
        seed: Seed::from_bytes(pt[..SEED_LEN].try_into().unwrap()),
        end_day: u32::from_le_bytes(pt[SEED_LEN..SEED_LEN + 4].try_into().unwrap()),
        window: u32::from_le_bytes(pt[SEED_LEN + 4..].try_into().unwrap()),
    })
}
