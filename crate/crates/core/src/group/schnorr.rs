use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha512};

use super::{GroupElement, Scalar, ELEMENT_LEN, SCALAR_LEN};

const CHALLENGE_DST: &[u8] = b"epione/v1/schnorr";

/// Non-interactive Schnorr proof of knowledge of `k` with `public = base^k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchnorrProof {
    pub commitment: GroupElement,
    pub response: Scalar,
}

pub const SCHNORR_PROOF_LEN: usize = ELEMENT_LEN + SCALAR_LEN;

fn challenge(base: &GroupElement, public: &GroupElement, commitment: &GroupElement) -> Scalar {
    let digest = Sha512::new()
        .chain_update(CHALLENGE_DST)
        .chain_update(base.to_bytes())
        .chain_update(public.to_bytes())
        .chain_update(commitment.to_bytes())
        .finalize();
    let mut wide = [0u8; 64];
    wide.copy_from_slice(&digest);
    Scalar::from_wide_bytes(&wide)
}

impl SchnorrProof {
    /// One exponentiation. `public` must equal `base^secret`.
    pub fn prove<R: RngCore + CryptoRng>(
        secret: &Scalar,
        base: &GroupElement,
        public: &GroupElement,
        rng: &mut R,
    ) -> Self {
        let nonce = Scalar::random_nonzero(rng);
        let commitment = base.pow(&nonce);
        let c = challenge(base, public, &commitment);
        SchnorrProof { commitment, response: nonce + c * *secret }
    }

    /// Two exponentiations.
    pub fn verify(&self, base: &GroupElement, public: &GroupElement) -> bool {
        let c = challenge(base, public, &self.commitment);
        base.pow(&self.response) == self.commitment.mul(&public.pow(&c))
    }

    pub fn to_bytes(&self) -> [u8; SCHNORR_PROOF_LEN] {
        let mut out = [0u8; SCHNORR_PROOF_LEN];
        out[..ELEMENT_LEN].copy_from_slice(&self.commitment.to_bytes());
        out[ELEMENT_LEN..].copy_from_slice(&self.response.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != SCHNORR_PROOF_LEN {
            return None;
        }
        Some(SchnorrProof {
            commitment: GroupElement::from_bytes(&bytes[..ELEMENT_LEN]).ok()?,
            response: Scalar::from_bytes(&bytes[ELEMENT_LEN..]).ok()?,
        })
    }

    /// Decode and verify; malformed bytes verify as false.
    pub fn verify_bytes(bytes: &[u8], base: &GroupElement, public: &GroupElement) -> bool {
        Self::from_bytes(bytes).is_some_and(|p| p.verify(base, public))
    }
}
