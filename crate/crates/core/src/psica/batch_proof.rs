//! Experimental same-exponent proof for a blinded batch.
//!
//! The server never sees the client's hashed tokens, so the proof is made
//! relative to auxiliary bases `a_i = H(y_i)^rho` for a client-chosen `rho`.
//! Then `m_i = a_i^e` with `e = r / rho` for every `i`, and the client proves
//! a single `e` links all pairs by folding them with hash-derived weights and
//! running a Schnorr proof on the folded pair. This binds the batch to one
//! exponent; it does not prove that the auxiliary bases are honest hashes.

use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha512};

use crate::group::{GroupElement, Scalar, SchnorrProof};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchProofBundle {
    pub aux_bases: Vec<GroupElement>,
    pub proof: SchnorrProof,
}

fn weights(aux: &[GroupElement], blinded: &[GroupElement]) -> Vec<Scalar> {
    let mut h = Sha512::new();
    h.update(b"epione/v1/batch-weights");
    h.update((aux.len() as u64).to_le_bytes());
    for e in aux.iter().chain(blinded) {
        h.update(e.to_bytes());
    }
    let root = h.finalize();
    (0..aux.len() as u64)
        .map(|i| {
            let d = Sha512::new().chain_update(root).chain_update(i.to_le_bytes()).finalize();
            let mut wide = [0u8; 64];
            wide.copy_from_slice(&d);
            Scalar::from_wide_bytes(&wide)
        })
        .collect()
}

fn fold(elems: &[GroupElement], w: &[Scalar]) -> GroupElement {
    elems.iter().zip(w).fold(GroupElement::identity(), |acc, (e, c)| acc.mul(&e.pow(c)))
}

/// `hashed[i] = H(y_i)` and `blinded[i] = hashed[i]^r`.
pub fn prove<R: RngCore + CryptoRng>(
    hashed: &[GroupElement],
    blinded: &[GroupElement],
    r: &Scalar,
    rng: &mut R,
) -> BatchProofBundle {
    assert_eq!(hashed.len(), blinded.len());
    let rho = Scalar::random_nonzero(rng);
    let aux_bases: Vec<GroupElement> = hashed.iter().map(|h| h.pow(&rho)).collect();
    let e = *r * rho.invert().unwrap();
    let w = weights(&aux_bases, blinded);
    let a = fold(&aux_bases, &w);
    let m = fold(blinded, &w);
    BatchProofBundle { proof: SchnorrProof::prove(&e, &a, &m, rng), aux_bases }
}

pub fn verify(bundle: &BatchProofBundle, blinded: &[GroupElement]) -> bool {
    if bundle.aux_bases.len() != blinded.len() || blinded.is_empty() {
        return false;
    }
    let w = weights(&bundle.aux_bases, blinded);
    let a = fold(&bundle.aux_bases, &w);
    let m = fold(blinded, &w);
    if a.is_identity() {
        return false;
    }
    bundle.proof.verify(&a, &m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{hash_to_group, ELEMENT_LEN, SCALAR_LEN};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup(n: usize, rng: &mut ChaCha20Rng) -> (Vec<GroupElement>, Vec<GroupElement>, Scalar) {
        let r = Scalar::random_nonzero(rng);
        let hashed: Vec<_> = (0..n as u32).map(|i| hash_to_group(&i.to_le_bytes())).collect();
        let blinded = hashed.iter().map(|h| h.pow(&r)).collect();
        (hashed, blinded, r)
    }

    #[test]
    fn honest_batch_accepted() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (hashed, blinded, r) = setup(4, &mut rng);
        let b = prove(&hashed, &blinded, &r, &mut rng);
        assert!(verify(&b, &blinded));
    }

    #[test]
    fn mixed_exponent_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for i in 0..4 {
            let (hashed, mut blinded, r) = setup(4, &mut rng);
            let b = prove(&hashed, &blinded, &r, &mut rng);
            let r2 = Scalar::random_nonzero(&mut rng);
            blinded[i] = hashed[i].pow(&r2);
            assert!(!verify(&b, &blinded));
        }
    }

    #[test]
    fn proof_is_constant_size() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for n in [1, 8, 64] {
            let (hashed, blinded, r) = setup(n, &mut rng);
            let b = prove(&hashed, &blinded, &r, &mut rng);
            assert_eq!(b.proof.to_bytes().len(), ELEMENT_LEN + SCALAR_LEN);
        }
    }
}
