//! Plain DH-based PSI (no permutation), used as a cross-check for PSI-CA.

use std::collections::HashSet;

use rand::{CryptoRng, RngCore};

use crate::group::{hash_to_group, Scalar};
use crate::tokens::Token;

/// Server holds `server_set`, client holds `client_set`; returns the
/// client's tokens that the server also holds.
pub fn dh_psi_oracle<R: RngCore + CryptoRng>(server_set: &[Token], client_set: &[Token], rng: &mut R) -> Vec<Token> {
    let r = Scalar::random_nonzero(rng);
    let k = Scalar::random_nonzero(rng);
    let r_inv = r.invert().unwrap();
    // Client -> server: H(y)^r.
    let m: Vec<_> = client_set.iter().map(|y| hash_to_group(y.as_bytes()).pow(&r)).collect();
    // Server -> client: (H(y)^r)^k in order, and H(x)^k.
    let m_prime: Vec<_> = m.iter().map(|e| e.pow(&k)).collect();
    let server_side: HashSet<[u8; 32]> =
        server_set.iter().map(|x| hash_to_group(x.as_bytes()).pow(&k).to_bytes()).collect();
    client_set
        .iter()
        .zip(&m_prime)
        .filter(|(_, e)| server_side.contains(&e.pow(&r_inv).to_bytes()))
        .map(|(y, _)| *y)
        .collect()
}
