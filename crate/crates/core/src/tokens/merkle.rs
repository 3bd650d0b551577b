//! Merkle commitment over a randomly permuted token list plus one dummy leaf.
//!
//! Leaves are `H(0x00 || salt || token)` with `salt` derived from the
//! permutation seed, so the leaf hash does not depend on position. Interior
//! nodes are `H(0x01 || left || right)`; odd levels are padded by repeating
//! the last leaf up to a power of two.

use rand::seq::SliceRandom;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::{Token, TokenError};

pub type Hash = [u8; 32];

#[derive(Clone, Debug)]
pub struct TokenCommitment {
    pub merkle_root: Hash,
    permutation_seed: [u8; 32],
    dummy: Token,
    salt: Hash,
    /// Committed tokens in leaf order (dummy included).
    leaves: Vec<Token>,
    /// All tree levels, leaves first.
    levels: Vec<Vec<Hash>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MerkleProof {
    pub salt: Hash,
    pub index: u32,
    pub siblings: Vec<Hash>,
}

fn leaf_hash(salt: &Hash, token: &Token) -> Hash {
    Sha256::new().chain_update([0u8]).chain_update(salt).chain_update(token.0).finalize().into()
}

fn node_hash(l: &Hash, r: &Hash) -> Hash {
    Sha256::new().chain_update([1u8]).chain_update(l).chain_update(r).finalize().into()
}

/// Commit to `tokens` after a seeded random permutation and one random dummy.
pub fn commit<R: RngCore + CryptoRng>(tokens: &[Token], rng: &mut R) -> Result<TokenCommitment, TokenError> {
    if tokens.is_empty() {
        return Err(TokenError::EmptyCommitment);
    }
    let mut permutation_seed = [0u8; 32];
    rng.fill_bytes(&mut permutation_seed);
    let dummy = Token::random(rng);
    Ok(TokenCommitment::from_parts(tokens, permutation_seed, dummy))
}

impl TokenCommitment {
    /// Deterministic core of [`commit`].
    pub fn from_parts(tokens: &[Token], permutation_seed: [u8; 32], dummy: Token) -> TokenCommitment {
        let salt: Hash =
            Sha256::new().chain_update(b"epione/v1/merkle-salt").chain_update(permutation_seed).finalize().into();
        let mut leaves: Vec<Token> = tokens.to_vec();
        leaves.push(dummy);
        leaves.shuffle(&mut ChaCha20Rng::from_seed(permutation_seed));

        let mut level: Vec<Hash> = leaves.iter().map(|t| leaf_hash(&salt, t)).collect();
        let width = level.len().next_power_of_two();
        let last = *level.last().unwrap();
        level.resize(width, last);
        let mut levels = vec![level];
        while levels.last().unwrap().len() > 1 {
            let next = levels.last().unwrap().chunks_exact(2).map(|p| node_hash(&p[0], &p[1])).collect();
            levels.push(next);
        }
        let merkle_root = levels.last().unwrap()[0];
        TokenCommitment { merkle_root, permutation_seed, dummy, salt, leaves, levels }
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn permutation_seed(&self) -> &[u8; 32] {
        &self.permutation_seed
    }

    pub fn dummy(&self) -> Token {
        self.dummy
    }

    /// Number of committed leaves before padding, dummy included.
    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn prove_path(&self, index: usize) -> MerkleProof {
        let mut siblings = Vec::with_capacity(self.depth());
        let mut i = index;
        for level in &self.levels[..self.depth()] {
            siblings.push(level[i ^ 1]);
            i >>= 1;
        }
        MerkleProof { salt: self.salt, index: index as u32, siblings }
    }

    /// Proof for `token`, or `None` if it was not committed.
    pub fn prove_membership(&self, token: &Token) -> Option<MerkleProof> {
        let idx = self.leaves.iter().position(|t| t == token)?;
        Some(self.prove_path(idx))
    }
}

pub fn verify_membership(root: &Hash, token: &Token, proof: &MerkleProof) -> bool {
    if proof.siblings.len() >= 32 || (proof.index as u64) >> proof.siblings.len() != 0 {
        return false;
    }
    let mut acc = leaf_hash(&proof.salt, token);
    let mut i = proof.index;
    for sib in &proof.siblings {
        acc = if i & 1 == 0 { node_hash(&acc, sib) } else { node_hash(sib, &acc) };
        i >>= 1;
    }
    &acc == root
}
