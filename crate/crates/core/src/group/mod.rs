//! Prime-order group used for all blinding arithmetic.
//!
//! The group is ristretto255: prime order, 32-byte canonical encodings, and a
//! standardized hash-to-group (Elligator over SHA-512 output). Every
//! exponentiation performed through [`GroupElement::pow`] bumps a
//! thread-local counter so callers can account for computation cost.

mod schnorr;
mod truncate;

use std::cell::Cell;
use std::fmt;

use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar as DalekScalar;
use curve25519_dalek::traits::Identity;
use rand::{CryptoRng, RngCore};
use sha2::Sha512;

pub use schnorr::{SchnorrProof, SCHNORR_PROOF_LEN};
pub(crate) use truncate::ceil_log2;
pub use truncate::{TransformedToken, TruncationParams, MAX_TRUNCATED_BITS};

/// Byte length of an encoded [`GroupElement`].
pub const ELEMENT_LEN: usize = 32;
/// Byte length of an encoded [`Scalar`].
pub const SCALAR_LEN: usize = 32;

const HASH_TO_GROUP_DST: &[u8] = b"epione/v1/hash-to-group";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GroupError {
    #[error("non-canonical group element encoding")]
    NonCanonicalElement,
    #[error("non-canonical scalar encoding")]
    NonCanonicalScalar,
    #[error("exponent must be nonzero")]
    ZeroExponent,
    #[error("invalid truncation parameters: {0}")]
    Truncation(String),
}

thread_local! {
    static EXPONENTIATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of group exponentiations performed on this thread so far.
pub fn exponentiation_count() -> u64 {
    EXPONENTIATIONS.with(Cell::get)
}

fn count_exponentiation() {
    EXPONENTIATIONS.with(|c| c.set(c.get() + 1));
}

/// An integer modulo the group order.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Scalar(DalekScalar);

impl Scalar {
    pub const ZERO: Scalar = Scalar(DalekScalar::ZERO);
    pub const ONE: Scalar = Scalar(DalekScalar::ONE);

    /// Uniform over the nonzero residues.
    pub fn random_nonzero<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        loop {
            let s = DalekScalar::random(rng);
            if s != DalekScalar::ZERO {
                return Scalar(s);
            }
        }
    }

    pub fn from_u64(v: u64) -> Self {
        Scalar(DalekScalar::from(v))
    }

    /// Reduce 64 uniform bytes modulo the group order.
    pub fn from_wide_bytes(bytes: &[u8; 64]) -> Self {
        Scalar(DalekScalar::from_bytes_mod_order_wide(bytes))
    }

    pub fn is_zero(&self) -> bool {
        self.0 == DalekScalar::ZERO
    }

    pub fn invert(&self) -> Result<Scalar, GroupError> {
        if self.is_zero() {
            return Err(GroupError::ZeroExponent);
        }
        Ok(Scalar(self.0.invert()))
    }

    pub fn to_bytes(&self) -> [u8; SCALAR_LEN] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GroupError> {
        let arr: [u8; SCALAR_LEN] = bytes.try_into().map_err(|_| GroupError::NonCanonicalScalar)?;
        Option::from(DalekScalar::from_canonical_bytes(arr)).map(Scalar).ok_or(GroupError::NonCanonicalScalar)
    }
}

impl std::ops::Add for Scalar {
    type Output = Scalar;
    fn add(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 + rhs.0)
    }
}

impl std::ops::Mul for Scalar {
    type Output = Scalar;
    fn mul(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 * rhs.0)
    }
}

impl std::ops::Sub for Scalar {
    type Output = Scalar;
    fn sub(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 - rhs.0)
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Scalars are usually secrets.
        f.write_str("Scalar(..)")
    }
}

/// An element of the prime-order group.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct GroupElement(RistrettoPoint);

impl GroupElement {
    pub fn generator() -> Self {
        GroupElement(curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT)
    }

    pub fn identity() -> Self {
        GroupElement(RistrettoPoint::identity())
    }

    pub fn is_identity(&self) -> bool {
        self.0 == RistrettoPoint::identity()
    }

    /// `self^exp`. Counted.
    pub fn pow(&self, exp: &Scalar) -> GroupElement {
        count_exponentiation();
        GroupElement(self.0 * exp.0)
    }

    /// Group operation (written multiplicatively).
    pub fn mul(&self, other: &GroupElement) -> GroupElement {
        GroupElement(self.0 + other.0)
    }

    pub fn to_bytes(&self) -> [u8; ELEMENT_LEN] {
        self.0.compress().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GroupError> {
        let c = CompressedRistretto::from_slice(bytes).map_err(|_| GroupError::NonCanonicalElement)?;
        c.decompress().map(GroupElement).ok_or(GroupError::NonCanonicalElement)
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement({})", hex::encode(&self.to_bytes()[..8]))
    }
}

impl std::hash::Hash for GroupElement {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.to_bytes().hash(state)
    }
}

/// Random-oracle hash into the group. Never returns the identity.
pub fn hash_to_group(msg: &[u8]) -> GroupElement {
    let mut input = Vec::with_capacity(HASH_TO_GROUP_DST.len() + 1 + msg.len());
    input.extend_from_slice(HASH_TO_GROUP_DST);
    input.push(0);
    input.extend_from_slice(msg);
    let mut ctr = 0u8;
    loop {
        let p = RistrettoPoint::hash_from_bytes::<Sha512>(&input);
        if p != RistrettoPoint::identity() {
            return GroupElement(p);
        }
        // Unreachable in practice; keeps the contract total.
        ctr = ctr.wrapping_add(1);
        input.push(ctr);
    }
}

/// `elem^exp` for a nonzero exponent.
pub fn blind(elem: &GroupElement, exp: &Scalar) -> Result<GroupElement, GroupError> {
    if exp.is_zero() {
        return Err(GroupError::ZeroExponent);
    }
    Ok(elem.pow(exp))
}

/// Truncate a group element to `params.out_bits()` bits.
pub fn truncate(elem: &GroupElement, params: &TruncationParams) -> TransformedToken {
    TransformedToken::from_element(elem, params.out_bits())
}
