//! Fixed-key AES in Davies–Meyer mode: `G(s) = AES_k(s) ^ s`.

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes128;

const KEY_LEFT: [u8; 16] = *b"epione/dpf/left!";
const KEY_RIGHT: [u8; 16] = *b"epione/dpf/right";
const KEY_CONVERT: [u8; 16] = *b"epione/dpf/convt";

type Block = GenericArray<u8, aes::cipher::consts::U16>;

/// Child seeds and control bits of one tree node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Expansion {
    pub left: u128,
    pub t_left: bool,
    pub right: u128,
    pub t_right: bool,
}

pub(crate) struct Prg {
    left: Aes128,
    right: Aes128,
    convert: Aes128,
}

#[inline]
fn to_block(v: u128) -> Block {
    GenericArray::from(v.to_le_bytes())
}

#[inline]
fn from_block(b: &Block) -> u128 {
    u128::from_le_bytes((*b).into())
}

/// Low bit of a PRG output is the control bit; it is cleared from the seed.
#[inline]
fn split(v: u128) -> (u128, bool) {
    (v & !1, v & 1 == 1)
}

impl Prg {
    pub fn new() -> Self {
        Prg {
            left: Aes128::new(&GenericArray::from(KEY_LEFT)),
            right: Aes128::new(&GenericArray::from(KEY_RIGHT)),
            convert: Aes128::new(&GenericArray::from(KEY_CONVERT)),
        }
    }

    pub fn expand(&self, seed: u128) -> Expansion {
        let mut l = to_block(seed);
        let mut r = to_block(seed);
        self.left.encrypt_block(&mut l);
        self.right.encrypt_block(&mut r);
        let (left, t_left) = split(from_block(&l) ^ seed);
        let (right, t_right) = split(from_block(&r) ^ seed);
        Expansion { left, t_left, right, t_right }
    }

    /// Expand a whole tree level at once. `out_left`/`out_right` receive the
    /// raw (unsplit, uncorrected) child values.
    pub fn expand_many(
        &self,
        seeds: &[u128],
        scratch: &mut Vec<Block>,
        out_left: &mut Vec<u128>,
        out_right: &mut Vec<u128>,
    ) {
        scratch.clear();
        scratch.extend(seeds.iter().map(|&s| to_block(s)));
        self.left.encrypt_blocks(scratch);
        out_left.clear();
        out_left.extend(scratch.iter().zip(seeds).map(|(b, &s)| from_block(b) ^ s));

        scratch.clear();
        scratch.extend(seeds.iter().map(|&s| to_block(s)));
        self.right.encrypt_blocks(scratch);
        out_right.clear();
        out_right.extend(scratch.iter().zip(seeds).map(|(b, &s)| from_block(b) ^ s));
    }

    /// Stretch a leaf seed to `len` bytes.
    pub fn convert(&self, seed: u128, out: &mut [u8]) {
        for (i, chunk) in out.chunks_mut(16).enumerate() {
            let x = seed ^ i as u128;
            let mut b = to_block(x);
            self.convert.encrypt_block(&mut b);
            let v = (from_block(&b) ^ x).to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}
