//! Error-correction leakage accounting, Toeplitz privacy amplification and
//! key confirmation.

use std::io::{Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::bits::BitString;
use crate::error::ModelError;
use crate::link::{Link, LinkError, Message};
use crate::security::{binary_entropy, secret_fraction, AttackReport};

/// Bits reserved by default for confirmation and safety.
pub const DEFAULT_MARGIN_BITS: u64 = 64;

/// Width of the confirmation hash.
pub const CONFIRM_HASH_BITS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PostprocessingError {
    #[error("length mismatch: {0}")]
    Length(String),
}

/// Bits disclosed by error correction at efficiency `f_ec`.
pub fn ec_leakage(q: f64, n: u64, f_ec: f64) -> Result<u64, ModelError> {
    if !(f_ec >= 1.0) || !f_ec.is_finite() {
        return Err(ModelError::Domain(format!("f_ec must be >= 1, got {f_ec}")));
    }
    Ok((f_ec * binary_entropy(q)? * n as f64).ceil() as u64)
}

/// Final key length for `n` reconciled bits.
pub fn pa_output_length(n: u64, q: f64, attack: &AttackReport, f_ec: f64, margin: u64) -> Result<u64, ModelError> {
    let r = secret_fraction(q, attack, f_ec)?;
    Ok(((n as f64 * r).floor() as u64).saturating_sub(margin))
}

/// Shape and seed of one privacy-amplification hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PAParameters {
    input_len: usize,
    output_len: usize,
    seed: BitString,
}

impl PAParameters {
    pub fn new(input_len: usize, output_len: usize, seed: BitString) -> Result<Self, PostprocessingError> {
        if output_len == 0 || output_len > input_len {
            return Err(PostprocessingError::Length(format!(
                "output length {output_len} must lie in 1..={input_len}"
            )));
        }
        if seed.len() != input_len + output_len - 1 {
            return Err(PostprocessingError::Length(format!(
                "seed has {} bits, expected {}",
                seed.len(),
                input_len + output_len - 1
            )));
        }
        Ok(Self {
            input_len,
            output_len,
            seed,
        })
    }

    pub fn random<R: Rng + ?Sized>(input_len: usize, output_len: usize, rng: &mut R) -> Result<Self, PostprocessingError> {
        let seed = BitString::random((input_len + output_len).saturating_sub(1), rng);
        Self::new(input_len, output_len, seed)
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn seed(&self) -> &BitString {
        &self.seed
    }
}

/// Multiplies `key` by the `rows × key.len()` Toeplitz matrix with
/// `T[i][j] = seed[i - j + key.len() - 1]`.
fn toeplitz_multiply(key: &BitString, rows: usize, seed: &BitString) -> BitString {
    let n = key.len();
    debug_assert_eq!(seed.len() + 1, n + rows);
    // Row i reads seed[n-1+i], seed[n-2+i], ... which is a forward run of
    // the reversed seed starting at rows-1-i.
    let reversed: BitString = (0..seed.len()).rev().map(|k| seed.get(k)).collect();
    let words = key.words();
    let mut out = BitString::zeros(rows);
    for i in 0..rows {
        let start = rows - 1 - i;
        let mut acc = 0u64;
        for (w, &kw) in words.iter().enumerate() {
            acc ^= reversed.window(start + 64 * w) & kw;
        }
        if acc.count_ones() % 2 == 1 {
            out.set(i, true);
        }
    }
    out
}

pub fn toeplitz_hash(key: &BitString, p: &PAParameters) -> Result<BitString, PostprocessingError> {
    if key.len() != p.input_len {
        return Err(PostprocessingError::Length(format!(
            "key has {} bits, parameters expect {}",
            key.len(),
            p.input_len
        )));
    }
    Ok(toeplitz_multiply(key, p.output_len, &p.seed))
}

/// Seed length of the confirmation hash for a key of `key_len` bits.
pub fn confirm_seed_len(key_len: usize) -> usize {
    key_len + CONFIRM_HASH_BITS - 1
}

/// 64-bit Toeplitz hash of `key`. An empty key hashes to zero.
pub fn confirm_hash(key: &BitString, seed: &BitString) -> Result<u64, PostprocessingError> {
    if key.is_empty() {
        return Ok(0);
    }
    if seed.len() != confirm_seed_len(key.len()) {
        return Err(PostprocessingError::Length(format!(
            "confirmation seed has {} bits, expected {}",
            seed.len(),
            confirm_seed_len(key.len())
        )));
    }
    let h = toeplitz_multiply(key, CONFIRM_HASH_BITS, seed);
    Ok(h.window(0))
}

/// Opens key confirmation: sends a fresh hash seed with the local hash and
/// compares against the peer's reply.
pub fn key_confirm_initiator<S: Read + Write, R: Rng + ?Sized>(
    key: &BitString,
    link: &mut Link<S>,
    rng: &mut R,
) -> Result<bool, LinkError> {
    let seed = if key.is_empty() {
        BitString::new()
    } else {
        BitString::random(confirm_seed_len(key.len()), rng)
    };
    let hash = confirm_hash(key, &seed).expect("seed sized for key");
    link.send(&Message::KeyConfirm { seed: seed.clone(), hash })?;
    match link.recv()? {
        Message::KeyConfirm { seed: echoed, hash: theirs } if echoed == seed => Ok(theirs == hash),
        Message::KeyConfirm { .. } => Err(LinkError::Protocol("confirmation seed not echoed".into())),
        other => Err(unexpected(&other)),
    }
}

/// Answers key confirmation with the hash of the local key under the
/// initiator's seed.
pub fn key_confirm_responder<S: Read + Write>(key: &BitString, link: &mut Link<S>) -> Result<bool, LinkError> {
    match link.recv()? {
        Message::KeyConfirm { seed, hash: theirs } => {
            let ours = confirm_hash(key, &seed).map_err(|e| LinkError::Protocol(e.to_string()))?;
            link.send(&Message::KeyConfirm { seed, hash: ours })?;
            Ok(ours == theirs)
        }
        other => Err(unexpected(&other)),
    }
}

fn unexpected(msg: &Message) -> LinkError {
    match msg {
        Message::Abort { code, reason } => LinkError::Protocol(format!("peer aborted ({code:?}): {reason}")),
        _ => LinkError::Protocol(format!("unexpected {:?} frame during confirmation", msg.msg_type())),
    }
}
