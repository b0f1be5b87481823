//! Packed bitstrings.
//!
//! Bits are stored little-end-first inside `u64` words (bit `i` lives in
//! word `i / 64`, position `i % 64`). The wire form is different: bytes are
//! packed most-significant-bit first, see [`BitString::to_bytes`].

use std::fmt;

#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct BitString {
    words: Vec<u64>,
    len: usize,
}

impl BitString {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn with_capacity(bits: usize) -> Self {
        Self {
            words: Vec::with_capacity(bits.div_ceil(64)),
            len: 0,
        }
    }

    pub fn from_bools<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut out = Self::new();
        for b in bits {
            out.push(b);
        }
        out
    }

    /// Parses a string of `0`/`1` characters; anything else is rejected.
    pub fn parse(s: &str) -> Option<Self> {
        let mut out = Self::new();
        for c in s.chars() {
            match c {
                '0' => out.push(false),
                '1' => out.push(true),
                _ => return None,
            }
        }
        Some(out)
    }

    pub fn random<R: rand::Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut words: Vec<u64> = (0..len.div_ceil(64)).map(|_| rng.next_u64()).collect();
        if len % 64 != 0 {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << (len % 64)) - 1;
            }
        }
        Self { words, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn push(&mut self, value: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        if value {
            self.words[self.len / 64] |= 1u64 << (self.len % 64);
        }
        self.len += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub(crate) fn words(&self) -> &[u64] {
        &self.words
    }

    /// The 64 bits starting at `offset`; positions past the end read as zero.
    pub(crate) fn window(&self, offset: usize) -> u64 {
        if offset >= self.len {
            return 0;
        }
        let word = offset / 64;
        let shift = offset % 64;
        let lo = self.words[word] >> shift;
        let hi = if shift == 0 {
            0
        } else {
            self.words.get(word + 1).map_or(0, |w| w << (64 - shift))
        };
        lo | hi
    }

    /// Number of positions where `self` and `other` differ.
    ///
    /// # Panics
    /// If the lengths differ.
    pub fn hamming_distance(&self, other: &BitString) -> usize {
        assert_eq!(self.len, other.len, "hamming distance of unequal lengths");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    pub fn xor(&self, other: &BitString) -> BitString {
        assert_eq!(self.len, other.len, "xor of unequal lengths");
        BitString {
            words: self.words.iter().zip(&other.words).map(|(a, b)| a ^ b).collect(),
            len: self.len,
        }
    }

    /// Packs MSB-first; the final partial byte is zero-padded.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for i in 0..self.len {
            if self.get(i) {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes). Returns `None` when the byte
    /// count does not match `len` or a padding bit is set.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        if len % 8 != 0 {
            let pad_mask = 0xffu8 >> (len % 8);
            if bytes[bytes.len() - 1] & pad_mask != 0 {
                return None;
            }
        }
        let mut out = Self::zeros(len);
        for i in 0..len {
            if bytes[i / 8] & (0x80 >> (i % 8)) != 0 {
                out.set(i, true);
            }
        }
        Some(out)
    }

    pub fn to_hex(&self) -> String {
        self.to_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitString({}:", self.len)?;
        for b in self.iter().take(128) {
            f.write_str(if b { "1" } else { "0" })?;
        }
        if self.len > 128 {
            f.write_str("...")?;
        }
        f.write_str(")")
    }
}

impl FromIterator<bool> for BitString {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        Self::from_bools(iter)
    }
}
