//! Packed bit strings and the seed-bit sources the protocol draws from.
//!
//! Bit `i` lives in byte `i / 8` at position `i % 8` (little-endian within bytes). Raw files
//! carry an 8-byte little-endian bit count followed by the packed payload.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitStream {
    bytes: Vec<u8>,
    len: u64,
}

impl BitStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(len: u64) -> Self {
        BitStream { bytes: vec![0; len.div_ceil(8) as usize], len }
    }

    pub fn with_capacity(bits: u64) -> Self {
        BitStream { bytes: Vec::with_capacity(bits.div_ceil(8) as usize), len: 0 }
    }

    /// Packs `bytes` holding `len` bits; pad bits must be zero.
    pub fn from_bytes(bytes: Vec<u8>, len: u64) -> Result<Self> {
        if bytes.len() as u64 != len.div_ceil(8) {
            return Err(Error::Format(format!("{} payload bytes cannot hold exactly {len} bits", bytes.len())));
        }
        let s = BitStream { bytes, len };
        if len % 8 != 0 && s.bytes[s.bytes.len() - 1] >> (len % 8) != 0 {
            return Err(Error::Format("nonzero pad bits after the last bit".into()));
        }
        Ok(s)
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        let mut s = Self::with_capacity(bits.len() as u64);
        for b in bits {
            s.push(*b != 0);
        }
        s
    }

    pub fn random<R: RngCore + ?Sized>(len: u64, rng: &mut R) -> Self {
        let mut bytes = vec![0u8; len.div_ceil(8) as usize];
        rng.fill_bytes(&mut bytes);
        if len % 8 != 0 {
            let last = bytes.len() - 1;
            bytes[last] &= (1u8 << (len % 8)) - 1;
        }
        BitStream { bytes, len }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, i: u64) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        (self.bytes[(i / 8) as usize] >> (i % 8)) & 1 == 1
    }

    pub fn set(&mut self, i: u64, v: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let (byte, bit) = ((i / 8) as usize, i % 8);
        if v {
            self.bytes[byte] |= 1 << bit;
        } else {
            self.bytes[byte] &= !(1 << bit);
        }
    }

    pub fn push(&mut self, v: bool) {
        if self.len % 8 == 0 {
            self.bytes.push(0);
        }
        self.len += 1;
        self.set(self.len - 1, v);
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.iter().map(u8::from).collect()
    }

    pub fn count_ones(&self) -> u64 {
        self.bytes.iter().map(|b| b.count_ones() as u64).sum()
    }

    pub fn xor(&self, other: &BitStream) -> Result<BitStream> {
        if self.len != other.len {
            return Err(Error::Parameter(format!("xor of {} and {} bits", self.len, other.len)));
        }
        let bytes = self.bytes.iter().zip(&other.bytes).map(|(a, b)| a ^ b).collect();
        Ok(BitStream { bytes, len: self.len })
    }

    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.len.to_le_bytes())?;
        w.write_all(&self.bytes)?;
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)?;
        let len = u64::from_le_bytes(header);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(bytes, len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_raw(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_raw(std::io::BufReader::new(f))
    }
}

/// Source of uniformly random seed bits.
pub trait SeedSource {
    fn next_bit(&mut self) -> Result<bool>;
    /// Bits drawn so far.
    fn consumed(&self) -> u64;
}

/// Reads a finite seed in order.
pub struct BitReader<'a> {
    stream: &'a BitStream,
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(stream: &'a BitStream) -> Self {
        BitReader { stream, pos: 0 }
    }

    pub fn remaining(&self) -> u64 {
        self.stream.len() - self.pos
    }
}

impl SeedSource for BitReader<'_> {
    fn next_bit(&mut self) -> Result<bool> {
        if self.pos >= self.stream.len() {
            return Err(Error::SeedUnderflow { consumed: self.pos });
        }
        self.pos += 1;
        Ok(self.stream.get(self.pos - 1))
    }

    fn consumed(&self) -> u64 {
        self.pos
    }
}

/// Seed bits from a pseudorandom generator, for simulations.
pub struct RngSeed<R> {
    rng: R,
    word: u64,
    left: u32,
    consumed: u64,
}

impl<R: Rng> RngSeed<R> {
    pub fn new(rng: R) -> Self {
        RngSeed { rng, word: 0, left: 0, consumed: 0 }
    }
}

impl<R: Rng> SeedSource for RngSeed<R> {
    fn next_bit(&mut self) -> Result<bool> {
        if self.left == 0 {
            self.word = self.rng.next_u64();
            self.left = 64;
        }
        let b = self.word & 1 == 1;
        self.word >>= 1;
        self.left -= 1;
        self.consumed += 1;
        Ok(b)
    }

    fn consumed(&self) -> u64 {
        self.consumed
    }
}
