//! Fixed-width index packing.
//!
//! Each index takes exactly `log2(k)` bits. Bits fill each byte starting at the
//! least-significant bit; an index may straddle bytes, with its low bits in the
//! earlier byte. The last byte is zero-padded in its high bits.

use super::Assignments;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedAssignments {
    pub bits_per_index: u32,
    pub payload: Vec<u8>,
}

impl PackedAssignments {
    pub fn payload_len(count: usize, bits_per_index: u32) -> usize {
        (count * bits_per_index as usize).div_ceil(8)
    }
}

fn index_bits(k: usize) -> Result<u32> {
    if !k.is_power_of_two() || !(2..=65536).contains(&k) {
        return Err(Error::Config(format!("codebook size {k} is not a power of two in [2, 65536]")));
    }
    Ok(k.trailing_zeros())
}

pub fn pack(a: &Assignments, k: usize) -> Result<PackedAssignments> {
    let bits = index_bits(k)?;
    let mut payload = Vec::with_capacity(PackedAssignments::payload_len(a.len(), bits));
    let mut buf: u64 = 0;
    let mut filled = 0u32;
    for &idx in a.as_slice() {
        if idx as usize >= k {
            return Err(Error::Encoding(format!("index {idx} does not fit in {bits} bits")));
        }
        buf |= (idx as u64) << filled;
        filled += bits;
        while filled >= 8 {
            payload.push(buf as u8);
            buf >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        payload.push(buf as u8);
    }
    Ok(PackedAssignments { bits_per_index: bits, payload })
}

pub fn unpack(p: &PackedAssignments, count: usize, k: usize) -> Result<Assignments> {
    let bits = index_bits(k)?;
    if bits != p.bits_per_index {
        return Err(Error::Encoding(format!("payload packed with {} bits, k={k} needs {bits}", p.bits_per_index)));
    }
    let expected = PackedAssignments::payload_len(count, bits);
    if p.payload.len() != expected {
        return Err(Error::Encoding(format!("{count} indices need {expected} bytes, payload has {}", p.payload.len())));
    }
    let mut reader = BitReader::new(&p.payload, bits);
    Ok(Assignments((0..count).map(|_| reader.next_index()).collect()))
}

/// Streams fixed-width indices out of a packed payload, counting every byte fetched.
#[derive(Debug)]
pub struct BitReader<'a> {
    payload: &'a [u8],
    bits: u32,
    pos: usize,
    buf: u64,
    avail: u32,
    bytes_read: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(payload: &'a [u8], bits: u32) -> Self {
        Self { payload, bits, pos: 0, buf: 0, avail: 0, bytes_read: 0 }
    }

    /// Next index. Panics when the payload is exhausted.
    #[inline]
    pub fn next_index(&mut self) -> u32 {
        while self.avail < self.bits {
            self.buf |= (self.payload[self.pos] as u64) << self.avail;
            self.pos += 1;
            self.bytes_read += 1;
            self.avail += 8;
        }
        let v = (self.buf & ((1u64 << self.bits) - 1)) as u32;
        self.buf >>= self.bits;
        self.avail -= self.bits;
        v
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes_read
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_bit_example() {
        let p = pack(&Assignments(vec![3, 0, 1, 2]), 4).unwrap();
        assert_eq!(p.payload, vec![0x93]);
        assert_eq!(unpack(&p, 4, 4).unwrap().0, vec![3, 0, 1, 2]);
    }

    #[test]
    fn full_byte_index() {
        assert_eq!(pack(&Assignments(vec![255]), 256).unwrap().payload, vec![0xFF]);
    }

    #[test]
    fn straddling_index_and_padding() {
        // 12-bit indices: 0xABC, 0x123 -> bytes BC 3A 12
        let p = pack(&Assignments(vec![0xABC, 0x123]), 4096).unwrap();
        assert_eq!(p.payload, vec![0xBC, 0x3A, 0x12]);
        // 6-bit single index pads the high bits
        assert_eq!(pack(&Assignments(vec![0b101010]), 64).unwrap().payload, vec![0b0010_1010]);
    }

    #[test]
    fn out_of_range_index_is_an_encoding_error() {
        assert!(matches!(pack(&Assignments(vec![4]), 4), Err(Error::Encoding(_))));
        assert!(pack(&Assignments(vec![0]), 3).is_err());
    }

    #[test]
    fn wrong_payload_length_rejected() {
        let p = pack(&Assignments(vec![1, 2, 3]), 16).unwrap();
        assert!(unpack(&p, 5, 16).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(bits in prop::sample::select(vec![1u32, 2, 3, 6, 8, 11, 12, 16]),
                     raw in prop::collection::vec(any::<u32>(), 1..300)) {
            let k = 1usize << bits;
            let a = Assignments(raw.iter().map(|v| v % k as u32).collect());
            let p = pack(&a, k).unwrap();
            prop_assert_eq!(p.payload.len(), PackedAssignments::payload_len(a.len(), bits));
            prop_assert_eq!(unpack(&p, a.len(), k).unwrap(), a);
        }
    }
}
