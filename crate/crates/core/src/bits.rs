//! Plain `Vec<bool>` bitstrings with MSB-first integer fields.

pub fn bytes_to_bits(bytes: &[u8]) -> Vec<bool> {
    bytes
        .iter()
        .flat_map(|&b| (0..8).rev().map(move |i| (b >> i) & 1 == 1))
        .collect()
}

/// Packs bits MSB-first; a trailing partial byte is zero-filled.
pub fn bits_to_bytes(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << (7 - i)))
        })
        .collect()
}

/// CRC-32 (IEEE) of a bitstring packed with [`bits_to_bytes`].
pub fn crc32_bits(bits: &[bool]) -> u32 {
    crc32fast::hash(&bits_to_bytes(bits))
}

/// Bits needed to index `n` distinct values (`0` when `n <= 1`).
pub fn index_width(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

#[derive(Default, Debug, Clone)]
pub struct BitWriter {
    bits: Vec<bool>,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_uint(&mut self, value: u64, width: usize) {
        debug_assert!(width == 64 || value >> width == 0, "{value} overflows {width} bits");
        for i in (0..width).rev() {
            self.bits.push((value >> i) & 1 == 1);
        }
    }

    pub fn push_bits(&mut self, bits: &[bool]) {
        self.bits.extend_from_slice(bits);
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bits: &'a [bool],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bits: &'a [bool]) -> Self {
        BitReader { bits, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bits.len() - self.pos
    }

    pub fn read_uint(&mut self, width: usize) -> Option<u64> {
        let field = self.read_bits(width)?;
        Some(field.iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b)))
    }

    pub fn read_bits(&mut self, n: usize) -> Option<&'a [bool]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bits.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msb_first_packing() {
        assert_eq!(bytes_to_bits(&[0xA0]), [true, false, true, false, false, false, false, false]);
        assert_eq!(bits_to_bytes(&[true, true]), vec![0xC0]);
    }

    #[test]
    fn writer_reader_fields() {
        let mut w = BitWriter::new();
        w.push_uint(0x52, 8);
        w.push_uint(5, 3);
        w.push_uint(0, 0);
        let bits = w.into_bits();
        let mut r = BitReader::new(&bits);
        assert_eq!(r.read_uint(8), Some(0x52));
        assert_eq!(r.read_uint(3), Some(5));
        assert_eq!(r.read_uint(1), None);
    }

    #[test]
    fn index_widths() {
        assert_eq!(index_width(0), 0);
        assert_eq!(index_width(1), 0);
        assert_eq!(index_width(2), 1);
        assert_eq!(index_width(64), 6);
        assert_eq!(index_width(65), 7);
    }
}
