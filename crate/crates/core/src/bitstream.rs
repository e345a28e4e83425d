//! MSB-first bit packing of quantization indices.

use std::io::{Read, Write};

use crate::channel::ByteReader;
use crate::error::{format_err, Result};

/// Packed feedback bits. `bit_len` counts payload bits before the zero
/// padding of the last byte.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeedbackBitstream {
    pub bytes: Vec<u8>,
    pub bit_len: usize,
}

impl FeedbackBitstream {
    /// Pack `indices[i]` into `widths[i]` bits each, in order.
    pub fn pack(indices: &[u32], widths: &[u8]) -> Result<Self> {
        if indices.len() != widths.len() {
            return Err(format_err!(
                "{} indices for {} bit widths",
                indices.len(),
                widths.len()
            ));
        }
        let mut w = BitWriter::default();
        for (&idx, &bits) in indices.iter().zip(widths) {
            if bits < 32 && idx >> bits != 0 {
                return Err(format_err!("index {} does not fit in {} bits", idx, bits));
            }
            w.push(idx, bits);
        }
        Ok(w.finish())
    }

    /// Inverse of [`FeedbackBitstream::pack`].
    pub fn unpack(&self, widths: &[u8]) -> Result<Vec<u32>> {
        let total: usize = widths.iter().map(|&b| b as usize).sum();
        if total != self.bit_len || self.bytes.len() != self.bit_len.div_ceil(8) {
            return Err(format_err!(
                "bitstream holds {} bits in {} bytes, allocation needs {}",
                self.bit_len,
                self.bytes.len(),
                total
            ));
        }
        let mut pos = 0;
        Ok(widths
            .iter()
            .map(|&bits| {
                let mut v = 0u32;
                for _ in 0..bits {
                    let bit = (self.bytes[pos / 8] >> (7 - pos % 8)) & 1;
                    v = (v << 1) | u32::from(bit);
                    pos += 1;
                }
                v
            })
            .collect())
    }

    /// Bits as a `0`/`1` string (no padding), for diagnostics.
    pub fn to_bit_string(&self) -> String {
        (0..self.bit_len)
            .map(|p| {
                if (self.bytes[p / 8] >> (7 - p % 8)) & 1 == 1 {
                    '1'
                } else {
                    '0'
                }
            })
            .collect()
    }
}

const FEEDBACK_MAGIC: &[u8; 4] = b"CSIF";
const FEEDBACK_VERSION: u8 = 1;

/// Feedback file: magic `CSIF`, version u8, count u32, bits per sample u32,
/// then each sample's padded bytes in order. All samples share one length.
pub fn write_feedback(streams: &[FeedbackBitstream], mut w: impl Write) -> Result<()> {
    let bit_len = streams.first().map_or(0, |s| s.bit_len);
    if streams.iter().any(|s| s.bit_len != bit_len) {
        return Err(format_err!("feedback streams differ in length"));
    }
    if streams.len() > u32::MAX as usize || bit_len > u32::MAX as usize {
        return Err(format_err!("feedback file too large"));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(FEEDBACK_MAGIC);
    buf.push(FEEDBACK_VERSION);
    buf.extend_from_slice(&(streams.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(bit_len as u32).to_le_bytes());
    for s in streams {
        buf.extend_from_slice(&s.bytes);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_feedback(mut r: impl Read) -> Result<Vec<FeedbackBitstream>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = ByteReader::new(&buf);
    if cur.take(4)? != FEEDBACK_MAGIC {
        return Err(format_err!("not a feedback file (bad magic)"));
    }
    let version = cur.u8()?;
    if version != FEEDBACK_VERSION {
        return Err(format_err!("unsupported feedback version {}", version));
    }
    let count = cur.u32()? as usize;
    let bit_len = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        out.push(FeedbackBitstream {
            bytes: cur.take(bit_len.div_ceil(8))?.to_vec(),
            bit_len,
        });
    }
    if !cur.is_empty() {
        return Err(format_err!("trailing bytes after feedback"));
    }
    Ok(out)
}

#[derive(Debug, Default)]
struct BitWriter {
    bytes: Vec<u8>,
    len: usize,
}

impl BitWriter {
    fn push(&mut self, value: u32, bits: u8) {
        for k in (0..bits).rev() {
            if self.len.is_multiple_of(8) {
                self.bytes.push(0);
            }
            let bit = ((value >> k) & 1) as u8;
            let last = self.bytes.last_mut().expect("byte pushed above");
            *last |= bit << (7 - self.len % 8);
            self.len += 1;
        }
    }

    fn finish(self) -> FeedbackBitstream {
        FeedbackBitstream {
            bytes: self.bytes,
            bit_len: self.len,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn msb_first_with_padding() {
        let s = FeedbackBitstream::pack(&[1, 0b10, 0], &[1, 2, 0]).unwrap();
        assert_eq!(s.bit_len, 3);
        assert_eq!(s.bytes, vec![0b1100_0000]);
        assert_eq!(s.to_bit_string(), "110");
    }

    #[test]
    fn length_mismatch_is_a_format_error() {
        let s = FeedbackBitstream::pack(&[3], &[2]).unwrap();
        assert!(matches!(s.unpack(&[3]), Err(crate::Error::Format(_))));
        assert!(FeedbackBitstream::pack(&[4], &[2]).is_err());
    }

    #[test]
    fn feedback_file_rejects_bad_input() {
        let a = FeedbackBitstream::pack(&[5, 1], &[3, 2]).unwrap();
        let b = FeedbackBitstream::pack(&[1], &[2]).unwrap();
        assert!(write_feedback(&[a.clone(), b], Vec::new()).is_err());
        let mut buf = Vec::new();
        write_feedback(&[a], &mut buf).unwrap();
        buf.push(0);
        assert!(matches!(read_feedback(&buf[..]), Err(crate::Error::Format(_))));
        buf.truncate(buf.len() - 2);
        assert!(read_feedback(&buf[..]).is_err());
        assert_eq!(read_feedback(&b"CSIF\x01\0\0\0\0\0\0\0\0"[..]).unwrap(), vec![]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn feedback_file_round_trip(widths in proptest::collection::vec(0u8..=12, 0..20), n in 0usize..6, seed in any::<u64>()) {
            let mut x = seed | 1;
            let streams: Vec<FeedbackBitstream> = (0..n).map(|_| {
                let idx: Vec<u32> = widths.iter().map(|&b| {
                    x ^= x << 13; x ^= x >> 7; x ^= x << 17;
                    if b == 0 { 0 } else { (x as u32) & ((1u32 << b) - 1) }
                }).collect();
                FeedbackBitstream::pack(&idx, &widths).unwrap()
            }).collect();
            let mut buf = Vec::new();
            write_feedback(&streams, &mut buf).unwrap();
            prop_assert_eq!(read_feedback(&buf[..]).unwrap(), streams);
        }


        #[test]
        fn pack_unpack_round_trip(widths in proptest::collection::vec(0u8..=12, 0..40), seed in any::<u64>()) {
            let mut x = seed | 1;
            let indices: Vec<u32> = widths.iter().map(|&b| {
                x ^= x << 13; x ^= x >> 7; x ^= x << 17;
                if b == 0 { 0 } else { (x as u32) & ((1u32 << b) - 1) }
            }).collect();
            let s = FeedbackBitstream::pack(&indices, &widths).unwrap();
            prop_assert_eq!(s.bit_len, widths.iter().map(|&b| b as usize).sum::<usize>());
            prop_assert_eq!(s.unpack(&widths).unwrap(), indices);
        }
    }
}
