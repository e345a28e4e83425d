//! Per-unit scalar codebooks, feedback quantization and the codebook file.

use std::io::{Read, Write};

use super::alloc::{columns, BitAllocation};
use super::kmeans::{kmeans_ladder, nearest};
use super::unit_seed;
use crate::bitstream::FeedbackBitstream;
use crate::channel::ByteReader;
use crate::error::{config_err, dim_err, format_err, Result};
use crate::nn::Tensor;

/// Sorted centroids per latent unit; unit `i` has exactly `2^{b_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarCodebookSet {
    pub bits: Vec<u8>,
    pub centroids: Vec<Vec<f64>>,
}

/// Extends a sorted list to `k` strictly increasing entries. Only reached
/// when a unit has fewer distinct design values than `k`.
fn pad_centroids(mut c: Vec<f64>, k: usize) -> Vec<f64> {
    let last = *c.last().expect("non-empty");
    let step = if c.len() > 1 {
        (last - c[0]) / (c.len() - 1) as f64
    } else {
        1.0
    };
    let step = if step > 0.0 { step } else { 1.0 };
    let mut j = 1.0;
    while c.len() < k {
        c.push(last + step * j);
        j += 1.0;
    }
    c
}

/// Unit `i` gets the `2^{b_i}`-level solution of its k-means ladder.
pub fn build_codebooks(latents: &Tensor, alloc: &BitAllocation, seed: u64) -> Result<ScalarCodebookSet> {
    let cols = columns(latents)?;
    if cols.len() != alloc.units() {
        return Err(dim_err!(
            "allocation covers {} units, latents have {}",
            alloc.units(),
            cols.len()
        ));
    }
    if latents.shape()[0] == 0 {
        return Err(config_err!("codebook design needs at least one latent"));
    }
    let centroids = cols
        .iter()
        .zip(&alloc.bits)
        .enumerate()
        .map(|(i, (col, &b))| {
            let ladder = kmeans_ladder(col, b, unit_seed(seed, i));
            let c = ladder[b as usize].centroids.clone();
            pad_centroids(c, 1 << b)
        })
        .collect();
    Ok(ScalarCodebookSet {
        bits: alloc.bits.clone(),
        centroids,
    })
}

/// Baseline: every unit gets `B / M` bits.
pub fn uniform_baseline(latents: &Tensor, budget: usize, seed: u64) -> Result<ScalarCodebookSet> {
    let m = latents.shape().get(1).copied().unwrap_or(0);
    if m == 0 || !budget.is_multiple_of(m) {
        return Err(config_err!(
            "uniform allocation needs M={} to divide B={}",
            m,
            budget
        ));
    }
    let per = budget / m;
    if per > super::alloc::MAX_UNIT_BITS as usize {
        return Err(config_err!("{} bits per unit is too many", per));
    }
    build_codebooks(latents, &BitAllocation::uniform(m, per as u8), seed)
}

impl ScalarCodebookSet {
    pub fn units(&self) -> usize {
        self.bits.len()
    }

    pub fn budget(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn allocation(&self) -> BitAllocation {
        BitAllocation {
            bits: self.bits.clone(),
        }
    }

    pub fn indices(&self, latent: &[f64]) -> Result<Vec<u32>> {
        if latent.len() != self.units() {
            return Err(dim_err!(
                "latent has {} entries, codebooks cover {}",
                latent.len(),
                self.units()
            ));
        }
        Ok(latent
            .iter()
            .zip(&self.centroids)
            .map(|(&x, c)| nearest(c, x) as u32)
            .collect())
    }

    pub fn quantize(&self, latent: &[f64]) -> Result<FeedbackBitstream> {
        FeedbackBitstream::pack(&self.indices(latent)?, &self.bits)
    }

    pub fn dequantize(&self, stream: &FeedbackBitstream) -> Result<Vec<f64>> {
        let idx = stream.unpack(&self.bits)?;
        Ok(idx
            .iter()
            .zip(&self.centroids)
            .map(|(&k, c)| c[k as usize])
            .collect())
    }

    /// Nearest-centroid reconstruction of a whole `[N, M]` batch.
    pub fn reconstruct(&self, latents: &Tensor) -> Result<Tensor> {
        let m = self.units();
        let mut out = Vec::with_capacity(latents.len());
        for row in latents.data().chunks(m) {
            let idx = self.indices(row)?;
            out.extend(idx.iter().zip(&self.centroids).map(|(&k, c)| c[k as usize]));
        }
        Tensor::new(latents.shape().to_vec(), out)
    }

    /// Design-set squared error of quantizing every latent.
    pub fn design_sse(&self, latents: &Tensor) -> Result<f64> {
        let q = self.reconstruct(latents)?;
        Ok(q.data()
            .iter()
            .zip(latents.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// `CSIQ` file, mode 0.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CODEBOOK_MAGIC);
        buf.push(CODEBOOK_VERSION);
        buf.push(0);
        let (m, b) = (self.units(), self.budget());
        if m > u16::MAX as usize || b > u16::MAX as usize {
            return Err(format_err!("M={} or B={} exceeds 16 bits", m, b));
        }
        buf.extend_from_slice(&(m as u16).to_le_bytes());
        buf.extend_from_slice(&(b as u16).to_le_bytes());
        buf.extend_from_slice(&self.bits);
        for c in self.centroids.iter().flatten() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = ByteReader::new(&buf);
        let mode = read_codebook_header(&mut cur)?;
        if mode != 0 {
            return Err(format_err!("expected scalar codebook (mode 0), found mode {}", mode));
        }
        let m = cur.u16()? as usize;
        let budget = cur.u16()? as usize;
        let bits = cur.take(m)?.to_vec();
        if bits.iter().map(|&b| b as usize).sum::<usize>() != budget {
            return Err(format_err!("per-unit bits do not sum to B={}", budget));
        }
        if bits.iter().any(|&b| b > super::alloc::MAX_UNIT_BITS) {
            return Err(format_err!("per-unit bit depth out of range"));
        }
        let mut centroids = Vec::with_capacity(m);
        for &b in &bits {
            let c = (0..1usize << b)
                .map(|_| cur.f32().map(f64::from))
                .collect::<Result<Vec<_>>>()?;
            centroids.push(c);
        }
        if !cur.is_empty() {
            return Err(format_err!("trailing bytes after codebook"));
        }
        Ok(Self { bits, centroids })
    }
}

pub(crate) const CODEBOOK_MAGIC: &[u8; 4] = b"CSIQ";
pub(crate) const CODEBOOK_VERSION: u8 = 1;

/// Validates magic and version and returns the mode byte.
pub(crate) fn read_codebook_header(cur: &mut ByteReader) -> Result<u8> {
    if cur.take(4)? != CODEBOOK_MAGIC {
        return Err(format_err!("not a codebook file (bad magic)"));
    }
    let version = cur.u8()?;
    if version != CODEBOOK_VERSION {
        return Err(format_err!("unsupported codebook version {}", version));
    }
    cur.u8()
}
