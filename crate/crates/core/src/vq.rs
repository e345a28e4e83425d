//! Shared vector codebook learned during training: nearest-codeword
//! assignment, the three-term loss with stop-gradients, and bit coding of
//! codeword indices.

use std::io::{Read, Write};

use rand::Rng as _;

use crate::bitstream::FeedbackBitstream;
use crate::channel::ByteReader;
use crate::error::{config_err, dim_err, format_err, Result};
use crate::ndq::{read_codebook_header, CODEBOOK_MAGIC, CODEBOOK_VERSION};
use crate::nn::{Graph, Tensor, Var};
use crate::rng::Rng;

/// How a budget of `B` bits splits over `M/m` segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodebookSizing {
    pub segments: usize,
    pub bits_per_segment: u8,
    pub size: usize,
}

/// `K = 2^{B/(M/m)}`; `m` must divide `M` and `M/m` must divide `B`.
pub fn codebook_sizing(latent: usize, m: usize, budget: usize) -> Result<CodebookSizing> {
    if m == 0 || latent == 0 || !latent.is_multiple_of(m) {
        return Err(config_err!("codeword length m={} must divide M={}", m, latent));
    }
    let segments = latent / m;
    if budget == 0 || !budget.is_multiple_of(segments) {
        return Err(config_err!(
            "B={} is not a positive multiple of the {} segments",
            budget,
            segments
        ));
    }
    let bits = budget / segments;
    if bits > 24 {
        return Err(config_err!("{} bits per codeword index is too many", bits));
    }
    Ok(CodebookSizing {
        segments,
        bits_per_segment: bits as u8,
        size: 1 << bits,
    })
}

/// `K` codewords of length `m`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorCodebook {
    pub m: usize,
    pub codewords: Tensor,
}

impl VectorCodebook {
    pub fn new(codewords: Tensor) -> Result<Self> {
        let s = codewords.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(dim_err!("codebook must be [K, m], got {:?}", s));
        }
        Ok(Self {
            m: s[1],
            codewords,
        })
    }

    pub fn size(&self) -> usize {
        self.codewords.shape()[0]
    }

    pub fn codeword(&self, k: usize) -> &[f64] {
        &self.codewords.data()[k * self.m..(k + 1) * self.m]
    }

    /// Index bits; the codebook size must be a power of two.
    pub fn index_bits(&self) -> Result<u8> {
        let k = self.size();
        if !k.is_power_of_two() {
            return Err(format_err!("codebook size {} is not a power of two", k));
        }
        Ok(k.trailing_zeros() as u8)
    }

    /// Nearest codeword to one segment; ties go to the lowest index.
    pub fn nearest(&self, seg: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d: f64 = seg
                .iter()
                .zip(self.codeword(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// `CSIQ` file, mode 1.
    pub fn write_to(&self, latent: usize, mut w: impl Write) -> Result<()> {
        if latent > u16::MAX as usize || self.m > u16::MAX as usize {
            return Err(format_err!("M or m exceeds 16 bits"));
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(CODEBOOK_MAGIC);
        buf.push(CODEBOOK_VERSION);
        buf.push(1);
        buf.extend_from_slice(&(latent as u16).to_le_bytes());
        buf.extend_from_slice(&(self.m as u16).to_le_bytes());
        buf.extend_from_slice(&(self.size() as u32).to_le_bytes());
        for v in self.codewords.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Returns the codebook and the latent length `M` it was stored with.
    pub fn read_from(mut r: impl Read) -> Result<(Self, usize)> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = ByteReader::new(&buf);
        let mode = read_codebook_header(&mut cur)?;
        if mode != 1 {
            return Err(format_err!("expected vector codebook (mode 1), found mode {}", mode));
        }
        let latent = cur.u16()? as usize;
        let m = cur.u16()? as usize;
        let k = cur.u32()? as usize;
        if m == 0 || k == 0 || !latent.is_multiple_of(m) {
            return Err(format_err!("inconsistent codebook header M={} m={} K={}", latent, m, k));
        }
        let data = (0..k * m)
            .map(|_| cur.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        if !cur.is_empty() {
            return Err(format_err!("trailing bytes after codebook"));
        }
        Ok((Self::new(Tensor::new(vec![k, m], data)?)?, latent))
    }
}

/// Replace each consecutive `m`-segment of every row of `z_e` `[batch, M]`
/// by its nearest codeword. Returns the quantized tensor and the per-segment
/// indices (row-major).
pub fn nearest_codeword(z_e: &Tensor, cb: &VectorCodebook) -> Result<(Tensor, Vec<usize>)> {
    let s = z_e.shape();
    if s.len() != 2 || !s[1].is_multiple_of(cb.m) {
        return Err(dim_err!(
            "latents {:?} cannot be split into segments of m={}",
            s,
            cb.m
        ));
    }
    let mut out = Vec::with_capacity(z_e.len());
    let mut idx = Vec::with_capacity(z_e.len() / cb.m);
    for seg in z_e.data().chunks(cb.m) {
        let k = cb.nearest(seg);
        idx.push(k);
        out.extend_from_slice(cb.codeword(k));
    }
    Ok((Tensor::new(s.to_vec(), out)?, idx))
}

/// Feedback bits of one latent vector.
pub fn encode_bits(z_e: &[f64], cb: &VectorCodebook) -> Result<FeedbackBitstream> {
    if !z_e.len().is_multiple_of(cb.m) {
        return Err(dim_err!("latent length {} not a multiple of m={}", z_e.len(), cb.m));
    }
    let bits = cb.index_bits()?;
    let idx: Vec<u32> = z_e.chunks(cb.m).map(|s| cb.nearest(s) as u32).collect();
    FeedbackBitstream::pack(&idx, &vec![bits; idx.len()])
}

/// Concatenated codewords addressed by a bitstream of `M/m` indices.
pub fn decode_bits(stream: &FeedbackBitstream, cb: &VectorCodebook, latent: usize) -> Result<Vec<f64>> {
    if !latent.is_multiple_of(cb.m) {
        return Err(dim_err!("M={} not a multiple of m={}", latent, cb.m));
    }
    let bits = cb.index_bits()?;
    let idx = stream.unpack(&vec![bits; latent / cb.m])?;
    let mut out = Vec::with_capacity(latent);
    for k in idx {
        if k as usize >= cb.size() {
            return Err(format_err!("codeword index {} >= K={}", k, cb.size()));
        }
        out.extend_from_slice(cb.codeword(k as usize));
    }
    Ok(out)
}

/// k-means++ seeding of `k` codewords from a pool of `m`-segments. With
/// fewer distinct segments than `k`, the pool is reused with small jitter.
pub fn kmeans_pp_codewords(pool: &[f64], m: usize, k: usize, rng: &mut Rng) -> Vec<f64> {
    let n = pool.len() / m;
    assert!(n > 0, "empty codebook init pool");
    let seg = |i: usize| &pool[i * m..(i + 1) * m];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let first = rng.random_range(0..n);
    let mut out: Vec<f64> = seg(first).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| dist(seg(i), seg(first))).collect();
    let spread = pool.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-3);
    while out.len() < k * m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut p = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    p = i;
                    break;
                }
                r -= d;
            }
            p
        } else {
            rng.random_range(0..n)
        };
        let mut c = seg(pick).to_vec();
        if total <= 0.0 {
            for v in c.iter_mut() {
                *v += spread * 1e-3 * rng.random_range(-1.0..1.0);
            }
        }
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist(seg(i), &c));
        }
        out.extend_from_slice(&c);
    }
    out
}

/// Graph nodes of one quantization step.
#[derive(Debug, Clone)]
pub struct VqTrace {
    /// Encoder output before quantization.
    pub z_e: Var,
    /// Gathered codewords (depends on the codebook only).
    pub z_q: Var,
    /// Decoder input: value of `z_q`, gradient routed to `z_e`.
    pub decoder_in: Var,
    pub indices: Vec<usize>,
}

/// Quantize `z_e` `[batch, M]` against the codebook parameter `codebook`
/// `[K, m]`.
pub fn vq_layer(g: &mut Graph, z_e: Var, codebook: Var) -> Result<VqTrace> {
    let cb = VectorCodebook::new(g.value(codebook).clone())?;
    let shape = g.shape(z_e).to_vec();
    let flat = g.value(z_e).clone();
    let flat = if shape.len() == 2 {
        flat
    } else {
        let b = flat.batch();
        flat.reshape(vec![b, shape[1..].iter().product()])?
    };
    let (_, indices) = nearest_codeword(&flat, &cb)?;
    let z_q = g.gather_rows(codebook, indices.clone(), shape)?;
    let decoder_in = g.straight_through(z_e, z_q)?;
    Ok(VqTrace {
        z_e,
        z_q,
        decoder_in,
        indices,
    })
}

/// Loss terms as graph nodes; `total = recon + quant + β·commit`.
#[derive(Debug, Clone, Copy)]
pub struct VqLoss {
    pub total: Var,
    pub recon: Var,
    pub quant: Var,
    pub commit: Var,
}

/// `‖H − Ĥ‖² + ‖sg[z_e] − z‖² + β‖z_e − sg[z]‖²`, each averaged over the
/// batch.
pub fn vq_loss(g: &mut Graph, h: Var, h_hat: Var, z_e: Var, z_q: Var, beta: f64) -> Result<VqLoss> {
    let batch = g.value(z_e).batch().max(1) as f64;
    let recon = g.mse(h_hat, h)?;
    let ze_frozen = g.stop_gradient(z_e);
    let dq = g.sub(ze_frozen, z_q)?;
    let quant = g.sum_sq(dq);
    let quant = g.scale(quant, 1.0 / batch);
    let zq_frozen = g.stop_gradient(z_q);
    let dc = g.sub(z_e, zq_frozen)?;
    let commit = g.sum_sq(dc);
    let commit = g.scale(commit, 1.0 / batch);
    let weighted = g.scale(commit, beta);
    let partial = g.add(recon, quant)?;
    let total = g.add(partial, weighted)?;
    Ok(VqLoss {
        total,
        recon,
        quant,
        commit,
    })
}
