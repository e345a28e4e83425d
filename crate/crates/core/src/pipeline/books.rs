use std::io::Write;
use std::path::Path;

use crate::bitstream::FeedbackBitstream;
use crate::error::{dim_err, format_err, Result};
use crate::ndq::ScalarCodebookSet;
use crate::nn::Tensor;
use crate::vq::{decode_bits, encode_bits, nearest_codeword, VectorCodebook};

/// Either kind of `CSIQ` codebook file.
#[derive(Debug, Clone, PartialEq)]
pub enum Books {
    Scalar(ScalarCodebookSet),
    Vector { codebook: VectorCodebook, latent: usize },
}

impl Books {
    pub fn read_from(bytes: &[u8]) -> Result<Self> {
        match bytes.get(5) {
            Some(0) => Ok(Books::Scalar(ScalarCodebookSet::read_from(bytes)?)),
            Some(1) => {
                let (codebook, latent) = VectorCodebook::read_from(bytes)?;
                Ok(Books::Vector { codebook, latent })
            }
            Some(m) if bytes.starts_with(b"CSIQ") => Err(format_err!("unknown codebook mode {}", m)),
            _ => Err(format_err!("not a codebook file")),
        }
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        match self {
            Books::Scalar(s) => s.write_to(w),
            Books::Vector { codebook, latent } => codebook.write_to(*latent, w),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn latent(&self) -> usize {
        match self {
            Books::Scalar(s) => s.units(),
            Books::Vector { latent, .. } => *latent,
        }
    }

    /// Feedback bits per sample.
    pub fn budget(&self) -> Result<usize> {
        match self {
            Books::Scalar(s) => Ok(s.budget()),
            Books::Vector { codebook, latent } => Ok(latent / codebook.m * codebook.index_bits()? as usize),
        }
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        if z.shape().len() != 2 || z.shape()[1] != self.latent() {
            return Err(dim_err!("latents {:?} do not match codebooks for M={}", z.shape(), self.latent()));
        }
        Ok(())
    }

    /// One bitstream per row of `z` `[N, M]`.
    pub fn quantize(&self, z: &Tensor) -> Result<Vec<FeedbackBitstream>> {
        self.check(z)?;
        z.data()
            .chunks(self.latent())
            .map(|row| match self {
                Books::Scalar(s) => s.quantize(row),
                Books::Vector { codebook, .. } => encode_bits(row, codebook),
            })
            .collect()
    }

    pub fn dequantize(&self, streams: &[FeedbackBitstream]) -> Result<Tensor> {
        let m = self.latent();
        let mut out = Vec::with_capacity(streams.len() * m);
        for s in streams {
            out.extend(match self {
                Books::Scalar(b) => b.dequantize(s)?,
                Books::Vector { codebook, latent } => decode_bits(s, codebook, *latent)?,
            });
        }
        Tensor::new(vec![streams.len(), m], out)
    }

    /// Nearest-codeword reconstruction without packing bits.
    pub fn reconstruct(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        match self {
            Books::Scalar(s) => s.reconstruct(z),
            Books::Vector { codebook, .. } => Ok(nearest_codeword(z, codebook)?.0),
        }
    }
}
