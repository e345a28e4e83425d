use std::io::{Read, Write};
use std::path::Path;

use super::model::{AeModel, Variant};
use crate::channel::ByteReader;
use crate::error::{format_err, Result};
use crate::nn::{ConvGeom, LayerSpec, Tensor};

pub(crate) const MODEL_MAGIC: &[u8; 4] = b"CSIM";
const MODEL_VERSION: u8 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| format_err!("value {} exceeds 32 bits", v))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Header, input shape and layer table shared by the dense and pruned
/// model files.
pub(crate) fn write_structure(model: &AeModel, magic: &[u8; 4], buf: &mut Vec<u8>) -> Result<()> {
    buf.extend_from_slice(magic);
    buf.push(MODEL_VERSION);
    buf.push(model.variant.code());
    let count = model.encoder.len() + model.decoder.len();
    let count = u16::try_from(count).map_err(|_| format_err!("too many layers"))?;
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&(model.encoder.len() as u16).to_le_bytes());
    buf.push(model.input_shape.len() as u8);
    for &d in &model.input_shape {
        put_u32(buf, d)?;
    }
    for l in model.layers() {
        write_layer(l, buf)?;
    }
    Ok(())
}

fn write_layer(l: &LayerSpec, buf: &mut Vec<u8>) -> Result<()> {
    match l {
        LayerSpec::Dense { d_in, d_out } => {
            buf.push(0);
            put_u32(buf, *d_in)?;
            put_u32(buf, *d_out)?;
        }
        LayerSpec::BinaryDense { d_in, d_out } => {
            buf.push(1);
            put_u32(buf, *d_in)?;
            put_u32(buf, *d_out)?;
        }
        LayerSpec::Conv2d {
            c_in,
            c_out,
            kh,
            kw,
            geom,
        } => {
            buf.push(2);
            for v in [*c_in, *c_out, *kh, *kw, geom.groups, geom.stride, geom.pad] {
                put_u32(buf, v)?;
            }
        }
        LayerSpec::Tanh => buf.push(3),
        LayerSpec::Reshape { shape } => {
            buf.push(4);
            buf.push(shape.len() as u8);
            for &d in shape {
                put_u32(buf, d)?;
            }
        }
        LayerSpec::NestedDropout { p } => {
            buf.push(5);
            buf.extend_from_slice(&p.to_le_bytes());
        }
        LayerSpec::Vq { m, k } => {
            buf.push(6);
            put_u32(buf, *m)?;
            put_u32(buf, *k)?;
        }
    }
    Ok(())
}

fn read_layer(cur: &mut ByteReader) -> Result<LayerSpec> {
    let u = |cur: &mut ByteReader| cur.u32().map(|v| v as usize);
    Ok(match cur.u8()? {
        0 => LayerSpec::Dense {
            d_in: u(cur)?,
            d_out: u(cur)?,
        },
        1 => LayerSpec::BinaryDense {
            d_in: u(cur)?,
            d_out: u(cur)?,
        },
        2 => {
            let v = (0..7).map(|_| u(cur)).collect::<Result<Vec<_>>>()?;
            LayerSpec::Conv2d {
                c_in: v[0],
                c_out: v[1],
                kh: v[2],
                kw: v[3],
                geom: ConvGeom {
                    groups: v[4],
                    stride: v[5],
                    pad: v[6],
                },
            }
        }
        3 => LayerSpec::Tanh,
        4 => {
            let r = cur.u8()? as usize;
            LayerSpec::Reshape {
                shape: (0..r).map(|_| u(cur)).collect::<Result<_>>()?,
            }
        }
        5 => LayerSpec::NestedDropout { p: cur.f64()? },
        6 => LayerSpec::Vq {
            m: u(cur)?,
            k: u(cur)?,
        },
        k => return Err(format_err!("unknown layer kind {}", k)),
    })
}

/// Variant, input shape, encoder and decoder from the header.
pub(crate) type Structure = (Variant, Vec<usize>, Vec<LayerSpec>, Vec<LayerSpec>);

pub(crate) fn read_structure(cur: &mut ByteReader, magic: &[u8; 4]) -> Result<Structure> {
    if cur.take(4)? != magic {
        return Err(format_err!("bad magic, expected {}", String::from_utf8_lossy(magic)));
    }
    let version = cur.u8()?;
    if version != MODEL_VERSION {
        return Err(format_err!("unsupported model version {}", version));
    }
    let variant = Variant::from_code(cur.u8()?).ok_or_else(|| format_err!("unknown variant"))?;
    let count = cur.u16()? as usize;
    let n_enc = cur.u16()? as usize;
    if n_enc > count {
        return Err(format_err!("encoder length {} exceeds layer count {}", n_enc, count));
    }
    let rank = cur.u8()? as usize;
    let input = (0..rank)
        .map(|_| cur.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = (0..count).map(|_| read_layer(cur)).collect::<Result<Vec<_>>>()?;
    let decoder = layers.split_off(n_enc);
    Ok((variant, input, layers, decoder))
}

impl AeModel {
    /// `CSIM` file. Binary dense weights are stored as `α` followed by
    /// packed sign bits (1 = non-negative); everything else as f32.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::new();
        write_structure(self, MODEL_MAGIC, &mut buf)?;
        let offs = self.param_offsets();
        for (i, l) in self.layers().enumerate() {
            for (j, p) in self.params[offs[i]..offs[i + 1]].iter().enumerate() {
                if matches!(l, LayerSpec::BinaryDense { .. }) && j == 0 {
                    write_binary_weights(p, &mut buf);
                } else {
                    for v in p.data() {
                        buf.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = ByteReader::new(&buf);
        let (variant, input, encoder, decoder) = read_structure(&mut cur, MODEL_MAGIC)?;
        let mut params = Vec::new();
        for l in encoder.iter().chain(&decoder) {
            l.validate().map_err(|e| format_err!("invalid layer: {}", e))?;
            for (j, shape) in l.param_shapes().into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = if matches!(l, LayerSpec::BinaryDense { .. }) && j == 0 {
                    read_binary_weights(&mut cur, n)?
                } else {
                    (0..n)
                        .map(|_| cur.f32().map(f64::from))
                        .collect::<Result<Vec<_>>>()?
                };
                params.push(Tensor::new(shape, data)?);
            }
        }
        if !cur.is_empty() {
            return Err(format_err!("trailing bytes after model parameters"));
        }
        AeModel::from_parts(variant, input, encoder, decoder, params)
            .map_err(|e| format_err!("inconsistent model file: {}", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

fn write_binary_weights(w: &Tensor, buf: &mut Vec<u8>) {
    let alpha = w.data().iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
    buf.extend_from_slice(&(alpha as f32).to_le_bytes());
    let mut byte = 0u8;
    for (i, v) in w.data().iter().enumerate() {
        if *v >= 0.0 {
            byte |= 0x80 >> (i % 8);
        }
        if i % 8 == 7 {
            buf.push(byte);
            byte = 0;
        }
    }
    if !w.len().is_multiple_of(8) {
        buf.push(byte);
    }
}

fn read_binary_weights(cur: &mut ByteReader, n: usize) -> Result<Vec<f64>> {
    let alpha = f64::from(cur.f32()?);
    let bits = cur.take(n.div_ceil(8))?;
    Ok((0..n)
        .map(|i| {
            if bits[i / 8] & (0x80 >> (i % 8)) != 0 {
                alpha
            } else {
                -alpha
            }
        })
        .collect())
}
