//! Complexity and offload accounting, binary FC layers, and magnitude
//! pruning with fine-tuning.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{io as model_io, train, AeModel, TrainConfig, TrainOutcome};
use crate::channel::ByteReader;
use crate::error::{config_err, dim_err, format_err, Result};
use crate::nn::{LayerSpec, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub encoder: bool,
    pub kind: String,
    pub output_shape: Vec<usize>,
    pub macs: u64,
    /// `2 × macs`; bias additions are counted separately.
    pub flops: u64,
    pub bias_adds: u64,
    pub params: u64,
    /// Serialized size: 32 bits per parameter, or 1 bit per weight plus a
    /// 32-bit `α` and 32-bit biases for binarized layers.
    pub bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub layers: Vec<LayerCost>,
    pub encoder_macs: u64,
    pub encoder_flops: u64,
    pub encoder_bias_adds: u64,
    /// Encoder parameters and bits shipped to the terminal (codebook excluded).
    pub offload_params: u64,
    pub offload_bits: u64,
    pub codebook_bits: u64,
}

fn layer_cost(l: &LayerSpec, input: &[usize]) -> Result<(Vec<usize>, u64, u64, u64)> {
    let out = l.output_shape(input)?;
    let outputs: usize = out.iter().product();
    let (macs, bias) = match *l {
        LayerSpec::Dense { d_in, d_out } | LayerSpec::BinaryDense { d_in, d_out } => (d_in * d_out, d_out),
        LayerSpec::Conv2d {
            c_in, kh, kw, geom, ..
        } => (outputs * (c_in / geom.groups) * kh * kw, outputs),
        _ => (0, 0),
    };
    let bits = match *l {
        LayerSpec::BinaryDense { d_in, d_out } => (d_in * d_out + 32 + 32 * d_out) as u64,
        _ => 32 * l.param_count() as u64,
    };
    Ok((out, macs as u64, bias as u64, bits))
}

/// Per-layer multiply-accumulates, FLOPs and serialized parameter bits.
pub fn count_flops(model: &AeModel) -> Result<FlopReport> {
    if model.input_shape.is_empty() || model.input_shape.contains(&0) {
        return Err(config_err!("model input shape {:?} is unresolved", model.input_shape));
    }
    let mut shape = model.input_shape.clone();
    let mut layers = Vec::new();
    let n_enc = model.encoder.len();
    for (index, l) in model.layers().enumerate() {
        let (out, macs, bias_adds, bits) =
            layer_cost(l, &shape).map_err(|e| config_err!("cannot resolve layer {}: {}", index, e))?;
        layers.push(LayerCost {
            index,
            encoder: index < n_enc,
            kind: l.kind().to_string(),
            output_shape: out.clone(),
            macs,
            flops: 2 * macs,
            bias_adds,
            params: l.param_count() as u64,
            bits,
        });
        shape = out;
    }
    let enc = || layers.iter().filter(|c| c.encoder);
    let is_cb = |c: &&LayerCost| c.kind == "vq";
    Ok(FlopReport {
        encoder_macs: enc().map(|c| c.macs).sum(),
        encoder_flops: enc().map(|c| c.flops).sum(),
        encoder_bias_adds: enc().map(|c| c.bias_adds).sum(),
        offload_params: enc().filter(|c| !is_cb(c)).map(|c| c.params).sum(),
        offload_bits: enc().filter(|c| !is_cb(c)).map(|c| c.bits).sum(),
        codebook_bits: layers.iter().filter(is_cb).map(|c| c.bits).sum(),
        layers,
    })
}

/// Encoder bits in the pruned file layout: one presence bit per parameter
/// plus 32 bits per nonzero entry, codebook excluded.
pub fn sparse_offload_bits(model: &AeModel) -> u64 {
    let offs = model.param_offsets();
    model
        .encoder
        .iter()
        .enumerate()
        .filter(|(_, l)| !matches!(l, LayerSpec::Vq { .. }))
        .flat_map(|(i, _)| &model.params[offs[i]..offs[i + 1]])
        .map(|p| p.len() as u64 + 32 * p.data().iter().filter(|v| **v != 0.0).count() as u64)
        .sum()
}

impl FlopReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,part,kind,output_shape,macs,flops,bias_adds,params,bits\n");
        for c in &self.layers {
            let shape: Vec<String> = c.output_shape.iter().map(usize::to_string).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.index,
                if c.encoder { "encoder" } else { "decoder" },
                c.kind,
                shape.join("x"),
                c.macs,
                c.flops,
                c.bias_adds,
                c.params,
                c.bits
            ));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:>5}  {:<8} {:<14} {:>14} {:>12} {:>12} {:>10} {:>10}\n",
            "layer", "part", "kind", "output", "MACCs", "FLOPs", "params", "bits"
        );
        for c in &self.layers {
            let shape: Vec<String> = c.output_shape.iter().map(usize::to_string).collect();
            s.push_str(&format!(
                "{:>5}  {:<8} {:<14} {:>14} {:>12} {:>12} {:>10} {:>10}\n",
                c.index,
                if c.encoder { "encoder" } else { "decoder" },
                c.kind,
                shape.join("x"),
                c.macs,
                c.flops,
                c.params,
                c.bits
            ));
        }
        s.push_str(&format!(
            "encoder: {} MACCs, {} FLOPs (+{} bias adds), offload {} params / {} bits, codebook {} bits\n",
            self.encoder_macs,
            self.encoder_flops,
            self.encoder_bias_adds,
            self.offload_params,
            self.offload_bits,
            self.codebook_bits
        ));
        s
    }
}

/// Replace every dense layer of the encoder by its binarized counterpart,
/// keeping the real-valued master weights.
pub fn binarize_fc(model: &AeModel) -> Result<AeModel> {
    let mut out = model.clone();
    let mut found = false;
    for l in out.encoder.iter_mut() {
        if let LayerSpec::Dense { d_in, d_out } = *l {
            *l = LayerSpec::BinaryDense { d_in, d_out };
            found = true;
        }
    }
    if !found {
        return Err(config_err!("encoder has no dense layer to binarize"));
    }
    Ok(out)
}

/// Per-entry keep flags for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub keep: Vec<Vec<bool>>,
    pub q: f64,
    pub zeroed: usize,
    pub prunable: usize,
}

impl PruneMask {
    pub fn apply(&self, model: &mut AeModel) -> Result<()> {
        if self.keep.len() != model.params.len() {
            return Err(dim_err!("mask covers {} tensors, model has {}", self.keep.len(), model.params.len()));
        }
        for (p, k) in model.params.iter_mut().zip(&self.keep) {
            if p.len() != k.len() {
                return Err(dim_err!("mask length {} vs parameter length {}", k.len(), p.len()));
            }
            for (v, keep) in p.data_mut().iter_mut().zip(k) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }
}

/// Global magnitude pruning over all encoder and decoder weights: the
/// `floor(q·n)` smallest `|w|` are zeroed, ties going to the earlier entry.
pub fn prune(model: &AeModel, q: f64) -> Result<(AeModel, PruneMask)> {
    if !(0.0..1.0).contains(&q) {
        return Err(config_err!("pruning fraction q={} outside [0, 1)", q));
    }
    let flags: Vec<bool> = model.layers().flat_map(|l| l.weight_flags()).collect();
    let mut keep: Vec<Vec<bool>> = model.params.iter().map(|p| vec![true; p.len()]).collect();
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, (p, w)) in model.params.iter().zip(&flags).enumerate() {
        if *w {
            entries.extend(p.data().iter().enumerate().map(|(i, v)| (v.abs(), pi, i)));
        }
    }
    let prunable = entries.len();
    let zeroed = (q * prunable as f64).floor() as usize;
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    for &(_, pi, i) in &entries[..zeroed] {
        keep[pi][i] = false;
    }
    let mask = PruneMask {
        keep,
        q,
        zeroed,
        prunable,
    };
    let mut out = model.clone();
    mask.apply(&mut out)?;
    Ok((out, mask))
}

/// Retrain the unmasked parameters with the usual early stopping.
pub fn fine_tune(
    model: AeModel,
    mask: &PruneMask,
    train_set: &Tensor,
    val_set: &Tensor,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train(model, train_set, val_set, cfg, Some(&mask.keep))
}

pub(crate) const PRUNED_MAGIC: &[u8; 4] = b"CSIP";

/// Pruned model file: the model header, then per parameter tensor a bitmap
/// of nonzero entries followed by those entries as f32.
pub fn write_pruned(model: &AeModel, mut w: impl Write) -> Result<()> {
    let mut buf = Vec::new();
    model_io::write_structure(model, PRUNED_MAGIC, &mut buf)?;
    for p in &model.params {
        let mut bitmap = vec![0u8; p.len().div_ceil(8)];
        for (i, v) in p.data().iter().enumerate() {
            if *v != 0.0 {
                bitmap[i / 8] |= 0x80 >> (i % 8);
            }
        }
        buf.extend_from_slice(&bitmap);
        for v in p.data().iter().filter(|v| **v != 0.0) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_pruned(mut r: impl Read) -> Result<AeModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = ByteReader::new(&buf);
    let (variant, input, encoder, decoder) = model_io::read_structure(&mut cur, PRUNED_MAGIC)?;
    let mut params = Vec::new();
    for l in encoder.iter().chain(&decoder) {
        l.validate().map_err(|e| format_err!("invalid layer: {}", e))?;
        for shape in l.param_shapes() {
            let n: usize = shape.iter().product();
            let bitmap = cur.take(n.div_ceil(8))?.to_vec();
            let mut data = vec![0.0; n];
            for (i, v) in data.iter_mut().enumerate() {
                if bitmap[i / 8] & (0x80 >> (i % 8)) != 0 {
                    *v = f64::from(cur.f32()?);
                }
            }
            params.push(Tensor::new(shape, data)?);
        }
    }
    if !cur.is_empty() {
        return Err(format_err!("trailing bytes after pruned parameters"));
    }
    AeModel::from_parts(variant, input, encoder, decoder, params)
        .map_err(|e| format_err!("inconsistent pruned model: {}", e))
}

pub fn save_pruned(model: &AeModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_pruned(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_pruned(path: &Path) -> Result<AeModel> {
    read_pruned(std::fs::File::open(path)?)
}

/// Load either a dense (`CSIM`) or a pruned (`CSIP`) model file.
pub fn load_any_model(path: &Path) -> Result<AeModel> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(PRUNED_MAGIC) {
        read_pruned(&bytes[..])
    } else {
        AeModel::read_from(&bytes[..])
    }
}
