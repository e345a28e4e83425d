use serde::{Deserialize, Serialize};

use super::nd::{default_nd_p, nd_mask, sample_nd_index};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{ConvGeom, Graph, LayerSpec, Tensor, Var};
use crate::rng::{self, Rng};
use crate::vq::{nearest_codeword, vq_layer, VectorCodebook, VqTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ae,
    Nd,
    Vq,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ae => "ae",
            Variant::Nd => "nd",
            Variant::Vq => "vq",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Variant::Ae),
            1 => Some(Variant::Nd),
            2 => Some(Variant::Vq),
            _ => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(Variant::Ae),
            "nd" => Ok(Variant::Nd),
            "vq" => Ok(Variant::Vq),
            _ => Err(config_err!("unknown variant '{}' (ae, nd, vq)", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Shape of the toy conv + FC architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub variant: Variant,
    pub latent: usize,
    pub channels: usize,
    pub groups: usize,
    pub binary_fc: bool,
    /// Nested dropout parameter; `None` uses [`default_nd_p`].
    pub nd_p: Option<f64>,
    /// VQ codeword length and codebook size.
    pub vq_m: usize,
    pub vq_k: usize,
}

impl ArchConfig {
    pub fn new(variant: Variant, latent: usize) -> Self {
        Self {
            variant,
            latent,
            channels: 8,
            groups: 1,
            binary_fc: false,
            nd_p: None,
            vq_m: 1,
            vq_k: 2,
        }
    }
}

/// Encoder and decoder stacks with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AeModel {
    pub variant: Variant,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    /// Parameters of all layers, encoder first, in declaration order.
    pub params: Vec<Tensor>,
}

/// Nodes of one graph forward pass.
pub struct Forward {
    /// Encoder output before quantization (masked in ND training).
    pub latent: Var,
    pub output: Var,
    pub params: Vec<Var>,
    pub vq: Option<VqTrace>,
}

fn conv(c_in: usize, c_out: usize, groups: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        c_in,
        c_out,
        kh: 3,
        kw: 3,
        geom: ConvGeom {
            groups,
            stride: 1,
            pad: 1,
        },
    }
}

fn final_layer(variant: Variant, latent: usize, nd_p: Option<f64>, vq: (usize, usize)) -> LayerSpec {
    match variant {
        Variant::Ae => LayerSpec::Tanh,
        Variant::Nd => LayerSpec::NestedDropout {
            p: nd_p.unwrap_or_else(|| default_nd_p(latent)),
        },
        Variant::Vq => LayerSpec::Vq { m: vq.0, k: vq.1 },
    }
}

impl AeModel {
    /// conv(2→C) → tanh → conv(C→C, groups) → tanh → dense(C·Na·Nc → M) →
    /// variant head; the decoder mirrors it.
    pub fn toy(na: usize, nc: usize, arch: &ArchConfig, seed: u64) -> Result<Self> {
        let c = arch.channels;
        let flat = c * na * nc;
        let fc = if arch.binary_fc {
            LayerSpec::BinaryDense {
                d_in: flat,
                d_out: arch.latent,
            }
        } else {
            LayerSpec::Dense {
                d_in: flat,
                d_out: arch.latent,
            }
        };
        let encoder = vec![
            conv(2, c, 1),
            LayerSpec::Tanh,
            conv(c, c, arch.groups),
            LayerSpec::Tanh,
            fc,
            final_layer(arch.variant, arch.latent, arch.nd_p, (arch.vq_m, arch.vq_k)),
        ];
        let decoder = vec![
            LayerSpec::Dense {
                d_in: arch.latent,
                d_out: flat,
            },
            LayerSpec::Reshape {
                shape: vec![c, na, nc],
            },
            LayerSpec::Tanh,
            conv(c, c, arch.groups),
            LayerSpec::Tanh,
            conv(c, 2, 1),
        ];
        Self::new(arch.variant, vec![2, na, nc], encoder, decoder, seed)
    }

    /// Linear encoder and decoder around a nested dropout (or identity) latent.
    pub fn linear(d: usize, latent: usize, nd_p: Option<f64>, seed: u64) -> Result<Self> {
        let mut encoder = vec![LayerSpec::Dense {
            d_in: d,
            d_out: latent,
        }];
        let variant = match nd_p {
            Some(p) => {
                encoder.push(LayerSpec::NestedDropout { p });
                Variant::Nd
            }
            None => Variant::Ae,
        };
        let decoder = vec![LayerSpec::Dense {
            d_in: latent,
            d_out: d,
        }];
        let model = Self {
            variant,
            input_shape: vec![d],
            encoder,
            decoder,
            params: Vec::new(),
        };
        model.check_shapes()?;
        Ok(model.with_init(seed))
    }

    /// Validate and initialize from `stream(seed, "init", layer)`.
    pub fn new(
        variant: Variant,
        input_shape: Vec<usize>,
        encoder: Vec<LayerSpec>,
        decoder: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self> {
        let model = Self {
            variant,
            input_shape,
            encoder,
            decoder,
            params: Vec::new(),
        };
        model.validate_structure()?;
        Ok(model.with_init(seed))
    }

    /// Assemble from stored parameters, checking every shape.
    pub fn from_parts(
        variant: Variant,
        input_shape: Vec<usize>,
        encoder: Vec<LayerSpec>,
        decoder: Vec<LayerSpec>,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let model = Self {
            variant,
            input_shape,
            encoder,
            decoder,
            params,
        };
        model.validate_structure()?;
        let expected: Vec<Vec<usize>> = model.layers().flat_map(|l| l.param_shapes()).collect();
        if expected.len() != model.params.len()
            || expected.iter().zip(&model.params).any(|(s, p)| s[..] != *p.shape())
        {
            return Err(dim_err!("parameter shapes do not match the layer list"));
        }
        Ok(model)
    }

    fn with_init(mut self, seed: u64) -> Self {
        self.params = self
            .layers()
            .enumerate()
            .flat_map(|(i, l)| {
                let mut r: Rng = rng::stream(seed, "init", i as u64);
                l.init_params(&mut r)
            })
            .collect();
        self
    }

    fn check_shapes(&self) -> Result<()> {
        let mut shape = self.input_shape.clone();
        for l in self.layers() {
            l.validate()?;
            shape = l.output_shape(&shape)?;
        }
        if shape != self.input_shape {
            return Err(dim_err!(
                "decoder output {:?} differs from input {:?}",
                shape,
                self.input_shape
            ));
        }
        Ok(())
    }

    fn validate_structure(&self) -> Result<()> {
        self.check_shapes()?;
        let last = self.encoder.last().ok_or_else(|| config_err!("empty encoder"))?;
        let ok = match self.variant {
            Variant::Ae => matches!(last, LayerSpec::Tanh) || !self.has_special(),
            Variant::Nd => matches!(last, LayerSpec::NestedDropout { .. }),
            Variant::Vq => matches!(last, LayerSpec::Vq { .. }),
        };
        if !ok {
            return Err(config_err!(
                "{} encoder cannot end with a {} layer",
                self.variant.name(),
                last.kind()
            ));
        }
        let misplaced = self.layers().enumerate().any(|(i, l)| {
            matches!(l, LayerSpec::NestedDropout { .. } | LayerSpec::Vq { .. }) && i + 1 != self.encoder.len()
        });
        if misplaced {
            return Err(config_err!("nested dropout and vq layers must end the encoder"));
        }
        Ok(())
    }

    fn has_special(&self) -> bool {
        self.layers()
            .any(|l| matches!(l, LayerSpec::NestedDropout { .. } | LayerSpec::Vq { .. }))
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.encoder.iter().chain(self.decoder.iter())
    }

    /// First parameter index of every layer, plus the total.
    pub fn param_offsets(&self) -> Vec<usize> {
        let mut out = vec![0];
        for l in self.layers() {
            out.push(out.last().unwrap() + l.param_shapes().len());
        }
        out
    }

    /// `M`, the flattened encoder output length.
    pub fn latent_dim(&self) -> usize {
        let mut shape = self.input_shape.clone();
        for l in &self.encoder {
            shape = l.output_shape(&shape).expect("validated");
        }
        shape.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn nd_p(&self) -> Option<f64> {
        self.encoder.iter().find_map(|l| match l {
            LayerSpec::NestedDropout { p } => Some(*p),
            _ => None,
        })
    }

    fn vq_param_index(&self) -> Option<usize> {
        let offs = self.param_offsets();
        self.layers()
            .position(|l| matches!(l, LayerSpec::Vq { .. }))
            .map(|i| offs[i])
    }

    pub fn codebook(&self) -> Option<VectorCodebook> {
        self.vq_param_index()
            .map(|i| VectorCodebook::new(self.params[i].clone()).expect("codebook shape"))
    }

    pub fn set_codebook(&mut self, cb: &VectorCodebook) -> Result<()> {
        let i = self
            .vq_param_index()
            .ok_or_else(|| config_err!("model has no codebook"))?;
        if cb.codewords.shape() != self.params[i].shape() {
            return Err(dim_err!(
                "codebook {:?} vs model {:?}",
                cb.codewords.shape(),
                self.params[i].shape()
            ));
        }
        self.params[i] = cb.codewords.clone();
        Ok(())
    }

    /// Build the full forward on `g`. Trainable parameters become graph
    /// parameters; in `Eval` mode they are constants.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, rng: &mut Rng) -> Result<Forward> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| match mode {
                Mode::Train => g.param(p.clone()),
                Mode::Eval => g.input(p.clone()),
            })
            .collect();
        let offs = self.param_offsets();
        let n_enc = self.encoder.len();
        let mut h = x;
        let mut latent = None;
        let mut vq = None;
        for (i, layer) in self.layers().enumerate() {
            let p = &params[offs[i]..offs[i + 1]];
            if let LayerSpec::Vq { .. } = layer {
                latent = Some(h);
                let t = vq_layer(g, h, p[0])?;
                h = t.decoder_in;
                vq = Some(t);
                continue;
            }
            h = apply_layer(g, layer, h, p, mode, rng)?;
            if i + 1 == n_enc && latent.is_none() {
                latent = Some(h);
            }
        }
        Ok(Forward {
            latent: latent.expect("non-empty encoder"),
            output: h,
            params,
            vq,
        })
    }

    /// Inference-mode encoder output `[batch, M]`. For VQ models this is the
    /// unquantized `z_e`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let m = self.latent_dim();
        let offs = self.param_offsets();
        let layers: Vec<&LayerSpec> = self
            .encoder
            .iter()
            .filter(|l| !matches!(l, LayerSpec::Vq { .. }))
            .collect();
        let mut unused = rng::stream(0, "eval", 0);
        chunked(x, m, |g, xv| {
            let mut h = xv;
            for (i, l) in layers.iter().enumerate() {
                let p: Vec<Var> = self.params[offs[i]..offs[i + 1]]
                    .iter()
                    .map(|t| g.input(t.clone()))
                    .collect();
                h = apply_layer(g, l, h, &p, Mode::Eval, &mut unused)?;
            }
            Ok(h)
        })
    }

    /// Decoder output for latents `[batch, M]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let m = self.latent_dim();
        let s = z.shape();
        if s.len() != 2 || s[1] != m {
            return Err(dim_err!("latent shape {:?}, expected [batch, {}]", s, m));
        }
        let offs = self.param_offsets();
        let n_enc = self.encoder.len();
        let per: usize = self.input_shape.iter().product();
        let mut unused = rng::stream(0, "eval", 0);
        chunked(z, per, |g, zv| {
            let mut h = zv;
            for (j, l) in self.decoder.iter().enumerate() {
                let i = n_enc + j;
                let p: Vec<Var> = self.params[offs[i]..offs[i + 1]]
                    .iter()
                    .map(|t| g.input(t.clone()))
                    .collect();
                h = apply_layer(g, l, h, &p, Mode::Eval, &mut unused)?;
            }
            Ok(h)
        })
        .and_then(|t| {
            let mut shape = vec![t.batch()];
            shape.extend(&self.input_shape);
            t.reshape(shape)
        })
    }

    /// Reconstruction at inference; VQ models decode the quantized latent.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode(x)?;
        let z = match self.codebook() {
            Some(cb) => nearest_codeword(&z, &cb)?.0,
            None => z,
        };
        self.decode(&z)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(dim_err!(
                "input {:?}, expected [batch, {:?}]",
                x.shape(),
                self.input_shape
            ));
        }
        Ok(())
    }
}

const CHUNK: usize = 256;

/// Run an inference graph over batch chunks and concatenate flattened rows.
fn chunked(
    x: &Tensor,
    row_len: usize,
    mut f: impl FnMut(&mut Graph, Var) -> Result<Var>,
) -> Result<Tensor> {
    let n = x.batch();
    let mut out = Vec::with_capacity(n * row_len);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut g = Graph::new();
        let xv = g.input(x.slice_batch(start, end));
        let y = f(&mut g, xv)?;
        out.extend_from_slice(g.value(y).data());
        start = end;
    }
    Tensor::new(vec![n, row_len], out)
}

fn apply_layer(
    g: &mut Graph,
    layer: &LayerSpec,
    h: Var,
    p: &[Var],
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    match layer {
        LayerSpec::Dense { .. } => g.dense(h, p[0], Some(p[1])),
        LayerSpec::BinaryDense { .. } => g.binary_dense(h, p[0], Some(p[1])),
        LayerSpec::Conv2d { geom, .. } => g.conv2d(h, p[0], Some(p[1]), *geom),
        LayerSpec::Tanh => Ok(g.tanh(h)),
        LayerSpec::Reshape { shape } => {
            let mut s = vec![g.value(h).batch()];
            s.extend(shape);
            g.reshape(h, s)
        }
        LayerSpec::NestedDropout { p: prob } => match mode {
            Mode::Eval => Ok(h),
            Mode::Train => {
                let shape = g.shape(h).to_vec();
                let m: usize = shape[1..].iter().product();
                let cuts = (0..shape[0])
                    .map(|_| sample_nd_index(*prob, m, rng))
                    .collect::<Result<Vec<_>>>()?;
                g.mask(h, nd_mask(&cuts, m)?)
            }
        },
        LayerSpec::Vq { .. } => {
            let cb = VectorCodebook::new(g.value(p[0]).clone())?;
            let (q, _) = nearest_codeword(g.value(h), &cb)?;
            Ok(g.input(q))
        }
    }
}
