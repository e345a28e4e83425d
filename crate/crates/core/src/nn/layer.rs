use rand::Rng as _;

use super::conv::ConvGeom;
use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{config_err, dim_err, Result};
use crate::rng::Rng;

/// One layer of an encoder or decoder stack.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { d_in: usize, d_out: usize },
    /// Dense layer whose weights are replaced by `α·sign(W)` in the forward.
    BinaryDense { d_in: usize, d_out: usize },
    Conv2d {
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        geom: ConvGeom,
    },
    Tanh,
    /// Per-sample reshape (batch dimension excluded).
    Reshape { shape: Vec<usize> },
    /// Geometric nested dropout with success probability `p`.
    NestedDropout { p: f64 },
    /// Shared codebook of `k` codewords of length `m`.
    Vq { m: usize, k: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BinaryDense { .. } => "binary_dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::NestedDropout { .. } => "nested_dropout",
            LayerSpec::Vq { .. } => "vq",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2d {
                c_in, c_out, geom, ..
            } => {
                if geom.groups == 0 || c_in % geom.groups != 0 || c_out % geom.groups != 0 {
                    return Err(config_err!(
                        "groups={} must divide C_in={} and C_out={}",
                        geom.groups,
                        c_in,
                        c_out
                    ));
                }
                if geom.stride == 0 {
                    return Err(config_err!("conv2d stride must be positive"));
                }
            }
            LayerSpec::NestedDropout { p } => {
                if !(*p > 0.0 && *p <= 1.0) {
                    return Err(config_err!("nested dropout p={} outside (0, 1]", p));
                }
            }
            LayerSpec::Vq { m, k }
                if (*m == 0 || *k == 0) => {
                    return Err(config_err!("vq layer needs m >= 1 and K >= 1"));
                }
            _ => {}
        }
        Ok(())
    }

    /// Shapes of the trainable tensors in declaration order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { d_in, d_out } | LayerSpec::BinaryDense { d_in, d_out } => {
                vec![vec![d_out, d_in], vec![d_out]]
            }
            LayerSpec::Conv2d {
                c_in,
                c_out,
                kh,
                kw,
                geom,
            } => vec![vec![c_out, c_in / geom.groups, kh, kw], vec![c_out]],
            LayerSpec::Vq { m, k } => vec![vec![k, m]],
            _ => vec![],
        }
    }

    /// Which parameters are weights (prunable) rather than biases.
    pub fn weight_flags(&self) -> Vec<bool> {
        match self {
            LayerSpec::Dense { .. } | LayerSpec::BinaryDense { .. } | LayerSpec::Conv2d { .. } => {
                vec![true, false]
            }
            LayerSpec::Vq { .. } => vec![false],
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let n: usize = input.iter().product();
        match self {
            LayerSpec::Dense { d_in, d_out } | LayerSpec::BinaryDense { d_in, d_out } => {
                if n != *d_in {
                    return Err(dim_err!(
                        "{} expects {} inputs, got shape {:?}",
                        self.kind(),
                        d_in,
                        input
                    ));
                }
                Ok(vec![*d_out])
            }
            LayerSpec::Conv2d {
                c_in,
                c_out,
                kh,
                kw,
                geom,
            } => {
                if input.len() != 3 || input[0] != *c_in {
                    return Err(dim_err!(
                        "conv2d expects [{}, H, W], got {:?}",
                        c_in,
                        input
                    ));
                }
                let hp = input[1] + 2 * geom.pad;
                let wp = input[2] + 2 * geom.pad;
                if *kh > hp || *kw > wp {
                    return Err(dim_err!("kernel {}x{} exceeds input {:?}", kh, kw, input));
                }
                Ok(vec![
                    *c_out,
                    (hp - kh) / geom.stride + 1,
                    (wp - kw) / geom.stride + 1,
                ])
            }
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != n {
                    return Err(dim_err!("cannot reshape {:?} into {:?}", input, shape));
                }
                Ok(shape.clone())
            }
            LayerSpec::Vq { m, .. } => {
                if !n.is_multiple_of(*m) {
                    return Err(config_err!("codeword length m={} must divide M={}", m, n));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Tanh | LayerSpec::NestedDropout { .. } => Ok(input.to_vec()),
        }
    }

    /// Uniform `±sqrt(1/fan_in)` initialization. Codebooks start at zero and
    /// are initialized from data.
    pub fn init_params(&self, rng: &mut Rng) -> Vec<Tensor> {
        let fan_in = match *self {
            LayerSpec::Dense { d_in, .. } | LayerSpec::BinaryDense { d_in, .. } => d_in,
            LayerSpec::Conv2d {
                c_in, kh, kw, geom, ..
            } => c_in / geom.groups * kh * kw,
            _ => 1,
        };
        let bound = (1.0 / fan_in as f64).sqrt();
        let is_vq = matches!(self, LayerSpec::Vq { .. });
        self.param_shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = if is_vq {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                Tensor::new(shape, data).expect("init shape")
            })
            .collect()
    }
}

impl Graph {
    /// `α·sign(W)·x + b` with `α = ‖W‖₁ / (d_out·d_in)` recomputed from the
    /// live weights. The sign uses the clipped straight-through gradient.
    pub fn binary_dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let wb = self.sign_ste(w);
        let alpha = self.mean_abs(w);
        let weff = self.scale_by(wb, alpha)?;
        self.dense(x, weff, b)
    }
}
