//! Grouped 2-D cross-correlation kernels (forward and backward).

use crate::error::{config_err, dim_err, Result};

/// Grouping, stride and symmetric zero padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub groups: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            groups: 1,
            stride: 1,
            pad: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub cin_g: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn resolve(x: &[usize], k: &[usize], geom: ConvGeom) -> Result<Self> {
        if x.len() != 4 {
            return Err(dim_err!("conv2d input must be [batch, C, H, W], got {:?}", x));
        }
        if k.len() != 4 {
            return Err(dim_err!(
                "conv2d kernel must be [C_out, C_in/g, kh, kw], got {:?}",
                k
            ));
        }
        let g = geom.groups;
        if g == 0 || !x[1].is_multiple_of(g) || !k[0].is_multiple_of(g) {
            return Err(config_err!(
                "groups={} must divide C_in={} and C_out={}",
                g,
                x[1],
                k[0]
            ));
        }
        if geom.stride == 0 {
            return Err(config_err!("conv2d stride must be positive"));
        }
        if k[1] * g != x[1] {
            return Err(dim_err!(
                "kernel expects {} input channels per group but input has {} channels over {} groups",
                k[1],
                x[1],
                g
            ));
        }
        let (hp, wp) = (x[2] + 2 * geom.pad, x[3] + 2 * geom.pad);
        if k[2] > hp || k[3] > wp {
            return Err(dim_err!("kernel {:?} larger than padded input {:?}", k, x));
        }
        Ok(Self {
            batch: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: k[0],
            cin_g: k[1],
            kh: k[2],
            kw: k[3],
            ho: (hp - k[2]) / geom.stride + 1,
            wo: (wp - k[3]) / geom.stride + 1,
            geom,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.ho, self.wo]
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.geom.groups
    }

    /// Output index range along one axis whose input tap stays inside the
    /// unpadded input for kernel offset `k`.
    fn valid(&self, k: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        let (s, p) = (self.geom.stride, self.geom.pad);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if len_in + p <= k {
            0
        } else {
            ((len_in - 1 + p - k) / s + 1).min(len_out)
        };
        (lo, hi.max(lo))
    }
}

/// Visits every (output row, input row, valid column span) contributed by
/// kernel tap `(ky, kx)`.
#[inline]
fn for_each_tap(d: &ConvDims, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (oy_lo, oy_hi) = d.valid(ky, d.h, d.ho);
    let (ox_lo, ox_hi) = d.valid(kx, d.w, d.wo);
    if ox_lo >= ox_hi {
        return;
    }
    let s = d.geom.stride;
    let p = d.geom.pad;
    for oy in oy_lo..oy_hi {
        let iy = oy * s + ky - p;
        let ix0 = ox_lo * s + kx - p;
        f(oy, iy, ox_lo, ox_hi, ix0);
    }
}

pub(crate) fn forward(d: &ConvDims, x: &[f64], k: &[f64], t: Option<&[f64]>, out: &mut [f64]) {
    let (hw_in, hw_out) = (d.h * d.w, d.ho * d.wo);
    let ksz = d.kh * d.kw;
    let s = d.geom.stride;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let grp = co / d.cout_g();
            let o = &mut out[(b * d.c_out + co) * hw_out..(b * d.c_out + co + 1) * hw_out];
            if let Some(t) = t {
                o.fill(t[co]);
            }
            for cl in 0..d.cin_g {
                let ci = grp * d.cin_g + cl;
                let xin = &x[(b * d.c_in + ci) * hw_in..(b * d.c_in + ci + 1) * hw_in];
                let kern = &k[(co * d.cin_g + cl) * ksz..(co * d.cin_g + cl + 1) * ksz];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = kern[ky * d.kw + kx];
                        for_each_tap(d, ky, kx, |oy, iy, lo, hi, ix0| {
                            let orow = &mut o[oy * d.wo + lo..oy * d.wo + hi];
                            let irow = &xin[iy * d.w..(iy + 1) * d.w];
                            if s == 1 {
                                for (ov, iv) in orow.iter_mut().zip(&irow[ix0..ix0 + (hi - lo)]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * irow[ix0 + j * s];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
}

pub(crate) fn backward(
    d: &ConvDims,
    x: &[f64],
    k: &[f64],
    g: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dt: Option<&mut [f64]>,
) {
    let (hw_in, hw_out) = (d.h * d.w, d.ho * d.wo);
    let ksz = d.kh * d.kw;
    let s = d.geom.stride;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let grp = co / d.cout_g();
            let go = &g[(b * d.c_out + co) * hw_out..(b * d.c_out + co + 1) * hw_out];
            if let Some(dt) = dt.as_deref_mut() {
                dt[co] += go.iter().sum::<f64>();
            }
            for cl in 0..d.cin_g {
                let ci = grp * d.cin_g + cl;
                let xoff = (b * d.c_in + ci) * hw_in;
                let koff = (co * d.cin_g + cl) * ksz;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let kidx = koff + ky * d.kw + kx;
                        let wv = k[kidx];
                        let mut acc = 0.0;
                        for_each_tap(d, ky, kx, |oy, iy, lo, hi, ix0| {
                            let grow = &go[oy * d.wo + lo..oy * d.wo + hi];
                            let rs = xoff + iy * d.w;
                            if s == 1 {
                                let irow = &x[rs + ix0..rs + ix0 + (hi - lo)];
                                acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                                if let Some(dx) = dx.as_deref_mut() {
                                    let drow = &mut dx[rs + ix0..rs + ix0 + (hi - lo)];
                                    for (dv, gv) in drow.iter_mut().zip(grow) {
                                        *dv += wv * gv;
                                    }
                                }
                            } else {
                                for (j, gv) in grow.iter().enumerate() {
                                    acc += gv * x[rs + ix0 + j * s];
                                    if let Some(dx) = dx.as_deref_mut() {
                                        dx[rs + ix0 + j * s] += wv * gv;
                                    }
                                }
                            }
                        });
                        if let Some(dk) = dk.as_deref_mut() {
                            dk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
}
