//! Synthetic UL/DL multipath channels with train/validation/test splits.
//!
//! Each user draws a set of propagation paths once; its UL and DL samples
//! are the same paths observed at two carrier frequencies. The carrier only
//! enters through the array response, so UL-trained models see DL data with
//! the same delay structure.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, format_err, numeric_err, Result};
use crate::nn::Tensor;
use crate::rng::{self, Rng};

/// One CSI matrix `H ∈ C^{Na×Nc}`, stored row-major (antenna, subcarrier)
/// as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub na: usize,
    pub nc: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    /// Carrier frequency in Hz. Not persisted in dataset files (0 after load).
    pub carrier_freq: f64,
}

impl ChannelSample {
    pub fn zeros(na: usize, nc: usize) -> Self {
        Self {
            na,
            nc,
            re: vec![0.0; na * nc],
            im: vec![0.0; na * nc],
            carrier_freq: 0.0,
        }
    }

    pub fn at(&self, antenna: usize, subcarrier: usize) -> Complex64 {
        let i = antenna * self.nc + subcarrier;
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            re: self.re.iter().map(|v| v * c).collect(),
            im: self.im.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// Geometry and sizes of a synthetic scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub array_rows: usize,
    pub array_cols: usize,
    pub subcarriers: usize,
    pub paths: usize,
    /// Occupied bandwidth in Hz; subcarrier spacing is `bandwidth / subcarriers`.
    pub bandwidth: f64,
    pub f_ul: f64,
    pub f_dl: f64,
    /// Maximum path delay as a fraction of the inverse subcarrier spacing.
    pub max_delay_fraction: f64,
    /// Decay constant of the exponential power-delay profile, in the same
    /// units as `max_delay_fraction`; 0 gives equal mean path powers.
    pub delay_spread_fraction: f64,
    /// Azimuths are uniform in `[−w, w]` around broadside.
    pub azimuth_half_width: f64,
    /// Elevations are uniform in `[elevation_min, elevation_max]`.
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            array_rows: 4,
            array_cols: 4,
            subcarriers: 32,
            paths: 12,
            bandwidth: 32.0 * 50e3,
            f_ul: 2.5e9,
            f_dl: 2.62e9,
            max_delay_fraction: 0.3,
            delay_spread_fraction: 0.01,
            azimuth_half_width: PI / 6.0,
            elevation_min: -PI / 9.0,
            elevation_max: 0.0,
            n_train: 2000,
            n_val: 250,
            n_test: 250,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn antennas(&self) -> usize {
        self.array_rows * self.array_cols
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth / self.subcarriers as f64
    }

    pub fn users(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.array_rows == 0 || self.array_cols == 0 || self.subcarriers == 0 {
            return Err(config_err!("array and subcarrier counts must be positive"));
        }
        if self.antennas() > u16::MAX as usize || self.subcarriers > u16::MAX as usize {
            return Err(config_err!("Na and Nc must fit in 16 bits"));
        }
        if self.paths == 0 {
            return Err(config_err!("at least one path is required"));
        }
        if !(self.bandwidth > 0.0 && self.f_ul > 0.0) {
            return Err(config_err!("bandwidth and f_ul must be positive"));
        }
        if self.f_dl <= self.f_ul {
            return Err(config_err!(
                "f_dl={} must exceed f_ul={}",
                self.f_dl,
                self.f_ul
            ));
        }
        if !(0.0..=1.0).contains(&self.max_delay_fraction) {
            return Err(config_err!("max_delay_fraction must lie in [0, 1]"));
        }
        if !(self.delay_spread_fraction >= 0.0 && self.delay_spread_fraction.is_finite()) {
            return Err(config_err!("delay_spread_fraction must be non-negative"));
        }
        if !(0.0..=PI).contains(&self.azimuth_half_width) {
            return Err(config_err!("azimuth_half_width must lie in [0, pi]"));
        }
        if !(-PI / 2.0 <= self.elevation_min
            && self.elevation_min <= self.elevation_max
            && self.elevation_max <= PI / 2.0)
        {
            return Err(config_err!("elevation range must be ordered within [-pi/2, pi/2]"));
        }
        if self.n_train == 0 {
            return Err(config_err!("training split must be non-empty"));
        }
        Ok(())
    }
}

/// One propagation path. Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub gain: Complex64,
    pub delay: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

/// Paths of one user drawn from its own sub-stream. Mean path powers
/// follow the exponential delay profile and sum to one.
pub fn draw_paths(cfg: &ScenarioConfig, user: u64) -> Vec<Path> {
    let mut r = rng::stream(cfg.seed, "data", user);
    let tau_max = cfg.max_delay_fraction / cfg.subcarrier_spacing();
    let tau_s = cfg.delay_spread_fraction / cfg.subcarrier_spacing();
    let uniform = |r: &mut Rng, lo: f64, hi: f64| if hi > lo { r.random_range(lo..hi) } else { lo };
    let mut paths: Vec<Path> = (0..cfg.paths)
        .map(|_| {
            let gr: f64 = StandardNormal.sample(&mut r);
            let gi: f64 = StandardNormal.sample(&mut r);
            Path {
                gain: Complex64::new(gr, gi),
                delay: r.random::<f64>() * tau_max,
                azimuth: uniform(&mut r, -cfg.azimuth_half_width, cfg.azimuth_half_width),
                elevation: uniform(&mut r, cfg.elevation_min, cfg.elevation_max),
            }
        })
        .collect();
    let power: Vec<f64> = paths
        .iter()
        .map(|p| if tau_s > 0.0 { (-p.delay / tau_s).exp() } else { 1.0 })
        .collect();
    let total: f64 = power.iter().sum();
    for (p, w) in paths.iter_mut().zip(power) {
        p.gain *= (0.5 * w / total).sqrt();
    }
    paths
}

/// `H[a, n] = Σ_l g_l · exp(−j2π Δf_n τ_l) · a_l(a)` where `Δf_n` is the
/// offset of subcarrier `n` from the band centre and `a_l` is the
/// half-wavelength (at `f_ul`) planar-array response at `carrier`.
pub fn synthesize(cfg: &ScenarioConfig, paths: &[Path], carrier: f64) -> ChannelSample {
    let (rows, cols, nc) = (cfg.array_rows, cfg.array_cols, cfg.subcarriers);
    let spacing = cfg.subcarrier_spacing();
    let ratio = carrier / cfg.f_ul;
    let mut h = ChannelSample::zeros(rows * cols, nc);
    h.carrier_freq = carrier;
    let centre = (nc as f64 - 1.0) / 2.0;
    for p in paths {
        let u = p.elevation.cos() * p.azimuth.sin();
        let v = p.elevation.sin();
        let freq: Vec<Complex64> = (0..nc)
            .map(|n| Complex64::from_polar(1.0, -2.0 * PI * (n as f64 - centre) * spacing * p.delay))
            .collect();
        for r in 0..rows {
            for c in 0..cols {
                let a = Complex64::from_polar(1.0, PI * ratio * (r as f64 * u + c as f64 * v));
                let ga = p.gain * a;
                let base = (r * cols + c) * nc;
                for (n, f) in freq.iter().enumerate() {
                    let val = ga * f;
                    h.re[base + n] += val.re;
                    h.im[base + n] += val.im;
                }
            }
        }
    }
    h
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<ChannelSample>,
    pub val: Vec<ChannelSample>,
    pub test: Vec<ChannelSample>,
}

impl Split {
    fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }

    fn iter(&self) -> impl Iterator<Item = &ChannelSample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// UL and DL splits of the same users plus the normalization fitted on the
/// UL training split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub na: usize,
    pub nc: usize,
    pub ul: Split,
    pub dl: Split,
    pub scale: f64,
}

pub fn generate_dataset(cfg: &ScenarioConfig) -> Result<SplitDataset> {
    cfg.validate()?;
    let mut ul = Split::default();
    let mut dl = Split::default();
    for user in 0..cfg.users() {
        let paths = draw_paths(cfg, user as u64);
        let h_ul = synthesize(cfg, &paths, cfg.f_ul);
        let h_dl = synthesize(cfg, &paths, cfg.f_dl);
        let (u, d) = if user < cfg.n_train {
            (&mut ul.train, &mut dl.train)
        } else if user < cfg.n_train + cfg.n_val {
            (&mut ul.val, &mut dl.val)
        } else {
            (&mut ul.test, &mut dl.test)
        };
        u.push(h_ul);
        d.push(h_dl);
    }
    let scale = fit_normalization(&ul.train)?;
    Ok(SplitDataset {
        na: cfg.antennas(),
        nc: cfg.subcarriers,
        ul,
        dl,
        scale,
    })
}

/// Mean Frobenius norm of the given (training) samples.
pub fn fit_normalization(train: &[ChannelSample]) -> Result<f64> {
    if train.is_empty() {
        return Err(config_err!("cannot fit normalization on an empty split"));
    }
    let scale = train.iter().map(ChannelSample::frobenius).sum::<f64>() / train.len() as f64;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(numeric_err!("training split has zero (or non-finite) norm"));
    }
    Ok(scale)
}

/// `[batch, 2, Na, Nc]` with real and imaginary planes divided by `scale`.
pub fn to_real_tensor(samples: &[ChannelSample], scale: f64) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| dim_err!("to_real_tensor needs at least one sample"))?;
    let (na, nc) = (first.na, first.nc);
    let plane = na * nc;
    let mut data = Vec::with_capacity(samples.len() * 2 * plane);
    for (i, s) in samples.iter().enumerate() {
        if s.na != na || s.nc != nc || s.re.len() != plane || s.im.len() != plane {
            return Err(dim_err!(
                "sample {} is {}x{}, expected {}x{}",
                i,
                s.na,
                s.nc,
                na,
                nc
            ));
        }
        data.extend(s.re.iter().map(|v| v / scale));
        data.extend(s.im.iter().map(|v| v / scale));
    }
    Tensor::new(vec![samples.len(), 2, na, nc], data)
}

/// Inverse of [`to_real_tensor`].
pub fn from_real_tensor(t: &Tensor, scale: f64) -> Result<Vec<ChannelSample>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(dim_err!("expected [batch, 2, Na, Nc], got {:?}", s));
    }
    let (na, nc) = (s[2], s[3]);
    let plane = na * nc;
    Ok(t.data()
        .chunks(2 * plane)
        .map(|c| ChannelSample {
            na,
            nc,
            re: c[..plane].iter().map(|v| v * scale).collect(),
            im: c[plane..].iter().map(|v| v * scale).collect(),
            carrier_freq: 0.0,
        })
        .collect())
}

const DATA_MAGIC: &[u8; 4] = b"CSID";
const DATA_VERSION: u8 = 1;

impl SplitDataset {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let counts = self.ul.counts();
        if counts != self.dl.counts() {
            return Err(format_err!("UL and DL split sizes differ"));
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(DATA_MAGIC);
        buf.push(DATA_VERSION);
        buf.extend_from_slice(&(self.na as u16).to_le_bytes());
        buf.extend_from_slice(&(self.nc as u16).to_le_bytes());
        for c in counts {
            buf.extend_from_slice(&(c as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.scale.to_le_bytes());
        for s in self.ul.iter().chain(self.dl.iter()) {
            for (r, i) in s.re.iter().zip(&s.im) {
                buf.extend_from_slice(&(*r as f32).to_le_bytes());
                buf.extend_from_slice(&(*i as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = ByteReader::new(&buf);
        if cur.take(4)? != DATA_MAGIC {
            return Err(format_err!("not a dataset file (bad magic)"));
        }
        let version = cur.u8()?;
        if version != DATA_VERSION {
            return Err(format_err!("unsupported dataset version {}", version));
        }
        let na = cur.u16()? as usize;
        let nc = cur.u16()? as usize;
        let counts = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
        let scale = cur.f64()?;
        let read_split = |cur: &mut ByteReader| -> Result<Split> {
            let mut lists: [Vec<ChannelSample>; 3] = Default::default();
            for (list, &n) in lists.iter_mut().zip(&counts) {
                for _ in 0..n {
                    let mut s = ChannelSample::zeros(na, nc);
                    for k in 0..na * nc {
                        s.re[k] = cur.f32()? as f64;
                        s.im[k] = cur.f32()? as f64;
                    }
                    list.push(s);
                }
            }
            let [train, val, test] = lists;
            Ok(Split { train, val, test })
        };
        let ul = read_split(&mut cur)?;
        let dl = read_split(&mut cur)?;
        if !cur.is_empty() {
            return Err(format_err!("trailing bytes after dataset payload"));
        }
        Ok(Self {
            na,
            nc,
            ul,
            dl,
            scale,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Little-endian cursor over a byte slice, shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(format_err!("unexpected end of file at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
