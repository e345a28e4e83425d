use rand::Rng as _;

use crate::error::{config_err, dim_err, Result};
use crate::nn::Tensor;
use crate::rng::Rng;

/// Default geometric parameter: the expected cut point keeps the same
/// ratio to `M` as `p = 0.0005` at `M = 256`.
pub fn default_nd_p(latent: usize) -> f64 {
    (0.0005 * 256.0 / latent.max(1) as f64).min(1.0)
}

/// Draw `b ~ Geometric(p)` on `{1, 2, ...}`, clamped to `M`.
pub fn sample_nd_index(p: f64, latent: usize, rng: &mut Rng) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(config_err!("nested dropout p={} outside (0, 1]", p));
    }
    if latent == 0 {
        return Err(config_err!("latent dimension must be positive"));
    }
    if p == 1.0 {
        return Ok(1);
    }
    // inverse CDF on u in (0, 1]
    let u: f64 = 1.0 - rng.random::<f64>();
    let b = (u.ln() / (1.0 - p).ln()).floor() + 1.0;
    Ok(if b >= latent as f64 { latent } else { b.max(1.0) as usize })
}

/// `E[min(G, M)] = (1 − (1−p)^M) / p`.
pub fn truncated_geometric_mean(p: f64, latent: usize) -> f64 {
    (1.0 - (1.0 - p).powi(latent as i32)) / p
}

/// 0/1 mask `[batch, M]` keeping units `1..=b` of each row.
pub fn nd_mask(cuts: &[usize], latent: usize) -> Result<Vec<f64>> {
    let mut mask = Vec::with_capacity(cuts.len() * latent);
    for &b in cuts {
        if b == 0 || b > latent {
            return Err(dim_err!("cut index {} outside [1, {}]", b, latent));
        }
        mask.extend((0..latent).map(|j| if j < b { 1.0 } else { 0.0 }));
    }
    Ok(mask)
}

/// Zero units `b+1..M` of each row.
pub fn apply_nested_dropout(z: &Tensor, cuts: &[usize]) -> Result<Tensor> {
    if z.shape().len() != 2 || z.shape()[0] != cuts.len() {
        return Err(dim_err!(
            "latents {:?} vs {} cut indices",
            z.shape(),
            cuts.len()
        ));
    }
    let mask = nd_mask(cuts, z.shape()[1])?;
    let data = z.data().iter().zip(mask).map(|(v, m)| v * m).collect();
    Tensor::new(z.shape().to_vec(), data)
}
