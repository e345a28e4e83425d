//! Reconstruction quality: NMSE, per-subcarrier cosine similarity, and CDF
//! emission.

use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelSample;
use crate::error::{dim_err, numeric_err, Result};

/// dB value reported for an exact (zero-error) reconstruction.
pub const DB_FLOOR: f64 = -300.0;

pub fn to_db(x: f64) -> f64 {
    if x <= 0.0 {
        DB_FLOOR
    } else {
        (10.0 * x.log10()).max(DB_FLOOR)
    }
}

fn check_shapes(h: &ChannelSample, h_hat: &ChannelSample) -> Result<()> {
    if h.na != h_hat.na || h.nc != h_hat.nc {
        return Err(dim_err!(
            "reference is {}x{} but reconstruction is {}x{}",
            h.na,
            h.nc,
            h_hat.na,
            h_hat.nc
        ));
    }
    Ok(())
}

/// `‖Ĥ − H‖²_F / ‖H‖²_F`.
pub fn nmse(h: &ChannelSample, h_hat: &ChannelSample) -> Result<f64> {
    check_shapes(h, h_hat)?;
    let den = h.frobenius_sq();
    if den <= 0.0 {
        return Err(numeric_err!("reference channel has zero norm"));
    }
    let num: f64 = h
        .re
        .iter()
        .zip(&h.im)
        .zip(h_hat.re.iter().zip(&h_hat.im))
        .map(|((a, b), (c, d))| (a - c).powi(2) + (b - d).powi(2))
        .sum();
    Ok(num / den)
}

/// Mean over subcarriers of `|ĥ_nᴴ h_n| / (‖ĥ_n‖ ‖h_n‖)`.
pub fn cosine_similarity(h: &ChannelSample, h_hat: &ChannelSample) -> Result<f64> {
    check_shapes(h, h_hat)?;
    let mut total = 0.0;
    for n in 0..h.nc {
        let mut dot = Complex64::new(0.0, 0.0);
        let (mut e1, mut e2) = (0.0, 0.0);
        for a in 0..h.na {
            let x = h.at(a, n);
            let y = h_hat.at(a, n);
            dot += y.conj() * x;
            e1 += x.norm_sqr();
            e2 += y.norm_sqr();
        }
        if e1 == 0.0 || e2 == 0.0 {
            return Err(numeric_err!("subcarrier {} has an all-zero column", n));
        }
        total += dot.norm() / (e1.sqrt() * e2.sqrt());
    }
    Ok((total / h.nc as f64).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub db: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmse: Vec<f64>,
    pub rho: Vec<f64>,
    pub mean_nmse: f64,
    /// `10·log10(mean NMSE)`, the table convention.
    pub nmse_db_of_mean: f64,
    /// Mean of the per-sample dB values.
    pub mean_nmse_db: f64,
    pub mean_rho: f64,
    /// `10·log10(1 − mean ρ)`.
    pub one_minus_rho_db: f64,
    pub cdf: Vec<CdfPoint>,
}

/// Empirical CDF of per-sample values in dB, sorted ascending.
pub fn cdf_points(values: &[f64]) -> Vec<CdfPoint> {
    let mut db: Vec<f64> = values.iter().map(|&v| to_db(v)).collect();
    db.sort_by(f64::total_cmp);
    let n = db.len() as f64;
    db.iter()
        .enumerate()
        .map(|(i, &d)| CdfPoint {
            db: d,
            prob: (i + 1) as f64 / n,
        })
        .collect()
}

pub fn report(truth: &[ChannelSample], recon: &[ChannelSample]) -> Result<MetricsReport> {
    if truth.len() != recon.len() {
        return Err(dim_err!(
            "{} reference samples but {} reconstructions",
            truth.len(),
            recon.len()
        ));
    }
    if truth.is_empty() {
        return Err(dim_err!("metrics need at least one sample"));
    }
    let nmse = truth
        .iter()
        .zip(recon)
        .map(|(h, r)| nmse(h, r))
        .collect::<Result<Vec<_>>>()?;
    let rho = truth
        .iter()
        .zip(recon)
        .map(|(h, r)| cosine_similarity(h, r))
        .collect::<Result<Vec<_>>>()?;
    let n = nmse.len() as f64;
    let mean_nmse = nmse.iter().sum::<f64>() / n;
    let mean_rho = rho.iter().sum::<f64>() / n;
    Ok(MetricsReport {
        mean_nmse_db: nmse.iter().map(|&v| to_db(v)).sum::<f64>() / n,
        nmse_db_of_mean: to_db(mean_nmse),
        mean_nmse,
        one_minus_rho_db: to_db(1.0 - mean_rho),
        mean_rho,
        cdf: cdf_points(&nmse),
        nmse,
        rho,
    })
}

impl MetricsReport {
    /// `sample_id,nmse,nmse_db,rho`
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("sample_id,nmse,nmse_db,rho\n");
        for (i, (e, r)) in self.nmse.iter().zip(&self.rho).enumerate() {
            writeln!(s, "{},{:.9e},{:.6},{:.9}", i, e, to_db(*e), r).unwrap();
        }
        s
    }

    /// `cdf_db,prob`
    pub fn cdf_csv(&self) -> String {
        let mut s = String::from("cdf_db,prob\n");
        for p in &self.cdf {
            writeln!(s, "{:.6},{:.6}", p.db, p.prob).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::rng;

    fn random_sample(na: usize, nc: usize, seed: u64) -> ChannelSample {
        let mut r = rng::stream(seed, "test", 0);
        let mut s = ChannelSample::zeros(na, nc);
        for k in 0..na * nc {
            s.re[k] = r.random_range(-1.0..1.0);
            s.im[k] = r.random_range(-1.0..1.0);
        }
        s
    }

    fn times(s: &ChannelSample, c: Complex64) -> ChannelSample {
        let mut o = s.clone();
        for k in 0..s.re.len() {
            let v = Complex64::new(s.re[k], s.im[k]) * c;
            o.re[k] = v.re;
            o.im[k] = v.im;
        }
        o
    }

    #[test]
    fn nmse_closed_forms() {
        let h = random_sample(4, 6, 1);
        assert_eq!(nmse(&h, &h).unwrap(), 0.0);
        assert!((nmse(&h, &ChannelSample::zeros(4, 6)).unwrap() - 1.0).abs() < 1e-15);
        assert!((nmse(&h, &h.scaled(2.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!(nmse(&ChannelSample::zeros(4, 6), &h).is_err());
    }

    #[test]
    fn nmse_is_scale_covariant() {
        let h = random_sample(4, 6, 2);
        let r = random_sample(4, 6, 3);
        let base = nmse(&h, &r).unwrap();
        for c in [0.01, 3.0, -7.5] {
            assert!((nmse(&h.scaled(c), &r.scaled(c)).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_invariance_and_orthogonality() {
        let h = random_sample(4, 6, 4);
        let r = random_sample(4, 6, 5);
        assert!((cosine_similarity(&h, &times(&h, Complex64::new(-2.0, 0.7))).unwrap() - 1.0).abs() < 1e-12);
        let base = cosine_similarity(&h, &r).unwrap();
        let rot = cosine_similarity(&h, &times(&r, Complex64::new(0.3, -5.0))).unwrap();
        assert!((base - rot).abs() < 1e-12);

        // e_0 vs e_1 on every subcarrier
        let mut a = ChannelSample::zeros(2, 3);
        let mut b = ChannelSample::zeros(2, 3);
        for n in 0..3 {
            a.re[n] = 1.0;
            b.im[3 + n] = 1.0;
        }
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        let err = cosine_similarity(&a, &ChannelSample::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("subcarrier 0"));
    }

    #[test]
    fn cosine_matches_direct_loop() {
        let h = random_sample(5, 7, 6);
        let r = random_sample(5, 7, 7);
        let mut acc = 0.0;
        for n in 0..7 {
            let (mut re, mut im, mut e1, mut e2) = (0.0, 0.0, 0.0, 0.0);
            for a in 0..5 {
                let k = a * 7 + n;
                // conj(r)·h
                re += r.re[k] * h.re[k] + r.im[k] * h.im[k];
                im += r.re[k] * h.im[k] - r.im[k] * h.re[k];
                e1 += h.re[k] * h.re[k] + h.im[k] * h.im[k];
                e2 += r.re[k] * r.re[k] + r.im[k] * r.im[k];
            }
            acc += (re * re + im * im).sqrt() / (e1 * e2).sqrt();
        }
        assert!((cosine_similarity(&h, &r).unwrap() - acc / 7.0).abs() < 1e-12);
    }

    #[test]
    fn cdf_hand_example_and_floor() {
        let pts = cdf_points(&[0.1, 0.01]);
        assert!((pts[0].db + 20.0).abs() < 1e-12 && pts[0].prob == 0.5);
        assert!((pts[1].db + 10.0).abs() < 1e-12 && pts[1].prob == 1.0);
        let h = random_sample(2, 2, 8);
        let rep = report(&[h.clone(), h.clone()], &[h.clone(), h]).unwrap();
        assert!(rep.cdf.iter().all(|p| p.db == DB_FLOOR));
        assert_eq!(rep.cdf.last().unwrap().prob, 1.0);
    }

    #[test]
    fn report_aggregates() {
        let truth: Vec<_> = (0..20).map(|i| random_sample(3, 4, 100 + i)).collect();
        let recon: Vec<_> = truth
            .iter()
            .enumerate()
            .map(|(i, h)| h.scaled(1.0 + 0.05 * i as f64))
            .collect();
        let rep = report(&truth, &recon).unwrap();
        let mean: f64 = rep.nmse.iter().sum::<f64>() / 20.0;
        assert_eq!(rep.mean_nmse, mean);
        assert!(rep.mean_nmse_db < rep.nmse_db_of_mean, "Jensen gap expected");
        assert!(rep.cdf.windows(2).all(|w| w[0].prob <= w[1].prob && w[0].db <= w[1].db));
        assert!(rep.rho.iter().all(|&r| (0.0..=1.0).contains(&r)));
        assert!(report(&truth, &recon[..3]).is_err());
        assert!(rep.samples_csv().starts_with("sample_id,nmse,nmse_db,rho\n0,"));
        assert!(rep.cdf_csv().starts_with("cdf_db,prob\n"));
    }
}
