//! Distortion tables and greedy bit allocation.

use super::kmeans::kmeans_ladder;
use super::unit_seed;
use crate::error::{config_err, dim_err, Result};
use crate::nn::Tensor;

/// Highest per-unit bit depth the allocator will hand out.
pub const MAX_UNIT_BITS: u8 = 24;

/// Per-unit bit counts `b_i` summing to the budget `B`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitAllocation {
    pub bits: Vec<u8>,
}

impl BitAllocation {
    pub fn zeros(m: usize) -> Self {
        Self { bits: vec![0; m] }
    }

    pub fn uniform(m: usize, per_unit: u8) -> Self {
        Self {
            bits: vec![per_unit; m],
        }
    }

    pub fn budget(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn units(&self) -> usize {
        self.bits.len()
    }
}

/// `W[i][b]`: k-means squared error of latent unit `i` at `2^b` clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionTable {
    pub w: Vec<Vec<f64>>,
    /// Biased per-unit variances of the design latents (`W[i][0] / N`).
    pub variances: Vec<f64>,
    columns: Option<Vec<Vec<f64>>>,
    seed: u64,
}

/// Split an `[N, M]` tensor into its `M` columns.
pub fn columns(latents: &Tensor) -> Result<Vec<Vec<f64>>> {
    let s = latents.shape();
    if s.len() != 2 {
        return Err(dim_err!("latents must be [N, M], got {:?}", s));
    }
    let (n, m) = (s[0], s[1]);
    let d = latents.data();
    Ok((0..m).map(|i| (0..n).map(|r| d[r * m + i]).collect()).collect())
}

impl DistortionTable {
    /// Table from explicit values; it cannot be extended past its levels.
    pub fn from_values(w: Vec<Vec<f64>>) -> Result<Self> {
        if w.iter().any(|col| col.is_empty()) {
            return Err(config_err!("every unit needs at least the b=0 level"));
        }
        let variances = w.iter().map(|col| col[0]).collect();
        Ok(Self {
            w,
            variances,
            columns: None,
            seed: 0,
        })
    }

    pub fn units(&self) -> usize {
        self.w.len()
    }

    /// `W_i(b)`, computing further levels on demand when the design data
    /// is attached.
    pub fn distortion(&mut self, unit: usize, b: u8) -> Result<f64> {
        if let Some(&v) = self.w[unit].get(b as usize) {
            return Ok(v);
        }
        if b > MAX_UNIT_BITS {
            return Err(config_err!(
                "unit {} would exceed {} bits",
                unit,
                MAX_UNIT_BITS
            ));
        }
        let Some(cols) = &self.columns else {
            return Err(config_err!(
                "distortion table has no level {} for unit {} and no design data to extend it",
                b,
                unit
            ));
        };
        let ladder = kmeans_ladder(&cols[unit], b, unit_seed(self.seed, unit));
        self.w[unit] = ladder.iter().map(|l| l.sse).collect();
        Ok(self.w[unit][b as usize])
    }

    /// Total design error `Σ_i W_i(b_i)` of an allocation.
    pub fn total(&mut self, alloc: &BitAllocation) -> Result<f64> {
        let mut s = 0.0;
        for (i, &b) in alloc.bits.iter().enumerate() {
            s += self.distortion(i, b)?;
        }
        Ok(s)
    }
}

/// Run the scalar k-means ladder on every latent unit for `b = 0..=b_max`.
pub fn build_distortion_table(latents: &Tensor, b_max: u8, seed: u64) -> Result<DistortionTable> {
    let cols = columns(latents)?;
    let n = latents.shape()[0];
    if b_max > MAX_UNIT_BITS || n < (1usize << b_max) {
        return Err(config_err!(
            "{} design samples cannot support 2^{} clusters",
            n,
            b_max
        ));
    }
    let w: Vec<Vec<f64>> = cols
        .iter()
        .enumerate()
        .map(|(i, c)| {
            kmeans_ladder(c, b_max, unit_seed(seed, i))
                .iter()
                .map(|l| l.sse)
                .collect()
        })
        .collect();
    let variances = w.iter().map(|col| col[0] / n as f64).collect();
    Ok(DistortionTable {
        w,
        variances,
        columns: Some(cols),
        seed,
    })
}

/// Greedy allocation: `B` times, give one bit to the unit with the largest
/// current demand `s_j = W_j(b_j)` (lowest index on ties), then refresh
/// `s_j ← W_j(b_j + 1)`.
pub fn greedy_allocate(table: &mut DistortionTable, budget: usize) -> Result<BitAllocation> {
    let m = table.units();
    let mut alloc = BitAllocation::zeros(m);
    let mut demand: Vec<f64> = (0..m)
        .map(|i| table.distortion(i, 0))
        .collect::<Result<_>>()?;
    for _ in 0..budget {
        let mut j = 0;
        for i in 1..m {
            if demand[i] > demand[j] {
                j = i;
            }
        }
        alloc.bits[j] += 1;
        demand[j] = table.distortion(j, alloc.bits[j])?;
    }
    Ok(alloc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_budget_allocates_nothing() {
        let mut t = DistortionTable::from_values(vec![vec![1.0, 0.5], vec![2.0, 1.0]]).unwrap();
        assert_eq!(greedy_allocate(&mut t, 0).unwrap().bits, vec![0, 0]);
    }

    #[test]
    fn hand_traced_two_units() {
        // Step 1: s = (10, 1) → unit 0; s₀ = 2. Step 2: s = (2, 1) → unit 0.
        let mut t = DistortionTable::from_values(vec![
            vec![10.0, 2.0, 0.5, 0.1],
            vec![1.0, 0.2, 0.05, 0.01],
        ])
        .unwrap();
        let a = greedy_allocate(&mut t, 2).unwrap();
        assert_eq!(a.bits, vec![2, 0]);
        assert_eq!(a.budget(), 2);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut t = DistortionTable::from_values(vec![vec![1.0, 0.1], vec![1.0, 0.1]]).unwrap();
        assert_eq!(greedy_allocate(&mut t, 1).unwrap().bits, vec![1, 0]);
    }

    #[test]
    fn constant_and_two_valued_columns() {
        let mut d = Vec::new();
        for r in 0..16 {
            d.push(3.0);
            d.push(if r % 2 == 0 { -1.0 } else { 1.0 });
        }
        let lat = Tensor::new(vec![16, 2], d).unwrap();
        let t = build_distortion_table(&lat, 3, 0).unwrap();
        assert!(t.w[0].iter().all(|&v| v == 0.0));
        assert!((t.w[1][0] - 16.0).abs() < 1e-12);
        assert_eq!(t.w[1][1], 0.0);
        assert!((t.variances[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn insufficient_samples_rejected() {
        let lat = Tensor::zeros(vec![7, 2]);
        assert!(matches!(
            build_distortion_table(&lat, 3, 0),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn lazily_extends_levels() {
        let d: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 + if i % 2 == 0 { 0.0 } else { 100.0 }).collect();
        let lat = Tensor::new(vec![64, 1], d).unwrap();
        let mut t = build_distortion_table(&lat, 1, 3).unwrap();
        let a = greedy_allocate(&mut t, 4).unwrap();
        assert_eq!(a.bits, vec![4]);
        assert_eq!(t.w[0].len(), 5);
        let mut manual = DistortionTable::from_values(vec![vec![1.0]]).unwrap();
        assert!(greedy_allocate(&mut manual, 1).is_err());
    }
}
