//! Scalar k-means (Lloyd with k-means++ seeding) and the per-unit ladder of
//! solutions at 1, 2, 4, … clusters.

use rand::Rng as _;

use crate::rng;

const N_INIT: usize = 4;
const MAX_ITERS: usize = 200;

/// Sorted centroids and the design-set squared error.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans1d {
    pub centroids: Vec<f64>,
    pub sse: f64,
}

/// Index of the nearest of the sorted `centroids`; ties go to the lower one.
pub fn nearest(centroids: &[f64], x: f64) -> usize {
    let hi = centroids.partition_point(|&c| c < x);
    if hi == 0 {
        return 0;
    }
    if hi == centroids.len() {
        return hi - 1;
    }
    if (x - centroids[hi - 1]).abs() <= (centroids[hi] - x).abs() {
        hi - 1
    } else {
        hi
    }
}

/// Squared error of quantizing every value to its nearest centroid.
pub fn sse_nearest(values: &[f64], centroids: &[f64]) -> f64 {
    values
        .iter()
        .map(|&x| {
            let d = x - centroids[nearest(centroids, x)];
            d * d
        })
        .sum()
}

fn distinct_sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Lloyd iterations on sorted `values` from sorted initial centroids.
fn lloyd(sorted: &[f64], mut centroids: Vec<f64>) -> KMeans1d {
    let k = centroids.len();
    let mut assign = vec![usize::MAX; sorted.len()];
    for _ in 0..MAX_ITERS {
        centroids.sort_by(f64::total_cmp);
        let mut changed = false;
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (a, &x) in assign.iter_mut().zip(sorted) {
            let c = nearest(&centroids, x);
            if *a != c {
                *a = c;
                changed = true;
            }
            sums[c] += x;
            counts[c] += 1;
        }
        if !changed {
            break;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
        // Empty clusters take the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = sorted
                    .iter()
                    .zip(&assign)
                    .enumerate()
                    .filter(|(_, (_, &a))| a != usize::MAX)
                    .map(|(i, (&x, &a))| (i, (x - centroids[a]).abs()))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                centroids[c] = sorted[far];
                assign[far] = usize::MAX;
            }
        }
    }
    centroids.sort_by(f64::total_cmp);
    let sse = sse_nearest(sorted, &centroids);
    KMeans1d { centroids, sse }
}

fn kmeans_pp(sorted: &[f64], k: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let mut cents = vec![sorted[rng.random_range(0..sorted.len())]];
    let mut d2: Vec<f64> = sorted.iter().map(|x| (x - cents[0]).powi(2)).collect();
    while cents.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = sorted.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..sorted.len())
        };
        let c = sorted[pick];
        cents.push(c);
        for (d, x) in d2.iter_mut().zip(sorted) {
            *d = d.min((x - c).powi(2));
        }
    }
    cents
}

/// Globally optimal clustering when `k·n` is at most this; larger inputs
/// use Lloyd restarts.
const EXACT_LIMIT: usize = 1 << 22;

/// Minimum-SSE clustering of scalars.
///
/// Exact by dynamic programming over sorted values for moderate `k·n`,
/// otherwise the best of `N_INIT` k-means++ seeded Lloyd runs. When `k`
/// reaches the number of distinct values those values are returned with
/// zero error.
pub fn kmeans_1d(values: &[f64], k: usize, seed: u64) -> KMeans1d {
    assert!(k >= 1 && !values.is_empty(), "kmeans_1d needs k >= 1 and data");
    let distinct = distinct_sorted(values);
    if k >= distinct.len() {
        return KMeans1d {
            centroids: distinct,
            sse: 0.0,
        };
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    run_restarts(&sorted, k, seed, None)
}

/// Prefix sums for O(1) cluster costs over sorted values.
struct Prefix {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Prefix {
    fn new(sorted: &[f64]) -> Self {
        let mut s1 = vec![0.0; sorted.len() + 1];
        let mut s2 = vec![0.0; sorted.len() + 1];
        for (i, x) in sorted.iter().enumerate() {
            s1[i + 1] = s1[i] + x;
            s2[i + 1] = s2[i] + x * x;
        }
        Self { s1, s2 }
    }

    /// SSE of `sorted[i..j]` around its mean.
    fn cost(&self, i: usize, j: usize) -> f64 {
        let s = self.s1[j] - self.s1[i];
        (self.s2[j] - self.s2[i] - s * s / (j - i) as f64).max(0.0)
    }

    fn mean(&self, i: usize, j: usize) -> f64 {
        (self.s1[j] - self.s1[i]) / (j - i) as f64
    }
}

/// Fills `cur[j]`, `arg[j]` for `j in lo..hi` given optimal split points
/// in `opt_lo..=opt_hi`; the optimal split is monotone in `j`.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn dc_level(p: &Prefix, prev: &[f64], cur: &mut [f64], arg: &mut [usize], lo: usize, hi: usize, opt_lo: usize, opt_hi: usize) {
    if lo >= hi {
        return;
    }
    let j = (lo + hi) / 2;
    let (mut best, mut best_i) = (f64::INFINITY, opt_lo);
    for i in opt_lo..=opt_hi.min(j - 1) {
        let c = prev[i] + p.cost(i, j);
        if c < best {
            best = c;
            best_i = i;
        }
    }
    cur[j] = best;
    arg[j] = best_i;
    dc_level(p, prev, cur, arg, lo, j, opt_lo, best_i);
    dc_level(p, prev, cur, arg, j + 1, hi, best_i, opt_hi);
}

/// Optimal contiguous partition of `sorted` into `k` non-empty clusters.
fn exact(sorted: &[f64], k: usize) -> KMeans1d {
    let n = sorted.len();
    let p = Prefix::new(sorted);
    let mut prev: Vec<f64> = (0..=n).map(|j| if j == 0 { 0.0 } else { p.cost(0, j) }).collect();
    let mut args: Vec<Vec<usize>> = Vec::with_capacity(k - 1);
    for t in 1..k {
        let mut cur = vec![f64::INFINITY; n + 1];
        let mut arg = vec![0usize; n + 1];
        // t+1 non-empty clusters need at least t+1 points.
        dc_level(&p, &prev, &mut cur, &mut arg, t + 1, n + 1, t, n - 1);
        args.push(arg);
        prev = cur;
    }
    let mut bounds = vec![n];
    let mut j = n;
    for arg in args.iter().rev() {
        j = arg[j];
        bounds.push(j);
    }
    bounds.push(0);
    bounds.reverse();
    let centroids: Vec<f64> = bounds.windows(2).map(|w| p.mean(w[0], w[1])).collect();
    let sse = sse_nearest(sorted, &centroids);
    KMeans1d { centroids, sse }
}

fn run_restarts(sorted: &[f64], k: usize, seed: u64, warm: Option<Vec<f64>>) -> KMeans1d {
    if k.saturating_mul(sorted.len()) <= EXACT_LIMIT {
        return exact(sorted, k);
    }
    lloyd_restarts(sorted, k, seed, warm)
}

fn lloyd_restarts(sorted: &[f64], k: usize, seed: u64, warm: Option<Vec<f64>>) -> KMeans1d {
    let mut r = rng::stream(seed, "kmeans", k as u64);
    let mut best: Option<KMeans1d> = None;
    let candidates = (0..N_INIT)
        .map(|_| kmeans_pp(sorted, k, &mut r))
        .chain(warm);
    for init in candidates {
        let sol = lloyd(sorted, init);
        if best.as_ref().is_none_or(|b| sol.sse < b.sse) {
            best = Some(sol);
        }
    }
    best.expect("at least one restart")
}

/// Solutions at `2^b` clusters for `b = 0..=b_max`. Level `b` adds a restart
/// seeded by splitting every centroid of level `b−1`, so the squared error
/// never increases with `b`.
pub fn kmeans_ladder(values: &[f64], b_max: u8, seed: u64) -> Vec<KMeans1d> {
    assert!(!values.is_empty(), "kmeans_ladder needs data");
    let distinct = distinct_sorted(values);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out: Vec<KMeans1d> = Vec::with_capacity(b_max as usize + 1);
    for b in 0..=b_max {
        let k = 1usize << b;
        let sol = if k >= distinct.len() {
            KMeans1d {
                centroids: distinct.clone(),
                sse: 0.0,
            }
        } else {
            let warm = out.last().map(|prev| split(&prev.centroids, &sorted));
            let sol = run_restarts(&sorted, k, seed, warm);
            match out.last() {
                Some(prev) if sol.sse > prev.sse => prev.clone(),
                _ => sol,
            }
        };
        out.push(sol);
    }
    out
}

/// Doubles a centroid set by nudging each centroid both ways.
fn split(centroids: &[f64], sorted: &[f64]) -> Vec<f64> {
    let spread = (sorted[sorted.len() - 1] - sorted[0]).max(f64::MIN_POSITIVE);
    let eps = spread * 1e-6;
    let mut out: Vec<f64> = centroids.iter().flat_map(|&c| [c - eps, c + eps]).collect();
    out.sort_by(f64::total_cmp);
    out
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    /// Exact 1-D k-means by dynamic programming over sorted values.
    fn optimal_sse(values: &[f64], k: usize) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mut s1 = vec![0.0; n + 1];
        let mut s2 = vec![0.0; n + 1];
        for i in 0..n {
            s1[i + 1] = s1[i] + v[i];
            s2[i + 1] = s2[i] + v[i] * v[i];
        }
        let cost = |i: usize, j: usize| {
            let m = (j - i) as f64;
            let s = s1[j] - s1[i];
            (s2[j] - s2[i]) - s * s / m
        };
        let mut dp = vec![f64::INFINITY; n + 1];
        dp[0] = 0.0;
        for _ in 0..k {
            let mut next = vec![f64::INFINITY; n + 1];
            next[0] = 0.0;
            for j in 1..=n {
                for i in 0..j {
                    next[j] = next[j].min(dp[i] + cost(i, j));
                }
            }
            dp = next;
        }
        dp[n]
    }

    #[test]
    fn separable_clusters() {
        let r = kmeans_1d(&[1.0, 1.0, 5.0, 5.0], 2, 0);
        assert_eq!(r.centroids, vec![1.0, 5.0]);
        assert_eq!(r.sse, 0.0);
    }

    #[test]
    fn one_cluster_is_the_mean() {
        let v = [1.0, 2.0, 4.0, 9.0];
        let r = kmeans_1d(&v, 1, 0);
        assert!((r.centroids[0] - 4.0).abs() < 1e-12);
        let closed: f64 = v.iter().map(|x| (x - 4.0f64).powi(2)).sum();
        assert!((r.sse - closed).abs() < 1e-12);
    }

    #[test]
    fn too_many_clusters_returns_distinct_values() {
        let r = kmeans_1d(&[3.0, 1.0, 3.0], 4, 0);
        assert_eq!(r.centroids, vec![1.0, 3.0]);
        assert_eq!(r.sse, 0.0);
    }

    #[test]
    fn nearest_breaks_ties_low() {
        assert_eq!(nearest(&[-1.0, 1.0], 0.0), 0);
        assert_eq!(nearest(&[-1.0, 1.0], 0.3), 1);
        assert_eq!(nearest(&[-1.0, 1.0], -7.0), 0);
        assert_eq!(nearest(&[-1.0, 1.0], 7.0), 1);
    }

    #[test]
    fn close_to_dynamic_programming_optimum() {
        let mut r = rng::stream(5, "test", 0);
        let v: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut r)).collect();
        let got = kmeans_1d(&v, 4, 1).sse;
        let opt = optimal_sse(&v, 4);
        assert!(got <= opt * 1.02, "{got} vs optimum {opt}");
    }

    #[test]
    fn exact_matches_optimum_with_ties() {
        let mut r = rng::stream(6, "test", 0);
        for k in [2, 3, 8] {
            let v: Vec<f64> = (0..40)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut r);
                    (g * 4.0).round()
                })
                .collect();
            let got = kmeans_1d(&v, k, 0);
            assert!((got.sse - optimal_sse(&v, k)).abs() < 1e-9);
            assert!(got.centroids.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn lloyd_fallback_is_a_reasonable_clustering() {
        let mut r = rng::stream(7, "test", 0);
        let mut v: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut r)).collect();
        v.sort_by(f64::total_cmp);
        let got = lloyd_restarts(&v, 4, 3, None);
        assert!(got.sse <= optimal_sse(&v, 4) * 1.1);
        assert_eq!(got.centroids.len(), 4);
    }

    #[test]
    fn ladder_is_monotone() {
        let mut r = rng::stream(9, "test", 0);
        for trial in 0..20 {
            let v: Vec<f64> = (0..100)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut r);
                    g.powi(3)
                })
                .collect();
            let ladder = kmeans_ladder(&v, 6, trial);
            for w in ladder.windows(2) {
                assert!(w[1].sse <= w[0].sse);
            }
            for (b, lvl) in ladder.iter().enumerate() {
                assert!(lvl.centroids.len() <= 1 << b);
                assert!((sse_nearest(&v, &lvl.centroids) - lvl.sse).abs() < 1e-9 * lvl.sse.max(1.0));
            }
        }
    }
}
