use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::TraceDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMethod {
    /// Exact 1-D Wasserstein-1 between per-slot marginals, averaged over slots.
    #[default]
    MarginalW1,
    /// Exact optimal transport with squared-l2 cost between equal-size
    /// subsamples, reported as the root of the mean matched cost.
    OtL2 {
        max_points: usize,
        seed: u64,
    },
}

impl DistanceMethod {
    pub fn ot_l2() -> Self {
        DistanceMethod::OtL2 {
            max_points: 256,
            seed: 0,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            DistanceMethod::MarginalW1 => "marginal_w1",
            DistanceMethod::OtL2 { .. } => "ot_l2",
        }
    }
}

impl FromStr for DistanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal_w1" | "w1" => Ok(Self::MarginalW1),
            "ot_l2" | "ot" => Ok(Self::ot_l2()),
            other => Err(Error::Argument(format!("unknown distance method {other:?}"))),
        }
    }
}

/// Wasserstein-1 distance between two 1-D empirical measures of any sizes.
fn w1_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        let fa = i as f64 / na;
        let fb = j as f64 / nb;
        total += (fa - fb).abs() * (next - prev);
        prev = next;
        while i < a.len() && a[i] <= next {
            i += 1;
        }
        while j < b.len() && b[j] <= next {
            j += 1;
        }
    }
    total
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method,
/// O(n³)). Returns `assign[row] = col`.
pub fn assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-indexed potentials; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Distribution-shift distance between two datasets in token units.
pub fn wasserstein_distance(
    d1: &TraceDataset,
    d2: &TraceDataset,
    method: DistanceMethod,
) -> Result<f64> {
    if d1.is_empty() || d2.is_empty() {
        return Err(Error::Argument("distance needs non-empty datasets".into()));
    }
    if d1.seq_len() != d2.seq_len() {
        return Err(Error::Shape(format!(
            "sequence lengths differ: {} vs {}",
            d1.seq_len(),
            d2.seq_len()
        )));
    }
    let l = d1.seq_len();
    match method {
        DistanceMethod::MarginalW1 => {
            let mut total = 0.0;
            for slot in 0..l {
                let mut a: Vec<f64> = d1.sequences.iter().map(|s| s[slot]).collect();
                let mut b: Vec<f64> = d2.sequences.iter().map(|s| s[slot]).collect();
                total += w1_1d(&mut a, &mut b);
            }
            Ok(total / l as f64)
        }
        DistanceMethod::OtL2 { max_points, seed } => {
            let m = d1.len().min(d2.len()).min(max_points.max(1));
            fn pick<'a>(d: &'a TraceDataset, m: usize, seed: u64, tag: &str) -> Vec<&'a Vec<f64>> {
                if d.len() == m {
                    d.sequences.iter().collect()
                } else {
                    let mut r = rng::substream(seed, tag, 0);
                    let mut idx = sample(&mut r, d.len(), m).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| &d.sequences[i]).collect()
                }
            }
            let xs = pick(d1, m, seed, "ot-left");
            let ys = pick(d2, m, seed, "ot-right");
            let cost: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| {
                    ys.iter()
                        .map(|y| x.iter().zip(y.iter()).map(|(a, b)| (a - b).powi(2)).sum())
                        .collect()
                })
                .collect();
            let assign = assignment(&cost);
            let mean = assign
                .iter()
                .enumerate()
                .map(|(i, &j)| cost[i][j])
                .sum::<f64>()
                / m as f64;
            Ok(mean.sqrt())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetMeta;

    fn ds(seqs: Vec<Vec<f64>>) -> TraceDataset {
        TraceDataset::new(seqs, 1, 1, 10.0, DatasetMeta::default()).unwrap()
    }

    #[test]
    fn w1_of_unequal_sizes() {
        // {0, 1} vs {0.5}: ∫|F1−F2| = 0.5·0.5 + 0.5·0.5 = 0.5
        assert!((w1_1d(&mut [0.0, 1.0], &mut [0.5]) - 0.5).abs() < 1e-15);
        assert_eq!(w1_1d(&mut [2.0, 3.0], &mut [3.0, 2.0]), 0.0);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut r = rng::stream(8);
        use rand::RngExt;
        for n in 1..=6 {
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| r.random_range(0.0..10.0)).collect())
                .collect();
            let assign = assignment(&cost);
            let got: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            // Enumerate every permutation.
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permutations(&mut perm, 0, &mut |p| {
                let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                best = best.min(c);
            });
            assert!((got - best).abs() < 1e-9, "n={n}: {got} vs {best}");
        }
    }

    fn permutations(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permutations(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn single_points_under_ot() {
        let a = ds(vec![vec![0.0, 0.0]]);
        let b = ds(vec![vec![3.0, 4.0]]);
        assert!((wasserstein_distance(&a, &b, DistanceMethod::ot_l2()).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn argument_errors() {
        let a = ds(vec![vec![0.0, 0.0]]);
        let e = ds(vec![]);
        assert!(wasserstein_distance(&a, &e, DistanceMethod::MarginalW1).is_err());
        let other = TraceDataset::new(vec![vec![0.0; 3]], 1, 2, 1.0, DatasetMeta::default()).unwrap();
        assert!(wasserstein_distance(&a, &other, DistanceMethod::MarginalW1).is_err());
        assert!("cosine".parse::<DistanceMethod>().is_err());
    }
}
