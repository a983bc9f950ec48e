use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffusion::BaseDistribution;
use crate::error::{contract, Result};
use crate::rewards::RewardSpec;
use crate::rng::Stream;
use crate::tensor::DenseArray;

/// One line of `metrics.jsonl`. The timestamp is the only field that
/// differs between two runs of the same configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub metric: String,
    /// `None` encodes a non-finite value.
    pub value: Option<f64>,
    pub samples: usize,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

/// What samples are compared against.
#[derive(Clone, Debug)]
pub enum Reference {
    Analytic(BaseDistribution),
    Samples(DenseArray),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricSet {
    pub samples: usize,
    pub mean_reward: Option<f64>,
    /// One-dimensional Wasserstein-1 distance (1D samples only).
    pub w1: Option<f64>,
    pub energy_distance: f64,
    /// Largest absolute gap between coordinate means.
    pub mean_gap: f64,
    /// Largest absolute gap between coordinate variances.
    pub variance_gap: f64,
}

impl MetricSet {
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![];
        if let Some(r) = self.mean_reward {
            out.push(("mean_reward", r));
        }
        if let Some(w) = self.w1 {
            out.push(("w1", w));
        }
        out.push(("energy_distance", self.energy_distance));
        out.push(("mean_gap", self.mean_gap));
        out.push(("variance_gap", self.variance_gap));
        out
    }
}

/// Fixed stream for reference draws when no closed form is available.
const REFERENCE_STREAM: (u64, u64) = (0x0e7a1, 0);

fn column(x: &DenseArray, c: usize) -> Vec<f64> {
    (0..x.rows()).map(|r| x.get(r, c)).collect()
}

fn moments(x: &DenseArray) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|c| {
            let v = column(x, c);
            let m = v.iter().sum::<f64>() / n;
            let s2 = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, s2)
        })
        .unzip()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Mean of `|x_i - x_j|` over all ordered pairs (including `i = j`).
fn mean_abs_within(s: &[f64]) -> f64 {
    let n = s.len() as f64;
    let total: f64 = s
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 + 1.0 - n) * x)
        .sum();
    2.0 * total / (n * n)
}

/// Mean of `|x_i - y_j|` over all pairs, both inputs sorted.
fn mean_abs_between(a: &[f64], b: &[f64]) -> f64 {
    let mut prefix = Vec::with_capacity(b.len() + 1);
    prefix.push(0.0);
    for v in b {
        prefix.push(prefix.last().unwrap() + v);
    }
    let total_b = prefix[b.len()];
    let m = b.len() as f64;
    let mut j = 0;
    let mut total = 0.0;
    for &x in a {
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let below = j as f64;
        total += x * below - prefix[j] + (total_b - prefix[j]) - x * (m - below);
    }
    total / (a.len() as f64 * m)
}

fn mean_norm_between(a: &DenseArray, b: &DenseArray) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            total += a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        }
    }
    total / (a.rows() * b.rows()) as f64
}

/// `E|x - Y|` for `Y ~ N(m, s2)`.
fn folded_normal_mean(x: f64, m: f64, s2: f64) -> f64 {
    let s = s2.sqrt();
    let z = (x - m) / s;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    s * (2.0 / std::f64::consts::PI).sqrt() * (-0.5 * z * z).exp() + (x - m) * (2.0 * unit.cdf(z) - 1.0)
}

fn mixture_cdf(base: &BaseDistribution, x: f64) -> f64 {
    base.weights()
        .iter()
        .zip(base.means())
        .zip(base.variances())
        .map(|((w, m), v)| w * Normal::new(m[0], v.sqrt()).expect("valid component").cdf(x))
        .sum()
}

fn mixture_quantile(base: &BaseDistribution, u: f64) -> f64 {
    if base.components() == 1 {
        let n = Normal::new(base.means()[0][0], base.variances()[0].sqrt()).expect("valid component");
        return n.inverse_cdf(u);
    }
    let spread = base.variances().iter().cloned().fold(0.0, f64::max).sqrt() * 40.0;
    let lo_m = base.means().iter().map(|m| m[0]).fold(f64::INFINITY, f64::min);
    let hi_m = base.means().iter().map(|m| m[0]).fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (lo_m - spread, hi_m + spread);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mixture_cdf(base, mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Compare samples with an analytic law or a second sample set: mean
/// reward, W1 (1D, sorted-sample formula), energy distance and moment gaps.
pub fn eval_metrics(samples: &DenseArray, reference: &Reference, reward: Option<&RewardSpec>) -> Result<MetricSet> {
    let n = samples.rows();
    let d = samples.cols();
    if n < 100 {
        return Err(contract(format!("metrics need at least 100 samples, got {n}")));
    }
    let mean_reward = match reward {
        Some(r) => {
            let v = r.eval_batch(samples)?;
            Some(v.iter().sum::<f64>() / n as f64)
        }
        None => None,
    };
    let (ma, va) = moments(samples);
    let (w1, energy, mb, vb) = match reference {
        Reference::Samples(other) => {
            if other.cols() != d {
                return Err(contract(format!("sample sets have dimensions {d} and {}", other.cols())));
            }
            if other.rows() < 100 {
                return Err(contract(format!("metrics need at least 100 samples, got {}", other.rows())));
            }
            let (mb, vb) = moments(other);
            if d == 1 {
                let a = sorted(column(samples, 0));
                let b = sorted(column(other, 0));
                let w1 = if a.len() == b.len() {
                    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64
                } else {
                    w1_unequal(&a, &b)
                };
                let e = 2.0 * mean_abs_between(&a, &b) - mean_abs_within(&a) - mean_abs_within(&b);
                (Some(w1), e, mb, vb)
            } else {
                let e = 2.0 * mean_norm_between(samples, other)
                    - mean_norm_between(samples, samples)
                    - mean_norm_between(other, other);
                (None, e, mb, vb)
            }
        }
        Reference::Analytic(base) => {
            if base.dim() != d {
                return Err(contract(format!("samples have dimension {d}, reference {}", base.dim())));
            }
            let mb = base.mean();
            let vb = base.variance();
            if d == 1 {
                let a = sorted(column(samples, 0));
                let w1 = a
                    .iter()
                    .enumerate()
                    .map(|(i, x)| (x - mixture_quantile(base, (i as f64 + 0.5) / n as f64)).abs())
                    .sum::<f64>()
                    / n as f64;
                let comps: Vec<(f64, f64, f64)> = base
                    .weights()
                    .iter()
                    .zip(base.means())
                    .zip(base.variances())
                    .map(|((w, m), v)| (*w, m[0], *v))
                    .collect();
                let cross = a
                    .iter()
                    .map(|x| comps.iter().map(|(w, m, v)| w * folded_normal_mean(*x, *m, *v)).sum::<f64>())
                    .sum::<f64>()
                    / n as f64;
                let mut within = 0.0;
                for (wi, mi, vi) in &comps {
                    for (wj, mj, vj) in &comps {
                        within += wi * wj * folded_normal_mean(0.0, mi - mj, vi + vj);
                    }
                }
                let e = 2.0 * cross - mean_abs_within(&a) - within;
                (Some(w1), e, mb, vb)
            } else {
                let mut rng = Stream::new(REFERENCE_STREAM.0, REFERENCE_STREAM.1);
                let other = DenseArray::matrix(n, d, base.sample(n, &mut rng))?;
                let e = 2.0 * mean_norm_between(samples, &other)
                    - mean_norm_between(samples, samples)
                    - mean_norm_between(&other, &other);
                (None, e, mb, vb)
            }
        }
    };
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(MetricSet {
        samples: n,
        mean_reward,
        w1,
        energy_distance: energy,
        mean_gap: gap(&ma, &mb),
        variance_gap: gap(&va, &vb),
    })
}

/// W1 between empirical measures of different sizes: integral of the
/// absolute CDF difference over the merged support.
fn w1_unequal(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut merged: Vec<f64> = a.iter().chain(b).cloned().collect();
    merged.sort_by(f64::total_cmp);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    for w in merged.windows(2) {
        while i < a.len() && a[i] <= w[0] {
            i += 1;
        }
        while j < b.len() && b[j] <= w[0] {
            j += 1;
        }
        total += (i as f64 / na - j as f64 / nb).abs() * (w[1] - w[0]);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normals(seed: u64, n: usize, shift: f64) -> DenseArray {
        let mut rng = Stream::new(seed, 0);
        DenseArray::column(rng.normals(n).into_iter().map(|v| v + shift).collect())
    }

    #[test]
    fn identical_sets_are_at_distance_zero() {
        let a = normals(1, 500, 0.0);
        let m = eval_metrics(&a, &Reference::Samples(a.clone()), None).unwrap();
        assert_eq!(m.w1, Some(0.0));
        assert!(m.energy_distance.abs() < 1e-12);
        assert_eq!(m.mean_gap, 0.0);
    }

    #[test]
    fn shifted_gaussians_have_unit_w1() {
        let a = normals(2, 10_000, 0.0);
        let b = normals(3, 10_000, 1.0);
        let m = eval_metrics(&a, &Reference::Samples(b), None).unwrap();
        assert!((m.w1.unwrap() - 1.0).abs() < 0.05, "{m:?}");
        let exact = eval_metrics(&a, &Reference::Analytic(BaseDistribution::gaussian(vec![1.0], 1.0).unwrap()), None).unwrap();
        assert!((exact.w1.unwrap() - 1.0).abs() < 0.05, "{exact:?}");
    }

    #[test]
    fn shuffling_changes_nothing() {
        let a = normals(4, 300, 0.0);
        let mut rows: Vec<f64> = a.values().to_vec();
        let mut rng = Stream::new(5, 0);
        for i in (1..rows.len()).rev() {
            rows.swap(i, rng.index(i + 1));
        }
        let b = DenseArray::column(rows);
        let m = eval_metrics(&a, &Reference::Samples(b), None).unwrap();
        assert!(m.w1.unwrap() < 1e-12 && m.energy_distance.abs() < 1e-12 && m.mean_gap < 1e-12 && m.variance_gap < 1e-12);
    }

    #[test]
    fn unequal_sizes_match_equal_formula_on_duplicates() {
        let a = sorted(vec![0.0, 1.0, 3.0]);
        let b = sorted(vec![0.0, 0.0, 1.0, 1.0, 3.0, 3.0]);
        assert!(w1_unequal(&a, &b).abs() < 1e-15);
        assert!((w1_unequal(&[0.0], &[2.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn analytic_energy_matches_sampled_reference() {
        let base = BaseDistribution::new(vec![0.3, 0.7], vec![vec![-1.0], vec![2.0]], vec![0.5, 1.0]).unwrap();
        let mut rng = Stream::new(6, 0);
        let a = DenseArray::column(base.sample(4000, &mut rng));
        let b = DenseArray::column(base.sample(4000, &mut rng));
        let exact = eval_metrics(&a, &Reference::Analytic(base), None).unwrap();
        let sampled = eval_metrics(&a, &Reference::Samples(b), None).unwrap();
        assert!(exact.energy_distance.abs() < 0.01 && sampled.energy_distance.abs() < 0.02);
        assert!(exact.w1.unwrap() < 0.1);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let a = normals(7, 200, 0.0);
        let b = DenseArray::zeros(&[200, 2]);
        assert!(matches!(eval_metrics(&a, &Reference::Samples(b), None), Err(crate::Error::Contract(_))));
        assert!(eval_metrics(&normals(8, 50, 0.0), &Reference::Samples(a), None).is_err());
    }
}
