//! Squared maximum mean discrepancy with a mixture of RBF kernels.
//!
//! The estimator is the unbiased U-statistic
//!
//! ```text
//! MMD^2 = mean_{i != j} k(x_i, x_j) + mean_{i != j} k(y_i, y_j) - 2 mean_{i, j} k(x_i, y_j)
//! k(a, b) = sum_s exp(-|a - b|^2 / (2 s^2))
//! ```
//!
//! It can go slightly negative when the two samples share a distribution;
//! reported values are clipped at 0.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Multipliers of the median pairwise distance used as bandwidths.
pub const BANDWIDTH_SCALES: [f64; 3] = [0.5, 1.0, 2.0];

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn pooled(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::EmptyDataset(format!(
            "MMD needs at least 2 samples per side, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    Matrix::vstack(&[x, y])
}

/// Median Euclidean distance over all distinct pairs of the pooled sample
/// (1 if every pair coincides).
pub fn median_distance(x: &Matrix, y: &Matrix) -> Result<f64> {
    let z = pooled(x, y)?;
    let n = z.rows();
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(z.row(i), z.row(j)).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 0 { (d[mid - 1] + d[mid]) / 2.0 } else { d[mid] };
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// Median heuristic times [`BANDWIDTH_SCALES`].
pub fn default_bandwidths(x: &Matrix, y: &Matrix) -> Result<Vec<f64>> {
    let m = median_distance(x, y)?;
    Ok(BANDWIDTH_SCALES.iter().map(|s| s * m).collect())
}

/// Kernel matrix of the pooled sample.
pub fn kernel_matrix(z: &Matrix, bandwidths: &[f64]) -> Result<Matrix> {
    if bandwidths.is_empty() || bandwidths.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Config("bandwidths must be positive and finite".into()));
    }
    let n = z.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let d2 = sq_dist(z.row(i), z.row(j));
            let v: f64 = bandwidths.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum();
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    Ok(k)
}

/// Unbiased estimate from a pooled kernel matrix, where `idx[..n]` indexes
/// the first sample and `idx[n..]` the second.
fn mmd2_indexed(k: &Matrix, idx: &[usize], n: usize) -> f64 {
    let (xs, ys) = idx.split_at(n);
    let within = |s: &[usize]| {
        let mut t = 0.0;
        for (a, &i) in s.iter().enumerate() {
            for (b, &j) in s.iter().enumerate() {
                if a != b {
                    t += k.get(i, j);
                }
            }
        }
        t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for &i in xs {
        for &j in ys {
            cross += k.get(i, j);
        }
    }
    within(xs) + within(ys) - 2.0 * cross / (xs.len() * ys.len()) as f64
}

/// The raw (possibly negative) unbiased estimate.
pub fn mmd2_unbiased(x: &Matrix, y: &Matrix, bandwidths: &[f64]) -> Result<f64> {
    let z = pooled(x, y)?;
    let k = kernel_matrix(&z, bandwidths)?;
    let idx: Vec<usize> = (0..z.rows()).collect();
    Ok(mmd2_indexed(&k, &idx, x.rows()))
}

/// Reported squared MMD: the unbiased estimate clipped below at 0.
pub fn mmd_rbf(x: &Matrix, y: &Matrix, bandwidths: &[f64]) -> Result<f64> {
    Ok(mmd2_unbiased(x, y, bandwidths)?.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdEstimate {
    pub raw: f64,
    pub reported: f64,
    /// Standard deviation of the estimate under random relabelling of the
    /// pooled sample.
    pub std_err: f64,
}

/// Estimate plus a permutation-null standard error.
pub fn mmd_with_std_err(
    x: &Matrix,
    y: &Matrix,
    bandwidths: &[f64],
    permutations: usize,
    seed: u64,
) -> Result<MmdEstimate> {
    let z = pooled(x, y)?;
    let k = kernel_matrix(&z, bandwidths)?;
    let mut idx: Vec<usize> = (0..z.rows()).collect();
    let raw = mmd2_indexed(&k, &idx, x.rows());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let null: Vec<f64> = (0..permutations)
        .map(|_| {
            idx.shuffle(&mut rng);
            mmd2_indexed(&k, &idx, x.rows())
        })
        .collect();
    let std_err = if null.len() < 2 {
        0.0
    } else {
        let mean = null.iter().sum::<f64>() / null.len() as f64;
        (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt()
    };
    Ok(MmdEstimate {
        raw,
        reported: raw.max(0.0),
        std_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn cloud(n: usize, d: usize, mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
        let dist = Normal::new(mean, std).unwrap();
        Matrix::from_vec(n, d, (0..n * d).map(|_| dist.sample(rng)).collect()).unwrap()
    }

    /// Direct double sums with no shared code path.
    fn brute(x: &Matrix, y: &Matrix, bw: &[f64]) -> f64 {
        let k = |a: &[f64], b: &[f64]| {
            let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
            bw.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>()
        };
        let (n, m) = (x.rows(), y.rows());
        let mut xx = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    xx += k(x.row(i), x.row(j));
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    yy += k(y.row(i), y.row(j));
                }
            }
        }
        let mut xy = 0.0;
        for i in 0..n {
            for j in 0..m {
                xy += k(x.row(i), y.row(j));
            }
        }
        xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64 - 2.0 * xy / (n * m) as f64
    }

    #[test]
    fn identical_sets_report_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = cloud(10, 3, 0.0, 1.0, &mut rng);
        let bw = default_bandwidths(&x, &x).unwrap();
        assert!(mmd2_unbiased(&x, &x, &bw).unwrap() <= 0.0);
        assert_eq!(mmd_rbf(&x, &x, &bw).unwrap(), 0.0);
    }

    #[test]
    fn separated_clouds_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(50, 2, 5.0, 0.1, &mut rng);
        let y = cloud(50, 2, -5.0, 0.1, &mut rng);
        let bw = default_bandwidths(&x, &y).unwrap();
        let est = mmd_rbf(&x, &y, &bw).unwrap();
        assert!(est > 0.5, "{est}");
        assert!((mmd2_unbiased(&x, &y, &bw).unwrap() - brute(&x, &y, &bw)).abs() < 1e-10);
    }

    #[test]
    fn random_halves_are_within_three_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut outside = 0;
        for r in 0..20 {
            let z = cloud(60, 3, 0.0, 1.0, &mut rng);
            let mut rows: Vec<usize> = (0..60).collect();
            rows.shuffle(&mut rng);
            let pick = |s: &[usize]| Matrix::from_rows(&s.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>());
            let (x, y) = (pick(&rows[..30]), pick(&rows[30..]));
            let bw = default_bandwidths(&x, &y).unwrap();
            let e = mmd_with_std_err(&x, &y, &bw, 200, r).unwrap();
            if e.raw.abs() > 3.0 * e.std_err {
                outside += 1;
            }
        }
        assert!(outside <= 1, "{outside} of 20 resamples outside 3 SE");
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let x = Matrix::zeros(1, 2);
        let y = Matrix::zeros(3, 2);
        assert!(mmd_rbf(&x, &y, &[1.0]).is_err());
        assert!(mmd_rbf(&y, &y, &[]).is_err());
    }
}
