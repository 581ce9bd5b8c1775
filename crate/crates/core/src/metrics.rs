//! Distribution distances between sample sets.
//!
//! The sliced 2-Wasserstein distance projects both sets onto random unit
//! directions and averages the exact 1-D 2-Wasserstein distance between the
//! projected empirical distributions. The 1-D distance integrates the squared
//! difference of the two empirical quantile functions over `[0, 1]`; with
//! equal sample counts this is the sorted-sample pairing.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_PROJECTIONS: usize = 128;

/// `n` unit directions in `dim` dimensions, each uniform on the sphere.
///
/// Directions come in blocks of `dim` mutually orthogonal vectors (a random
/// orthonormal frame per block), which lowers the variance of the sliced
/// average without biasing it.
pub fn random_directions(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    let mut dirs = Array2::<f64>::zeros((n, dim));
    let mut row = 0;
    while row < n {
        let block = dim.min(n - row);
        let mut frame: Vec<Array1<f64>> = Vec::with_capacity(dim);
        while frame.len() < dim {
            let mut v = Array1::from_shape_fn(dim, |_| rng::normal(&mut r));
            for u in &frame {
                let proj = v.dot(u);
                v.scaled_add(-proj, u);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                frame.push(v / norm);
            }
        }
        for (i, u) in frame.iter().take(block).enumerate() {
            dirs.row_mut(row + i).assign(u);
        }
        row += block;
    }
    dirs
}

/// Exact 2-Wasserstein distance between two 1-D empirical distributions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        return (sq / na as f64).sqrt();
    }
    // Walk the merged breakpoints i/na and j/nb of the two quantile functions;
    // compare as integers i·nb vs j·na to avoid rounding.
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0u128;
    let total = (na as u128) * (nb as u128);
    let mut acc = 0.0;
    while i < na && j < nb {
        let next_a = (i as u128 + 1) * nb as u128;
        let next_b = (j as u128 + 1) * na as u128;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += d * d * (next - prev) as f64;
        prev = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    (acc / total as f64).sqrt()
}

fn check_sets(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidInput("sample sets must be non-empty".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Sliced W2 over explicit directions.
pub fn sliced_wasserstein_with(a: &Array2<f64>, b: &Array2<f64>, directions: &Array2<f64>) -> Result<f64> {
    check_sets(a, b)?;
    if directions.ncols() != a.ncols() || directions.nrows() == 0 {
        return Err(Error::InvalidInput("directions do not match data dimension".into()));
    }
    let per_dir: Vec<f64> = (0..directions.nrows())
        .into_par_iter()
        .map(|i| {
            let d = directions.row(i);
            let pa: Vec<f64> = a.dot(&d).to_vec();
            let pb: Vec<f64> = b.dot(&d).to_vec();
            wasserstein_1d(&pa, &pb)
        })
        .collect();
    // reduction in projection order
    Ok(per_dir.iter().sum::<f64>() / per_dir.len() as f64)
}

pub fn sliced_wasserstein(a: &Array2<f64>, b: &Array2<f64>, n_proj: usize, seed: u64) -> Result<f64> {
    check_sets(a, b)?;
    if n_proj == 0 {
        return Err(Error::InvalidInput("need at least one projection".into()));
    }
    sliced_wasserstein_with(a, b, &random_directions(n_proj, a.ncols(), seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sliced_wasserstein: f64,
    /// Per-coordinate `mean(B) − mean(A)`.
    pub mean_error: Vec<f64>,
    /// Frobenius norm of `cov(B) − cov(A)`.
    pub covariance_error: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub n_projections: usize,
    pub projection_seed: u64,
}

fn covariance(x: &Array2<f64>, mean: &Array1<f64>) -> Array2<f64> {
    let centered = x - mean;
    let denom = (x.nrows().max(2) - 1) as f64;
    centered.t().dot(&centered) / denom
}

pub fn moment_report(a: &Array2<f64>, b: &Array2<f64>, n_proj: usize, seed: u64) -> Result<MetricReport> {
    let sw = sliced_wasserstein(a, b, n_proj, seed)?;
    let ma = a.mean_axis(Axis(0)).expect("non-empty");
    let mb = b.mean_axis(Axis(0)).expect("non-empty");
    let cov_diff = covariance(b, &mb) - covariance(a, &ma);
    Ok(MetricReport {
        sliced_wasserstein: sw,
        mean_error: (&mb - &ma).to_vec(),
        covariance_error: cov_diff.iter().map(|v| v * v).sum::<f64>().sqrt(),
        n_a: a.nrows(),
        n_b: b.nrows(),
        n_projections: n_proj,
        projection_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_dataset, DatasetKind};
    use ndarray::arr2;
    use proptest::prelude::*;

    fn gaussian(n: usize, mean: [f64; 2], seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        Array2::from_shape_fn((n, 2), |(_, d)| mean[d] + rng::normal(&mut r))
    }

    #[test]
    fn identical_sets_are_zero() {
        let a = gaussian(500, [0.0, 0.0], 1);
        assert_eq!(sliced_wasserstein(&a, &a, 32, 3).unwrap(), 0.0);
        let r = moment_report(&a, &a, 32, 3).unwrap();
        assert_eq!(r.mean_error, vec![0.0, 0.0]);
        assert_eq!(r.covariance_error, 0.0);
    }

    #[test]
    fn point_masses() {
        let a = arr2(&[[0.0]]);
        let b = arr2(&[[2.5]]);
        assert!((sliced_wasserstein(&a, &b, 16, 1).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn unequal_sizes_use_quantile_coupling() {
        // {0, 1} vs {0, 0.5, 1}: quantiles differ by 0.5 on [1/3, 1/2) and
        // by 0.5 on [1/2, 2/3) → W2² = 0.25·(1/3)
        let w = wasserstein_1d(&[0.0, 1.0], &[0.0, 0.5, 1.0]);
        assert!((w - (0.25f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn shifted_gaussians_average_abs_cosine() {
        let a = gaussian(100_000, [0.0, 0.0], 1);
        let b = gaussian(100_000, [1.0, 0.0], 2);
        let sw = sliced_wasserstein(&a, &b, 128, 7).unwrap();
        assert!((sw - 2.0 / std::f64::consts::PI).abs() < 0.02, "{sw}");
    }

    #[test]
    fn shift_shows_in_moments() {
        let a = gaussian(200, [0.0, 0.0], 3);
        let b = &a + &ndarray::arr1(&[1.0, 0.0]);
        let r = moment_report(&a, &b, 16, 1).unwrap();
        assert!((r.mean_error[0] - 1.0).abs() < 1e-12 && r.mean_error[1].abs() < 1e-12);
        assert!(r.covariance_error < 1e-12);
    }

    #[test]
    fn same_mixture_has_small_distance() {
        let a = make_dataset(DatasetKind::Gmm2d, 100_000, 1).unwrap();
        let b = make_dataset(DatasetKind::Gmm2d, 100_000, 2).unwrap();
        assert!(sliced_wasserstein(&a, &b, 128, 5).unwrap() < 0.02);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Array2::zeros((3, 2));
        let b = Array2::zeros((3, 3));
        assert!(matches!(sliced_wasserstein(&a, &b, 4, 0), Err(Error::InvalidInput(_))));
    }

    fn small_set() -> impl Strategy<Value = Array2<f64>> {
        (1usize..12).prop_flat_map(|n| {
            prop::collection::vec(-5.0f64..5.0, 2 * n)
                .prop_map(move |v| Array2::from_shape_vec((n, 2), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn symmetric(a in small_set(), b in small_set()) {
            let ab = sliced_wasserstein(&a, &b, 16, 9).unwrap();
            let ba = sliced_wasserstein(&b, &a, 16, 9).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn triangle(a in small_set(), b in small_set(), c in small_set()) {
            let ac = sliced_wasserstein(&a, &c, 16, 9).unwrap();
            let ab = sliced_wasserstein(&a, &b, 16, 9).unwrap();
            let bc = sliced_wasserstein(&b, &c, 16, 9).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn scales_linearly(a in small_set(), b in small_set(), c in 0.1f64..10.0) {
            let base = sliced_wasserstein(&a, &b, 16, 9).unwrap();
            let scaled = sliced_wasserstein(&(&a * c), &(&b * c), 16, 9).unwrap();
            prop_assert!((scaled - c * base).abs() <= 1e-9 * (1.0 + c * base));
        }
    }
}
