use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Sample mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major dim x dim, symmetric.
    pub cov: Vec<f64>,
    pub dim: usize,
}

/// Covariance ridge applied when the sample count does not exceed the
/// feature dimension.
pub const COV_RIDGE: f64 = 1e-6;

pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianStats> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("no feature vectors".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::InvalidArgument("ragged feature vectors".into()));
    }
    let n = features.len();
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    if n > 1 {
        for f in features {
            for i in 0..dim {
                let di = f[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (f[j] - mean[j]);
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / denom;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
    }
    if n <= dim {
        for i in 0..dim {
            cov[i * dim + i] += COV_RIDGE;
        }
    }
    Ok(GaussianStats { mean, cov, dim })
}

/// Squared Fréchet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + Tr(Ca + Cb - 2 (Ca Cb)^(1/2))`, with the matrix square
/// root taken through the symmetric product `Ca^(1/2) Cb Ca^(1/2)` and
/// negative eigenvalues floored at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::ShapeMismatch {
            left: vec![a.dim],
            right: vec![b.dim],
        });
    }
    let dim = a.dim;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let trace_a: f64 = (0..dim).map(|i| a.cov[i * dim + i]).sum();
    let trace_b: f64 = (0..dim).map(|i| b.cov[i * dim + i]).sum();

    let ca = DMatrix::from_row_slice(dim, dim, &a.cov);
    let cb = DMatrix::from_row_slice(dim, dim, &b.cov);
    let sqrt_a = psd_sqrt(&ca);
    let inner = &sqrt_a * cb * &sqrt_a;
    // symmetrize against round-off before the eigensolve
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let trace_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();

    Ok((mean_term + trace_a + trace_b - 2.0 * trace_sqrt).max(0.0))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_features_have_zero_covariance() {
        let feats = vec![vec![1.0, 2.0]; 40];
        let g = fit_gaussian(&feats).unwrap();
        assert_eq!(g.mean, vec![1.0, 2.0]);
        assert!(g.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unbiased_variance_on_two_samples() {
        let g = fit_gaussian(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(g.mean, vec![1.0]);
        // n <= dim is false here (2 > 1), so no ridge
        assert!((g.cov[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn matches_uncentered_moment_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let n = 50;
        let dim = 4;
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let g = fit_gaussian(&feats).unwrap();

        // Independent oracle on the uncentered second moment:
        // cov = (sum x x^T - n mu mu^T) / (n - 1)
        for i in 0..dim {
            for j in 0..dim {
                let sum_xy: f64 = feats.iter().map(|f| f[i] * f[j]).sum();
                let expect =
                    (sum_xy - n as f64 * g.mean[i] * g.mean[j]) / (n as f64 - 1.0);
                assert!(
                    (g.cov[i * dim + j] - expect).abs() < 1e-12,
                    "cov[{i},{j}]"
                );
            }
        }
    }

    #[test]
    fn frechet_of_identical_stats_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let feats: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let g = fit_gaussian(&feats).unwrap();
        assert!(frechet_distance(&g, &g).unwrap() < 1e-8);
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        let a = GaussianStats {
            mean: vec![0.0],
            cov: vec![1.0],
            dim: 1,
        };
        let b = GaussianStats {
            mean: vec![1.0],
            cov: vec![1.0],
            dim: 1,
        };
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_matches_diagonal_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for case in 0..20 {
            let dim = rng.gen_range(2..12);
            let ma: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mb: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let va: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.1..4.0)).collect();
            let vb: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.1..4.0)).collect();
            let diag = |v: &[f64]| {
                let mut c = vec![0.0; v.len() * v.len()];
                for (i, &x) in v.iter().enumerate() {
                    c[i * v.len() + i] = x;
                }
                c
            };
            let a = GaussianStats {
                mean: ma.clone(),
                cov: diag(&va),
                dim,
            };
            let b = GaussianStats {
                mean: mb.clone(),
                cov: diag(&vb),
                dim,
            };
            let got = frechet_distance(&a, &b).unwrap();
            let expect: f64 = (0..dim)
                .map(|i| {
                    (ma[i] - mb[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2)
                })
                .sum();
            assert!(
                (got - expect).abs() < 1e-8,
                "case {case}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let sample = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..60)
                .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        let a = fit_gaussian(&sample(&mut rng)).unwrap();
        let b = fit_gaussian(&sample(&mut rng)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab >= 0.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = GaussianStats {
            mean: vec![0.0],
            cov: vec![1.0],
            dim: 1,
        };
        let b = GaussianStats {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
            dim: 2,
        };
        assert!(frechet_distance(&a, &b).is_err());
    }
}
