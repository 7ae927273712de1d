use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::encoder::EvalEncoder;
use crate::metrics::stats::{fit_gaussian, frechet_distance};
use crate::util::gather_batch;

/// Minimum image count per set for a stable covariance fit.
pub const MIN_SET_SIZE: usize = 64;

/// Fréchet distance between encoder-feature Gaussians of two image sets.
/// Absolute values are specific to the fitted encoder; only comparisons made
/// with the identical encoder instance are meaningful.
pub fn fid_desk(real: &Tensor, generated: &Tensor, enc: &EvalEncoder) -> Result<f64> {
    for (name, set) in [("real", real), ("generated", generated)] {
        if set.shape()[0] < MIN_SET_SIZE {
            return Err(Error::InvalidArgument(format!(
                "{name} set has {} images, need at least {MIN_SET_SIZE}",
                set.shape()[0]
            )));
        }
    }
    let fa = fit_gaussian(&enc.embed_set(real)?)?;
    let fb = fit_gaussian(&enc.embed_set(generated)?)?;
    frechet_distance(&fa, &fb)
}

/// Perceptual-distance proxy: for each image pair, the L2 distance between
/// unit-normalized activations of every intermediate encoder layer, averaged
/// over layers, then over pairs.
pub fn perceptual_proxy(pairs: &[(Tensor, Tensor)], enc: &EvalEncoder) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no image pairs".into()));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let fa = enc.features(a)?;
        let fb = enc.features(b)?;
        let mut per_layer = 0.0;
        for (la, lb) in fa.layers.iter().zip(&fb.layers) {
            per_layer += unit_l2_distance(la.data(), lb.data());
        }
        total += per_layer / fa.layers.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

fn unit_l2_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x / na - y / nb;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Convenience: pairs up the first `count` images of two equally sized sets.
pub fn paired(real: &Tensor, generated: &Tensor, count: usize) -> Vec<(Tensor, Tensor)> {
    let n = count.min(real.shape()[0]).min(generated.shape()[0]);
    (0..n)
        .map(|i| {
            (
                gather_batch(real, &[i]),
                gather_batch(generated, &[i]),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::encoder::EvalEncoder;
    use crate::util::{randn_tensor, seeded_rng, streams};

    fn test_encoder(seed: u64) -> EvalEncoder {
        let mut rng = seeded_rng(seed, streams::ENCODER_INIT);
        EvalEncoder::new(64, &mut rng).unwrap()
    }

    #[test]
    fn fid_of_a_set_with_itself_is_zero() {
        let enc = test_encoder(1);
        let mut rng = seeded_rng(1, 0);
        let imgs = randn_tensor(&mut rng, &[64, 1, 64, 64]);
        let d = fid_desk(&imgs, &imgs, &enc).unwrap();
        assert!(d < 1e-8, "{d}");
    }

    #[test]
    fn fid_is_symmetric_and_permutation_invariant() {
        let enc = test_encoder(2);
        let mut rng = seeded_rng(2, 0);
        let a = randn_tensor(&mut rng, &[64, 1, 64, 64]);
        let b = randn_tensor(&mut rng, &[64, 1, 64, 64]);
        let ab = fid_desk(&a, &b, &enc).unwrap();
        let ba = fid_desk(&b, &a, &enc).unwrap();
        assert!((ab - ba).abs() < 1e-8);

        // permute a's images; Gaussian fit is order-free
        let idx: Vec<usize> = (0..64).rev().collect();
        let a_perm = gather_batch(&a, &idx);
        let ab2 = fid_desk(&a_perm, &b, &enc).unwrap();
        assert!((ab - ab2).abs() < 1e-8);
    }

    #[test]
    fn fid_rejects_undersized_sets() {
        let enc = test_encoder(3);
        let mut rng = seeded_rng(3, 0);
        let a = randn_tensor(&mut rng, &[10, 1, 64, 64]);
        let b = randn_tensor(&mut rng, &[64, 1, 64, 64]);
        assert!(fid_desk(&a, &b, &enc).is_err());
    }

    #[test]
    fn proxy_zero_on_identical_pairs_and_nonnegative() {
        let enc = test_encoder(4);
        let mut rng = seeded_rng(4, 0);
        let imgs = randn_tensor(&mut rng, &[4, 1, 64, 64]);
        let pairs = paired(&imgs, &imgs, 4);
        let p = perceptual_proxy(&pairs, &enc).unwrap();
        assert_eq!(p, 0.0);

        let other = randn_tensor(&mut rng, &[4, 1, 64, 64]);
        let pairs = paired(&imgs, &other, 4);
        assert!(perceptual_proxy(&pairs, &enc).unwrap() > 0.0);
    }

    #[test]
    fn proxy_orders_negation_above_small_noise() {
        let enc = test_encoder(5);
        let mut rng = seeded_rng(5, 0);
        let raw = randn_tensor(&mut rng, &[6, 1, 64, 64]);
        let imgs = Tensor::new(
            raw.shape(),
            raw.data().iter().map(|v| v.tanh()).collect(),
        )
        .unwrap();
        let negated = Tensor::new(
            imgs.shape(),
            imgs.data().iter().map(|v| -v).collect(),
        )
        .unwrap();
        let noise = randn_tensor(&mut rng, imgs.shape());
        let noisy = Tensor::new(
            imgs.shape(),
            imgs.data()
                .iter()
                .zip(noise.data())
                .map(|(v, n)| (v + 0.01 * n).clamp(-1.0, 1.0))
                .collect(),
        )
        .unwrap();
        let p_neg = perceptual_proxy(&paired(&imgs, &negated, 6), &enc).unwrap();
        let p_noise = perceptual_proxy(&paired(&imgs, &noisy, 6), &enc).unwrap();
        assert!(
            p_neg > p_noise,
            "negation {p_neg} should exceed small noise {p_noise}"
        );
    }
}
