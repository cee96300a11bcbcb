use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Gaussian class blobs around unit-norm centers.
///
/// Each class center is a standard normal draw scaled to unit length. Samples
/// are `center + noise` with isotropic noise `N(0, spread^2 / dim * I)`, so
/// `spread` is the RMS length of the noise vector regardless of `dim`. The
/// samples are shuffled before returning.
pub fn gen_synthetic_blobs<R: Rng + ?Sized>(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if num_classes < 2 || dim < 2 || samples_per_class == 0 {
        return Err(Error::InvalidParameter(format!(
            "synthetic blobs need >= 2 classes, >= 2 dims and samples; got m={num_classes}, dim={dim}, samples_per_class={samples_per_class}"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::InvalidParameter(format!("spread must be finite and >= 0, got {spread}")));
    }
    let mut centers = Vec::with_capacity(num_classes);
    while centers.len() < num_classes {
        let c: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            centers.push(c.into_iter().map(|v| v / norm).collect::<Vec<f64>>());
        }
    }
    let sigma = spread / (dim as f64).sqrt();
    let n = num_classes * samples_per_class;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rows = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            let row: Vec<f64> = center
                .iter()
                .map(|&mu| {
                    let z: f64 = StandardNormal.sample(rng);
                    mu + sigma * z
                })
                .collect();
            rows.push((row, class));
        }
    }
    order.shuffle(rng);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for &i in &order {
        data.extend_from_slice(&rows[i].0);
        labels.push(rows[i].1);
    }
    Dataset::new(Tensor2D::from_vec(n, dim, data)?, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn zero_spread_collapses_to_centers() {
        let d = gen_synthetic_blobs(3, 4, 5, 0.0, &mut stream(1, Purpose::Data, 0, 0)).unwrap();
        assert_eq!(d.len(), 15);
        assert_eq!(d.class_counts(), vec![5, 5, 5]);
        for c in 0..3 {
            let rows: Vec<&[f64]> = (0..d.len()).filter(|&i| d.labels()[i] == c).map(|i| d.features().row(i)).collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
            let norm: f64 = rows[0].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = gen_synthetic_blobs(4, 6, 10, 0.5, &mut stream(2, Purpose::Data, 0, 0)).unwrap();
        let b = gen_synthetic_blobs(4, 6, 10, 0.5, &mut stream(2, Purpose::Data, 0, 0)).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_blobs(4, 6, 10, 0.5, &mut stream(3, Purpose::Data, 0, 0)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_parameters_rejected() {
        let mut r = stream(1, Purpose::Data, 0, 0);
        assert!(gen_synthetic_blobs(1, 4, 5, 0.1, &mut r).is_err());
        assert!(gen_synthetic_blobs(3, 1, 5, 0.1, &mut r).is_err());
        assert!(gen_synthetic_blobs(3, 4, 0, 0.1, &mut r).is_err());
        assert!(gen_synthetic_blobs(3, 4, 5, -0.1, &mut r).is_err());
    }
}
