use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Example};
use crate::error::{Error, Result};
use crate::seed::{rng_from, tag};

/// Gaussian blobs: one mean per class drawn uniformly from `[0.1, 0.9]^dim`,
/// isotropic noise with standard deviation `spread`, features clamped to
/// `[0,1]`. Examples are emitted class by class.
pub fn gen_synthetic(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if dim == 0 {
        return Err(Error::invalid("dim must be positive"));
    }
    if !(spread > 0.0) {
        return Err(Error::invalid(format!("spread must be positive, got {spread}")));
    }
    let mut mean_rng = rng_from(seed, &[tag::DATA, 0]);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| mean_rng.random_range(0.1..0.9)).collect())
        .collect();
    let mut noise_rng = rng_from(seed, &[tag::DATA, 1]);
    let mut examples = Vec::with_capacity(num_classes * n_per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            let features = mean
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    (m + spread * z).clamp(0.0, 1.0)
                })
                .collect();
            examples.push(Example { features, label });
        }
    }
    Dataset::new(examples, num_classes, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_synthetic(3, 4, 5, 0.1, 9).unwrap();
        let b = gen_synthetic(3, 4, 5, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert_eq!(a.class_histogram(), vec![5, 5, 5]);
        assert_ne!(a, gen_synthetic(3, 4, 5, 0.1, 10).unwrap());
    }

    #[test]
    fn features_stay_in_unit_range() {
        let d = gen_synthetic(4, 6, 50, 2.0, 1).unwrap();
        assert!(d.examples().iter().flat_map(|e| &e.features).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_spread() {
        assert!(gen_synthetic(2, 2, 2, 0.0, 1).is_err());
    }
}
