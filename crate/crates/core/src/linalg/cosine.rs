use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LinalgError, Result, Vector};
use crate::Scalar;

/// `uᵀv / (‖u‖‖v‖)`, clamped to `[-1, 1]` against rounding.
pub fn cosine<S: Scalar>(u: &Vector<S>, v: &Vector<S>) -> Result<S> {
    let d = u.dot(v)?;
    let (nu, nv) = (u.norm(), v.norm());
    if nu == S::zero() || nv == S::zero() {
        return Err(LinalgError::ZeroVector);
    }
    Ok((d / (nu * nv)).max(-S::one()).min(S::one()))
}

/// Expected `|cos|` between two independent isotropic vectors in `dim`
/// dimensions, to leading order: `sqrt(2 / (π·dim))`.
pub fn random_abs_cosine_baseline(dim: usize) -> f64 {
    (2.0 / (std::f64::consts::PI * dim as f64)).sqrt()
}

/// Summary statistics over a set of cosine values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub mean_abs: f64,
    /// Standard error of `mean_abs`.
    pub std_err_abs: f64,
}

impl CosineSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mean_abs = values.iter().map(|v| v.abs()).sum::<f64>() / n;
        let std_err_abs = if values.len() > 1 {
            let var = values.iter().map(|v| (v.abs() - mean_abs).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Some(Self {
            count: values.len(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            mean_abs,
            std_err_abs,
        })
    }

    /// Whether `mean_abs` lies within `k` standard errors of `target`.
    pub fn within_std_errs(&self, target: f64, k: f64) -> bool {
        (self.mean_abs - target).abs() <= k * self.std_err_abs
    }
}

/// Cosines between `pairs` independent pairs of isotropic Gaussian vectors,
/// the empirical counterpart of [`random_abs_cosine_baseline`].
pub fn random_pair_cosines(dim: usize, pairs: usize, seed: u64) -> Result<CosineSummary> {
    if dim == 0 {
        return Err(LinalgError::EmptyVector);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw =
        || -> Result<Vector<f64>> { Vector::new((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()) };
    let values = (0..pairs)
        .map(|_| {
            let u = draw()?;
            let v = draw()?;
            cosine(&u, &v)
        })
        .collect::<Result<Vec<f64>>>()?;
    CosineSummary::from_values(&values).ok_or(LinalgError::TooFewRows { needed: 1, got: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_pairs_near_baseline() {
        let s = random_pair_cosines(256, 2000, 5).unwrap();
        assert_eq!(s.count, 2000);
        assert!(s.within_std_errs(random_abs_cosine_baseline(256), 4.0), "{s:?}");
        assert_eq!(s, random_pair_cosines(256, 2000, 5).unwrap());
        assert!(random_pair_cosines(0, 3, 0).is_err());
        assert!(random_pair_cosines(4, 0, 0).is_err());
    }

    #[test]
    fn basic_values() {
        let v = Vector::<f64>::new(vec![0.3, -2.0, 5.0]).unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let e1 = Vector::<f64>::basis(3, 0);
        let e2 = Vector::<f64>::basis(3, 1);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        assert_eq!(cosine(&e1, &e1.neg()).unwrap(), -1.0);
    }

    #[test]
    fn errors() {
        let z = Vector::<f64>::zeros(3);
        let e1 = Vector::<f64>::basis(3, 0);
        assert_eq!(cosine(&z, &e1), Err(LinalgError::ZeroVector));
        assert!(matches!(
            cosine(&e1, &Vector::basis(2, 0)),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn summary() {
        let s = CosineSummary::from_values(&[-0.06, 0.11, 0.02, -0.01]).unwrap();
        assert_eq!(s.count, 4);
        assert_eq!(s.min, -0.06);
        assert_eq!(s.max, 0.11);
        assert!((s.mean_abs - 0.05).abs() < 1e-15);
        assert!(CosineSummary::from_values(&[]).is_none());
    }
}
