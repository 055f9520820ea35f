//! Dense `f64` parameter-vector algebra.
//!
//! A [`ParamVector`] is the flat currency passed between the model, the
//! local-training strategies, and the server. All reductions accumulate in
//! sequential index order so results are bit-reproducible regardless of how
//! many worker threads are running.

use crate::error::{Error, Result};

/// Norm guard threshold: any norm appearing in a denominator must exceed this.
pub const NORM_GUARD: f64 = 1e-12;

/// Flat vector of model parameters or gradients.
///
/// Invariant: every stored value is finite. Constructors and arithmetic
/// operations reject non-finite results instead of propagating them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "ParamVector" });
        }
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Inner product, accumulated in index order.
    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        check_len("dot", self, other)?;
        let mut acc = 0.0;
        for (a, b) in self.values.iter().zip(&other.values) {
            acc += a * b;
        }
        if !acc.is_finite() {
            return Err(Error::NonFinite { op: "dot" });
        }
        Ok(acc)
    }

    /// Euclidean norm. Errors on an empty vector.
    pub fn norm(&self) -> Result<f64> {
        if self.values.is_empty() {
            return Err(Error::EmptyVector { op: "norm" });
        }
        Ok(self.dot(self)?.sqrt())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_len("sub", self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        ParamVector::new(values)
    }

    /// `alpha * self`.
    pub fn scale(&self, alpha: f64) -> Result<ParamVector> {
        if !alpha.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        ParamVector::new(self.values.iter().map(|v| alpha * v).collect())
    }

    /// `alpha * self + other`.
    pub fn axpy(&self, alpha: f64, other: &ParamVector) -> Result<ParamVector> {
        if !alpha.is_finite() {
            return Err(Error::NonFinite { op: "axpy" });
        }
        check_len("axpy", self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| alpha * x + y)
            .collect();
        ParamVector::new(values)
    }

    /// Cosine of the angle between two nonzero vectors.
    ///
    /// Errors when either norm falls below [`NORM_GUARD`]; callers that want
    /// to skip the term instead of aborting must guard first.
    pub fn cosine_similarity(&self, other: &ParamVector) -> Result<f64> {
        check_len("cosine_similarity", self, other)?;
        let na = self.norm()?;
        let nb = other.norm()?;
        if na <= NORM_GUARD {
            return Err(Error::ZeroNorm {
                op: "cosine_similarity",
                norm: na,
            });
        }
        if nb <= NORM_GUARD {
            return Err(Error::ZeroNorm {
                op: "cosine_similarity",
                norm: nb,
            });
        }
        Ok(self.dot(other)? / (na * nb))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }
}

fn check_len(op: &'static str, a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            op,
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn dot_sum_of_squares() {
        assert_eq!(pv(&[1.0, 2.0, 3.0]).dot(&pv(&[1.0, 2.0, 3.0])).unwrap(), 14.0);
    }

    #[test]
    fn dot_orthogonal() {
        assert_eq!(pv(&[1.0, 0.0]).dot(&pv(&[0.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn dot_matches_naive_loop_oracle() {
        // Independent oracle: plain elementwise sum over a fresh random pair.
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        let a: Vec<f64> = (0..257).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..257).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut expected = 0.0;
        for k in 0..257 {
            expected += a[k] * b[k];
        }
        let got = pv(&a).dot(&pv(&b)).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn dot_dimension_mismatch() {
        assert!(matches!(
            pv(&[1.0]).dot(&pv(&[1.0, 2.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dot_is_symmetric_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
        assert_eq!(pv(&a).dot(&pv(&b)).unwrap(), pv(&b).dot(&pv(&a)).unwrap());
    }

    #[test]
    fn norm_345() {
        assert_eq!(pv(&[3.0, 4.0]).norm().unwrap(), 5.0);
    }

    #[test]
    fn norm_zero_vector() {
        assert_eq!(pv(&[0.0, 0.0, 0.0]).norm().unwrap(), 0.0);
    }

    #[test]
    fn norm_empty_is_error() {
        assert!(matches!(pv(&[]).norm(), Err(Error::EmptyVector { .. })));
    }

    #[test]
    fn norm_matches_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let a: Vec<f64> = (0..1000).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut ss = 0.0;
        for x in &a {
            ss += x * x;
        }
        let expected = ss.sqrt();
        let got = pv(&a).norm().unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn sub_basic() {
        assert_eq!(pv(&[5.0, 5.0]).sub(&pv(&[2.0, 3.0])).unwrap(), pv(&[3.0, 2.0]));
        let a = pv(&[1.5, -2.5]);
        assert_eq!(a.sub(&a).unwrap(), pv(&[0.0, 0.0]));
        assert_eq!(pv(&[1.0, 2.0]).sub(&pv(&[0.0, 0.0])).unwrap(), pv(&[1.0, 2.0]));
    }

    #[test]
    fn sub_self_has_zero_norm() {
        let a = pv(&[0.3, -1.7, 9.9]);
        assert_eq!(a.sub(&a).unwrap().norm().unwrap(), 0.0);
    }

    #[test]
    fn axpy_basic() {
        assert_eq!(
            pv(&[1.0, 1.0]).axpy(2.0, &pv(&[0.0, 0.0])).unwrap(),
            pv(&[2.0, 2.0])
        );
        let x = pv(&[3.0, -4.0]);
        let y = pv(&[7.0, 8.0]);
        assert_eq!(x.axpy(0.0, &y).unwrap(), y);
        assert_eq!(x.axpy(-1.0, &x).unwrap(), pv(&[0.0, 0.0]));
    }

    #[test]
    fn axpy_rejects_non_finite_alpha() {
        let x = pv(&[1.0]);
        assert!(matches!(
            x.axpy(f64::NAN, &x),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn cosine_parallel_orthogonal_antiparallel() {
        let v = pv(&[0.4, -1.2, 3.3]);
        assert!((v.cosine_similarity(&v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            pv(&[1.0, 0.0]).cosine_similarity(&pv(&[0.0, 1.0])).unwrap(),
            0.0
        );
        let neg = v.axpy(-2.0, &v).unwrap(); // -v
        assert!((v.cosine_similarity(&neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        let z = ParamVector::zeros(3);
        let v = pv(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            z.cosine_similarity(&v),
            Err(Error::ZeroNorm { .. })
        ));
        assert!(matches!(
            v.cosine_similarity(&z),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn new_rejects_nan() {
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParamVector::new(vec![1.0, f64::INFINITY]).is_err());
    }
}
