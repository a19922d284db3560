//! Cosine similarity between enhanced embeddings and the final score.

use ndarray::{Array1, ArrayView1};

use crate::enhancement::EnhancedPair;

/// Norms at or below this are treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScoreError {
    #[error("degenerate embedding: norm {0:e} is too small for cosine similarity")]
    Degenerate(f64),
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// A metric score in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MatchScore(f64);

impl MatchScore {
    pub fn new(value: f64) -> Option<Self> {
        (value.is_finite() && (-1.0..=1.0).contains(&value)).then_some(MatchScore(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn norms(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<(f64, f64, f64), ScoreError> {
    if a.len() != b.len() {
        return Err(ScoreError::LengthMismatch(a.len(), b.len()));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    for n in [na, nb] {
        if !(n > MIN_NORM) {
            return Err(ScoreError::Degenerate(n));
        }
    }
    Ok((a.dot(&b), na, nb))
}

/// `(a·b) / (|a||b|)`, clamped to `[-1, 1]`.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64, ScoreError> {
    let (dot, na, nb) = norms(a, b)?;
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine and its gradients with respect to both inputs.
///
/// The gradient is that of the unclamped quotient.
pub fn cosine_with_grad(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<(f64, Array1<f64>, Array1<f64>), ScoreError> {
    let (dot, na, nb) = norms(a, b)?;
    let raw = dot / (na * nb);
    let inv = 1.0 / (na * nb);
    let grad_a = &b * inv - &a * (raw / (na * na));
    let grad_b = &a * inv - &b * (raw / (nb * nb));
    Ok((raw.clamp(-1.0, 1.0), grad_a, grad_b))
}

pub fn match_score(pair: &EnhancedPair) -> Result<MatchScore, ScoreError> {
    cosine(pair.task.view(), pair.code.view()).map(MatchScore)
}

/// Maps a score from `[-1, 1]` onto `[0, 1]`.
pub fn rescale_sim(score: MatchScore) -> f64 {
    (1.0 + score.0) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_values() {
        assert_eq!(cosine(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(), 0.0);
        let c = cosine(array![1.0, 1.0].view(), array![1.0, 0.0].view()).unwrap();
        assert!((c - 0.707_106_78).abs() < 1e-8);
        let x = array![0.3, -2.0, 5.0];
        assert!((cosine(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn final_score_examples() {
        let same = EnhancedPair {
            task: array![1.0, 2.0],
            code: array![1.0, 2.0],
        };
        assert!((match_score(&same).unwrap().value() - 1.0).abs() < 1e-15);
        let anti = EnhancedPair {
            task: array![1.0, 2.0],
            code: array![-1.0, -2.0],
        };
        assert!((match_score(&anti).unwrap().value() + 1.0).abs() < 1e-15);
        let p = EnhancedPair {
            task: array![3.0, 4.0],
            code: array![4.0, 3.0],
        };
        assert!((match_score(&p).unwrap().value() - 0.96).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_is_an_error() {
        assert!(matches!(
            cosine(array![0.0, 0.0].view(), array![1.0, 0.0].view()),
            Err(ScoreError::Degenerate(_))
        ));
        let zero = EnhancedPair {
            task: array![0.0],
            code: array![1.0],
        };
        assert!(match_score(&zero).is_err());
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            cosine(array![1.0].view(), array![1.0, 0.0].view()),
            Err(ScoreError::LengthMismatch(1, 2))
        );
    }

    #[test]
    fn rescale_endpoints() {
        assert_eq!(rescale_sim(MatchScore::new(-1.0).unwrap()), 0.0);
        assert_eq!(rescale_sim(MatchScore::new(1.0).unwrap()), 1.0);
        assert_eq!(rescale_sim(MatchScore::new(0.0).unwrap()), 0.5);
        assert!(MatchScore::new(1.5).is_none());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = array![0.3, -1.2, 0.8];
        let b = array![1.1, 0.4, -0.5];
        let (_, ga, gb) = cosine_with_grad(a.view(), b.view()).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut ap = a.clone();
            ap[i] += h;
            let mut am = a.clone();
            am[i] -= h;
            let fd = (cosine(ap.view(), b.view()).unwrap() - cosine(am.view(), b.view()).unwrap()) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-8);
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (cosine(a.view(), bp.view()).unwrap() - cosine(a.view(), bm.view()).unwrap()) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-8);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec3() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-10.0..10.0f64, 3)
                .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
        }

        proptest! {
            #[test]
            fn symmetric_and_bounded(a in vec3(), b in vec3()) {
                let (a, b) = (Array1::from(a), Array1::from(b));
                let ab = cosine(a.view(), b.view()).unwrap();
                prop_assert_eq!(ab, cosine(b.view(), a.view()).unwrap());
                prop_assert!((-1.0..=1.0).contains(&ab));
            }

            #[test]
            fn scale_invariant(a in vec3(), b in vec3(), s in 0.01..100.0f64, t in 0.01..100.0f64) {
                let (a, b) = (Array1::from(a), Array1::from(b));
                let base = cosine(a.view(), b.view()).unwrap();
                let scaled = cosine((&a * s).view(), (&b * t).view()).unwrap();
                prop_assert!((base - scaled).abs() < 1e-9);
            }

            #[test]
            fn rescale_is_increasing(x in -1.0..1.0f64, dx in 1e-6..1.0f64) {
                let y = (x + dx).min(1.0);
                prop_assume!(y > x);
                prop_assert!(rescale_sim(MatchScore::new(x).unwrap()) < rescale_sim(MatchScore::new(y).unwrap()));
            }
        }
    }
}
