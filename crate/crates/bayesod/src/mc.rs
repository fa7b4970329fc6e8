//! Collapses T stochastic detector runs into per-anchor Gaussian and
//! categorical sufficient statistics.
//!
//! The box mean is the arithmetic average of the per-run regressions, the
//! epistemic covariance is the (biased) sample second moment minus the outer
//! product of the mean, and the final covariance adds the average reported
//! aleatoric covariance. Category probabilities average the per-run softmax
//! outputs, not the logits.

use nalgebra::{Matrix4, Vector4};

use crate::detection::{validate_covariance, CategoricalDist};
use crate::error::{Error, Result};

/// Raw per-anchor detector output across T stochastic runs.
#[derive(Debug, Clone)]
pub struct AnchorPrediction {
    anchor_id: u64,
    box_samples: Vec<Vector4<f64>>,
    aleatoric_covs: Vec<Matrix4<f64>>,
    logit_samples: Vec<Vec<f64>>,
}

impl AnchorPrediction {
    pub fn new(
        anchor_id: u64,
        box_samples: Vec<Vector4<f64>>,
        aleatoric_covs: Vec<Matrix4<f64>>,
        logit_samples: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let t = box_samples.len();
        if t == 0 {
            return Err(Error::invalid("anchor prediction needs at least one run"));
        }
        if aleatoric_covs.len() != t || logit_samples.len() != t {
            return Err(Error::invalid(format!(
                "inconsistent run counts: {} boxes, {} covariances, {} logit rows",
                t,
                aleatoric_covs.len(),
                logit_samples.len()
            )));
        }
        if !box_samples.iter().all(|s| s.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("box samples must be finite"));
        }
        let k = logit_samples[0].len();
        if k < 2 {
            return Err(Error::invalid("need at least 2 categories of logits"));
        }
        for row in &logit_samples {
            if row.len() != k {
                return Err(Error::invalid("logit rows differ in length"));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("logits must be finite"));
            }
        }
        let aleatoric_covs = aleatoric_covs
            .iter()
            .map(validate_covariance)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            anchor_id,
            box_samples,
            aleatoric_covs,
            logit_samples,
        })
    }

    pub fn anchor_id(&self) -> u64 {
        self.anchor_id
    }

    /// Number of stochastic runs T.
    pub fn runs(&self) -> usize {
        self.box_samples.len()
    }

    /// Number of categories K.
    pub fn num_categories(&self) -> usize {
        self.logit_samples[0].len()
    }

    pub fn box_samples(&self) -> &[Vector4<f64>] {
        &self.box_samples
    }

    pub fn aleatoric_covs(&self) -> &[Matrix4<f64>] {
        &self.aleatoric_covs
    }

    pub fn logit_samples(&self) -> &[Vec<f64>] {
        &self.logit_samples
    }
}

/// Per-anchor belief after aggregation (and, downstream, prior updates).
#[derive(Debug, Clone)]
pub struct AnchorBelief {
    pub anchor_id: u64,
    pub bbox: crate::detection::BoxGaussian,
    pub category: CategoricalDist,
}

/// Sample mean and epistemic covariance of the per-run box regressions.
///
/// The covariance is `E[f f^T] - mean mean^T`, symmetrized as
/// `(A + A^T) / 2`. Floating-point cancellation can leave tiny negative
/// eigenvalues; they are left in place and the aleatoric term added by
/// [`combine_covariance`] restores strict positive definiteness. A single
/// run yields the zero matrix.
pub fn aggregate_box(p: &AnchorPrediction) -> (Vector4<f64>, Matrix4<f64>) {
    let t = p.box_samples.len() as f64;
    let mut mean = Vector4::zeros();
    for s in &p.box_samples {
        mean += s;
    }
    mean /= t;
    let mut second = Matrix4::zeros();
    for s in &p.box_samples {
        second += s * s.transpose();
    }
    second /= t;
    let raw = second - mean * mean.transpose();
    let epistemic = (raw + raw.transpose()) * 0.5;
    (mean, epistemic)
}

/// Final per-anchor covariance: epistemic plus the average aleatoric
/// covariance over the runs.
pub fn combine_covariance(epistemic: &Matrix4<f64>, aleatoric: &[Matrix4<f64>]) -> Matrix4<f64> {
    assert!(!aleatoric.is_empty(), "need at least one aleatoric covariance");
    let mut avg = Matrix4::zeros();
    for c in aleatoric {
        avg += c;
    }
    avg /= aleatoric.len() as f64;
    epistemic + avg
}

/// Numerically stabilized softmax (max-logit subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Average of the per-run softmax outputs.
///
/// Averaging happens in probability space; the aleatoric classification
/// uncertainty is already contained in the per-run probabilities, so no
/// further treatment is applied.
pub fn aggregate_categorical(p: &AnchorPrediction) -> CategoricalDist {
    let k = p.num_categories();
    let t = p.logit_samples.len() as f64;
    let mut acc = vec![0.0f64; k];
    for row in &p.logit_samples {
        for (a, s) in acc.iter_mut().zip(softmax(row)) {
            *a += s;
        }
    }
    for a in &mut acc {
        *a /= t;
    }
    // exact renormalization so the simplex invariant holds to the last ulp
    let sum: f64 = acc.iter().sum();
    for a in &mut acc {
        *a /= sum;
    }
    CategoricalDist::new(acc).expect("softmax average lies on the simplex")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn pred(
        boxes: Vec<[f64; 4]>,
        covs: Vec<Matrix4<f64>>,
        logits: Vec<Vec<f64>>,
    ) -> AnchorPrediction {
        let boxes = boxes.into_iter().map(Vector4::from).collect();
        AnchorPrediction::new(0, boxes, covs, logits).unwrap()
    }

    fn identity_covs(t: usize) -> Vec<Matrix4<f64>> {
        vec![Matrix4::identity(); t]
    }

    #[test]
    fn two_point_symmetric_case() {
        let p = pred(
            vec![[0.0; 4], [2.0; 4]],
            identity_covs(2),
            vec![vec![0.0, 0.0]; 2],
        );
        let (mean, cov) = aggregate_box(&p);
        assert_eq!(mean, Vector4::from([1.0; 4]));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(cov[(i, j)], 1.0);
            }
        }
    }

    #[test]
    fn single_sample_zero_epistemic() {
        let p = pred(
            vec![[3.0, 1.0, 7.0, 9.0]],
            identity_covs(1),
            vec![vec![0.0, 0.0]],
        );
        let (mean, cov) = aggregate_box(&p);
        assert_eq!(mean, Vector4::new(3.0, 1.0, 7.0, 9.0));
        assert_eq!(cov, Matrix4::zeros());
    }

    #[test]
    fn matches_two_pass_moment_oracle() {
        let mut rng = crate::stream::derive_rng(11, &[1]);
        let samples: Vec<[f64; 4]> = (0..5)
            .map(|_| std::array::from_fn(|_| rng.random_range(-10.0..10.0)))
            .collect();
        let p = pred(samples.clone(), identity_covs(5), vec![vec![0.0, 0.0]; 5]);
        let (mean, cov) = aggregate_box(&p);

        // independent two-pass oracle: mean first, then centered outer products
        let mut om = [0.0f64; 4];
        for s in &samples {
            for d in 0..4 {
                om[d] += s[d];
            }
        }
        for v in &mut om {
            *v /= 5.0;
        }
        let mut oc = [[0.0f64; 4]; 4];
        for s in &samples {
            for i in 0..4 {
                for j in 0..4 {
                    oc[i][j] += (s[i] - om[i]) * (s[j] - om[j]);
                }
            }
        }
        for i in 0..4 {
            assert_relative_eq!(mean[i], om[i], epsilon = 1e-10);
            for j in 0..4 {
                assert_relative_eq!(cov[(i, j)], oc[i][j] / 5.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn combine_direct_sum() {
        let ones = Matrix4::from_element(1.0);
        let out = combine_covariance(&ones, &identity_covs(2));
        assert_eq!(out, ones + Matrix4::identity());

        let c = Matrix4::identity() * 3.0;
        assert_eq!(combine_covariance(&Matrix4::zeros(), &[c]), c);
    }

    #[test]
    fn combine_matches_elementwise_oracle() {
        let mut rng = crate::stream::derive_rng(12, &[2]);
        let mut rand_pd = || {
            let m = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            m * m.transpose() + Matrix4::identity() * 0.5
        };
        let e = rand_pd();
        let list = vec![rand_pd(), rand_pd(), rand_pd()];
        let out = combine_covariance(&e, &list);
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for c in &list {
                    acc += c[(i, j)];
                }
                let expect = e[(i, j)] + acc / 3.0;
                assert_relative_eq!(out[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn categorical_uniform_single_run() {
        let p = pred(vec![[0.0; 4]], identity_covs(1), vec![vec![0.0, 0.0]]);
        let c = aggregate_categorical(&p);
        assert_relative_eq!(c.probs()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn categorical_analytic_average() {
        // softmax(0,0) = (1/2, 1/2); softmax(ln 3, 0) = (3/4, 1/4)
        let p = pred(
            vec![[0.0; 4]; 2],
            identity_covs(2),
            vec![vec![0.0, 0.0], vec![3.0f64.ln(), 0.0]],
        );
        let c = aggregate_categorical(&p);
        assert_relative_eq!(c.probs()[0], 0.625, epsilon = 1e-12);
        assert_relative_eq!(c.probs()[1], 0.375, epsilon = 1e-12);
    }

    #[test]
    fn categorical_matches_loop_oracle() {
        let mut rng = crate::stream::derive_rng(13, &[3]);
        let logits: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..4).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let p = pred(vec![[0.0; 4]; 10], identity_covs(10), logits.clone());
        let c = aggregate_categorical(&p);

        let mut oracle = vec![0.0f64; 4];
        for row in &logits {
            let denom: f64 = row.iter().map(|&v| v.exp()).sum();
            for (k, &v) in row.iter().enumerate() {
                oracle[k] += v.exp() / denom;
            }
        }
        for v in &mut oracle {
            *v /= 10.0;
        }
        for k in 0..4 {
            assert_relative_eq!(c.probs()[k], oracle[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn probability_averaging_is_observable() {
        // Averaging softmax outputs differs from softmaxing the averaged
        // logits for an asymmetric pair. (For the symmetric pair
        // (a,0)/(-a,0) with K=2 the two coincide by algebra, so that pair
        // cannot witness the distinction.)
        let p = pred(
            vec![[0.0; 4]; 2],
            identity_covs(2),
            vec![vec![2.0, 0.0], vec![0.0, 0.0]],
        );
        let avg_of_softmax = aggregate_categorical(&p).probs()[0];
        let softmax_of_avg = softmax(&[1.0, 0.0])[0];
        assert!((avg_of_softmax - softmax_of_avg).abs() > 1e-3);

        // the symmetric pair coincides exactly with the uniform output
        let sym = pred(
            vec![[0.0; 4]; 2],
            identity_covs(2),
            vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
        );
        assert_relative_eq!(aggregate_categorical(&sym).probs()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn rejects_inconsistent_runs() {
        let r = AnchorPrediction::new(
            0,
            vec![Vector4::zeros()],
            identity_covs(2),
            vec![vec![0.0, 0.0]],
        );
        assert!(r.is_err());
        let r = AnchorPrediction::new(
            0,
            vec![Vector4::zeros()],
            identity_covs(1),
            vec![vec![0.0, f64::NAN]],
        );
        assert!(r.is_err());
    }

    proptest! {
        #[test]
        fn run_permutation_invariant(seed in 0u64..1000) {
            let mut rng = crate::stream::derive_rng(seed, &[4]);
            let t = rng.random_range(2usize..6);
            let boxes: Vec<[f64; 4]> = (0..t)
                .map(|_| std::array::from_fn(|_| rng.random_range(-10.0..10.0)))
                .collect();
            let logits: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..3).map(|_| rng.random_range(-4.0..4.0)).collect())
                .collect();
            let p = pred(boxes.clone(), identity_covs(t), logits.clone());

            let mut rev_boxes = boxes;
            rev_boxes.reverse();
            let mut rev_logits = logits;
            rev_logits.reverse();
            let q = pred(rev_boxes, identity_covs(t), rev_logits);

            let (m1, c1) = aggregate_box(&p);
            let (m2, c2) = aggregate_box(&q);
            for i in 0..4 {
                prop_assert!((m1[i] - m2[i]).abs() < 1e-12);
                for j in 0..4 {
                    prop_assert!((c1[(i, j)] - c2[(i, j)]).abs() < 1e-12);
                }
            }
            let a = aggregate_categorical(&p);
            let b = aggregate_categorical(&q);
            for k in 0..3 {
                prop_assert!((a.probs()[k] - b.probs()[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn epistemic_cov_is_psd(seed in 0u64..1000) {
            let mut rng = crate::stream::derive_rng(seed, &[5]);
            let t = rng.random_range(1usize..8);
            let boxes: Vec<[f64; 4]> = (0..t)
                .map(|_| std::array::from_fn(|_| rng.random_range(-100.0..100.0)))
                .collect();
            let p = pred(boxes, identity_covs(t), vec![vec![0.0, 0.0]; t]);
            let (_, cov) = aggregate_box(&p);
            let eig = nalgebra::SymmetricEigen::new(cov);
            let floor = -1e-9 * cov.trace().abs().max(1.0);
            for ev in eig.eigenvalues.iter() {
                prop_assert!(*ev >= floor, "eigenvalue {} below {}", ev, floor);
            }
        }

        #[test]
        fn categorical_average_is_convex(seed in 0u64..1000) {
            let mut rng = crate::stream::derive_rng(seed, &[6]);
            let t = rng.random_range(1usize..6);
            let logits: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..3).map(|_| rng.random_range(-4.0..4.0)).collect())
                .collect();
            let p = pred(vec![[0.0; 4]; t], identity_covs(t), logits.clone());
            let c = aggregate_categorical(&p);
            let per_run: Vec<Vec<f64>> = logits.iter().map(|r| softmax(r)).collect();
            for k in 0..3 {
                let lo = per_run.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
                let hi = per_run.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c.probs()[k] >= lo - 1e-12 && c.probs()[k] <= hi + 1e-12);
            }
        }
    }
}
