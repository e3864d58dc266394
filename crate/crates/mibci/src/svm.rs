//! Linear SVM trained by dual coordinate descent on the L1 hinge loss.
//!
//! Features are z-scored with a scaler fitted on the training set. The
//! bias is handled by feature augmentation with a constant 1, so the
//! regularizer covers the bias term as well (the liblinear convention).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const TOLERANCE: f64 = 1e-4;
const MAX_EPOCHS: usize = 1000;
pub const FEATURE_DIM: usize = 3;

/// Per-feature z-scoring transform fitted on training data.
#[derive(Debug, Clone)]
pub struct Scaler {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
}

impl Scaler {
    pub fn fit(features: &[[f64; FEATURE_DIM]]) -> Scaler {
        let n = features.len() as f64;
        let mut mean = [0.0; FEATURE_DIM];
        for x in features {
            for d in 0..FEATURE_DIM {
                mean[d] += x[d];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = [0.0; FEATURE_DIM];
        for x in features {
            for d in 0..FEATURE_DIM {
                std[d] += (x[d] - mean[d]) * (x[d] - mean[d]);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            // zero-spread features pass through with divisor 1
            if *s <= 0.0 {
                *s = 1.0;
            }
        }
        Scaler { mean, std }
    }

    pub fn transform(&self, x: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        let mut z = [0.0; FEATURE_DIM];
        for d in 0..FEATURE_DIM {
            z[d] = (x[d] - self.mean[d]) / self.std[d];
        }
        z
    }
}

#[derive(Debug, Clone)]
pub struct SvmModel {
    pub weights: [f64; FEATURE_DIM],
    pub bias: f64,
    pub c: f64,
    pub scaler: Scaler,
}

/// Train on z-scored features by dual coordinate descent.
///
/// Stops when the maximal projected-gradient violation over an epoch
/// drops below 1e-4, or after 1000 epochs.
pub fn train_svm(
    features: &[[f64; FEATURE_DIM]],
    labels: &[i8],
    c: f64,
) -> Result<SvmModel> {
    if features.len() != labels.len() {
        return Err(Error::Parameter(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }
    if !labels.iter().any(|&y| y == 1) || !labels.iter().any(|&y| y == -1) {
        return Err(Error::Data(
            "training set must contain both classes".into(),
        ));
    }
    if labels.iter().any(|&y| y != 1 && y != -1) {
        return Err(Error::Data("labels must be -1 or +1".into()));
    }
    if !(c > 0.0) {
        return Err(Error::Parameter(format!("C must be positive, got {c}")));
    }

    let scaler = Scaler::fit(features);
    // augmented dimension: z-scored features plus constant 1 for the bias
    let aug: Vec<[f64; FEATURE_DIM + 1]> = features
        .iter()
        .map(|x| {
            let z = scaler.transform(x);
            [z[0], z[1], z[2], 1.0]
        })
        .collect();
    let n = aug.len();
    let q_diag: Vec<f64> = aug.iter().map(|x| x.iter().map(|v| v * v).sum()).collect();

    let mut alpha = vec![0.0f64; n];
    let mut w = [0.0f64; FEATURE_DIM + 1];
    let mut order: Vec<usize> = (0..n).collect();
    // fixed internal seed: the permutation order is an implementation
    // detail and training must be deterministic
    let mut rng = ChaCha8Rng::seed_from_u64(0x5d7c_0ffe);

    for _epoch in 0..MAX_EPOCHS {
        order.shuffle(&mut rng);
        let mut max_violation = 0.0f64;
        for &i in &order {
            let y = f64::from(labels[i]);
            let g = y * dot(&w, &aug[i]) - 1.0;
            // projected gradient for the box constraint [0, C]
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= c {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / q_diag[i]).clamp(0.0, c);
                let delta = (alpha[i] - old) * y;
                for d in 0..=FEATURE_DIM {
                    w[d] += delta * aug[i][d];
                }
            }
        }
        if max_violation < TOLERANCE {
            break;
        }
    }

    debug_assert!(alpha.iter().all(|&a| (0.0..=c).contains(&a)));

    Ok(SvmModel {
        weights: [w[0], w[1], w[2]],
        bias: w[FEATURE_DIM],
        c,
        scaler,
    })
}

fn dot(a: &[f64; FEATURE_DIM + 1], b: &[f64; FEATURE_DIM + 1]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Decision value and label for one feature vector. An exact zero maps
/// to the positive class.
pub fn svm_predict(model: &SvmModel, feature: &[f64; FEATURE_DIM]) -> (i8, f64) {
    let z = model.scaler.transform(feature);
    let decision = model
        .weights
        .iter()
        .zip(&z)
        .map(|(w, x)| w * x)
        .sum::<f64>()
        + model.bias;
    let label = if decision >= 0.0 { 1 } else { -1 };
    (label, decision)
}

/// Primal objective 0.5*||(w, b)||^2 + C * sum hinge, on z-scored data.
pub fn primal_objective(
    model: &SvmModel,
    features: &[[f64; FEATURE_DIM]],
    labels: &[i8],
) -> f64 {
    let reg = 0.5
        * (model.weights.iter().map(|w| w * w).sum::<f64>() + model.bias * model.bias);
    let hinge: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let (_, d) = svm_predict(model, x);
            (1.0 - f64::from(y) * d).max(0.0)
        })
        .sum();
    reg + model.c * hinge
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn symmetric_pair() -> (Vec<[f64; 3]>, Vec<i8>) {
        (
            vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            vec![-1, 1],
        )
    }

    #[test]
    fn symmetric_pair_boundary_at_zero() {
        let (x, y) = symmetric_pair();
        let model = train_svm(&x, &y, 1.0).unwrap();
        assert_eq!(svm_predict(&model, &[0.5, 0.0, 0.0]).0, 1);
        assert_eq!(svm_predict(&model, &[-0.5, 0.0, 0.0]).0, -1);
        // tie at the exact boundary goes positive
        let (label, decision) = svm_predict(&model, &[0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(decision, 0.0, epsilon = 1e-9);
        assert_eq!(label, 1);
        // training points symmetric in decision value
        let (_, d_neg) = svm_predict(&model, &x[0]);
        let (_, d_pos) = svm_predict(&model, &x[1]);
        assert_abs_diff_eq!(d_neg, -d_pos, epsilon = 1e-6);
    }

    #[test]
    fn single_class_input_rejected() {
        let x = vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        assert!(train_svm(&x, &[1, 1], 1.0).is_err());
    }

    #[test]
    fn non_finite_features_rejected() {
        let x = vec![[f64::NAN, 0.0, 0.0], [1.0, 1.0, 1.0]];
        assert!(matches!(train_svm(&x, &[1, -1], 1.0), Err(Error::Data(_))));
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        n: usize,
        separation: f64,
    ) -> (Vec<[f64; 3]>, Vec<i8>) {
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label: i8 = if i % 2 == 0 { 1 } else { -1 };
            let offset = separation * f64::from(label);
            x.push([
                offset + rng.sample::<f64, _>(StandardNormal),
                0.5 * offset + rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ]);
            y.push(label);
        }
        (x, y)
    }

    #[test]
    fn separable_set_classified_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = random_instance(&mut rng, 60, 6.0);
        let model = train_svm(&x, &y, 1.0).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(svm_predict(&model, xi).0, yi);
        }
        // hinge component should be essentially zero on a wide margin
        let obj = primal_objective(&model, &x, &y);
        let reg = 0.5
            * (model.weights.iter().map(|w| w * w).sum::<f64>() + model.bias * model.bias);
        // residual hinge bounded by the solver's stopping tolerance
        assert!(obj - reg < 1e-3, "residual hinge {}", obj - reg);
    }

    #[test]
    fn objective_matches_subgradient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..5 {
            let (x, y) = random_instance(&mut rng, 80 + trial * 20, 1.0);
            let model = train_svm(&x, &y, 1.0).unwrap();
            let oracle = oracle::subgradient_train(&x, &y, 1.0, 20000);
            let obj = primal_objective(&model, &x, &y);
            let oracle_obj = primal_objective(&oracle, &x, &y);
            // the dual solver must be at least as good as the oracle up
            // to the stated relative tolerance
            assert!(
                obj <= oracle_obj * (1.0 + 1e-3),
                "objective {obj} vs oracle {oracle_obj}"
            );
        }
    }

    #[test]
    fn oracle_label_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = random_instance(&mut rng, 100, 1.5);
        let model = train_svm(&x, &y, 1.0).unwrap();
        let oracle = oracle::subgradient_train(&x, &y, 1.0, 20000);
        let mut checked = 0;
        for _ in 0..20 {
            let p = [
                rng.sample::<f64, _>(StandardNormal) * 2.0,
                rng.sample::<f64, _>(StandardNormal) * 2.0,
                rng.sample::<f64, _>(StandardNormal) * 2.0,
            ];
            let (l1, d1) = svm_predict(&model, &p);
            let (l2, _) = svm_predict(&oracle, &p);
            if d1.abs() > 1e-2 {
                assert_eq!(l1, l2);
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn duplicated_points_with_halved_c_equivalent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, y) = random_instance(&mut rng, 40, 1.0);
        let model_a = train_svm(&x, &y, 1.0).unwrap();
        let mut x2 = x.clone();
        x2.extend_from_slice(&x);
        let mut y2 = y.clone();
        y2.extend_from_slice(&y);
        let model_b = train_svm(&x2, &y2, 0.5).unwrap();
        // the two problems share one objective: duplicating every point
        // and halving C leaves 0.5*||w||^2 + C*sum hinge unchanged
        let obj_a = primal_objective(&model_a, &x, &y);
        let obj_b = primal_objective(&model_b, &x2, &y2);
        assert_abs_diff_eq!(obj_a, obj_b, epsilon = 1e-6 * obj_a.max(1.0));
        for (xi, _) in x.iter().zip(&y) {
            let (_, da) = svm_predict(&model_a, xi);
            let (_, db) = svm_predict(&model_b, xi);
            assert_abs_diff_eq!(da, db, epsilon = 1e-4);
        }
    }

    #[test]
    fn zero_spread_feature_handled() {
        let x = vec![[1.0, 5.0, 0.0], [-1.0, 5.0, 0.0], [2.0, 5.0, 0.0], [-2.0, 5.0, 0.0]];
        let y = vec![1, -1, 1, -1];
        let model = train_svm(&x, &y, 1.0).unwrap();
        assert_eq!(model.scaler.std[1], 1.0);
        assert_eq!(svm_predict(&model, &[1.5, 5.0, 0.0]).0, 1);
    }

    #[test]
    fn scaler_absorbs_affine_feature_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, y) = random_instance(&mut rng, 60, 1.0);
        let model_a = train_svm(&x, &y, 1.0).unwrap();
        let scaled: Vec<[f64; 3]> = x
            .iter()
            .map(|p| [p[0] * 10.0 + 3.0, p[1] * 0.25 - 1.0, p[2] * 5.0])
            .collect();
        let model_b = train_svm(&scaled, &y, 1.0).unwrap();
        for (xi, si) in x.iter().zip(&scaled) {
            assert_eq!(svm_predict(&model_a, xi).0, svm_predict(&model_b, si).0);
        }
    }
}
