//! Common Spatial Patterns: spatial filters from the generalized
//! eigenproblem on class-mean covariances, solved by whitening.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::dsp::Epoch;
use crate::error::{Error, Result};

pub const N_COMPONENTS: usize = 3;
const EIG_FLOOR: f64 = 1e-10;

/// Fitted spatial filters. Rows of `filters` are the filters, sorted by
/// descending generalized eigenvalue of the first class.
#[derive(Debug, Clone)]
pub struct CspModel {
    pub filters: Matrix3<f64>,
    pub eigenvalues: Vector3<f64>,
}

/// Trace-normalized channel covariance of one epoch (channels are
/// columns of `epoch.samples`).
fn normalized_covariance(epoch: &Epoch) -> Result<Matrix3<f64>> {
    let x = &epoch.samples;
    let n = x.nrows() as f64;
    let mut means = [0.0; 3];
    for ch in 0..3 {
        means[ch] = x.column(ch).sum() / n;
    }
    let mut cov = Matrix3::zeros();
    for t in 0..x.nrows() {
        for i in 0..3 {
            for j in 0..3 {
                cov[(i, j)] += (x[(t, i)] - means[i]) * (x[(t, j)] - means[j]);
            }
        }
    }
    let trace: f64 = cov.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::Numerical(
            "epoch covariance has non-positive trace".into(),
        ));
    }
    Ok(cov / trace)
}

fn class_mean_covariance(epochs: &[Epoch]) -> Result<Matrix3<f64>> {
    if epochs.is_empty() {
        return Err(Error::Parameter("empty epoch list for CSP fit".into()));
    }
    let mut acc = Matrix3::zeros();
    for e in epochs {
        acc += normalized_covariance(e)?;
    }
    Ok(acc / epochs.len() as f64)
}

/// Fit CSP filters discriminating `epochs_a` from `epochs_b`.
///
/// Solves `Sigma_a w = lambda (Sigma_a + Sigma_b) w` by whitening the
/// composite covariance and eigendecomposing the whitened `Sigma_a`.
pub fn fit_csp(epochs_a: &[Epoch], epochs_b: &[Epoch]) -> Result<CspModel> {
    let sigma_a = class_mean_covariance(epochs_a)?;
    let sigma_b = class_mean_covariance(epochs_b)?;
    let composite = sigma_a + sigma_b;

    let eig = SymmetricEigen::new(composite);
    if eig.eigenvalues.iter().any(|&v| v < EIG_FLOOR) {
        return Err(Error::Numerical(format!(
            "composite covariance rank-deficient: eigenvalue {:.3e} below floor {EIG_FLOOR:.0e}",
            eig.eigenvalues.min()
        )));
    }
    // whitening transform P = D^{-1/2} U^T
    let mut d_inv_sqrt = Matrix3::zeros();
    for i in 0..3 {
        d_inv_sqrt[(i, i)] = 1.0 / eig.eigenvalues[i].sqrt();
    }
    let whiten = d_inv_sqrt * eig.eigenvectors.transpose();

    let whitened_a = whiten * sigma_a * whiten.transpose();
    // symmetrize against round-off before the second decomposition
    let whitened_a = (whitened_a + whitened_a.transpose()) * 0.5;
    let eig_a = SymmetricEigen::new(whitened_a);

    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        eig_a.eigenvalues[j]
            .partial_cmp(&eig_a.eigenvalues[i])
            .unwrap()
    });

    let mut filters = Matrix3::zeros();
    let mut eigenvalues = Vector3::zeros();
    for (row, &idx) in order.iter().enumerate() {
        let w = eig_a.eigenvectors.column(idx).transpose() * whiten;
        filters.set_row(row, &w);
        eigenvalues[row] = eig_a.eigenvalues[idx];
    }
    Ok(CspModel {
        filters,
        eigenvalues,
    })
}

/// Project one epoch through the filters and return log variance-ratio
/// features, one per spatial component.
pub fn csp_features(model: &CspModel, epoch: &Epoch) -> Result<[f64; N_COMPONENTS]> {
    let x = &epoch.samples;
    let n = x.nrows();
    let mut vars = [0.0; N_COMPONENTS];
    for comp in 0..N_COMPONENTS {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for t in 0..n {
            let mut v = 0.0;
            for ch in 0..3 {
                v += model.filters[(comp, ch)] * x[(t, ch)];
            }
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        vars[comp] = sum_sq / n as f64 - mean * mean;
    }
    let total: f64 = vars.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numerical(
            "zero total variance after CSP projection".into(),
        ));
    }
    let mut features = [0.0; N_COMPONENTS];
    for comp in 0..N_COMPONENTS {
        features[comp] = (vars[comp] / total).ln();
    }
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::EpochClass;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise_epoch(rng: &mut ChaCha8Rng, scales: [f64; 3]) -> Epoch {
        let mut samples = Array2::zeros((500, 3));
        for t in 0..500 {
            for ch in 0..3 {
                let v: f64 = rng.sample(StandardNormal);
                samples[(t, ch)] = scales[ch] * v;
            }
        }
        Epoch {
            samples,
            label: EpochClass::Background,
            subject_id: 1,
            trial_id: 0,
        }
    }

    fn correlated_epoch(rng: &mut ChaCha8Rng, mix: &Matrix3<f64>) -> Epoch {
        let mut samples = Array2::zeros((500, 3));
        for t in 0..500 {
            let z = Vector3::new(
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            );
            let v = mix * z;
            for ch in 0..3 {
                samples[(t, ch)] = v[ch];
            }
        }
        Epoch {
            samples,
            label: EpochClass::Background,
            subject_id: 1,
            trial_id: 0,
        }
    }

    fn random_mix(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let mut m = Matrix3::identity();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = rng.sample(StandardNormal);
                m[(i, j)] += 0.4 * v;
            }
        }
        m
    }

    #[test]
    fn identical_distributions_give_half_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<Epoch> = (0..120)
            .map(|_| noise_epoch(&mut rng, [1.0, 1.0, 1.0]))
            .collect();
        let b: Vec<Epoch> = (0..120)
            .map(|_| noise_epoch(&mut rng, [1.0, 1.0, 1.0]))
            .collect();
        let model = fit_csp(&a, &b).unwrap();
        for i in 0..3 {
            assert!(
                (model.eigenvalues[i] - 0.5).abs() < 0.05,
                "eigenvalue {} = {}",
                i,
                model.eigenvalues[i]
            );
        }
    }

    #[test]
    fn top_filter_finds_boosted_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a: Vec<Epoch> = (0..150)
            .map(|_| noise_epoch(&mut rng, [3.0, 1.0, 1.0]))
            .collect();
        let b: Vec<Epoch> = (0..150)
            .map(|_| noise_epoch(&mut rng, [1.0, 1.0, 1.0]))
            .collect();
        let model = fit_csp(&a, &b).unwrap();
        let w = model.filters.row(0);
        let align = w[0].abs() / w.norm();
        assert!(align > 0.9, "alignment {align}");
        // analytic check: trace-normalized class covariances are
        // diag(9,1,1)/11 and diag(1,1,1)/3, so the top eigenvalue is
        // (9/11) / (9/11 + 1/3)
        let expect = (9.0 / 11.0) / (9.0 / 11.0 + 1.0 / 3.0);
        assert!(
            (model.eigenvalues[0] - expect).abs() < 0.03,
            "top eigenvalue {} vs {}",
            model.eigenvalues[0],
            expect
        );
    }

    #[test]
    fn whitening_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let mix_a = random_mix(&mut rng);
            let mix_b = random_mix(&mut rng);
            let a: Vec<Epoch> = (0..40).map(|_| correlated_epoch(&mut rng, &mix_a)).collect();
            let b: Vec<Epoch> = (0..40).map(|_| correlated_epoch(&mut rng, &mix_b)).collect();
            let model = fit_csp(&a, &b).unwrap();
            let sigma_a = class_mean_covariance(&a).unwrap();
            let sigma_b = class_mean_covariance(&b).unwrap();
            let white = model.filters * (sigma_a + sigma_b) * model.filters.transpose();
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(white[(i, j)], expect, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn eigenvalue_complement_on_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mix_a = random_mix(&mut rng);
        let mix_b = random_mix(&mut rng);
        let a: Vec<Epoch> = (0..60).map(|_| correlated_epoch(&mut rng, &mix_a)).collect();
        let b: Vec<Epoch> = (0..60).map(|_| correlated_epoch(&mut rng, &mix_b)).collect();
        let ab = fit_csp(&a, &b).unwrap();
        let ba = fit_csp(&b, &a).unwrap();
        // swapped fit sorts descending on 1 - lambda, so rows reverse
        for i in 0..3 {
            assert_abs_diff_eq!(
                ab.eigenvalues[i],
                1.0 - ba.eigenvalues[2 - i],
                epsilon = 1e-8
            );
            let wa = ab.filters.row(i);
            let wb = ba.filters.row(2 - i);
            let dot = (wa * wb.transpose())[(0, 0)].abs();
            assert_abs_diff_eq!(dot, wa.norm() * wb.norm(), epsilon = 1e-6);
        }
    }

    #[test]
    fn variance_ratio_matches_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mix_a = random_mix(&mut rng);
        let mix_b = random_mix(&mut rng);
        let a: Vec<Epoch> = (0..50).map(|_| correlated_epoch(&mut rng, &mix_a)).collect();
        let b: Vec<Epoch> = (0..50).map(|_| correlated_epoch(&mut rng, &mix_b)).collect();
        let model = fit_csp(&a, &b).unwrap();
        let sigma_a = class_mean_covariance(&a).unwrap();
        let sigma_b = class_mean_covariance(&b).unwrap();
        for i in 0..3 {
            let w = model.filters.row(i);
            let va = (w * sigma_a * w.transpose())[(0, 0)];
            let vb = (w * sigma_b * w.transpose())[(0, 0)];
            assert_abs_diff_eq!(va / (va + vb), model.eigenvalues[i], epsilon = 1e-6);
        }
    }

    /// Straight-line reimplementation of the feature map: explicit
    /// projection, explicit variance, explicit log ratio.
    pub(crate) fn features_oracle(model: &CspModel, epoch: &Epoch) -> [f64; 3] {
        let n = epoch.samples.nrows();
        let mut projected = vec![[0.0f64; 3]; n];
        for t in 0..n {
            for comp in 0..3 {
                let mut acc = 0.0;
                for ch in 0..3 {
                    acc += model.filters[(comp, ch)] * epoch.samples[(t, ch)];
                }
                projected[t][comp] = acc;
            }
        }
        let mut vars = [0.0f64; 3];
        for comp in 0..3 {
            let mean: f64 = projected.iter().map(|p| p[comp]).sum::<f64>() / n as f64;
            vars[comp] = projected
                .iter()
                .map(|p| (p[comp] - mean) * (p[comp] - mean))
                .sum::<f64>()
                / n as f64;
        }
        let total: f64 = vars.iter().sum();
        [
            (vars[0] / total).ln(),
            (vars[1] / total).ln(),
            (vars[2] / total).ln(),
        ]
    }

    #[test]
    fn features_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mix_a = random_mix(&mut rng);
        let mix_b = random_mix(&mut rng);
        let a: Vec<Epoch> = (0..30).map(|_| correlated_epoch(&mut rng, &mix_a)).collect();
        let b: Vec<Epoch> = (0..30).map(|_| correlated_epoch(&mut rng, &mix_b)).collect();
        let model = fit_csp(&a, &b).unwrap();
        for _ in 0..3 {
            let e = correlated_epoch(&mut rng, &mix_a);
            let got = csp_features(&model, &e).unwrap();
            let want = features_oracle(&model, &e);
            for i in 0..3 {
                assert_abs_diff_eq!(got[i], want[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn features_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a: Vec<Epoch> = (0..30)
            .map(|_| noise_epoch(&mut rng, [2.0, 1.0, 0.5]))
            .collect();
        let b: Vec<Epoch> = (0..30)
            .map(|_| noise_epoch(&mut rng, [1.0, 1.0, 1.0]))
            .collect();
        let model = fit_csp(&a, &b).unwrap();
        let e = noise_epoch(&mut rng, [1.0, 1.0, 1.0]);
        let base = csp_features(&model, &e).unwrap();
        for c in [0.1, 3.0, 1e4] {
            let mut scaled = e.clone();
            scaled.samples.mapv_inplace(|v| c * v);
            let f = csp_features(&model, &scaled).unwrap();
            for i in 0..3 {
                assert_abs_diff_eq!(f[i], base[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn equal_component_variance_gives_log_third() {
        // filters = identity, epoch with equal independent variance
        let model = CspModel {
            filters: Matrix3::identity(),
            eigenvalues: Vector3::new(0.5, 0.5, 0.5),
        };
        let mut samples = Array2::zeros((500, 3));
        for t in 0..500 {
            for ch in 0..3 {
                // same waveform per channel but shifted so variance matches
                samples[(t, ch)] = ((t + ch * 7) % 10) as f64;
            }
        }
        let e = Epoch {
            samples,
            label: EpochClass::Background,
            subject_id: 1,
            trial_id: 0,
        };
        let f = csp_features(&model, &e).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(f[i], (1.0f64 / 3.0).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_input_errors() {
        let mut samples = Array2::zeros((500, 3));
        samples.fill(0.3);
        let e = Epoch {
            samples,
            label: EpochClass::Background,
            subject_id: 1,
            trial_id: 0,
        };
        let r = fit_csp(std::slice::from_ref(&e), std::slice::from_ref(&e));
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
