//! One-way repeated-measures ANOVA with a Mauchly sphericity gate and
//! Greenhouse-Geisser correction, Bonferroni-corrected pairwise paired
//! t-tests, and Welch's unequal-variance t-test.
//!
//! Tail probabilities come from a local regularized incomplete beta /
//! gamma implementation (continued fractions, ~1e-12 accuracy); no
//! statistics library is used.

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::error::{Error, Result};

const MAUCHLY_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy)]
pub struct RmAnovaResult {
    pub f: f64,
    /// degrees of freedom actually used for `p` (corrected if the
    /// sphericity gate fired)
    pub df1: f64,
    pub df2: f64,
    /// Greenhouse-Geisser epsilon, always reported
    pub epsilon: f64,
    pub p: f64,
    pub sphericity_assumed: bool,
    /// Mauchly's W and its chi-square p; absent when the test is not
    /// computable (k = 2, or too few subjects for a full-rank contrast
    /// covariance)
    pub mauchly_w: Option<f64>,
    pub mauchly_p: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct PairedTResult {
    /// condition column indices compared
    pub pair: (usize, usize),
    pub t: f64,
    pub df: f64,
    /// absent for a degenerate pair (zero-variance, nonzero-mean
    /// difference)
    pub p_raw: Option<f64>,
    pub p_corrected: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn validate_scores(scores: &Array2<f64>) -> Result<(usize, usize)> {
    let (n, k) = scores.dim();
    if n < 2 {
        return Err(Error::Parameter(format!(
            "repeated-measures tests need at least 2 subjects, got {n}"
        )));
    }
    if k < 2 {
        return Err(Error::Parameter(format!(
            "repeated-measures tests need at least 2 conditions, got {k}"
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite score".into()));
    }
    Ok((n, k))
}

/// Sample covariance of the condition columns (k x k, divisor n-1).
fn condition_covariance(scores: &Array2<f64>) -> DMatrix<f64> {
    let (n, k) = scores.dim();
    let means: Vec<f64> = (0..k)
        .map(|j| scores.column(j).sum() / n as f64)
        .collect();
    DMatrix::from_fn(k, k, |a, b| {
        (0..n)
            .map(|i| (scores[(i, a)] - means[a]) * (scores[(i, b)] - means[b]))
            .sum::<f64>()
            / (n - 1) as f64
    })
}

/// Greenhouse-Geisser epsilon from the double-centered condition
/// covariance: (tr S)^2 / ((k-1) * sum of squared entries).
fn gg_epsilon(cov: &DMatrix<f64>) -> f64 {
    let k = cov.nrows();
    if k == 2 {
        // two conditions are always spherical
        return 1.0;
    }
    let row_means: Vec<f64> = (0..k).map(|i| cov.row(i).sum() / k as f64).collect();
    let grand = row_means.iter().sum::<f64>() / k as f64;
    let mut trace = 0.0;
    let mut sq_sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            let centered = cov[(i, j)] - row_means[i] - row_means[j] + grand;
            if i == j {
                trace += centered;
            }
            sq_sum += centered * centered;
        }
    }
    let eps = trace * trace / ((k - 1) as f64 * sq_sum);
    eps.clamp(1.0 / (k - 1) as f64, 1.0)
}

/// Orthonormal Helmert contrasts: k-1 rows orthogonal to the all-ones
/// vector.
fn helmert_contrasts(k: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(k - 1, k);
    for i in 1..k {
        let norm = ((i * (i + 1)) as f64).sqrt();
        for j in 0..i {
            c[(i - 1, j)] = 1.0 / norm;
        }
        c[(i - 1, i)] = -(i as f64) / norm;
    }
    c
}

/// Mauchly's W and its chi-square approximation p-value. `None` when
/// the contrast covariance is rank-deficient (too few subjects) or
/// numerically degenerate.
fn mauchly(cov: &DMatrix<f64>, n: usize) -> Option<(f64, f64)> {
    let k = cov.nrows();
    if k == 2 || n - 1 < k - 1 {
        return None;
    }
    let c = helmert_contrasts(k);
    let t = &c * cov * c.transpose();
    let mean_eig = t.trace() / (k - 1) as f64;
    if mean_eig <= 0.0 {
        return None;
    }
    let w = t.determinant() / mean_eig.powi(k as i32 - 1);
    if !(w.is_finite() && w > 0.0 && w <= 1.0 + 1e-12) {
        return None;
    }
    let km1 = (k - 1) as f64;
    let correction = 1.0 - (2.0 * km1 * km1 + km1 + 2.0) / (6.0 * km1 * (n - 1) as f64);
    let chi = -((n - 1) as f64) * correction * w.min(1.0).ln();
    let df = (k * (k - 1) / 2 - 1) as f64;
    Some((w, chi2_sf(chi, df)))
}

/// One-way repeated-measures ANOVA over an n-subjects x k-conditions
/// score matrix. Mauchly's test at alpha = 0.05 decides whether the
/// p-value uses uncorrected or Greenhouse-Geisser-corrected degrees of
/// freedom.
pub fn rm_anova(scores: &Array2<f64>) -> Result<RmAnovaResult> {
    let (n, k) = validate_scores(scores)?;
    let grand = scores.sum() / (n * k) as f64;
    let ss_cond: f64 = (0..k)
        .map(|j| {
            let m = scores.column(j).sum() / n as f64;
            (m - grand).powi(2)
        })
        .sum::<f64>()
        * n as f64;
    let ss_subj: f64 = (0..n)
        .map(|i| {
            let m = scores.row(i).sum() / k as f64;
            (m - grand).powi(2)
        })
        .sum::<f64>()
        * k as f64;
    let ss_total: f64 = scores.iter().map(|v| (v - grand).powi(2)).sum();
    let ss_err = ss_total - ss_cond - ss_subj;
    let scale = ss_total.max(1.0);
    if ss_err <= scale * 1e-12 {
        return Err(Error::Data(
            "zero error variance: condition-by-subject interaction is constant".into(),
        ));
    }

    let df1_raw = (k - 1) as f64;
    let df2_raw = ((k - 1) * (n - 1)) as f64;
    let f = (ss_cond / df1_raw) / (ss_err / df2_raw);

    let cov = condition_covariance(scores);
    let epsilon = gg_epsilon(&cov);
    let mauchly_result = mauchly(&cov, n);
    let sphericity_assumed = match mauchly_result {
        _ if k == 2 => true,
        Some((_, p)) => p > MAUCHLY_ALPHA,
        // untestable sphericity: fall back to the correction
        None => false,
    };
    let (df1, df2) = if sphericity_assumed {
        (df1_raw, df2_raw)
    } else {
        (epsilon * df1_raw, epsilon * df2_raw)
    };
    Ok(RmAnovaResult {
        f,
        df1,
        df2,
        epsilon,
        p: f_sf(f, df1, df2),
        sphericity_assumed,
        mauchly_w: mauchly_result.map(|(w, _)| w),
        mauchly_p: mauchly_result.map(|(_, p)| p),
    })
}

/// All k(k-1)/2 paired t-tests between condition columns, with
/// Bonferroni-corrected p-values (multiplied by the number of
/// comparisons, capped at 1).
pub fn bonferroni_pairwise(scores: &Array2<f64>) -> Result<Vec<PairedTResult>> {
    let (n, k) = validate_scores(scores)?;
    let m = (k * (k - 1) / 2) as f64;
    let df = (n - 1) as f64;
    let mut out = Vec::with_capacity(m as usize);
    for i in 0..k {
        for j in (i + 1)..k {
            let diffs: Vec<f64> = (0..n).map(|s| scores[(s, i)] - scores[(s, j)]).collect();
            let mean = diffs.iter().sum::<f64>() / n as f64;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / df;
            let result = if var == 0.0 {
                if mean == 0.0 {
                    // identical columns: no effect, no evidence
                    PairedTResult {
                        pair: (i, j),
                        t: 0.0,
                        df,
                        p_raw: Some(1.0),
                        p_corrected: Some(1.0),
                        degenerate: false,
                    }
                } else {
                    PairedTResult {
                        pair: (i, j),
                        t: f64::INFINITY * mean.signum(),
                        df,
                        p_raw: None,
                        p_corrected: None,
                        degenerate: true,
                    }
                }
            } else {
                let t = mean / (var / n as f64).sqrt();
                let p = t_sf_two_sided(t, df);
                PairedTResult {
                    pair: (i, j),
                    t,
                    df,
                    p_raw: Some(p),
                    p_corrected: Some((p * m).min(1.0)),
                    degenerate: false,
                }
            };
            out.push(result);
        }
    }
    Ok(out)
}

/// Welch's two-sided unequal-variance t-test with Welch-Satterthwaite
/// degrees of freedom.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Parameter(
            "welch t-test needs at least 2 samples per group".into(),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite sample".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / (na - 1.0);
    let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / (nb - 1.0);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::Data(
            "both samples have zero variance".into(),
        ));
    }
    let sa = va / na;
    let sb = vb / nb;
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchResult {
        t,
        df,
        p: t_sf_two_sided(t, df),
    })
}

// ---------------------------------------------------------------------------
// special functions

/// Lanczos approximation of ln Gamma(x), x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 14] = [
        57.156_235_665_862_923,
        -59.597_960_355_475_49,
        14.136_097_974_741_746,
        -0.491_913_816_097_620_2,
        3.399_464_998_481_189e-5,
        4.652_362_892_704_858e-5,
        -9.837_447_530_487_956e-5,
        1.580_887_032_249_125e-4,
        -2.102_644_417_241_048e-4,
        2.174_396_181_152_126e-4,
        -1.643_181_065_367_639e-4,
        8.441_822_398_385_275e-5,
        -2.619_083_840_158_141e-5,
        3.689_918_265_953_162e-6,
    ];
    let mut series = 0.999_999_999_999_997_1;
    for (i, c) in COEFFS.iter().enumerate() {
        series += c / (x + (i + 1) as f64);
    }
    let tmp = x + 5.242_187_5;
    (x + 0.5) * tmp.ln() - tmp + (2.506_628_274_631_000_5 * series / x).ln()
}

/// Regularized incomplete beta I_x(a, b) via the Lentz continued
/// fraction, using the symmetry relation for fast convergence.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0 && (0.0..=1.0).contains(&x));
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln()
        + b * (1.0 - x).ln())
    .exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;
    const MAX_ITER: usize = 500;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized lower incomplete gamma P(a, x) (series for x < a+1,
/// continued fraction otherwise).
pub fn reg_inc_gamma(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // series expansion
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        // Lentz continued fraction for Q(a, x)
        const FPMIN: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / FPMIN;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < FPMIN {
                d = FPMIN;
            }
            c = b + an / c;
            if c.abs() < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-15 {
                break;
            }
        }
        let q = (-x + a * x.ln() - ln_gamma(a)).exp() * h;
        1.0 - q
    }
}

/// Chi-square survival function P(X >= x) with df degrees of freedom.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    1.0 - reg_inc_gamma(df / 2.0, x / 2.0)
}

/// Two-sided Student-t p-value.
pub fn t_sf_two_sided(t: f64, df: f64) -> f64 {
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// F-distribution survival function P(X >= f).
pub fn f_sf(f: f64, df1: f64, df2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    reg_inc_beta(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))
}
