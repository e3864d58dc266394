//! Preprocessing chain: zero-phase Butterworth bandpass, protocol-timed
//! epoch extraction, and per-channel 0-1 standardization.

use ndarray::Array2;
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::ingest::{RawTrial, MIN_TRIAL_SAMPLES, SAMPLING_RATE_HZ};

pub const EPOCH_SAMPLES: usize = 500;
pub const N_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EpochClass {
    Background,
    Transitional,
    PureImagery,
}

impl EpochClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            EpochClass::Background => "background",
            EpochClass::Transitional => "transitional",
            EpochClass::PureImagery => "pure",
        }
    }
}

/// A 500-sample x 3-channel window cut from one trial.
///
/// `samples` is time-major: 500 rows x 3 columns (C3, Cz, C4).
#[derive(Debug, Clone)]
pub struct Epoch {
    pub samples: Array2<f64>,
    pub label: EpochClass,
    pub subject_id: u32,
    pub trial_id: u32,
}

/// Bandpass corner frequencies and design order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandpassSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
    pub fs: f64,
}

impl Default for BandpassSpec {
    fn default() -> Self {
        BandpassSpec {
            low_hz: 7.0,
            high_hz: 30.0,
            order: 4,
            fs: SAMPLING_RATE_HZ,
        }
    }
}

impl BandpassSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < self.fs / 2.0) {
            return Err(Error::Parameter(format!(
                "bandpass corners must satisfy 0 < {} < {} < {}",
                self.low_hz,
                self.high_hz,
                self.fs / 2.0
            )));
        }
        if self.order == 0 || self.order > 12 {
            return Err(Error::Parameter(format!(
                "filter order {} out of range 1-12",
                self.order
            )));
        }
        Ok(())
    }
}

/// Digital IIR transfer function b(z)/a(z), direct form.
#[derive(Debug, Clone)]
pub struct Sos {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

/// Design an order-N Butterworth bandpass by analog prototype,
/// lowpass-to-bandpass transform and bilinear transform. The digital
/// filter has order 2N.
pub fn butter_bandpass(spec: &BandpassSpec) -> Result<Sos> {
    spec.validate()?;
    let n = spec.order;
    let fs2 = 2.0 * spec.fs;
    // prewarped analog corner frequencies
    let wl = fs2 * (std::f64::consts::PI * spec.low_hz / spec.fs).tan();
    let wh = fs2 * (std::f64::consts::PI * spec.high_hz / spec.fs).tan();
    let w0 = (wl * wh).sqrt();
    let bw = wh - wl;

    // analog lowpass prototype poles on the left unit semicircle
    let mut analog_poles: Vec<Complex<f64>> = Vec::with_capacity(2 * n);
    for k in 0..n {
        let theta = std::f64::consts::PI * (2.0 * k as f64 + 1.0 + n as f64) / (2.0 * n as f64);
        let p = Complex::from_polar(1.0, theta);
        // lowpass -> bandpass: each prototype pole splits in two,
        // s^2 - bw*p*s + w0^2 = 0
        let half = 0.5 * bw * p;
        let disc = (half * half - Complex::new(w0 * w0, 0.0)).sqrt();
        analog_poles.push(half + disc);
        analog_poles.push(half - disc);
    }

    // bilinear transform z = (2fs + s) / (2fs - s)
    let digital_poles: Vec<Complex<f64>> = analog_poles
        .iter()
        .map(|&s| (Complex::new(fs2, 0.0) + s) / (Complex::new(fs2, 0.0) - s))
        .collect();
    // bandpass zeros: n at z=1 and n at z=-1
    let mut digital_zeros = vec![Complex::new(1.0, 0.0); n];
    digital_zeros.extend(vec![Complex::new(-1.0, 0.0); n]);

    let b_unnorm = poly_from_roots(&digital_zeros);
    let a = poly_from_roots(&digital_poles);

    // normalize so the peak passband gain is exactly 1 (bilinear
    // warping shifts the peak slightly off the geometric center)
    let mut peak = 0.0f64;
    for i in 0..=2048 {
        let f = spec.low_hz + (spec.high_hz - spec.low_hz) * i as f64 / 2048.0;
        let z = Complex::from_polar(1.0, std::f64::consts::TAU * f / spec.fs);
        let h = eval_poly(&b_unnorm, z) / eval_poly(&a, z);
        peak = peak.max(h.norm());
    }
    let gain = 1.0 / peak;
    if !gain.is_finite() {
        return Err(Error::Numerical("filter gain normalization failed".into()));
    }
    let b: Vec<f64> = b_unnorm.iter().map(|c| c * gain).collect();
    Ok(Sos { b, a })
}

fn poly_from_roots(roots: &[Complex<f64>]) -> Vec<f64> {
    let mut coeffs = vec![Complex::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.iter().map(|c| c.re).collect()
}

fn eval_poly(coeffs: &[f64], z: Complex<f64>) -> Complex<f64> {
    let mut acc = Complex::new(0.0, 0.0);
    for &c in coeffs {
        acc = acc * z + Complex::new(c, 0.0);
    }
    acc
}

fn lfilter(sos: &Sos, x: &[f64]) -> Vec<f64> {
    let nb = sos.b.len();
    let na = sos.a.len();
    let mut y = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut acc = 0.0;
        for (j, &bj) in sos.b.iter().enumerate().take(nb.min(i + 1)) {
            acc += bj * x[i - j];
        }
        for (j, &aj) in sos.a.iter().enumerate().skip(1).take(na - 1) {
            if j <= i {
                acc -= aj * y[i - j];
            }
        }
        y[i] = acc / sos.a[0];
    }
    y
}

/// Forward-backward filtering of one channel with reflective padding of
/// three times the digital filter order at each end.
pub fn filtfilt(sos: &Sos, x: &[f64]) -> Result<Vec<f64>> {
    let pad = 3 * (sos.a.len() - 1);
    if x.len() <= pad {
        return Err(Error::Data(format!(
            "signal of {} samples too short for pad {pad}",
            x.len()
        )));
    }
    let n = x.len();
    let mut padded = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        padded.push(x[i]);
    }
    padded.extend_from_slice(x);
    for i in 1..=pad {
        padded.push(x[n - 1 - i]);
    }

    let mut y = lfilter(sos, &padded);
    y.reverse();
    let mut y = lfilter(sos, &y);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// Filter every channel of the trial, zero phase, returning a copy.
pub fn bandpass_filtfilt(trial: &RawTrial, spec: &BandpassSpec) -> Result<RawTrial> {
    let sos = butter_bandpass(spec)?;
    let mut out = trial.clone();
    for ch in 0..trial.samples.nrows() {
        let row: Vec<f64> = trial.samples.row(ch).to_vec();
        let filtered = filtfilt(&sos, &row)?;
        for (i, v) in filtered.into_iter().enumerate() {
            out.samples[(ch, i)] = v;
        }
    }
    Ok(out)
}

/// Cut the three protocol windows from a trial: background 0-2 s,
/// transitional 3-5 s, pure imagery 4-6 s. Returned epochs are
/// unstandardized.
pub fn extract_epochs(trial: &RawTrial) -> Result<[Epoch; 3]> {
    if trial.len() < MIN_TRIAL_SAMPLES {
        return Err(Error::Integrity(format!(
            "trial {} has {} samples, need {MIN_TRIAL_SAMPLES} for epoching",
            trial.trial_id,
            trial.len()
        )));
    }
    let window = |start: usize, label: EpochClass| {
        let mut samples = Array2::zeros((EPOCH_SAMPLES, N_CHANNELS));
        for t in 0..EPOCH_SAMPLES {
            for ch in 0..N_CHANNELS {
                samples[(t, ch)] = trial.samples[(ch, start + t)];
            }
        }
        Epoch {
            samples,
            label,
            subject_id: trial.subject_id,
            trial_id: trial.trial_id,
        }
    };
    Ok([
        window(0, EpochClass::Background),
        window(750, EpochClass::Transitional),
        window(1000, EpochClass::PureImagery),
    ])
}

/// Per-channel min-max scaling into [0,1]; a constant channel maps to 0.5.
pub fn standardize01(epoch: &Epoch) -> Epoch {
    let mut out = epoch.clone();
    for ch in 0..out.samples.ncols() {
        let col = epoch.samples.column(ch);
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        for t in 0..out.samples.nrows() {
            out.samples[(t, ch)] = if range > 0.0 {
                (epoch.samples[(t, ch)] - min) / range
            } else {
                0.5
            };
        }
    }
    out
}
