//! Trial loading, artifact rejection and synthetic dataset generation.
//!
//! The on-disk container is a long-format CSV with one metadata comment
//! line (`# fs=250`) followed by the header
//! `subject,session,trial,cue,artifact,sample,c3,cz,c4`. Sample indices
//! are 0-based and contiguous per trial. Floats are written with Rust's
//! shortest round-trip formatting so a write/load cycle is bit-exact.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const SAMPLING_RATE_HZ: f64 = 250.0;
/// Every trial must cover at least 6 s so all three epoch windows exist.
pub const MIN_TRIAL_SAMPLES: usize = 1500;
/// Synthetic trials are 9 s long.
pub const SYNTH_TRIAL_SAMPLES: usize = 2250;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cue {
    Left,
    Right,
}

impl fmt::Display for Cue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cue::Left => write!(f, "L"),
            Cue::Right => write!(f, "R"),
        }
    }
}

/// One continuous 3-channel recording of a single protocol trial.
///
/// `samples` is 3 channels x T time points in microvolts, channel order
/// fixed as (C3, Cz, C4), sampled at 250 Hz.
#[derive(Debug, Clone)]
pub struct RawTrial {
    pub subject_id: u32,
    pub session: u32,
    pub trial_id: u32,
    pub cue: Cue,
    pub artifact: bool,
    pub samples: Array2<f64>,
}

impl RawTrial {
    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.nrows() != 3 {
            return Err(Error::Integrity(format!(
                "trial {}: expected 3 channels, got {}",
                self.trial_id,
                self.samples.nrows()
            )));
        }
        if self.len() < MIN_TRIAL_SAMPLES {
            return Err(Error::Integrity(format!(
                "trial {} (subject {}, session {}): {} samples, need at least {}",
                self.trial_id,
                self.subject_id,
                self.session,
                self.len(),
                MIN_TRIAL_SAMPLES
            )));
        }
        Ok(())
    }
}

/// Parameters of the synthetic ERD/ERS surrogate dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n_subjects: u32,
    pub trials_per_subject: u32,
    pub mu_freq: f64,
    pub beta_freq: f64,
    pub mu_amp: f64,
    pub erd_depth: f64,
    pub noise_exponent: f64,
    pub rng_seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_subjects: 9,
            trials_per_subject: 280,
            mu_freq: 10.0,
            beta_freq: 20.0,
            mu_amp: 2.0,
            erd_depth: 0.6,
            noise_exponent: 1.0,
            rng_seed: 1,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.trials_per_subject == 0 {
            return Err(Error::Parameter(
                "n_subjects and trials_per_subject must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.erd_depth) {
            return Err(Error::Parameter(format!(
                "erd_depth {} outside [0,1]",
                self.erd_depth
            )));
        }
        for (name, f) in [("mu_freq", self.mu_freq), ("beta_freq", self.beta_freq)] {
            if !(7.0..=30.0).contains(&f) {
                return Err(Error::Parameter(format!(
                    "{name} {f} outside the 7-30 Hz passband"
                )));
            }
        }
        if !(self.mu_amp > 0.0) || !self.mu_amp.is_finite() {
            return Err(Error::Parameter(format!("mu_amp {} invalid", self.mu_amp)));
        }
        if !self.noise_exponent.is_finite() || self.noise_exponent < 0.0 {
            return Err(Error::Parameter(format!(
                "noise_exponent {} invalid",
                self.noise_exponent
            )));
        }
        Ok(())
    }
}

const HEADER: &str = "subject,session,trial,cue,artifact,sample,c3,cz,c4";

/// Load a dataset from the CSV container. Trials come back sorted by
/// (subject, session, trial).
pub fn load_dataset(path: &Path) -> Result<Vec<RawTrial>> {
    let file = File::open(path).map_err(|e| {
        Error::Data(format!("cannot open dataset {}: {e}", path.display()))
    })?;
    let mut lines = BufReader::new(file).lines();

    let meta = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))?
        .map_err(Error::Io)?;
    let fs = parse_fs_line(meta.trim())?;
    if fs != SAMPLING_RATE_HZ {
        return Err(Error::Format(format!(
            "unsupported sampling rate {fs} Hz, expected {SAMPLING_RATE_HZ}"
        )));
    }

    let header = lines
        .next()
        .ok_or_else(|| Error::Format("missing header row".into()))?
        .map_err(Error::Io)?;
    check_header(header.trim())?;

    // rows are grouped per trial in file order; accumulate and close a
    // trial when the key changes
    struct Building {
        key: (u32, u32, u32),
        cue: Cue,
        artifact: bool,
        next_sample: u64,
        rows: Vec<[f64; 3]>,
    }
    let mut trials: Vec<RawTrial> = Vec::new();
    let mut current: Option<Building> = None;

    let finish = |b: Building, trials: &mut Vec<RawTrial>| -> Result<()> {
        let t = b.rows.len();
        let mut samples = Array2::zeros((3, t));
        for (i, row) in b.rows.iter().enumerate() {
            for ch in 0..3 {
                samples[(ch, i)] = row[ch];
            }
        }
        let trial = RawTrial {
            subject_id: b.key.0,
            session: b.key.1,
            trial_id: b.key.2,
            cue: b.cue,
            artifact: b.artifact,
            samples,
        };
        trial.validate()?;
        trials.push(trial);
        Ok(())
    };

    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(Error::Io)?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = parse_row(line, lineno + 3)?;
        let key = (row.subject, row.session, row.trial);
        match current.as_mut() {
            Some(b) if b.key == key => {
                if row.sample != b.next_sample {
                    return Err(Error::Integrity(format!(
                        "trial {} (subject {}, session {}): sample index {} out of order, expected {}",
                        key.2, key.0, key.1, row.sample, b.next_sample
                    )));
                }
                b.next_sample += 1;
                b.rows.push(row.values);
            }
            _ => {
                if let Some(b) = current.take() {
                    finish(b, &mut trials)?;
                }
                if row.sample != 0 {
                    return Err(Error::Integrity(format!(
                        "trial {} (subject {}, session {}): first sample index is {}, expected 0",
                        key.2, key.0, key.1, row.sample
                    )));
                }
                current = Some(Building {
                    key,
                    cue: row.cue,
                    artifact: row.artifact,
                    next_sample: 1,
                    rows: vec![row.values],
                });
            }
        }
    }
    if let Some(b) = current.take() {
        finish(b, &mut trials)?;
    }

    // duplicate trial keys (a trial restarted later in the file) are a
    // grouping violation
    let mut sorted: Vec<RawTrial> = trials;
    sorted.sort_by_key(|t| (t.subject_id, t.session, t.trial_id));
    for pair in sorted.windows(2) {
        if (pair[0].subject_id, pair[0].session, pair[0].trial_id)
            == (pair[1].subject_id, pair[1].session, pair[1].trial_id)
        {
            return Err(Error::Integrity(format!(
                "trial {} (subject {}, session {}): duplicated in file",
                pair[0].trial_id, pair[0].subject_id, pair[0].session
            )));
        }
    }
    Ok(sorted)
}

fn parse_fs_line(line: &str) -> Result<f64> {
    let rest = line
        .strip_prefix('#')
        .ok_or_else(|| Error::Format(format!("first line must be '# fs=250', got '{line}'")))?;
    let rest = rest.trim();
    let value = rest
        .strip_prefix("fs=")
        .ok_or_else(|| Error::Format(format!("metadata line missing 'fs=': '{line}'")))?;
    value
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("bad sampling rate '{value}'")))
}

fn check_header(header: &str) -> Result<()> {
    if header == HEADER {
        return Ok(());
    }
    let got: Vec<&str> = header.split(',').collect();
    let want: Vec<&str> = HEADER.split(',').collect();
    for (i, w) in want.iter().enumerate() {
        match got.get(i) {
            Some(g) if g == w => {}
            Some(g) => {
                return Err(Error::Format(format!(
                    "header column {} is '{g}', expected '{w}'",
                    i + 1
                )))
            }
            None => {
                return Err(Error::Format(format!(
                    "header missing column '{w}'"
                )))
            }
        }
    }
    Err(Error::Format(format!(
        "header has {} columns, expected {}",
        got.len(),
        want.len()
    )))
}

struct Row {
    subject: u32,
    session: u32,
    trial: u32,
    cue: Cue,
    artifact: bool,
    sample: u64,
    values: [f64; 3],
}

fn parse_row(line: &str, lineno: usize) -> Result<Row> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 9 {
        return Err(Error::Format(format!(
            "line {lineno}: {} fields, expected 9",
            fields.len()
        )));
    }
    let int = |idx: usize, name: &str| -> Result<u32> {
        fields[idx]
            .parse()
            .map_err(|_| Error::Format(format!("line {lineno}: bad {name} '{}'", fields[idx])))
    };
    let float = |idx: usize, name: &str| -> Result<f64> {
        fields[idx]
            .parse()
            .map_err(|_| Error::Format(format!("line {lineno}: bad {name} '{}'", fields[idx])))
    };
    let cue = match fields[3] {
        "L" => Cue::Left,
        "R" => Cue::Right,
        other => {
            return Err(Error::Format(format!(
                "line {lineno}: cue must be L or R, got '{other}'"
            )))
        }
    };
    let artifact = match fields[4] {
        "0" => false,
        "1" => true,
        other => {
            return Err(Error::Format(format!(
                "line {lineno}: artifact must be 0 or 1, got '{other}'"
            )))
        }
    };
    Ok(Row {
        subject: int(0, "subject")?,
        session: int(1, "session")?,
        trial: int(2, "trial")?,
        cue,
        artifact,
        sample: fields[5]
            .parse()
            .map_err(|_| Error::Format(format!("line {lineno}: bad sample '{}'", fields[5])))?,
        values: [float(6, "c3")?, float(7, "cz")?, float(8, "c4")?],
    })
}

/// Write a dataset to the CSV container format.
pub fn write_dataset(path: &Path, trials: &[RawTrial]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# fs={}", SAMPLING_RATE_HZ as u64)?;
    writeln!(w, "{HEADER}")?;
    for t in trials {
        for i in 0..t.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                t.subject_id,
                t.session,
                t.trial_id,
                t.cue,
                u8::from(t.artifact),
                i,
                t.samples[(0, i)],
                t.samples[(1, i)],
                t.samples[(2, i)]
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Keep only trials with the artifact flag clear, preserving order.
pub fn reject_artifacts(trials: Vec<RawTrial>) -> Vec<RawTrial> {
    trials.into_iter().filter(|t| !t.artifact).collect()
}

/// Generate a synthetic ERD/ERS dataset.
///
/// Per channel the signal is 1/f noise (unit RMS) plus mu and beta
/// sinusoids with random phases. On the channel contralateral to the
/// cue side, the mu amplitude ramps linearly from full to
/// `(1 - erd_depth) * full` over 3-4 s and holds there through 4-6 s.
/// Cue sides alternate Left/Right with trial index.
pub fn generate_synthetic(params: &SynthParams) -> Result<Vec<RawTrial>> {
    params.validate()?;
    let n = SYNTH_TRIAL_SAMPLES;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut trials = Vec::new();
    for subject in 1..=params.n_subjects {
        for trial_idx in 0..params.trials_per_subject {
            let cue = if trial_idx % 2 == 0 { Cue::Left } else { Cue::Right };
            let tag = format!("synth/s{subject}/t{trial_idx}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.rng_seed, &tag));

            // contralateral channel: left-hand imagery modulates the right
            // hemisphere (C4), right-hand imagery C3
            let erd_channel = match cue {
                Cue::Left => 2,
                Cue::Right => 0,
            };

            let mut samples = Array2::zeros((3, n));
            for ch in 0..3 {
                let noise = pink_noise(n, params.noise_exponent, &mut rng, &*fft, &*ifft);
                let mu_phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
                let beta_phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
                for i in 0..n {
                    let t = i as f64 / SAMPLING_RATE_HZ;
                    let mu_scale = if ch == erd_channel {
                        erd_envelope(t, params.erd_depth)
                    } else {
                        1.0
                    };
                    let mu = params.mu_amp
                        * mu_scale
                        * (std::f64::consts::TAU * params.mu_freq * t + mu_phase).sin();
                    let beta = 0.5
                        * params.mu_amp
                        * (std::f64::consts::TAU * params.beta_freq * t + beta_phase).sin();
                    samples[(ch, i)] = noise[i] + mu + beta;
                }
            }

            trials.push(RawTrial {
                subject_id: subject,
                session: 1 + trial_idx / 60,
                trial_id: trial_idx,
                cue,
                artifact: false,
                samples,
            });
        }
    }
    Ok(trials)
}

fn erd_envelope(t: f64, depth: f64) -> f64 {
    if t < 3.0 {
        1.0
    } else if t < 4.0 {
        1.0 - depth * (t - 3.0)
    } else if t < 6.0 {
        1.0 - depth
    } else {
        1.0
    }
}

/// 1/f^alpha noise by spectral shaping of white Gaussian noise,
/// normalized to unit RMS.
fn pink_noise(
    n: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
    fft: &dyn rustfft::Fft<f64>,
    ifft: &dyn rustfft::Fft<f64>,
) -> Array1<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample(StandardNormal), 0.0))
        .collect();
    fft.process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for (k, v) in buf.iter_mut().enumerate().skip(1) {
        let f = (k.min(n - k)) as f64 * SAMPLING_RATE_HZ / n as f64;
        *v *= f.powf(-alpha / 2.0);
    }
    ifft.process(&mut buf);
    let mut out = Array1::from_iter(buf.iter().map(|c| c.re / n as f64));
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.mapv_inplace(|x| x / rms);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_params() -> SynthParams {
        SynthParams {
            n_subjects: 1,
            trials_per_subject: 4,
            ..SynthParams::default()
        }
    }

    #[test]
    fn synthetic_trials_pass_invariants() {
        let trials = generate_synthetic(&small_params()).unwrap();
        assert_eq!(trials.len(), 4);
        for t in &trials {
            t.validate().unwrap();
            assert_eq!(t.len(), SYNTH_TRIAL_SAMPLES);
        }
        // cue alternates
        assert_eq!(trials[0].cue, Cue::Left);
        assert_eq!(trials[1].cue, Cue::Right);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small_params()).unwrap();
        let b = generate_synthetic(&small_params()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.samples, y.samples);
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let trials = generate_synthetic(&small_params()).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        write_dataset(&path, &trials).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), trials.len());
        for (a, b) in trials.iter().zip(&loaded) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.cue, b.cue);
            assert_eq!(a.samples, b.samples);
        }
    }

    #[test]
    fn load_single_trial() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.csv");
        let mut trial = RawTrial {
            subject_id: 1,
            session: 1,
            trial_id: 0,
            cue: Cue::Left,
            artifact: false,
            samples: Array2::zeros((3, 2250)),
        };
        trial.samples[(0, 5)] = 1.25;
        write_dataset(&path, std::slice::from_ref(&trial)).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].len(), 2250);
        assert_eq!(loaded[0].samples[(0, 5)], 1.25);
    }

    #[test]
    fn duplicate_sample_index_names_trial() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dup.csv");
        let mut body = String::from("# fs=250\n");
        body.push_str(HEADER);
        body.push('\n');
        for i in 0..10u32 {
            // trial 3 repeats sample index 4
            let s = if i >= 5 { i - 1 } else { i };
            body.push_str(&format!("1,1,3,L,0,{s},0,0,0\n"));
        }
        std::fs::write(&path, body).unwrap();
        let err = load_dataset(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("trial 3"), "{msg}");
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn short_trial_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.csv");
        let trial = RawTrial {
            subject_id: 1,
            session: 1,
            trial_id: 7,
            cue: Cue::Right,
            artifact: false,
            samples: Array2::zeros((3, 1499)),
        };
        write_dataset(&path, &[trial]).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("trial 7"));
    }

    #[test]
    fn malformed_header_names_column() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "# fs=250\nsubject,session,trial,cue,artifact,sample,c3,c4,cz\n",
        )
        .unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("c4"), "{err}");
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn artifact_rejection_preserves_order_and_is_idempotent() {
        let mut trials = generate_synthetic(&SynthParams {
            trials_per_subject: 10,
            ..small_params()
        })
        .unwrap();
        for i in [1usize, 4, 9] {
            trials[i].artifact = true;
        }
        let kept = reject_artifacts(trials);
        assert_eq!(kept.len(), 7);
        let ids: Vec<u32> = kept.iter().map(|t| t.trial_id).collect();
        assert_eq!(ids, vec![0, 2, 3, 5, 6, 7, 8]);
        let again = reject_artifacts(kept.clone());
        assert_eq!(again.len(), kept.len());
    }

    #[test]
    fn all_flagged_gives_empty() {
        let mut trials = generate_synthetic(&small_params()).unwrap();
        for t in &mut trials {
            t.artifact = true;
        }
        assert!(reject_artifacts(trials).is_empty());
    }

    #[test]
    fn invalid_params_rejected() {
        let p = SynthParams {
            erd_depth: 1.5,
            ..SynthParams::default()
        };
        assert!(matches!(generate_synthetic(&p), Err(Error::Parameter(_))));
        let p = SynthParams {
            mu_freq: 3.0,
            ..SynthParams::default()
        };
        assert!(matches!(generate_synthetic(&p), Err(Error::Parameter(_))));
    }

    /// Periodogram band power, the independent oracle for ERD checks.
    fn band_power(x: &[f64], lo: f64, hi: f64) -> f64 {
        let n = x.len();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut buf);
        let mut p = 0.0;
        for k in 1..n / 2 {
            let f = k as f64 * SAMPLING_RATE_HZ / n as f64;
            if f >= lo && f <= hi {
                p += buf[k].norm_sqr();
            }
        }
        p / (n as f64 * n as f64)
    }

    #[test]
    fn zero_erd_leaves_mu_power_flat() {
        let p = SynthParams {
            n_subjects: 1,
            trials_per_subject: 40,
            erd_depth: 0.0,
            ..SynthParams::default()
        };
        let trials = generate_synthetic(&p).unwrap();
        let (mut bg, mut pure) = (0.0, 0.0);
        for t in &trials {
            let c3: Vec<f64> = t.samples.row(0).to_vec();
            bg += band_power(&c3[0..500], 8.0, 12.0);
            pure += band_power(&c3[1000..1500], 8.0, 12.0);
        }
        let ratio = pure / bg;
        assert!((0.9..=1.1).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn erd_halves_amplitude_quarters_power() {
        let p = SynthParams {
            n_subjects: 1,
            trials_per_subject: 200,
            erd_depth: 0.5,
            ..SynthParams::default()
        };
        let trials = generate_synthetic(&p).unwrap();
        let (mut bg, mut pure) = (0.0, 0.0);
        for t in trials.iter().filter(|t| t.cue == Cue::Right) {
            let c3: Vec<f64> = t.samples.row(0).to_vec();
            bg += band_power(&c3[0..500], 8.0, 12.0);
            pure += band_power(&c3[1000..1500], 8.0, 12.0);
        }
        let ratio = pure / bg;
        assert!(
            (0.25 / 1.5..=0.25 * 1.5).contains(&ratio),
            "power ratio {ratio}, expected about 0.25"
        );
    }
}
