//! Flat key = value run configuration. Every key has a default; an
//! unknown or repeated key is a hard error so typos cannot silently
//! fall back to defaults. A written manifest parses back with this
//! same parser, which makes any run replayable from its manifest.

use std::path::{Path, PathBuf};

use crate::dsp::BandpassSpec;
use crate::error::{Error, Result};
use crate::experiments::Classifier;
use crate::ingest::SynthParams;
use crate::nnet::TrainOptions;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// CSV dataset to load; when absent, a synthetic dataset is
    /// generated in memory from the synth_* parameters
    pub dataset_path: Option<PathBuf>,
    pub synth: SynthParams,
    pub band: BandpassSpec,
    /// subset of 1..=5, sorted, deduplicated
    pub tasks: Vec<u8>,
    pub classifiers: Vec<Classifier>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub svm_c: f64,
    /// master seed; every other seed derives from it via purpose tags
    pub seed: u64,
    pub out_dir: PathBuf,
    /// keep all epochs of one trial in the same test fold
    pub group_trials: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_path: None,
            synth: SynthParams::default(),
            band: BandpassSpec::default(),
            tasks: vec![1, 2, 3, 4, 5],
            classifiers: vec![Classifier::CnnFc, Classifier::CspSvm],
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            svm_c: 1.0,
            seed: 0,
            out_dir: PathBuf::new(),
            group_trials: true,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "key {key} expects true or false, got {value:?}"
        ))),
    }
}

fn parse_tasks(value: &str) -> Result<Vec<u8>> {
    let mut tasks: Vec<u8> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num::<u8>("tasks", s))
        .collect::<Result<_>>()?;
    tasks.sort_unstable();
    tasks.dedup();
    if tasks.is_empty() || tasks.iter().any(|&t| !(1..=5).contains(&t)) {
        return Err(Error::Config(format!(
            "tasks must be a non-empty subset of 1..5, got {value:?}"
        )));
    }
    Ok(tasks)
}

fn parse_classifiers(value: &str) -> Result<Vec<Classifier>> {
    let mut out = Vec::new();
    for token in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let c = match token.to_ascii_lowercase().as_str() {
            "cnn-fc" => Classifier::CnnFc,
            "csp-svm" => Classifier::CspSvm,
            _ => {
                return Err(Error::Config(format!(
                    "unknown classifier {token:?} (expected cnn-fc or csp-svm)"
                )))
            }
        };
        if !out.contains(&c) {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("classifier list is empty".into()));
    }
    // canonical order for deterministic reports
    out.sort_by_key(|c| c.as_str());
    Ok(out)
}

impl RunConfig {
    /// Parse a config file body. Lines are `key = value`; `#` starts a
    /// comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
            seen.push(key.to_string());
            match key {
                "dataset_path" => config.dataset_path = Some(PathBuf::from(value)),
                "seed" => config.seed = parse_num(key, value)?,
                "out_dir" => config.out_dir = PathBuf::from(value),
                "tasks" => config.tasks = parse_tasks(value)?,
                "classifiers" => config.classifiers = parse_classifiers(value)?,
                "group_trials" => config.group_trials = parse_bool(key, value)?,
                "batch_size" => config.batch_size = parse_num(key, value)?,
                "max_epochs" => config.max_epochs = parse_num(key, value)?,
                "patience" => config.patience = parse_num(key, value)?,
                "svm_c" => config.svm_c = parse_num(key, value)?,
                "band_low_hz" => config.band.low_hz = parse_num(key, value)?,
                "band_high_hz" => config.band.high_hz = parse_num(key, value)?,
                "band_order" => config.band.order = parse_num(key, value)?,
                "synth_subjects" => config.synth.n_subjects = parse_num(key, value)?,
                "synth_trials" => config.synth.trials_per_subject = parse_num(key, value)?,
                "synth_mu_freq" => config.synth.mu_freq = parse_num(key, value)?,
                "synth_beta_freq" => config.synth.beta_freq = parse_num(key, value)?,
                "synth_mu_amp" => config.synth.mu_amp = parse_num(key, value)?,
                "synth_erd_depth" => config.synth.erd_depth = parse_num(key, value)?,
                "synth_noise_exponent" => {
                    config.synth.noise_exponent = parse_num(key, value)?
                }
                _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        RunConfig::parse(&text)
    }

    /// Apply command-line overrides and fill the default output
    /// directory (which depends on the final seed).
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> RunConfig {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        if self.out_dir.as_os_str().is_empty() {
            self.out_dir = PathBuf::from(format!("results/run-{:016x}", self.seed));
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.band.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if !(self.svm_c > 0.0 && self.svm_c.is_finite()) {
            return Err(Error::Config(format!(
                "svm_c must be positive, got {}",
                self.svm_c
            )));
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
        }
    }

    /// Serialize every resolved key back into parseable config lines.
    pub fn to_manifest_body(&self) -> String {
        let mut out = String::new();
        if let Some(p) = &self.dataset_path {
            out.push_str(&format!("dataset_path = {}\n", p.display()));
        }
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        let tasks: Vec<String> = self.tasks.iter().map(u8::to_string).collect();
        out.push_str(&format!("tasks = {}\n", tasks.join(",")));
        let classifiers: Vec<String> = self
            .classifiers
            .iter()
            .map(|c| c.as_str().to_ascii_lowercase())
            .collect();
        out.push_str(&format!("classifiers = {}\n", classifiers.join(",")));
        out.push_str(&format!("group_trials = {}\n", self.group_trials));
        out.push_str(&format!("batch_size = {}\n", self.batch_size));
        out.push_str(&format!("max_epochs = {}\n", self.max_epochs));
        out.push_str(&format!("patience = {}\n", self.patience));
        out.push_str(&format!("svm_c = {}\n", self.svm_c));
        out.push_str(&format!("band_low_hz = {}\n", self.band.low_hz));
        out.push_str(&format!("band_high_hz = {}\n", self.band.high_hz));
        out.push_str(&format!("band_order = {}\n", self.band.order));
        out.push_str(&format!("synth_subjects = {}\n", self.synth.n_subjects));
        out.push_str(&format!("synth_trials = {}\n", self.synth.trials_per_subject));
        out.push_str(&format!("synth_mu_freq = {}\n", self.synth.mu_freq));
        out.push_str(&format!("synth_beta_freq = {}\n", self.synth.beta_freq));
        out.push_str(&format!("synth_mu_amp = {}\n", self.synth.mu_amp));
        out.push_str(&format!("synth_erd_depth = {}\n", self.synth.erd_depth));
        out.push_str(&format!(
            "synth_noise_exponent = {}\n",
            self.synth.noise_exponent
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let config = RunConfig::parse("").unwrap();
        assert_eq!(config.tasks, vec![1, 2, 3, 4, 5]);
        assert_eq!(config.classifiers.len(), 2);
        assert_eq!(config.batch_size, 64);
        assert_eq!(config.seed, 0);
        assert!(config.group_trials);
        assert_eq!(config.synth.n_subjects, 9);
        assert_eq!(config.synth.trials_per_subject, 280);
    }

    #[test]
    fn keys_comments_and_lists_parse() {
        let text = "\
# comment line
seed = 42
tasks = 3, 1, 3
classifiers = csp-svm
group_trials = false   # trailing comment
synth_erd_depth = 0.4
";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.tasks, vec![1, 3]);
        assert_eq!(config.classifiers, vec![Classifier::CspSvm]);
        assert!(!config.group_trials);
        assert_eq!(config.synth.erd_depth, 0.4);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_hard_errors() {
        assert!(matches!(
            RunConfig::parse("sede = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::parse("tasks = 0").is_err());
        assert!(RunConfig::parse("tasks = 6").is_err());
        assert!(RunConfig::parse("classifiers = mlp").is_err());
        assert!(RunConfig::parse("group_trials = yes").is_err());
        assert!(RunConfig::parse("seed").is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let config = RunConfig::parse(
            "seed = 9\ntasks = 2,4\nclassifiers = cnn-fc\nsvm_c = 0.5\nbatch_size = 16",
        )
        .unwrap()
        .resolve(None, None);
        let replayed = RunConfig::parse(&config.to_manifest_body()).unwrap();
        assert_eq!(config, replayed);
    }

    #[test]
    fn resolve_applies_overrides_and_default_out_dir() {
        let config = RunConfig::parse("seed = 3").unwrap().resolve(Some(8), None);
        assert_eq!(config.seed, 8);
        assert_eq!(
            config.out_dir,
            PathBuf::from("results/run-0000000000000008")
        );
        let config = RunConfig::default().resolve(None, Some(PathBuf::from("/tmp/x")));
        assert_eq!(config.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn invalid_numbers_are_rejected() {
        assert!(RunConfig::parse("batch_size = 0").is_err());
        assert!(RunConfig::parse("svm_c = -1").is_err());
        assert!(RunConfig::parse("band_low_hz = high").is_err());
    }
}
