//! The five joint-training tasks: dataset assembly by mixing ratio,
//! stratified ten-fold cross-validation, per-fold classifier runs and
//! Table-style mean ± standard-error summaries.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::csp::{csp_features, fit_csp};
use crate::dsp::{
    bandpass_filtfilt, extract_epochs, standardize01, BandpassSpec, Epoch, EpochClass,
    EPOCH_SAMPLES, N_CHANNELS,
};
use crate::error::{Error, Result};
use crate::ingest::RawTrial;
use crate::nnet::{build_network, train_network, Network, NetworkSpec, TrainOptions};
use crate::seed::derive_seed;
use crate::svm::{svm_predict, train_svm};

pub const N_FOLDS: usize = 10;

/// One of the five task definitions: how the positive (imagery) class
/// mixes transitional and pure epochs. The negative class is always
/// background.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub task_id: u8,
    /// transitional : pure mixing ratio for the positive class
    pub ratio_transitional: u32,
    pub ratio_pure: u32,
}

impl TaskSpec {
    pub fn new(task_id: u8) -> Result<TaskSpec> {
        let (ratio_transitional, ratio_pure) = match task_id {
            1 => (0, 1),
            2 => (1, 0),
            3 => (1, 1),
            4 => (1, 4),
            5 => (4, 1),
            other => {
                return Err(Error::Parameter(format!(
                    "task id must be 1-5, got {other}"
                )))
            }
        };
        Ok(TaskSpec {
            task_id,
            ratio_transitional,
            ratio_pure,
        })
    }

    pub fn all() -> Vec<TaskSpec> {
        (1..=5).map(|t| TaskSpec::new(t).unwrap()).collect()
    }
}

/// A labeled example: label 1 = imagery (positive), 0 = background.
#[derive(Debug, Clone)]
pub struct Example {
    pub epoch: Epoch,
    pub label: usize,
}

/// Standardized epochs grouped by window class, ready for assembly.
#[derive(Debug, Clone, Default)]
pub struct EpochPools {
    pub background: Vec<Epoch>,
    pub transitional: Vec<Epoch>,
    pub pure_imagery: Vec<Epoch>,
}

impl EpochPools {
    /// Full preprocessing: band-pass filtfilt, window extraction and
    /// per-epoch min-max standardization. Artifact trials must already
    /// be rejected.
    pub fn from_trials(trials: &[RawTrial], band: &BandpassSpec) -> Result<EpochPools> {
        let mut pools = EpochPools::default();
        for trial in trials {
            let filtered = bandpass_filtfilt(trial, band)?;
            for epoch in extract_epochs(&filtered)? {
                let standardized = standardize01(&epoch);
                match standardized.label {
                    EpochClass::Background => pools.background.push(standardized),
                    EpochClass::Transitional => pools.transitional.push(standardized),
                    EpochClass::PureImagery => pools.pure_imagery.push(standardized),
                }
            }
        }
        Ok(pools)
    }
}

fn subsample(pool: &[Epoch], count: usize, rng: &mut ChaCha8Rng) -> Vec<Epoch> {
    let mut chosen = rand::seq::index::sample(rng, pool.len(), count).into_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| pool[i].clone()).collect()
}

/// Build a balanced binary example set for one task. The scarcer
/// positive pool binds: the largest unit count k with k*ratio_t
/// transitional, k*ratio_p pure and k*(ratio_t+ratio_p) background
/// epochs available is used, and every pool is subsampled uniformly
/// without replacement (seeded).
pub fn assemble_task(pools: &EpochPools, spec: &TaskSpec, seed: u64) -> Result<Vec<Example>> {
    let rt = spec.ratio_transitional as usize;
    let rp = spec.ratio_pure as usize;
    if rt > 0 && pools.transitional.is_empty() {
        return Err(Error::Config(format!(
            "task {} needs transitional epochs but the pool is empty",
            spec.task_id
        )));
    }
    if rp > 0 && pools.pure_imagery.is_empty() {
        return Err(Error::Config(format!(
            "task {} needs pure-imagery epochs but the pool is empty",
            spec.task_id
        )));
    }
    if pools.background.is_empty() {
        return Err(Error::Config("background pool is empty".into()));
    }

    let mut k = pools.background.len() / (rt + rp);
    if rt > 0 {
        k = k.min(pools.transitional.len() / rt);
    }
    if rp > 0 {
        k = k.min(pools.pure_imagery.len() / rp);
    }
    if k == 0 {
        return Err(Error::Config(format!(
            "pools too small for task {} (ratio {}:{})",
            spec.task_id, rt, rp
        )));
    }

    let tag = format!("task{}", spec.task_id);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &tag));
    let mut examples = Vec::with_capacity(2 * k * (rt + rp));
    for epoch in subsample(&pools.transitional, k * rt, &mut rng) {
        examples.push(Example { epoch, label: 1 });
    }
    for epoch in subsample(&pools.pure_imagery, k * rp, &mut rng) {
        examples.push(Example { epoch, label: 1 });
    }
    for epoch in subsample(&pools.background, k * (rt + rp), &mut rng) {
        examples.push(Example { epoch, label: 0 });
    }
    Ok(examples)
}

/// Index lists for one cross-validation fold.
#[derive(Debug, Clone, Default)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Class-stratified ten-fold split: 10% test per fold, then the
/// remainder divided 81% train / 9% validation (fractions of the
/// total). With `group_trials` every epoch of one recording trial
/// lands in the same test fold, so overlapping windows cannot straddle
/// a test boundary.
pub fn make_folds(examples: &[Example], group_trials: bool, seed: u64) -> Result<Vec<Fold>> {
    for label in [0usize, 1] {
        let count = examples.iter().filter(|e| e.label == label).count();
        if count < 2 * N_FOLDS {
            return Err(Error::Config(format!(
                "class {label} has {count} examples; need at least {} to stratify",
                2 * N_FOLDS
            )));
        }
    }

    let mut folds = vec![Fold::default(); N_FOLDS];
    if group_trials {
        // deal whole trials into test shares, smallest share first
        let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            groups
                .entry((e.epoch.subject_id, e.epoch.trial_id))
                .or_default()
                .push(i);
        }
        let mut keys: Vec<(u32, u32)> = groups.keys().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "folds/groups"));
        keys.shuffle(&mut rng);
        for key in keys {
            let smallest = (0..N_FOLDS)
                .min_by_key(|&f| folds[f].test.len())
                .unwrap();
            folds[smallest].test.extend(&groups[&key]);
        }
    } else {
        // per-class round-robin over a seeded shuffle
        for label in [0usize, 1] {
            let mut idx: Vec<usize> = examples
                .iter()
                .enumerate()
                .filter(|(_, e)| e.label == label)
                .map(|(i, _)| i)
                .collect();
            let tag = format!("folds/class{label}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &tag));
            idx.shuffle(&mut rng);
            for (pos, i) in idx.into_iter().enumerate() {
                folds[pos % N_FOLDS].test.push(i);
            }
        }
    }

    for (f, fold) in folds.iter_mut().enumerate() {
        fold.test.sort_unstable();
        let in_test: Vec<bool> = {
            let mut mask = vec![false; examples.len()];
            for &i in &fold.test {
                mask[i] = true;
            }
            mask
        };
        // stratified validation split of the remaining 90%
        for label in [0usize, 1] {
            let mut rest: Vec<usize> = examples
                .iter()
                .enumerate()
                .filter(|(i, e)| !in_test[*i] && e.label == label)
                .map(|(i, _)| i)
                .collect();
            let tag = format!("folds/val{f}/class{label}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &tag));
            rest.shuffle(&mut rng);
            let n_val = rest.len() / N_FOLDS;
            fold.validation.extend(rest.drain(..n_val));
            fold.train.extend(rest);
        }
        fold.validation.sort_unstable();
        fold.train.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classifier {
    CnnFc,
    CspSvm,
}

impl Classifier {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classifier::CnnFc => "CNN-FC",
            Classifier::CspSvm => "CSP-SVM",
        }
    }
}

impl fmt::Display for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metrics of one test fold. Sensitivity/specificity are `None` when
/// their denominator is zero.
#[derive(Debug, Clone, Copy)]
pub struct FoldResult {
    pub fold: usize,
    pub classifier: Classifier,
    pub tp: u32,
    pub fp: u32,
    pub tn: u32,
    pub fn_: u32,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Confusion counts and derived metrics from parallel prediction and
/// truth lists (1 = imagery).
pub fn fold_metrics(
    fold: usize,
    classifier: Classifier,
    predictions: &[usize],
    truth: &[usize],
) -> Result<FoldResult> {
    if predictions.len() != truth.len() || predictions.is_empty() {
        return Err(Error::Parameter(
            "prediction and truth lists must be non-empty and equal-length".into(),
        ));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0u32, 0u32, 0u32, 0u32);
    for (&p, &t) in predictions.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            (0, 1) => fn_ += 1,
            _ => return Err(Error::Parameter("labels must be 0 or 1".into())),
        }
    }
    let total = (tp + fp + tn + fn_) as f64;
    let ratio = |num: u32, den: u32| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Ok(FoldResult {
        fold,
        classifier,
        tp,
        fp,
        tn,
        fn_,
        accuracy: (tp + tn) as f64 / total,
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub svm_c: f64,
    pub train: TrainOptions,
    pub group_trials: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            svm_c: 1.0,
            train: TrainOptions::default(),
            group_trials: true,
        }
    }
}

fn epoch_batch(examples: &[Example], idx: &[usize]) -> Array3<f32> {
    let mut x = Array3::zeros((idx.len(), N_CHANNELS, EPOCH_SAMPLES));
    for (row, &i) in idx.iter().enumerate() {
        let samples = &examples[i].epoch.samples;
        for t in 0..EPOCH_SAMPLES {
            for ch in 0..N_CHANNELS {
                x[(row, ch, t)] = samples[(t, ch)] as f32;
            }
        }
    }
    x
}

fn labels_of(examples: &[Example], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| examples[i].label).collect()
}

fn assert_fold_hygiene(fold: &Fold, n: usize) {
    let mut seen = vec![0u8; n];
    for &i in fold.test.iter().chain(&fold.validation).chain(&fold.train) {
        seen[i] += 1;
        assert!(seen[i] == 1, "example {i} appears in two splits of a fold");
    }
}

fn run_fold_cnn(
    examples: &[Example],
    fold: &Fold,
    fold_idx: usize,
    options: &RunOptions,
    seed: u64,
) -> Result<FoldResult> {
    let spec = NetworkSpec::cnn_fc();
    let mut network: Network<f32> =
        build_network(&spec, derive_seed(seed, &format!("init/fold{fold_idx}")))?;
    let train_x = epoch_batch(examples, &fold.train);
    let val_x = epoch_batch(examples, &fold.validation);
    train_network(
        &mut network,
        &train_x,
        &labels_of(examples, &fold.train),
        &val_x,
        &labels_of(examples, &fold.validation),
        &options.train,
        derive_seed(seed, &format!("train/fold{fold_idx}")),
    )?;
    let predictions = network.predict(&epoch_batch(examples, &fold.test))?;
    fold_metrics(
        fold_idx,
        Classifier::CnnFc,
        &predictions,
        &labels_of(examples, &fold.test),
    )
}

fn run_fold_csp_svm(
    examples: &[Example],
    fold: &Fold,
    fold_idx: usize,
    options: &RunOptions,
) -> Result<FoldResult> {
    // validation merges into training for the classical pipeline
    let mut train_idx = fold.train.clone();
    train_idx.extend(&fold.validation);
    train_idx.sort_unstable();

    let positives: Vec<Epoch> = train_idx
        .iter()
        .filter(|&&i| examples[i].label == 1)
        .map(|&i| examples[i].epoch.clone())
        .collect();
    let negatives: Vec<Epoch> = train_idx
        .iter()
        .filter(|&&i| examples[i].label == 0)
        .map(|&i| examples[i].epoch.clone())
        .collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Config(
            "fold training split contains a single class".into(),
        ));
    }
    let csp = fit_csp(&positives, &negatives)?;

    let features: Vec<[f64; 3]> = train_idx
        .iter()
        .map(|&i| csp_features(&csp, &examples[i].epoch))
        .collect::<Result<_>>()?;
    let labels: Vec<i8> = train_idx
        .iter()
        .map(|&i| if examples[i].label == 1 { 1 } else { -1 })
        .collect();
    let svm = train_svm(&features, &labels, options.svm_c)?;

    let predictions: Vec<usize> = fold
        .test
        .iter()
        .map(|&i| {
            let f = csp_features(&csp, &examples[i].epoch)?;
            Ok(usize::from(svm_predict(&svm, &f).0 == 1))
        })
        .collect::<Result<_>>()?;
    fold_metrics(
        fold_idx,
        Classifier::CspSvm,
        &predictions,
        &labels_of(examples, &fold.test),
    )
}

/// Ten-fold cross-validation of one classifier over an assembled
/// example set. Folds, network initialization and training randomness
/// all derive from `seed`.
pub fn run_task(
    examples: &[Example],
    classifier: Classifier,
    options: &RunOptions,
    seed: u64,
) -> Result<Vec<FoldResult>> {
    let folds = make_folds(examples, options.group_trials, derive_seed(seed, "folds"))?;
    let mut results = Vec::with_capacity(folds.len());
    for (fold_idx, fold) in folds.iter().enumerate() {
        assert_fold_hygiene(fold, examples.len());
        let result = match classifier {
            Classifier::CnnFc => run_fold_cnn(examples, fold, fold_idx, options, seed)?,
            Classifier::CspSvm => run_fold_csp_svm(examples, fold, fold_idx, options)?,
        };
        results.push(result);
    }
    Ok(results)
}

/// Mean and standard error (sample standard deviation / sqrt n).
#[derive(Debug, Clone, Copy)]
pub struct MetricSummary {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

fn summarize_values(values: &[f64]) -> MetricSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    MetricSummary { mean, se, n }
}

/// Per-metric summary of one task x classifier cell. `undefined_folds`
/// counts folds whose sensitivity or specificity was undefined and
/// therefore excluded from that metric's mean.
#[derive(Debug, Clone, Copy)]
pub struct CellSummary {
    pub accuracy: MetricSummary,
    pub sensitivity: MetricSummary,
    pub specificity: MetricSummary,
    pub undefined_folds: usize,
}

pub fn summarize(results: &[FoldResult]) -> Result<CellSummary> {
    if results.len() < 2 {
        return Err(Error::Parameter(
            "summaries need at least 2 folds".into(),
        ));
    }
    let accuracy: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let sens: Vec<f64> = results.iter().filter_map(|r| r.sensitivity).collect();
    let spec: Vec<f64> = results.iter().filter_map(|r| r.specificity).collect();
    let undefined_folds = results
        .iter()
        .filter(|r| r.sensitivity.is_none() || r.specificity.is_none())
        .count();
    Ok(CellSummary {
        accuracy: summarize_values(&accuracy),
        sensitivity: summarize_values(&sens),
        specificity: summarize_values(&spec),
        undefined_folds,
    })
}
