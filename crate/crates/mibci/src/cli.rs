//! Subcommands `synth`, `run` and `report`: dataset generation, the
//! full experiment pipeline, and re-summarizing an existing run
//! directory. All randomness derives from the master seed; reports are
//! written atomically (write-then-rename) so a failed run leaves no
//! partial files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::{
    assemble_task, run_task, summarize, Classifier, EpochPools, FoldResult, RunOptions,
    TaskSpec, N_FOLDS,
};
use crate::ingest::{generate_synthetic, load_dataset, reject_artifacts, write_dataset};
use crate::seed::derive_seed;
use crate::stats::{bonferroni_pairwise, f_sf, rm_anova, welch_ttest};

pub const FOLDS_HEADER: &str = "task,classifier,fold,accuracy,sensitivity,specificity,tp,fp,tn,fn";
pub const SUMMARY_HEADER: &str = "task,classifier,accuracy_mean,accuracy_se,sensitivity_mean,sensitivity_se,specificity_mean,specificity_se,undefined_folds";
pub const STATS_HEADER: &str = "test,classifier,detail,statistic,df1,df2,epsilon,p_raw,p_corrected";

#[derive(Debug, Parser)]
#[command(name = "mibci", version, about = "Motor-imagery EEG joint-training study harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV (to --out or dataset_path)
    Synth(CommonArgs),
    /// Run the configured tasks and classifiers, writing folds.csv,
    /// summary.csv, stats.csv and a replayable manifest
    Run(CommonArgs),
    /// Re-summarize an existing run directory from its folds.csv
    Report(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// flat key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// override the master seed
    #[arg(long)]
    seed: Option<u64>,
    /// output: dataset file for synth, run directory otherwise
    #[arg(long)]
    out: Option<PathBuf>,
    /// worker cap; accepted for compatibility, execution is sequential
    #[arg(long)]
    jobs: Option<usize>,
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn main_impl() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(args) => load_config(&args).and_then(|c| cmd_synth(&c, args.out.as_deref())),
        Command::Run(args) => load_config(&args).and_then(|c| cmd_run(&c)),
        Command::Report(args) => {
            load_config(&args).and_then(|c| cmd_report(&c.out_dir))
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
    }
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    Ok(config.resolve(args.seed, args.out.clone()))
}

/// Generate the synthetic dataset and write it as a CSV container.
pub fn cmd_synth(config: &RunConfig, out: Option<&Path>) -> Result<()> {
    let path = out
        .map(Path::to_path_buf)
        .or_else(|| config.dataset_path.clone())
        .ok_or_else(|| {
            Error::Config("synth needs --out or a dataset_path config entry".into())
        })?;
    let mut params = config.synth.clone();
    params.rng_seed = derive_seed(config.seed, "synth");
    let trials = generate_synthetic(&params)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_dataset(&path, &trials)?;
    println!("wrote {} trials to {}", trials.len(), path.display());
    Ok(())
}

/// One (task, fold) result row.
#[derive(Debug, Clone, Copy)]
pub struct TaggedResult {
    pub task: u8,
    pub result: FoldResult,
}

/// Execute every configured (task, classifier) pair.
pub fn collect_run(config: &RunConfig) -> Result<Vec<TaggedResult>> {
    let trials = match &config.dataset_path {
        Some(path) => load_dataset(path)?,
        None => {
            let mut params = config.synth.clone();
            params.rng_seed = derive_seed(config.seed, "synth");
            generate_synthetic(&params)?
        }
    };
    let trials = reject_artifacts(trials);
    if trials.is_empty() {
        return Err(Error::Data("no artifact-free trials in the dataset".into()));
    }
    let pools = EpochPools::from_trials(&trials, &config.band)?;

    let options = RunOptions {
        svm_c: config.svm_c,
        train: config.train_options(),
        group_trials: config.group_trials,
    };
    let mut results = Vec::new();
    for &task_id in &config.tasks {
        let spec = TaskSpec::new(task_id)?;
        let examples = assemble_task(&pools, &spec, derive_seed(config.seed, "assemble"))?;
        for &classifier in &config.classifiers {
            let seed = derive_seed(
                config.seed,
                &format!("run/task{task_id}/{}", classifier.as_str()),
            );
            for result in run_task(&examples, classifier, &options, seed)? {
                results.push(TaggedResult {
                    task: task_id,
                    result,
                });
            }
        }
    }
    Ok(results)
}

/// Full pipeline: dataset, experiments, reports, manifest.
pub fn cmd_run(config: &RunConfig) -> Result<()> {
    let results = collect_run(config)?;
    fs::create_dir_all(&config.out_dir)?;
    write_reports(&config.out_dir, &results)?;
    write_manifest(config)?;
    print_summary(&results);
    Ok(())
}

/// Rebuild summary.csv and stats.csv from an existing folds.csv.
pub fn cmd_report(dir: &Path) -> Result<()> {
    let results = read_folds_csv(&dir.join("folds.csv"))?;
    let summary = render_summary_csv(&results)?;
    let stats = render_stats_csv(&results);
    atomic_write(&dir.join("summary.csv"), summary.as_bytes())?;
    atomic_write(&dir.join("stats.csv"), stats.as_bytes())?;
    print_summary(&results);
    Ok(())
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_reports(dir: &Path, results: &[TaggedResult]) -> Result<()> {
    let mut folds = String::from(FOLDS_HEADER);
    folds.push('\n');
    let mut ordered: Vec<&TaggedResult> = results.iter().collect();
    ordered.sort_by_key(|r| (r.task, r.result.classifier.as_str(), r.result.fold));
    for r in ordered {
        let f = &r.result;
        writeln!(
            folds,
            "{},{},{},{},{},{},{},{},{},{}",
            r.task,
            f.classifier.as_str(),
            f.fold,
            f.accuracy,
            fmt_opt(f.sensitivity),
            fmt_opt(f.specificity),
            f.tp,
            f.fp,
            f.tn,
            f.fn_
        )
        .unwrap();
    }
    atomic_write(&dir.join("folds.csv"), folds.as_bytes())?;
    let summary = render_summary_csv(results)?;
    atomic_write(&dir.join("summary.csv"), summary.as_bytes())?;
    let stats = render_stats_csv(results);
    atomic_write(&dir.join("stats.csv"), stats.as_bytes())?;
    Ok(())
}

fn write_manifest(config: &RunConfig) -> Result<()> {
    let mut body = format!(
        "# mibci {} run manifest; replay with: mibci run --config <this file>\n",
        env!("CARGO_PKG_VERSION")
    );
    body.push_str(&config.to_manifest_body());
    body.push_str("# derived seeds\n");
    writeln!(body, "#   synth = {:#018x}", derive_seed(config.seed, "synth")).unwrap();
    writeln!(
        body,
        "#   assemble = {:#018x}",
        derive_seed(config.seed, "assemble")
    )
    .unwrap();
    for &task in &config.tasks {
        for classifier in &config.classifiers {
            let tag = format!("run/task{task}/{}", classifier.as_str());
            writeln!(body, "#   {tag} = {:#018x}", derive_seed(config.seed, &tag)).unwrap();
        }
    }
    atomic_write(&config.out_dir.join("manifest"), body.as_bytes())
}

/// Group fold results by (task, classifier), in sorted order.
fn cells(results: &[TaggedResult]) -> Vec<(u8, Classifier, Vec<FoldResult>)> {
    let mut keys: Vec<(u8, Classifier)> = results
        .iter()
        .map(|r| (r.task, r.result.classifier))
        .collect();
    keys.sort_by_key(|(t, c)| (*t, c.as_str()));
    keys.dedup();
    keys.into_iter()
        .map(|(task, classifier)| {
            let mut folds: Vec<FoldResult> = results
                .iter()
                .filter(|r| r.task == task && r.result.classifier == classifier)
                .map(|r| r.result)
                .collect();
            folds.sort_by_key(|f| f.fold);
            (task, classifier, folds)
        })
        .collect()
}

fn render_summary_csv(results: &[TaggedResult]) -> Result<String> {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for (task, classifier, folds) in cells(results) {
        let s = summarize(&folds)?;
        if s.undefined_folds > 0 {
            eprintln!(
                "warning: task {task} {classifier}: {} fold(s) with undefined sensitivity/specificity excluded from means",
                s.undefined_folds
            );
        }
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            task,
            classifier.as_str(),
            s.accuracy.mean,
            s.accuracy.se,
            s.sensitivity.mean,
            s.sensitivity.se,
            s.specificity.mean,
            s.specificity.se,
            s.undefined_folds
        )
        .unwrap();
    }
    Ok(out)
}

/// Accuracy matrix folds x tasks for one classifier, when every
/// configured task has a full set of folds.
fn accuracy_matrix(
    cells: &[(u8, Classifier, Vec<FoldResult>)],
    classifier: Classifier,
) -> Option<(Vec<u8>, Array2<f64>)> {
    let tasks: Vec<(u8, &Vec<FoldResult>)> = cells
        .iter()
        .filter(|(_, c, _)| *c == classifier)
        .map(|(t, _, f)| (*t, f))
        .collect();
    if tasks.len() < 2 || tasks.iter().any(|(_, f)| f.len() != N_FOLDS) {
        return None;
    }
    let mut m = Array2::zeros((N_FOLDS, tasks.len()));
    for (j, (_, folds)) in tasks.iter().enumerate() {
        for (i, f) in folds.iter().enumerate() {
            m[(i, j)] = f.accuracy;
        }
    }
    Some((tasks.iter().map(|(t, _)| *t).collect(), m))
}

/// The statistical battery over fold accuracies: per-classifier
/// repeated-measures ANOVA across tasks (the "subjects" are the 10
/// folds) with Bonferroni pairwise follow-ups, and a per-task Welch
/// t-test between classifiers. Degenerate cells (zero variance) skip
/// their row with a warning rather than aborting the run.
fn render_stats_csv(results: &[TaggedResult]) -> String {
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    let cells = cells(results);

    let mut classifiers: Vec<Classifier> = cells.iter().map(|(_, c, _)| *c).collect();
    classifiers.sort_by_key(|c| c.as_str());
    classifiers.dedup();

    for &classifier in &classifiers {
        let Some((tasks, scores)) = accuracy_matrix(&cells, classifier) else {
            continue;
        };
        let detail: Vec<String> = tasks.iter().map(u8::to_string).collect();
        let detail = format!("tasks {}", detail.join("|"));
        match rm_anova(&scores) {
            Ok(a) => {
                let k = tasks.len() as f64;
                let p_raw = f_sf(a.f, k - 1.0, (k - 1.0) * (N_FOLDS as f64 - 1.0));
                writeln!(
                    out,
                    "rm_anova,{},{},{},{},{},{},{},{}",
                    classifier.as_str(),
                    detail,
                    a.f,
                    a.df1,
                    a.df2,
                    a.epsilon,
                    p_raw,
                    a.p
                )
                .unwrap();
            }
            Err(Error::Data(msg)) => {
                eprintln!("warning: rm_anova skipped for {classifier}: {msg}");
            }
            Err(e) => {
                eprintln!("warning: rm_anova failed for {classifier}: {e}");
            }
        }
        match bonferroni_pairwise(&scores) {
            Ok(pairs) => {
                for p in pairs {
                    writeln!(
                        out,
                        "paired_t,{},task{}-vs-task{},{},{},,,{},{}",
                        classifier.as_str(),
                        tasks[p.pair.0],
                        tasks[p.pair.1],
                        p.t,
                        p.df,
                        fmt_opt(p.p_raw),
                        fmt_opt(p.p_corrected)
                    )
                    .unwrap();
                }
            }
            Err(e) => eprintln!("warning: pairwise tests failed for {classifier}: {e}"),
        }
    }

    if classifiers.len() == 2 {
        let mut tasks: Vec<u8> = cells.iter().map(|(t, _, _)| *t).collect();
        tasks.dedup();
        for task in tasks {
            let acc = |c: Classifier| -> Option<Vec<f64>> {
                cells
                    .iter()
                    .find(|(t, cl, _)| *t == task && *cl == c)
                    .map(|(_, _, f)| f.iter().map(|r| r.accuracy).collect())
            };
            let (Some(a), Some(b)) = (acc(classifiers[0]), acc(classifiers[1])) else {
                continue;
            };
            match welch_ttest(&a, &b) {
                Ok(w) => {
                    writeln!(
                        out,
                        "welch_t,both,task{task},{},{},,,{},{}",
                        w.t, w.df, w.p, w.p
                    )
                    .unwrap();
                }
                Err(Error::Data(msg)) => {
                    eprintln!("warning: welch test skipped for task {task}: {msg}");
                }
                Err(e) => eprintln!("warning: welch test failed for task {task}: {e}"),
            }
        }
    }
    out
}

fn print_summary(results: &[TaggedResult]) {
    println!(
        "{:<5} {:<8} {:>16} {:>16} {:>16}",
        "task", "model", "accuracy", "sensitivity", "specificity"
    );
    for (task, classifier, folds) in cells(results) {
        match summarize(&folds) {
            Ok(s) => println!(
                "{:<5} {:<8} {:>7.2}% ± {:>5.2} {:>7.2}% ± {:>5.2} {:>7.2}% ± {:>5.2}",
                task,
                classifier.as_str(),
                100.0 * s.accuracy.mean,
                100.0 * s.accuracy.se,
                100.0 * s.sensitivity.mean,
                100.0 * s.sensitivity.se,
                100.0 * s.specificity.mean,
                100.0 * s.specificity.se,
            ),
            Err(e) => println!("{:<5} {:<8} (no summary: {e})", task, classifier.as_str()),
        }
    }
}

/// Parse a folds.csv written by `cmd_run`.
pub fn read_folds_csv(path: &Path) -> Result<Vec<TaggedResult>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == FOLDS_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "bad folds.csv header: {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Format(format!(
                "folds.csv line {}: expected 10 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| {
                Error::Format(format!(
                    "folds.csv line {}: bad number {:?}",
                    lineno + 2,
                    fields[i]
                ))
            })
        };
        let opt_num = |i: usize| -> Result<Option<f64>> {
            if fields[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let classifier = match fields[1] {
            "CNN-FC" => Classifier::CnnFc,
            "CSP-SVM" => Classifier::CspSvm,
            other => {
                return Err(Error::Format(format!(
                    "folds.csv line {}: unknown classifier {other:?}",
                    lineno + 2
                )))
            }
        };
        out.push(TaggedResult {
            task: num(0)? as u8,
            result: FoldResult {
                fold: num(2)? as usize,
                classifier,
                accuracy: num(3)?,
                sensitivity: opt_num(4)?,
                specificity: opt_num(5)?,
                tp: num(6)? as u32,
                fp: num(7)? as u32,
                tn: num(8)? as u32,
                fn_: num(9)? as u32,
            },
        });
    }
    if out.is_empty() {
        return Err(Error::Data("folds.csv contains no result rows".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path, tasks: &str, classifiers: &str) -> RunConfig {
        let text = format!(
            "seed = 5\ntasks = {tasks}\nclassifiers = {classifiers}\n\
             synth_subjects = 1\nsynth_trials = 24\n\
             batch_size = 16\nmax_epochs = 1\npatience = 0\n"
        );
        RunConfig::parse(&text)
            .unwrap()
            .resolve(None, Some(dir.to_path_buf()))
    }

    #[test]
    fn synth_writes_expected_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let config = RunConfig::parse("synth_subjects = 1\nsynth_trials = 2")
            .unwrap()
            .resolve(None, None);
        cmd_synth(&config, Some(&path)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // preamble + header + 2 trials x 2250 samples
        assert_eq!(text.lines().count(), 2 + 4500);

        // byte-identical on rerun
        let path2 = dir.path().join("data2.csv");
        cmd_synth(&config, Some(&path2)).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn single_cell_run_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path(), "1", "csp-svm");
        cmd_run(&config).unwrap();

        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER);
        assert_eq!(lines.len(), 2, "expected exactly one summary row");
        assert!(lines[1].starts_with("1,CSP-SVM,"));

        let folds = fs::read_to_string(dir.path().join("folds.csv")).unwrap();
        assert_eq!(folds.lines().count(), 1 + N_FOLDS);

        // single task, single classifier: no applicable statistics
        let stats = fs::read_to_string(dir.path().join("stats.csv")).unwrap();
        assert_eq!(stats.trim_end(), STATS_HEADER);

        // the manifest replays to the same resolved config
        let manifest =
            RunConfig::load(&dir.path().join("manifest")).unwrap().resolve(None, None);
        assert_eq!(manifest, config);
    }

    #[test]
    fn stats_rows_follow_the_battery_structure() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path(), "1,2,3", "cnn-fc,csp-svm");
        cmd_run(&config).unwrap();
        let stats = fs::read_to_string(dir.path().join("stats.csv")).unwrap();
        let count = |prefix: &str| stats.lines().filter(|l| l.starts_with(prefix)).count();
        // one ANOVA per classifier, k(k-1)/2 = 3 pairs each, one Welch per task
        assert_eq!(count("rm_anova,"), 2);
        assert_eq!(count("paired_t,"), 6);
        assert_eq!(count("welch_t,"), 3);
        assert_eq!(stats.lines().count(), 1 + 2 + 6 + 3);
    }

    #[test]
    fn identical_configs_give_identical_report_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = tiny_config(dir_a.path(), "1,2", "csp-svm");
        let b = tiny_config(dir_b.path(), "1,2", "csp-svm");
        cmd_run(&a).unwrap();
        cmd_run(&b).unwrap();
        for name in ["folds.csv", "summary.csv", "stats.csv"] {
            assert_eq!(
                fs::read(dir_a.path().join(name)).unwrap(),
                fs::read(dir_b.path().join(name)).unwrap(),
                "{name} differs between identical runs"
            );
        }
    }

    #[test]
    fn report_regenerates_summary_from_folds() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path(), "1,2", "csp-svm");
        cmd_run(&config).unwrap();
        let summary_before = fs::read(dir.path().join("summary.csv")).unwrap();
        let stats_before = fs::read(dir.path().join("stats.csv")).unwrap();
        fs::remove_file(dir.path().join("summary.csv")).unwrap();
        fs::remove_file(dir.path().join("stats.csv")).unwrap();
        cmd_report(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("summary.csv")).unwrap(), summary_before);
        assert_eq!(fs::read(dir.path().join("stats.csv")).unwrap(), stats_before);
    }

    #[test]
    fn folds_csv_parser_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("folds.csv");
        fs::write(&path, "wrong,header\n").unwrap();
        assert!(matches!(read_folds_csv(&path), Err(Error::Format(_))));
        fs::write(&path, format!("{FOLDS_HEADER}\n1,CSP-SVM,0,0.5\n")).unwrap();
        assert!(read_folds_csv(&path).is_err());
        fs::write(&path, format!("{FOLDS_HEADER}\n")).unwrap();
        assert!(matches!(read_folds_csv(&path), Err(Error::Data(_))));
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        let mut config = RunConfig::default().resolve(None, Some(PathBuf::from("/tmp/none")));
        config.dataset_path = Some(PathBuf::from("/nonexistent/data.csv"));
        let err = collect_run(&config).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
