//! Command implementations: artifact layout and orchestration.
//!
//! Every training run lands in its own directory with four files: the fully
//! resolved `config.json` (re-running it reproduces the run bit for bit),
//! the `metrics.csv` evaluation log, a flat `summary.json`, and the final
//! `model.ckpt`. Sweeps lay one run directory per arm under a root and add a
//! `sweep-summary.csv` of final metrics; `report` folds those into per-variant
//! per-lambda tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use svae::checkpoint::{load_checkpoint, save_checkpoint};
use svae::data::{build_toy_gmm, read_dataset, sample_dataset, write_dataset, ToyDatasetSpec};
use svae::metrics::evaluate_model;
use svae::models::ModelTriple;
use svae::objectives::{ObjectiveSpec, Variant};
use svae::training::{read_log_csv, train_run, write_log_csv, RunSummary, TrainLogRow};

use crate::config::{
    self, apply_overrides, format_lambda, ConfigError, Overrides, ResolvedRun, FORMAT_VERSION,
};
use crate::verify::{run_verify, VerifyOptions};

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub variant: Option<String>,
    pub lambda: Option<f64>,
    pub transform: Option<String>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct GenerateDataArgs {
    pub config: Option<PathBuf>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub config: Option<PathBuf>,
    pub lambdas: Vec<f64>,
    pub seeds: usize,
    pub variants: Vec<String>,
    pub jobs: usize,
    pub base_seed: u64,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub iw_samples: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub models: usize,
    pub samples: usize,
    pub disc_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ReportArgs {
    pub input: PathBuf,
    pub output: Option<PathBuf>,
}

/// Sidecar for an exported dataset; enough to regenerate it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub format_version: u32,
    pub data: ToyDatasetSpec,
}

/// Sweep-root manifest: the grid and the run directories it produced.
/// `run_seconds` aligns with `runs`; it is empty until the sweep finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub format_version: u32,
    pub base_seed: u64,
    pub lambdas: Vec<f64>,
    pub seeds: usize,
    pub variants: Vec<String>,
    pub runs: Vec<String>,
    #[serde(default)]
    pub run_seconds: Vec<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Run one resolved config into `run_dir`, leaving the four artifacts behind.
pub fn execute_train(resolved: &ResolvedRun, run_dir: &Path) -> anyhow::Result<RunSummary> {
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    write_json(&run_dir.join("config.json"), &resolved.to_patch(run_dir))?;
    let gmm = build_toy_gmm(&resolved.data)?;
    let dataset = sample_dataset(&gmm, resolved.data.n_samples, resolved.data.seed)?;
    let triple = ModelTriple::init(
        &resolved.encoder,
        &resolved.decoder,
        &resolved.discriminator,
        resolved.train.seed,
    )?;
    let outcome = train_run(&triple, &resolved.objective, &dataset, &gmm, &resolved.train)?;
    write_log_csv(&outcome.log, &run_dir.join("metrics.csv"))?;
    let summary = outcome.summary(&resolved.objective, &resolved.train);
    write_json(&run_dir.join("summary.json"), &summary)?;
    save_checkpoint(&outcome.triple, &run_dir.join("model.ckpt"))?;
    Ok(summary)
}

fn describe_run(dir: &Path, summary: &RunSummary, n_components: usize) -> String {
    match &summary.final_metrics {
        Some(m) => format!(
            "{}: {} generator updates, final mse {:.4}, modes {}/{}, is-analog {:.2}",
            dir.display(),
            summary.gen_updates,
            m.mse,
            m.mode_coverage,
            n_components,
            m.is_analog
        ),
        None => format!(
            "{}: {} generator updates, no evaluation rows",
            dir.display(),
            summary.gen_updates
        ),
    }
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<ExitCode> {
    let mut patch = config::load_or_default(args.config.as_deref())?;
    apply_overrides(
        &mut patch,
        &Overrides {
            variant: args.variant.clone(),
            lambda: args.lambda,
            transform: args.transform.clone(),
            steps: args.steps,
            seed: args.seed,
            output: args.output.clone(),
        },
    );
    let resolved = config::resolve(&patch)?;
    let run_dir = resolved
        .output_dir
        .clone()
        .unwrap_or_else(|| config::default_run_dir(&resolved.objective, resolved.train.seed));
    let summary = execute_train(&resolved, &run_dir)?;
    println!("{}", describe_run(&run_dir, &summary, resolved.data.n_components));
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_generate_data(args: &GenerateDataArgs) -> anyhow::Result<ExitCode> {
    let patch = config::load_or_default(args.config.as_deref())?;
    let resolved = config::resolve(&patch)?;
    let mut spec = resolved.data;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.samples {
        spec.n_samples = n;
    }
    spec.validate().map_err(ConfigError::Data)?;
    let out = args
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("data"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let gmm = build_toy_gmm(&spec)?;
    let set = sample_dataset(&gmm, spec.n_samples, spec.seed)?;
    write_dataset(&set, &out.join("dataset.csv"))?;
    write_json(
        &out.join("dataset.json"),
        &DatasetRecord {
            format_version: FORMAT_VERSION,
            data: spec.clone(),
        },
    )?;
    println!(
        "wrote {} points ({} modes, dim {}) to {}",
        set.len(),
        spec.n_components,
        spec.dim,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<ExitCode> {
    let patch = config::load_or_default(args.config.as_deref())?;
    let resolved = config::resolve(&patch)?;
    let triple = load_checkpoint(&args.checkpoint)?;
    let gmm = build_toy_gmm(&resolved.data)?;
    if gmm.dim() != triple.dx {
        bail!(
            "checkpoint models dimension {}, data spec has {}",
            triple.dx,
            gmm.dim()
        );
    }
    let real = match &args.data {
        Some(path) => read_dataset(path)?.points,
        None => sample_dataset(&gmm, resolved.data.n_samples, resolved.data.seed)?.points,
    };
    let record = evaluate_model(
        &triple,
        &resolved.objective,
        &real,
        &gmm,
        0,
        args.iw_samples,
        args.seed,
    )?;
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    print!("{text}");
    if let Some(out) = &args.output {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("metrics.json"), &text)?;
    }
    Ok(ExitCode::SUCCESS)
}

struct ArmPlan {
    resolved: ResolvedRun,
    dir: PathBuf,
}

/// Pull arms off a shared cursor from `jobs` worker threads. Each run is
/// internally sequential and owns its directory, so arms never interact.
/// Returns each arm's outcome with its wall-clock duration in seconds.
fn run_arms(arms: &[ArmPlan], jobs: usize) -> Vec<(Result<RunSummary, String>, f64)> {
    let cursor = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<(Result<RunSummary, String>, f64)>>> =
        arms.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, arms.len().max(1)) {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= arms.len() {
                    break;
                }
                let arm = &arms[i];
                let started = Instant::now();
                let result = execute_train(&arm.resolved, &arm.dir).map_err(|e| format!("{e:#}"));
                *slots[i].lock().unwrap() = Some((result, started.elapsed().as_secs_f64()));
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("arm executed"))
        .collect()
}

pub fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<ExitCode> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    if args.lambdas.is_empty() || args.variants.is_empty() {
        bail!("sweep needs at least one lambda and one variant");
    }
    let base = config::load_or_default(args.config.as_deref())?;
    let root = args
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("sweep"));

    let mut arms: Vec<ArmPlan> = Vec::new();
    let mut skipped = 0usize;
    for label in &args.variants {
        let parsed = ObjectiveSpec::parse_run_label(label).map_err(ConfigError::Objective)?;
        for &lambda in &args.lambdas {
            // The reconstruction weight only exists in the svae-r objective;
            // pairing it with other variants would be rejected anyway.
            if lambda != 0.0 && parsed.variant != Variant::SvaeR {
                skipped += 1;
                continue;
            }
            for _ in 0..args.seeds {
                let seed = args.base_seed + arms.len() as u64;
                let mut patch = base.clone();
                patch.objective.variant = Some(label.clone());
                patch.objective.lambda = Some(lambda);
                patch.train.seed = Some(seed);
                patch.output_dir = None;
                let resolved = config::resolve(&patch)?;
                let dir = root.join(format!(
                    "{}-lambda{}-seed{}",
                    resolved.objective.run_label(),
                    format_lambda(lambda),
                    seed
                ));
                arms.push(ArmPlan { resolved, dir });
            }
        }
    }
    if arms.is_empty() {
        bail!("no runnable combinations: lambda > 0 pairs only with svae-r");
    }

    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let mut manifest = SweepRecord {
        format_version: FORMAT_VERSION,
        base_seed: args.base_seed,
        lambdas: args.lambdas.clone(),
        seeds: args.seeds,
        variants: args.variants.clone(),
        runs: arms
            .iter()
            .map(|a| a.dir.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
        run_seconds: Vec::new(),
    };
    // Written up front so an interrupted sweep still names its expected runs.
    write_json(&root.join("sweep.json"), &manifest)?;
    if skipped > 0 {
        println!("skipped {skipped} lambda/variant combinations: lambda > 0 applies to svae-r only");
    }

    let results = run_arms(&arms, args.jobs);
    let mut final_rows = Vec::new();
    let mut failures = 0usize;
    for (arm, (result, seconds)) in arms.iter().zip(&results) {
        manifest.run_seconds.push(*seconds);
        match result {
            Ok(summary) => {
                println!(
                    "{}",
                    describe_run(&arm.dir, summary, arm.resolved.data.n_components)
                );
                if let Some(row) = &summary.final_metrics {
                    final_rows.push(row.clone());
                }
            }
            Err(message) => {
                failures += 1;
                eprintln!("failed {}: {message}", arm.dir.display());
            }
        }
    }
    write_json(&root.join("sweep.json"), &manifest)?;
    write_log_csv(&final_rows, &root.join("sweep-summary.csv"))?;
    println!(
        "sweep: {}/{} runs succeeded -> {}",
        arms.len() - failures,
        arms.len(),
        root.display()
    );
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

pub fn cmd_verify(args: &VerifyArgs) -> anyhow::Result<ExitCode> {
    let report = run_verify(&VerifyOptions {
        models: args.models,
        samples: args.samples,
        disc_steps: args.disc_steps,
        seed: args.seed,
    })?;
    for line in &report.lines {
        println!("{line}");
    }
    if report.passed {
        println!("verify: all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("verify: FAILED");
        Ok(ExitCode::FAILURE)
    }
}

struct Agg {
    mean: f64,
    min: f64,
    max: f64,
}

fn agg(rows: &[TrainLogRow], f: impl Fn(&TrainLogRow) -> f64) -> Agg {
    let values: Vec<f64> = rows.iter().map(f).collect();
    Agg {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<ExitCode> {
    let input = &args.input;
    if !input.is_dir() {
        bail!("{} is not a directory", input.display());
    }

    // The sweep manifest, when present, tells us which runs should exist.
    let mut expected: Vec<String> = Vec::new();
    let manifest = input.join("sweep.json");
    if manifest.exists() {
        let parsed = fs::read_to_string(&manifest)
            .ok()
            .and_then(|t| serde_json::from_str::<SweepRecord>(&t).ok());
        match parsed {
            Some(rec) if rec.format_version == FORMAT_VERSION => expected = rec.runs,
            _ => eprintln!("warning: unreadable sweep.json in {}", input.display()),
        }
    }

    let mut dirs: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();

    let mut finals: Vec<TrainLogRow> = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for dir in &dirs {
        let metrics = dir.join("metrics.csv");
        if !metrics.exists() {
            if dir.join("config.json").exists() {
                eprintln!("warning: {} has no metrics.csv; skipping", dir.display());
            }
            continue;
        }
        match read_log_csv(&metrics) {
            Ok(rows) => match rows.last() {
                Some(last) => {
                    finals.push(last.clone());
                    if let Some(name) = dir.file_name() {
                        seen.push(name.to_string_lossy().into_owned());
                    }
                }
                None => eprintln!("warning: {} has an empty log; skipping", metrics.display()),
            },
            Err(e) => eprintln!("warning: {}: {e}; skipping", metrics.display()),
        }
    }
    for name in &expected {
        if !seen.iter().any(|s| s == name) {
            eprintln!("warning: expected run {name} is missing");
        }
    }
    if finals.is_empty() {
        bail!("no run directories with metrics under {}", input.display());
    }

    let mut groups: Vec<((String, f64), Vec<TrainLogRow>)> = Vec::new();
    for row in finals {
        let key = (row.variant.clone(), row.lambda);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, rows)) => rows.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    groups.sort_by(|a, b| {
        a.0 .0
            .cmp(&b.0 .0)
            .then(a.0 .1.partial_cmp(&b.0 .1).unwrap_or(std::cmp::Ordering::Equal))
    });

    println!(
        "{:<14} {:>7} {:>5}  {:>26}  {:>14}  {:>17}  {:>26}",
        "variant", "lambda", "runs", "mse mean/min/max", "modes mn/lo/hi", "is-analog mn/lo/hi", "skl mean/min/max"
    );
    let mut csv = String::from(
        "variant,lambda,runs,mse_mean,mse_min,mse_max,modes_mean,modes_min,modes_max,\
         is_analog_mean,is_analog_min,is_analog_max,skl_mean,skl_min,skl_max",
    );
    csv.push('\n');
    for ((variant, lambda), rows) in &groups {
        let mse = agg(rows, |r| r.mse);
        let modes = agg(rows, |r| r.mode_coverage as f64);
        let is_analog = agg(rows, |r| r.is_analog);
        let skl = agg(rows, |r| r.skl_estimate);
        println!(
            "{:<14} {:>7} {:>5}  {:>26}  {:>14}  {:>17}  {:>26}",
            variant,
            format_lambda(*lambda),
            rows.len(),
            format!("{:.4}/{:.4}/{:.4}", mse.mean, mse.min, mse.max),
            format!("{:.1}/{:.0}/{:.0}", modes.mean, modes.min, modes.max),
            format!("{:.2}/{:.2}/{:.2}", is_analog.mean, is_analog.min, is_analog.max),
            format!("{:.3}/{:.3}/{:.3}", skl.mean, skl.min, skl.max),
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            variant,
            format_lambda(*lambda),
            rows.len(),
            mse.mean,
            mse.min,
            mse.max,
            modes.mean,
            modes.min,
            modes.max,
            is_analog.mean,
            is_analog.min,
            is_analog.max,
            skl.mean,
            skl.min,
            skl.max,
        ));
    }

    let out_dir = args.output.clone().unwrap_or_else(|| input.clone());
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let report_path = out_dir.join("report.csv");
    fs::write(&report_path, csv).with_context(|| format!("writing {}", report_path.display()))?;
    println!("wrote {}", report_path.display());
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use svae::objectives::GeneratorTransform;
    use tempfile::tempdir;

    fn tiny_resolved(variant: &str, seed: u64) -> ResolvedRun {
        let mut patch = config::parse_patch(
            r#"{"train":{"batch_size":16,"total_generator_steps":2,"eval_every":1},
                "data":{"n_samples":64}}"#,
        )
        .unwrap();
        patch.objective.variant = Some(variant.into());
        patch.train.seed = Some(seed);
        config::resolve(&patch).unwrap()
    }

    #[test]
    fn execute_train_leaves_the_four_artifacts() {
        let dir = tempdir().unwrap();
        let run_dir = dir.path().join("run");
        let resolved = tiny_resolved("svae", 3);
        let summary = execute_train(&resolved, &run_dir).unwrap();
        assert_eq!(summary.gen_updates, 2);
        for name in ["config.json", "metrics.csv", "summary.json", "model.ckpt"] {
            assert!(run_dir.join(name).exists(), "{name} missing");
        }
        // The echoed config resolves to the run that produced it.
        let echoed = config::load_patch(&run_dir.join("config.json")).unwrap();
        let again = config::resolve(&echoed).unwrap();
        assert_eq!(again.objective, resolved.objective);
        assert_eq!(again.train, resolved.train);
        assert_eq!(again.output_dir.as_deref(), Some(run_dir.as_path()));
    }

    #[test]
    fn parallel_arms_match_serial_arms() {
        let dir = tempdir().unwrap();
        let arms: Vec<ArmPlan> = (0..3)
            .map(|i| ArmPlan {
                resolved: tiny_resolved("svae", i),
                dir: dir.path().join(format!("serial-{i}")),
            })
            .collect();
        let serial = run_arms(&arms, 1);
        let arms2: Vec<ArmPlan> = (0..3)
            .map(|i| ArmPlan {
                resolved: tiny_resolved("svae", i),
                dir: dir.path().join(format!("parallel-{i}")),
            })
            .collect();
        let parallel = run_arms(&arms2, 3);
        for ((a, _), (b, _)) in serial.iter().zip(&parallel) {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            assert_eq!(a.final_metrics, b.final_metrics);
        }
        let bytes = |p: &Path| fs::read(p.join("model.ckpt")).unwrap();
        for i in 0..3 {
            assert_eq!(
                bytes(&dir.path().join(format!("serial-{i}"))),
                bytes(&dir.path().join(format!("parallel-{i}"))),
                "checkpoint {i} differs between serial and parallel execution"
            );
        }
    }

    #[test]
    fn run_labels_in_arm_plans_survive_transform_suffixes() {
        let resolved = tiny_resolved("svae-r-logsig", 0);
        assert_eq!(resolved.objective.variant, Variant::SvaeR);
        assert_eq!(
            resolved.objective.generator_transform,
            GeneratorTransform::LogSigmoid
        );
        assert_eq!(resolved.objective.run_label(), "svae-r-logsig");
    }
}
