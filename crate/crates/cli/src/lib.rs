//! Subcommand implementations behind the `veil` binary.
//!
//! Every command writes into a run directory that holds its own config
//! snapshot, so results can be regenerated from the directory alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};
use veil_core::config::{DataSource, ExperimentConfig};
use veil_core::data::{generate_synthetic, load_image_folder, make_balanced_task, TaskDataset};
use veil_core::mi::{oracle_trials, OracleReport};
use veil_core::model_io::{encoder_hash, hex, load_encoder, save_encoder};
use veil_core::networks::{ArchitectureSpec, ConstantEncoder, Encoder, EncoderNetwork, IdentityEncoder, NormVariant};
use veil_core::objectives::{PrivacyUpdateMode, Utility};
use veil_core::runlog::{CsvLog, JsonlLog};
use veil_core::seed::stream;
use veil_core::trainer::{LogRow, Trainer};
use veil_core::verify::{verify_matrix, CellTag, MatrixCell, MatrixRow, VerificationReport};
use veil_core::Error;

/// Hash of the source tree this binary was built from.
pub const CODE_VERSION: &str = env!("VEIL_CODE_HASH");
pub const OUTPUT_ROOT_ENV: &str = "VEIL_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// Evaluation rows averaged for the end-of-training accuracy.
pub const FINAL_WINDOW: usize = 4;
/// Residual above which `mi-check` fails.
pub const MI_TOLERANCE: f64 = 1e-8;

pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const VALIDATION: i32 = 1;
    pub const RUNTIME: i32 = 2;
    pub const CHECK_FAILED: i32 = 3;
}

/// A command ran but its check did not hold.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Input problems map to 1, failed checks to 3, everything else to 2.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return exit::CHECK_FAILED;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_)
                | Error::Usage(_)
                | Error::Architecture(_)
                | Error::Schema(_)
                | Error::Duplicate(_)
                | Error::Load { .. }
                | Error::Corrupt(_) => exit::VALIDATION,
                _ => exit::RUNTIME,
            };
        }
        if cause.downcast_ref::<Refused>().is_some() {
            return exit::VALIDATION;
        }
    }
    exit::RUNTIME
}

/// Refusal to overwrite an existing run directory.
#[derive(Debug)]
pub struct Refused(pub PathBuf);

impl std::fmt::Display for Refused {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} already holds a run; pass --force to replace it", self.0.display())
    }
}

impl std::error::Error for Refused {}

/// `$VEIL_OUTPUT_ROOT`, or `runs` when unset.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Explicit directories are used as given; otherwise `root/<name>`.
pub fn run_dir(explicit: Option<&Path>, name: &str) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| output_root().join(name))
}

/// Creates an empty directory, clearing an existing one only with `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Refused(dir.to_path_buf()).into());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn read_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(ExperimentConfig::from_ini(&text)?)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> anyhow::Result<TaskDataset> {
    Ok(match &cfg.data {
        DataSource::Synthetic { spec, samples } => generate_synthetic(spec, *samples)?,
        DataSource::Manifest { path, target, side } => {
            let folder = load_image_folder(path, *side)?;
            make_balanced_task(&folder, target, cfg.seed)?
        }
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Index written last into every run directory.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub schema: &'static str,
    pub version: u32,
    pub command: String,
    pub code_version: &'static str,
    pub config_sha256: String,
    /// Relative paths of everything the command wrote.
    pub artifacts: Vec<String>,
    pub summary: serde_json::Value,
}

fn write_record(dir: &Path, command: &str, config_text: &str, artifacts: Vec<String>, summary: serde_json::Value) -> anyhow::Result<()> {
    let rec = RunRecord {
        schema: "run",
        version: 1,
        command: command.into(),
        code_version: CODE_VERSION,
        config_sha256: sha256_hex(config_text.as_bytes()),
        artifacts,
        summary,
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&rec)? + "\n")?;
    Ok(())
}

pub const TRAIN_LOG_COLUMNS: [&str; 12] = [
    "iteration",
    "phase",
    "classifier_loss",
    "classifier_batch_accuracy",
    "desirable_classifier_loss",
    "encoder_privacy_loss",
    "encoder_utility_loss",
    "encoder_total_loss",
    "classifier_lr",
    "encoder_lr",
    "val_private_accuracy",
    "val_desirable_accuracy",
];

pub const COLLAPSE_COLUMNS: [&str; 7] = ["iteration", "zero", "below_0_1", "below_0_5", "below_0_9", "unit_band", "alarm"];

fn log_fields(r: &LogRow) -> Vec<String> {
    vec![
        r.iteration.to_string(),
        r.phase.to_string(),
        r.classifier_loss.to_string(),
        r.classifier_batch_accuracy.to_string(),
        r.desirable_classifier_loss.to_string(),
        r.encoder_privacy_loss.to_string(),
        r.encoder_utility_loss.to_string(),
        r.encoder_total_loss.to_string(),
        r.classifier_lr.to_string(),
        r.encoder_lr.to_string(),
        r.val_private_accuracy.to_string(),
        r.val_desirable_accuracy.map(|a| a.to_string()).unwrap_or_default(),
    ]
}

fn collapse_fields(r: &LogRow) -> Vec<String> {
    let c = &r.collapse;
    vec![
        c.iteration.to_string(),
        c.zero.to_string(),
        c.below_0_1.to_string(),
        c.below_0_5.to_string(),
        c.below_0_9.to_string(),
        c.unit_band.to_string(),
        c.alarm.to_string(),
    ]
}

/// Mean in-training private accuracy over the last [`FINAL_WINDOW`] rows.
pub fn final_within_training_accuracy(rows: &[LogRow]) -> f64 {
    let tail = &rows[rows.len().saturating_sub(FINAL_WINDOW)..];
    tail.iter().map(|r| r.val_private_accuracy).sum::<f64>() / tail.len().max(1) as f64
}

pub struct TrainOutcome {
    pub dir: PathBuf,
    pub encoder: EncoderNetwork,
    pub rows: Vec<LogRow>,
    pub encoder_sha256: String,
}

/// `train-encoder`: trains the configured encoder into `dir`.
pub fn train_encoder(cfg: &ExperimentConfig, dir: &Path, force: bool) -> anyhow::Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    train_encoder_on(cfg, &data, dir, force)
}

/// [`train_encoder`] on an already loaded dataset, which must be the one
/// `cfg` describes.
pub fn train_encoder_on(cfg: &ExperimentConfig, data: &TaskDataset, dir: &Path, force: bool) -> anyhow::Result<TrainOutcome> {
    cfg.validate()?;
    prepare_dir(dir, force)?;
    let config_text = cfg.to_ini();
    fs::write(dir.join("config.ini"), &config_text)?;

    let encoder = EncoderNetwork::build_unchecked(&cfg.encoder, &mut stream(cfg.seed, "init/encoder"))?
        .with_name(cfg.name.clone());
    let mut csv = CsvLog::create(&dir.join("train_log.csv"), "train", &TRAIN_LOG_COLUMNS)?;
    let mut jsonl = JsonlLog::create(&dir.join("train_log.jsonl"), "train")?;
    let mut collapse = CsvLog::create(&dir.join("collapse.csv"), "collapse", &COLLAPSE_COLUMNS)?;
    let mut trainer = Trainer::new(cfg.train.clone(), encoder, data)?;
    let rows = trainer.run_with(|r| {
        csv.row(&log_fields(r))?;
        jsonl.record(r)?;
        collapse.row(&collapse_fields(r))
    })?;
    let encoder = trainer.encoder;
    save_encoder(&encoder, &dir.join("encoder.bin"))?;
    let encoder_sha256 = encoder_hash(&encoder);
    let last = rows.last();
    let summary = serde_json::json!({
        "encoder_sha256": encoder_sha256,
        "iterations": cfg.train.iterations,
        "privacy_loss": cfg.train.objective.privacy.flag(),
        "final_within_training_private_accuracy": final_within_training_accuracy(&rows),
        "collapse_alarm": last.map(|r| r.collapse.alarm),
        "final_unit_band": last.map(|r| r.collapse.unit_band),
    });
    let artifacts = ["config.ini", "train_log.csv", "train_log.jsonl", "collapse.csv", "encoder.bin"];
    write_record(dir, "train-encoder", &config_text, artifacts.map(String::from).to_vec(), summary)?;
    Ok(TrainOutcome { dir: dir.to_path_buf(), encoder, rows, encoder_sha256 })
}

/// An encoder to verify, with the tasks it was trained to hide and promote.
pub struct VerifyTarget {
    pub label: String,
    pub encoder: Box<dyn Encoder>,
    pub private: Vec<String>,
    pub promoted: Vec<String>,
}

/// Encoder loaded from a run directory (or an `encoder.bin` inside one),
/// tagged by that run's own config.
pub fn target_from_run(path: &Path) -> anyhow::Result<(VerifyTarget, ExperimentConfig)> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join("encoder.bin"))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let encoder = load_encoder(&file)?;
    let cfg = read_config(&dir.join("config.ini"))?;
    if cfg.encoder != encoder.spec {
        bail!(Error::Architecture(format!("{} does not match the architecture in its config", file.display())));
    }
    let label = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "encoder".into());
    let promoted = match &cfg.train.objective.utility {
        Utility::DesirableTasks(t) => t.clone(),
        Utility::VarianceOnly => Vec::new(),
    };
    let target = VerifyTarget { label, encoder: Box::new(encoder), private: vec![cfg.train.private_task.clone()], promoted };
    Ok((target, cfg))
}

/// Identity and constant-output reference rows.
pub fn baseline_targets(input: [usize; 3], output: [usize; 3]) -> Vec<VerifyTarget> {
    vec![
        VerifyTarget {
            label: "identity".into(),
            encoder: Box::new(IdentityEncoder { shape: input }),
            private: Vec::new(),
            promoted: Vec::new(),
        },
        VerifyTarget {
            label: "constant".into(),
            encoder: Box::new(ConstantEncoder { input, output, value: 0.0 }),
            private: Vec::new(),
            promoted: Vec::new(),
        },
    ]
}

pub const CURVE_COLUMNS: [&str; 4] = ["iteration", "val_accuracy", "lr", "phase"];
pub const TABLE_COLUMNS: [&str; 9] = [
    "encoder",
    "task",
    "tag",
    "val_accuracy",
    "test_accuracy",
    "iterations",
    "iterations_to_90pct",
    "lr_drop_iteration",
    "saturated",
];

/// `verify`: trains fresh classifiers to saturation on every
/// (encoder, task) cell and writes reports, curves and the aggregate table.
pub fn verify(
    cfg: &ExperimentConfig,
    data: &TaskDataset,
    targets: &[VerifyTarget],
    tasks: &[String],
    dir: &Path,
    force: bool,
) -> anyhow::Result<Vec<MatrixCell>> {
    cfg.validate()?;
    if tasks.is_empty() {
        bail!(Error::usage("no tasks to verify"));
    }
    for t in tasks {
        data.train.task(t)?;
    }
    let mut labels: Vec<&str> = targets.iter().map(|t| t.label.as_str()).collect();
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        bail!(Error::usage(format!("encoder labels must be distinct, got {labels:?}")));
    }
    prepare_dir(dir, force)?;
    let config_text = cfg.to_ini();
    fs::write(dir.join("config.ini"), &config_text)?;

    let rows: Vec<MatrixRow<'_>> = targets
        .iter()
        .map(|t| MatrixRow { encoder: t.encoder.as_ref(), private: t.private.clone(), promoted: t.promoted.clone() })
        .collect();
    let mut cells = verify_matrix(&rows, tasks, data, &cfg.verify, cfg.workers)?;
    // Cells are labelled by target, not by the encoder's internal name.
    for (cell, (r, _)) in cells.iter_mut().zip((0..targets.len()).flat_map(|r| tasks.iter().map(move |t| (r, t)))) {
        cell.encoder = targets[r].label.clone();
        cell.report.encoder = targets[r].label.clone();
    }

    fs::create_dir_all(dir.join("cells"))?;
    fs::create_dir_all(dir.join("curves"))?;
    let mut artifacts = vec!["config.ini".to_string(), "table.csv".into(), "table.txt".into()];
    let mut table = CsvLog::create(&dir.join("table.csv"), "verification-table", &TABLE_COLUMNS)?;
    for c in &cells {
        let stem = format!("{}__{}", c.encoder, c.task);
        fs::write(dir.join(format!("cells/{stem}.json")), serde_json::to_string_pretty(c)? + "\n")?;
        let mut curve = CsvLog::create(&dir.join(format!("curves/{stem}.csv")), "curve", &CURVE_COLUMNS)?;
        for p in &c.report.curve {
            curve.row(&[p.iteration.to_string(), p.val_accuracy.to_string(), p.lr.to_string(), p.phase.to_string()])?;
        }
        artifacts.push(format!("cells/{stem}.json"));
        artifacts.push(format!("curves/{stem}.csv"));
        let r = &c.report;
        table.row(&[
            c.encoder.clone(),
            c.task.clone(),
            c.tag.name().to_string(),
            r.val_accuracy.to_string(),
            r.test_accuracy.to_string(),
            r.total_iterations.to_string(),
            r.iterations_to_fraction(0.9).map(|i| i.to_string()).unwrap_or_default(),
            r.lr_drop_iteration.map(|i| i.to_string()).unwrap_or_default(),
            r.saturated.to_string(),
        ])?;
    }
    let text = render_table(&cells, targets, tasks);
    fs::write(dir.join("table.txt"), &text)?;
    let summary = serde_json::json!({ "cells": cells.len(), "tasks": tasks, "encoders": labels });
    write_record(dir, "verify", &config_text, artifacts, summary)?;
    Ok(cells)
}

/// Test accuracy matrix; `*` marks cells the encoder should hide, `+` cells
/// it should keep.
pub fn render_table(cells: &[MatrixCell], targets: &[VerifyTarget], tasks: &[String]) -> String {
    let w = tasks.iter().map(|t| t.len()).max().unwrap_or(0).max(8) + 2;
    let lw = targets.iter().map(|t| t.label.len()).max().unwrap_or(0).max(7) + 2;
    let mut s = format!("{:<lw$}", "encoder");
    for t in tasks {
        let _ = write!(s, "{t:>w$}");
    }
    s.push('\n');
    for (r, t) in targets.iter().enumerate() {
        let _ = write!(s, "{:<lw$}", t.label);
        for (k, _) in tasks.iter().enumerate() {
            let c = &cells[r * tasks.len() + k];
            let mark = match c.tag {
                CellTag::Private => "*",
                CellTag::Promoted => "+",
                CellTag::Neutral => " ",
            };
            let _ = write!(s, "{:>w$}", format!("{:.1}{mark}", 100.0 * c.report.test_accuracy));
        }
        s.push('\n');
    }
    s.push_str("* private (should fall to chance), + desirable (should stay high)\n");
    s
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub alarm: bool,
    /// Lowest unit-band share over all probes of the run.
    pub min_unit_band: f64,
    pub final_unit_band: f64,
    pub final_below_0_1: f64,
}

pub const ABLATION_COLUMNS: [&str; 8] = [
    "variant",
    "runs",
    "alarm_runs",
    "min_unit_band",
    "mean_final_unit_band",
    "mean_final_below_0_1",
    "max_final_below_0_1",
    "seeds",
];

/// `ablate-norm`: one training run per normalization variant and seed,
/// then a one-row-per-variant collapse report.
pub fn ablate_norm(
    cfg: &ExperimentConfig,
    data: &TaskDataset,
    variants: &[NormVariant],
    seeds: &[u64],
    dir: &Path,
    force: bool,
) -> anyhow::Result<Vec<AblationRun>> {
    cfg.validate()?;
    let widths = encoder_widths(&cfg.encoder)?;
    prepare_dir(dir, force)?;
    let config_text = cfg.to_ini();
    fs::write(dir.join("config.ini"), &config_text)?;
    let mut runs = Vec::new();
    let mut artifacts = vec!["config.ini".to_string(), "ablation.csv".into(), "ablation_runs.jsonl".into()];
    let mut per_run = JsonlLog::create(&dir.join("ablation_runs.jsonl"), "ablation-run")?;
    for &v in variants {
        for &seed in seeds {
            let mut c = with_seed(cfg, seed);
            c.encoder = ArchitectureSpec::encoder_variant(cfg.encoder.input, widths, v);
            let sub = format!("{}/seed{seed}", v.name());
            let out = train_encoder_on(&c, data, &dir.join(&sub), force)?;
            artifacts.push(sub);
            let last = out.rows.last().expect("at least one log row");
            let run = AblationRun {
                variant: v.name().into(),
                seed,
                alarm: last.collapse.alarm,
                min_unit_band: out.rows.iter().map(|r| r.collapse.unit_band).fold(1.0, f64::min),
                final_unit_band: last.collapse.unit_band,
                final_below_0_1: last.collapse.below_0_1,
            };
            per_run.record(&run)?;
            runs.push(run);
        }
    }
    let mut csv = CsvLog::create(&dir.join("ablation.csv"), "ablation", &ABLATION_COLUMNS)?;
    for &v in variants {
        let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v.name()).collect();
        let n = rs.len() as f64;
        csv.row(&[
            v.name().to_string(),
            rs.len().to_string(),
            rs.iter().filter(|r| r.alarm).count().to_string(),
            rs.iter().map(|r| r.min_unit_band).fold(1.0, f64::min).to_string(),
            (rs.iter().map(|r| r.final_unit_band).sum::<f64>() / n).to_string(),
            (rs.iter().map(|r| r.final_below_0_1).sum::<f64>() / n).to_string(),
            rs.iter().map(|r| r.final_below_0_1).fold(0.0, f64::max).to_string(),
            rs.iter().map(|r| r.seed.to_string()).collect::<Vec<_>>().join(" "),
        ])?;
    }
    let summary = serde_json::to_value(&runs)?;
    write_record(dir, "ablate-norm", &config_text, artifacts, summary)?;
    Ok(runs)
}

/// Channel widths of the three intermediate conv blocks of an encoder.
pub fn encoder_widths(spec: &ArchitectureSpec) -> anyhow::Result<[usize; 3]> {
    use veil_core::networks::LayerSpec;
    let convs: Vec<usize> = spec
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::Conv { out_channels, .. } => Some(*out_channels),
            _ => None,
        })
        .collect();
    match convs.as_slice() {
        [a, b, c, _] => Ok([*a, *b, *c]),
        _ => bail!(Error::Architecture(format!("ablation needs a four-conv encoder, got {} convs", convs.len()))),
    }
}

/// `cfg` with every seed set to `seed`, data seed unchanged.
pub fn with_seed(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c.train.seed = seed;
    c.verify.seed = seed;
    c
}

#[derive(Clone, Debug, Serialize)]
pub struct LossComparisonRow {
    pub mode: String,
    pub seed: u64,
    pub within_training_val: f64,
    pub verified_val: f64,
    pub verified_test: f64,
    pub iterations_to_90pct: Option<u64>,
}

pub const COMPARISON_COLUMNS: [&str; 6] =
    ["mode", "seed", "within_training_val", "verified_val", "verified_test", "iterations_to_90pct"];

/// `compare-losses`: label-flip and GAN-style encoders trained from the
/// same config, each verified on the private task.
pub fn compare_losses(
    cfg: &ExperimentConfig,
    data: &TaskDataset,
    seeds: &[u64],
    dir: &Path,
    force: bool,
) -> anyhow::Result<Vec<LossComparisonRow>> {
    cfg.validate()?;
    prepare_dir(dir, force)?;
    let config_text = cfg.to_ini();
    fs::write(dir.join("config.ini"), &config_text)?;
    let mut out = Vec::new();
    let mut artifacts = vec!["config.ini".to_string(), "comparison.csv".into()];
    let mut csv = CsvLog::create(&dir.join("comparison.csv"), "loss-comparison", &COMPARISON_COLUMNS)?;
    let private = vec![cfg.train.private_task.clone()];
    for &seed in seeds {
        for mode in [PrivacyUpdateMode::LabelFlip, PrivacyUpdateMode::GanFlipTrueLabel] {
            let mut c = with_seed(cfg, seed);
            c.train.objective.privacy = mode;
            let sub = format!("{}/seed{seed}", mode.flag());
            let trained = train_encoder_on(&c, data, &dir.join(&sub), force)?;
            let (target, _) = target_from_run(&trained.dir)?;
            let cells = verify(&c, data, &[target], &private, &dir.join(format!("{sub}/verify")), force)?;
            let r = &cells[0].report;
            let row = LossComparisonRow {
                mode: mode.flag().into(),
                seed,
                within_training_val: final_within_training_accuracy(&trained.rows),
                verified_val: r.val_accuracy,
                verified_test: r.test_accuracy,
                iterations_to_90pct: r.iterations_to_fraction(0.9),
            };
            csv.row(&[
                row.mode.clone(),
                seed.to_string(),
                row.within_training_val.to_string(),
                row.verified_val.to_string(),
                row.verified_test.to_string(),
                row.iterations_to_90pct.map(|i| i.to_string()).unwrap_or_default(),
            ])?;
            artifacts.push(sub);
            out.push(row);
        }
    }
    write_record(dir, "compare-losses", &config_text, artifacts, serde_json::to_value(&out)?)?;
    Ok(out)
}

/// `mi-check`: oracle residuals over random joints. Fails (exit 3) when any
/// residual exceeds [`MI_TOLERANCE`].
pub fn mi_check(trials: usize, balanced_binary: bool, seed: u64) -> anyhow::Result<OracleReport> {
    if trials == 0 {
        bail!(Error::usage("trials must be positive"));
    }
    let report = oracle_trials(&mut stream(seed, "mi-check"), trials, balanced_binary)?;
    if report.max_residual() > MI_TOLERANCE {
        return Err(CheckFailed(format!("max residual {:e} above {MI_TOLERANCE:e}", report.max_residual())).into());
    }
    Ok(report)
}

/// `report`: human-readable summary of any run directory.
pub fn report(dir: &Path) -> anyhow::Result<String> {
    let rec_path = dir.join("run.json");
    let rec: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(&rec_path).map_err(|e| Error::Load { path: rec_path.clone(), reason: e.to_string() })?,
    )
    .map_err(|e| Error::Corrupt(format!("{}: {e}", rec_path.display())))?;
    let mut s = String::new();
    let _ = writeln!(s, "run       {}", dir.display());
    let _ = writeln!(s, "command   {}", rec["command"].as_str().unwrap_or("?"));
    let _ = writeln!(s, "code      {}", rec["code_version"].as_str().unwrap_or("?"));
    if rec["code_version"].as_str() != Some(CODE_VERSION) {
        let _ = writeln!(s, "          (this binary is {CODE_VERSION})");
    }
    let _ = writeln!(s, "summary   {}", serde_json::to_string_pretty(&rec["summary"])?);
    for name in ["table.txt", "ablation.csv", "comparison.csv"] {
        if let Ok(t) = fs::read_to_string(dir.join(name)) {
            let _ = writeln!(s, "\n{name}:\n{t}");
        }
    }
    // Fig. 1 style plot data: private-task curves of every verified encoder.
    let cells_dir = dir.join("cells");
    if cells_dir.is_dir() {
        let mut curves: Vec<(String, VerificationReport)> = Vec::new();
        let mut names: Vec<PathBuf> = fs::read_dir(&cells_dir)?.flatten().map(|e| e.path()).collect();
        names.sort();
        for p in names {
            let cell: MatrixCell = serde_json::from_str(&fs::read_to_string(&p)?)
                .map_err(|e| Error::Corrupt(format!("{}: {e}", p.display())))?;
            if cell.tag == CellTag::Private || cell.encoder == "identity" {
                curves.push((cell.encoder.clone(), cell.report));
            }
        }
        if !curves.is_empty() {
            let mut csv = CsvLog::create(&dir.join("private_curves.csv"), "private-curves", &["encoder", "iteration", "val_accuracy", "best_so_far"])?;
            for (enc, r) in &curves {
                for (p, best) in r.curve.iter().zip(r.best_so_far()) {
                    csv.row(&[enc.clone(), p.iteration.to_string(), p.val_accuracy.to_string(), best.to_string()])?;
                }
            }
            let _ = writeln!(s, "wrote {}", dir.join("private_curves.csv").display());
        }
    }
    Ok(s)
}
