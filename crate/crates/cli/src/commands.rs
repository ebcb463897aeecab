use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use abpem::adapt::{adapt_stream, grad_alignment, AdaptConfig, BatchRecord};
use abpem::data::{batch_order, Split};
use abpem::diagnostics::gap_records;
use abpem::gradcheck::{check_objective, DEFAULT_STEP};
use abpem::io::{Checkpoint, Dataset};
use abpem::model::Model;
use abpem::objective::{Mode, Objective};
use abpem::synth::{self, BenchConfig, Corruption, LatentSpec, PretrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::Recorder;
use crate::settings::Settings;

pub const DATASET_FILE: &str = "dataset.abpds";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const GAP_FILE: &str = "gap.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

/// Maximum relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// What a finished command hands back for its manifest.
pub struct Outcome {
    pub config: Settings,
    pub seed: u64,
    /// Set when the command completed but a tolerance check failed.
    pub breach: Option<String>,
}

impl Outcome {
    fn ok(config: Settings, seed: u64) -> Self {
        Self { config, seed, breach: None }
    }
}

pub type Missing<'a> = &'a dyn Fn(&str) -> CliError;

fn required<T: Clone>(value: &Option<T>, flag: &str, missing: Missing<'_>) -> Result<T, CliError> {
    value.clone().ok_or_else(|| missing(flag))
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        let err = std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found"));
        Err(CliError::io(&path, err))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T, rec: &mut Recorder) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(abpem::Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))?;
    rec.output(path);
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T], rec: &mut Recorder) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(abpem::Error::from)?;
        writeln!(w, "{line}").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    rec.output(path);
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(abpem::Error::from)?)
}

fn load_dataset(s: &Settings, rec: &mut Recorder, missing: Missing<'_>) -> Result<(PathBuf, Dataset), CliError> {
    let path = existing(required(&s.dataset, "--dataset", missing)?, "dataset")?;
    let dataset = Dataset::load(&path)?;
    rec.input(&path);
    Ok((path, dataset))
}

fn load_checkpoint(s: &Settings, rec: &mut Recorder, missing: Missing<'_>) -> Result<(PathBuf, Checkpoint), CliError> {
    let path = existing(required(&s.checkpoint, "--checkpoint", missing)?, "checkpoint")?;
    let checkpoint = Checkpoint::load(&path)?;
    rec.input(&path);
    Ok((path, checkpoint))
}

fn check_compatible(dataset: &Dataset, model: &Model) -> Result<(), CliError> {
    let want = dataset.bench.model_dims();
    let have = *model.dims();
    if (want.raw_dim, want.t_a, want.t_v, want.n_classes) != (have.raw_dim, have.t_a, have.t_v, have.n_classes) {
        return Err(abpem::Error::Contract(format!("checkpoint dims {have:?} do not fit dataset dims {want:?}")).into());
    }
    Ok(())
}

/// The named split, or the corrupted test split when present, else `test`.
fn stream_split<'a>(dataset: &'a Dataset, name: &Option<String>) -> Result<(String, &'a Split), CliError> {
    let name = match name {
        Some(n) => n.clone(),
        None if dataset.split("test_corrupted").is_ok() => "test_corrupted".into(),
        None => "test".into(),
    };
    let split = dataset.split(&name)?;
    Ok((name, split))
}

pub fn gen(s: &Settings, out: &Path, rec: &mut Recorder, missing: Missing<'_>) -> Result<Outcome, CliError> {
    let preset = required(&s.preset, "--preset", missing)?;
    let seed = s.seed.unwrap_or(0);
    let mut bench = BenchConfig::preset(&preset)?;
    bench.n_train = s.n_train.unwrap_or(bench.n_train);
    bench.n_test = s.n_test.unwrap_or(bench.n_test);
    let corruption: Option<Corruption> = s.corrupt.as_deref().map(str::parse).transpose()?;

    let spec = LatentSpec::new(bench.clone(), seed)?;
    let (train, test) = synth::generate_dataset(&spec, bench.n_train, bench.n_test)?;
    let mut splits = vec![("train".to_string(), train)];
    if let Some(c) = &corruption {
        let corrupted = synth::corrupt(&test, c, &bench.severity, seed)?;
        splits.push(("test".into(), test));
        splits.push(("test_corrupted".into(), corrupted));
    } else {
        splits.push(("test".into(), test));
    }
    rec.lap("generate");
    let dataset = Dataset { bench: bench.clone(), seed, corruption, splits };
    let path = out.join(DATASET_FILE);
    dataset.save(&path)?;
    rec.output(&path);
    rec.lap("write");
    println!("wrote {} ({} train, {} test samples)", path.display(), bench.n_train, bench.n_test);

    let config = Settings {
        preset: Some(preset),
        seed: Some(seed),
        corrupt: corruption.map(|c| c.to_string()),
        n_train: Some(bench.n_train),
        n_test: Some(bench.n_test),
        out: Some(out.to_path_buf()),
        ..Default::default()
    };
    Ok(Outcome::ok(config, seed))
}

pub fn pretrain(s: &Settings, out: &Path, rec: &mut Recorder, missing: Missing<'_>) -> Result<Outcome, CliError> {
    let (dataset_path, dataset) = load_dataset(s, rec, missing)?;
    let seed = s.seed.unwrap_or(dataset.seed);
    let defaults = PretrainConfig::default();
    let cfg = PretrainConfig {
        epochs: s.epochs.unwrap_or(defaults.epochs),
        lr: s.lr.unwrap_or(defaults.lr),
        batch_size: s.batch_size.unwrap_or(defaults.batch_size),
        seed,
    };
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(abpem::Error::Parameter("pretraining needs a positive batch size and learning rate".into()).into());
    }
    rec.lap("load");
    let model = synth::init_model(&dataset.bench, seed)?;
    let model = synth::pretrain_fusion(dataset.split("train")?, &model, &cfg)?;
    rec.lap("train");
    let clean_acc = synth::split_accuracy(dataset.split("test")?, &model)?;
    rec.lap("evaluate");
    let path = out.join(CHECKPOINT_FILE);
    Checkpoint::new(model, seed, Some(clean_acc)).save(&path)?;
    rec.output(&path);
    println!("clean test accuracy {clean_acc:.4}; wrote {}", path.display());

    let config = Settings {
        seed: Some(seed),
        epochs: Some(cfg.epochs),
        lr: Some(cfg.lr),
        batch_size: Some(cfg.batch_size),
        dataset: Some(dataset_path),
        out: Some(out.to_path_buf()),
        ..Default::default()
    };
    Ok(Outcome::ok(config, seed))
}

/// Contents of an adapt run's `summary.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub mode: Mode,
    pub split: String,
    pub accuracy: Option<f64>,
    pub n_samples: usize,
    pub n_batches: usize,
    pub mean_gap_v: f64,
    pub mean_gap_a: f64,
    pub adapt: AdaptConfig,
}

fn adapt_config(s: &Settings, n_classes: usize) -> AdaptConfig {
    let d = AdaptConfig::default();
    AdaptConfig {
        mode: s.mode.unwrap_or(d.mode),
        k: s.k.unwrap_or(AdaptConfig::default_k(n_classes)),
        lambda: s.lambda.unwrap_or(d.lambda),
        lr: s.lr.unwrap_or(d.lr),
        batch_size: s.batch_size.unwrap_or(d.batch_size),
        seed: s.seed.unwrap_or(d.seed),
        ..d
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn adapt(s: &Settings, out: &Path, rec: &mut Recorder, missing: Missing<'_>) -> Result<Outcome, CliError> {
    required(&s.dataset, "--dataset", missing)?;
    required(&s.checkpoint, "--checkpoint", missing)?;
    let (dataset_path, dataset) = load_dataset(s, rec, missing)?;
    let (checkpoint_path, checkpoint) = load_checkpoint(s, rec, missing)?;
    check_compatible(&dataset, &checkpoint.model)?;
    let (split_name, stream) = stream_split(&dataset, &s.split)?;
    let cfg = adapt_config(s, dataset.bench.n_classes);
    rec.lap("load");
    let outcome = adapt_stream(stream, &checkpoint.model, &cfg)?;
    rec.lap("adapt");

    let metrics = out.join(METRICS_FILE);
    write_jsonl(&metrics, &outcome.records, rec)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    Checkpoint::new(outcome.model.clone(), cfg.seed, checkpoint.header.clean_acc).save(&ckpt)?;
    rec.output(&ckpt);
    let summary = AdaptSummary {
        mode: cfg.mode,
        split: split_name.clone(),
        accuracy: outcome.accuracy(stream),
        n_samples: stream.len(),
        n_batches: outcome.records.len(),
        mean_gap_v: mean(outcome.records.iter().map(|r| r.gap_v)),
        mean_gap_a: mean(outcome.records.iter().map(|r| r.gap_a)),
        adapt: cfg.clone(),
    };
    write_json(&out.join(SUMMARY_FILE), &summary, rec)?;
    rec.lap("write");
    match summary.accuracy {
        Some(acc) => println!("{} on {split_name}: accuracy {acc:.4} over {} batches", cfg.mode, summary.n_batches),
        None => println!("{} on {split_name}: {} batches (unlabelled)", cfg.mode, summary.n_batches),
    }

    let config = Settings {
        seed: Some(cfg.seed),
        mode: Some(cfg.mode),
        k: Some(cfg.k),
        lambda: Some(cfg.lambda),
        lr: Some(cfg.lr),
        batch_size: Some(cfg.batch_size),
        split: Some(split_name),
        dataset: Some(dataset_path),
        checkpoint: Some(checkpoint_path),
        out: Some(out.to_path_buf()),
        ..Default::default()
    };
    Ok(Outcome::ok(config, cfg.seed))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapSummary {
    pub split: String,
    pub accuracy: Option<f64>,
    pub n_batches: usize,
    pub mean_gap_v: f64,
    pub mean_gap_a: f64,
}

pub fn gap(s: &Settings, out: &Path, rec: &mut Recorder, missing: Missing<'_>) -> Result<Outcome, CliError> {
    required(&s.dataset, "--dataset", missing)?;
    required(&s.checkpoint, "--checkpoint", missing)?;
    let (dataset_path, dataset) = load_dataset(s, rec, missing)?;
    let (checkpoint_path, checkpoint) = load_checkpoint(s, rec, missing)?;
    check_compatible(&dataset, &checkpoint.model)?;
    let (split_name, split) = stream_split(&dataset, &s.split)?;
    let seed = s.seed.unwrap_or(0);
    let batch_size = s.batch_size.unwrap_or(AdaptConfig::default().batch_size);
    rec.lap("load");
    let records = gap_records(split, &checkpoint.model, batch_size, seed)?;
    let accuracy = match split.labels() {
        Some(labels) => Some(synth::evaluate(&synth::predict_split(split, &checkpoint.model)?, &labels)?),
        None => None,
    };
    rec.lap("measure");
    write_jsonl(&out.join(GAP_FILE), &records, rec)?;
    let summary = GapSummary {
        split: split_name.clone(),
        accuracy,
        n_batches: records.len(),
        mean_gap_v: mean(records.iter().map(|r| r.gap_v)),
        mean_gap_a: mean(records.iter().map(|r| r.gap_a)),
    };
    write_json(&out.join(SUMMARY_FILE), &summary, rec)?;
    rec.lap("write");
    println!(
        "frozen model on {split_name}: mean gap_v {:.4}, gap_a {:.4} over {} batches",
        summary.mean_gap_v, summary.mean_gap_a, summary.n_batches
    );

    let config = Settings {
        seed: Some(seed),
        batch_size: Some(batch_size),
        split: Some(split_name),
        dataset: Some(dataset_path),
        checkpoint: Some(checkpoint_path),
        out: Some(out.to_path_buf()),
        ..Default::default()
    };
    Ok(Outcome::ok(config, seed))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeCheck {
    pub mode: Mode,
    pub loss: f64,
    pub max_rel_err: f64,
    pub groups: Vec<GroupCheck>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    pub batch_size: usize,
    pub max_rel_err: f64,
    pub modes: Vec<ModeCheck>,
}

/// Finite-difference check on the five-class toy model, batch of four.
pub fn gradcheck(s: &Settings, out: &Path, rec: &mut Recorder) -> Result<Outcome, CliError> {
    let seed = s.seed.unwrap_or(0);
    let k = s.k.unwrap_or(2);
    let lambda = s.lambda.unwrap_or(1.0);
    let batch_size = 4;
    let modes = match s.mode {
        Some(Mode::Raw) => return Err(abpem::Error::Parameter("mode raw has no loss to check".into()).into()),
        Some(m) => vec![m],
        None => vec![Mode::AbOnly, Mode::PemOnly, Mode::Abpem],
    };
    let bench = BenchConfig::preset("toy")?;
    let spec = LatentSpec::new(bench.clone(), seed)?;
    let (_, test) = synth::generate_dataset(&spec, bench.n_classes, bench.n_classes)?;
    let model = synth::init_model(&bench, seed)?;
    let indices: Vec<usize> = (0..batch_size).collect();
    let batch = test.encode(&model, &indices)?;

    let mut checks = Vec::new();
    for mode in modes {
        let objective = Objective { mode, k, lambda, class_balance_weight: 0.0 };
        let report = check_objective(&batch, &model.fusion, &objective, DEFAULT_STEP)?;
        checks.push(ModeCheck {
            mode,
            loss: report.loss,
            max_rel_err: report.max_rel_err(),
            groups: report
                .groups
                .iter()
                .map(|g| GroupCheck { group: g.group.name().into(), max_rel_err: g.max_rel_err })
                .collect(),
        });
    }
    rec.lap("check");
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let report = GradcheckReport {
        seed,
        tolerance: GRADCHECK_TOLERANCE,
        step: DEFAULT_STEP,
        batch_size,
        max_rel_err,
        modes: checks,
    };
    write_json(&out.join(GRADCHECK_FILE), &report, rec)?;
    for c in &report.modes {
        println!("{:<9} max rel. err {:.3e}", c.mode.name(), c.max_rel_err);
    }
    println!("max rel. err {max_rel_err:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");

    let breach = (max_rel_err >= GRADCHECK_TOLERANCE)
        .then(|| format!("max relative error {max_rel_err:e} >= {GRADCHECK_TOLERANCE:e}"));
    let config = Settings {
        seed: Some(seed),
        mode: s.mode,
        k: Some(k),
        lambda: Some(lambda),
        out: Some(out.to_path_buf()),
        ..Default::default()
    };
    Ok(Outcome { config, seed, breach })
}

/// One row of the report table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: Mode,
    pub run: PathBuf,
    pub split: String,
    pub accuracy: Option<f64>,
    pub n_batches: usize,
    pub mean_gap_v: f64,
    pub mean_gap_a: f64,
    pub first_decile_gap_v: f64,
    pub last_decile_gap_v: f64,
    pub mean_loss_total: Option<f64>,
    pub final_loss_total: Option<f64>,
    /// Median cosine between this mode's entropy surrogate gradient and the
    /// supervised gradient, when a dataset and checkpoint were given.
    pub grad_alignment: Option<f64>,
    pub loss_curve: Vec<Option<f64>>,
    pub gap_v_curve: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Alignment {
    pub batches: usize,
    pub k: usize,
    pub median_cos_pem: f64,
    pub median_cos_em: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub grad_alignment: Option<Alignment>,
}

fn read_metrics(path: &Path) -> Result<Vec<BatchRecord>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(abpem::Error::from)?);
        }
    }
    Ok(out)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn alignment(s: &Settings, rec: &mut Recorder, missing: Missing<'_>) -> Result<Option<Alignment>, CliError> {
    if s.dataset.is_none() && s.checkpoint.is_none() {
        return Ok(None);
    }
    let (_, dataset) = load_dataset(s, rec, missing)?;
    let (_, checkpoint) = load_checkpoint(s, rec, missing)?;
    check_compatible(&dataset, &checkpoint.model)?;
    let (_, split) = stream_split(&dataset, &s.split)?;
    let cfg = adapt_config(s, dataset.bench.n_classes);
    let (mut pem, mut em) = (Vec::new(), Vec::new());
    for idx in batch_order(split.len(), cfg.batch_size, cfg.seed)? {
        let batch = split.encode(&checkpoint.model, &idx)?;
        let (p, e) = grad_alignment(&batch, &checkpoint.model.fusion, &cfg)?;
        pem.push(p);
        em.push(e);
    }
    Ok(Some(Alignment { batches: pem.len(), k: cfg.k, median_cos_pem: median(pem), median_cos_em: median(em) }))
}

pub fn report(s: &Settings, out: &Path, rec: &mut Recorder, missing: Missing<'_>) -> Result<Outcome, CliError> {
    let runs = required(&s.runs, "--run", missing)?;
    if runs.is_empty() {
        return Err(missing("--run"));
    }
    let align = alignment(s, rec, missing)?;
    rec.lap("alignment");
    let mut rows = Vec::new();
    for run in &runs {
        let summary_path = existing(run.join(SUMMARY_FILE), "adapt summary")?;
        let metrics_path = existing(run.join(METRICS_FILE), "metrics trace")?;
        let summary: AdaptSummary = read_json(&summary_path)?;
        let records = read_metrics(&metrics_path)?;
        rec.input(&summary_path);
        rec.input(&metrics_path);
        let gaps: Vec<f64> = records.iter().map(|r| r.gap_v).collect();
        let decile = (gaps.len() / 10).max(1).min(gaps.len());
        let losses: Vec<Option<f64>> = records.iter().map(|r| r.loss_total).collect();
        let known: Vec<f64> = losses.iter().flatten().copied().collect();
        let grad_alignment = align.as_ref().and_then(|a| match summary.mode {
            Mode::Em => Some(a.median_cos_em),
            Mode::Abpem | Mode::PemOnly => Some(a.median_cos_pem),
            _ => None,
        });
        rows.push(ReportRow {
            mode: summary.mode,
            run: run.clone(),
            split: summary.split,
            accuracy: summary.accuracy,
            n_batches: records.len(),
            mean_gap_v: mean(gaps.iter().copied()),
            mean_gap_a: mean(records.iter().map(|r| r.gap_a)),
            first_decile_gap_v: mean(gaps[..decile].iter().copied()),
            last_decile_gap_v: mean(gaps[gaps.len() - decile..].iter().copied()),
            mean_loss_total: (!known.is_empty()).then(|| mean(known.iter().copied())),
            final_loss_total: known.last().copied(),
            grad_alignment,
            loss_curve: losses,
            gap_v_curve: gaps,
        });
    }
    rec.lap("aggregate");

    let csv_path = out.join(REPORT_CSV);
    let mut csv = String::from(
        "mode,run,split,accuracy,n_batches,mean_gap_v,mean_gap_a,first_decile_gap_v,last_decile_gap_v,mean_loss_total,final_loss_total,grad_alignment\n",
    );
    for r in &rows {
        csv += &format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.mode,
            r.run.display(),
            r.split,
            csv_cell(r.accuracy),
            r.n_batches,
            r.mean_gap_v,
            r.mean_gap_a,
            r.first_decile_gap_v,
            r.last_decile_gap_v,
            csv_cell(r.mean_loss_total),
            csv_cell(r.final_loss_total),
            csv_cell(r.grad_alignment),
        );
    }
    std::fs::write(&csv_path, &csv).map_err(|e| CliError::io(&csv_path, e))?;
    rec.output(&csv_path);
    let report = Report { rows, grad_alignment: align };
    write_json(&out.join(REPORT_JSON), &report, rec)?;
    rec.lap("write");
    print!("{csv}");

    let seed = s.seed.unwrap_or(0);
    let config = Settings {
        runs: Some(runs),
        seed: Some(seed),
        dataset: s.dataset.clone(),
        checkpoint: s.checkpoint.clone(),
        out: Some(out.to_path_buf()),
        ..Default::default()
    };
    Ok(Outcome::ok(config, seed))
}
