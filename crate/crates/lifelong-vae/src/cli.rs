//! Experiment runner behind the `lvae` binary: configuration, data
//! preparation, trial orchestration, line-delimited metrics output, summary
//! statistics, and optional static plots.
//!
//! Metrics are appended to `metrics.jsonl` as each (trial, distribution)
//! completes, one self-describing JSON record per line, so a crashed run
//! still leaves parseable output. `summary.json` aggregates mean and sample
//! standard deviation per (method, distribution).

use crate::data::{
    cap_per_class, load_idx_corpus, make_permuted_sequence, split_by_label, DistributionSequence,
    DistributionTriple, ImageDataset, Split,
};
use crate::error::{Error, Result};
use crate::lifelong::{run_sequence, EvalContext, Method, TrainConfig};
use crate::metrics::{
    load_extractor, save_extractor, train_feature_classifier, FeatureExtractor, FeatureMode,
};
use crate::networks::ArchSpec;
use crate::objective::LossTerms;
use crate::seeds;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
/// Continuous latent width shared by every experiment.
pub const CONTINUOUS_DIM: usize = 14;
/// Number of datasets in the permuted experiment.
pub const PERMUTED_DATASETS: usize = 5;
/// Per-class caps applied by `--desk-scale`.
pub const DESK_TRAIN_CAP: usize = 1000;
pub const DESK_TEST_CAP: usize = 200;

/// Which dataset/protocol to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    MnistSequential,
    FashionSequential,
    Permuted,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::MnistSequential => "mnist_sequential",
            ExperimentKind::FashionSequential => "fashion_sequential",
            ExperimentKind::Permuted => "permuted",
        }
    }
}

/// Full configuration of one `lvae run` invocation.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub method: Method,
    pub lambda: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub trials: usize,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub desk_scale: bool,
    pub extractor_path: PathBuf,
    pub emit_plots: bool,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub method: String,
    pub trial: usize,
    pub distribution_index: usize,
    pub neg_test_elbo: f64,
    pub frechet: f64,
    pub log_frechet: f64,
    pub epochs_to_stop: usize,
    pub loss_breakdown: LossTerms,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    fn validate(&self) -> Result<()> {
        if !self.neg_test_elbo.is_finite()
            || !self.frechet.is_finite()
            || !self.log_frechet.is_finite()
            || !self.loss_breakdown.is_finite()
        {
            return Err(Error::Numeric(format!(
                "non-finite metrics for trial {} distribution {}",
                self.trial, self.distribution_index
            )));
        }
        Ok(())
    }
}

/// Aggregated row of `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub distribution_index: usize,
    pub n_trials: usize,
    pub neg_test_elbo_mean: f64,
    pub neg_test_elbo_std: f64,
    pub frechet_mean: f64,
    pub frechet_std: f64,
}

/// Artifacts produced by [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub records: Vec<MetricsRecord>,
}

fn carve_val(train: &ImageDataset, val_fraction: f64, seed: u64) -> (ImageDataset, ImageDataset) {
    let n = train.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    let n_val = ((val_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let (val_idx, train_idx) = indices.split_at(n_val);
    (
        train.subset(train_idx, Split::Train),
        train.subset(val_idx, Split::Val),
    )
}

fn distinct_classes(ds: &ImageDataset) -> usize {
    match &ds.labels {
        None => 1,
        Some(l) => {
            let mut classes: Vec<u8> = l.clone();
            classes.sort_unstable();
            classes.dedup();
            classes.len()
        }
    }
}

/// Load and sequence the experiment's data. Returns the sequence plus the
/// full (non-sequential) labeled corpus used to train the feature extractor.
pub fn prepare_data(config: &ExperimentConfig) -> Result<(DistributionSequence, ImageDataset)> {
    let tag = config.experiment.as_str();
    let (mut train, mut test) = load_idx_corpus(&config.data_root, tag)?;
    match config.experiment {
        ExperimentKind::MnistSequential | ExperimentKind::FashionSequential => {
            if config.desk_scale {
                train = cap_per_class(&train, DESK_TRAIN_CAP);
                test = cap_per_class(&test, DESK_TEST_CAP);
            }
            let seq = split_by_label(&train, &test, 0.1, seeds::derive(config.seed, 0x5350))?;
            Ok((seq, train))
        }
        ExperimentKind::Permuted => {
            if config.desk_scale {
                let n_classes = distinct_classes(&train).max(1);
                train = cap_per_class(&train, DESK_TRAIN_CAP.div_ceil(n_classes));
                test = cap_per_class(&test, DESK_TEST_CAP.div_ceil(n_classes));
            }
            let (train_split, val_split) =
                carve_val(&train, 0.1, seeds::derive(config.seed, 0x5056));
            let base = DistributionTriple {
                train: train_split,
                val: val_split,
                test,
            };
            let seq = make_permuted_sequence(
                &base,
                PERMUTED_DATASETS,
                seeds::derive(config.seed, 0x5045),
            )?;
            Ok((seq, train))
        }
    }
}

/// Load the extractor from `extractor_path`, or train it on the full corpus
/// and persist it there so every method shares one hash-stamped extractor.
pub fn ensure_extractor(
    extractor_path: &Path,
    corpus: &ImageDataset,
    seed: u64,
) -> Result<FeatureExtractor> {
    if extractor_path.exists() {
        return load_extractor(extractor_path);
    }
    let extractor = train_feature_classifier(corpus, seeds::derive(seed, 0x4654))?;
    if let Some(parent) = extractor_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_extractor(extractor_path, &extractor)?;
    Ok(extractor)
}

fn train_config_from(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        method: config.method,
        lambda: config.lambda,
        gamma: config.gamma,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        max_epochs: config.max_epochs,
        patience: config.patience,
        ..TrainConfig::default()
    }
}

/// Execute `trials` seeded runs, streaming one metrics line per
/// (trial, distribution) and writing a summary. Deterministic given the
/// config and seed, except for `wall_seconds`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    if config.trials == 0 {
        return Err(Error::arg("trials", "must be at least 1"));
    }
    std::fs::create_dir_all(&config.out_dir)?;

    let (seq, corpus) = prepare_data(config)?;
    let extractor = ensure_extractor(&config.extractor_path, &corpus, config.seed)?;

    let arch = ArchSpec {
        input_dim: corpus.dim(),
        hidden_dim: if config.desk_scale { 256 } else { 512 },
        hidden_layers: 2,
        discrete_dim: seq.len(),
        continuous_dim: CONTINUOUS_DIM,
    };
    let train_config = train_config_from(config);

    let metrics_path = config.out_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::File::create(&metrics_path)?;
    let mut records = Vec::new();

    for trial in 0..config.trials {
        let trial_seed = config.seed.wrapping_add(trial as u64);
        let eval = EvalContext {
            feature_mode: FeatureMode::Classifier(&extractor),
            n_mc: 4,
            frechet_samples: 2048,
            test_cap: 2048,
            eval_seed: seeds::derive(trial_seed, 0x4556),
        };
        let steps = run_sequence(&seq, &train_config, &arch, &eval, trial_seed)?;
        for step in steps {
            let record = MetricsRecord {
                schema_version: METRICS_SCHEMA_VERSION,
                method: config.method.as_str().to_string(),
                trial,
                distribution_index: step.distribution_index,
                neg_test_elbo: step.neg_test_elbo,
                frechet: step.frechet,
                log_frechet: step.log_frechet,
                epochs_to_stop: step.epochs_to_stop,
                loss_breakdown: step.loss_breakdown,
                wall_seconds: step.wall_seconds,
            };
            record.validate()?;
            let line = serde_json::to_string(&record).expect("serializable record");
            writeln!(metrics_file, "{line}")?;
            metrics_file.flush()?;
            records.push(record);
        }
    }

    let summary = summarize_records(&records);
    let summary_path = config.out_dir.join("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("serializable summary"),
    )?;

    if config.emit_plots {
        emit_plots(&config.out_dir, &summary)?;
    }

    Ok(RunOutput {
        metrics_path,
        summary_path,
        records,
    })
}

/// Mean and sample standard deviation per (method, distribution).
pub fn summarize_records(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method.clone(), r.distribution_index))
            .or_default()
            .push(r);
    }
    let stats = |values: &[f64]| -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        (mean, std)
    };
    groups
        .into_iter()
        .map(|((method, distribution_index), rs)| {
            let elbos: Vec<f64> = rs.iter().map(|r| r.neg_test_elbo).collect();
            let frechets: Vec<f64> = rs.iter().map(|r| r.frechet).collect();
            let (em, es) = stats(&elbos);
            let (fm, fs) = stats(&frechets);
            SummaryRow {
                method,
                distribution_index,
                n_trials: rs.len(),
                neg_test_elbo_mean: em,
                neg_test_elbo_std: es,
                frechet_mean: fm,
                frechet_std: fs,
            }
        })
        .collect()
}

/// Parse metrics files and aggregate them; parse failures name the line.
pub fn summarize(paths: &[PathBuf]) -> Result<Vec<SummaryRow>> {
    if paths.is_empty() {
        return Err(Error::arg("paths", "need at least one metrics file"));
    }
    let mut records = Vec::new();
    for path in paths {
        let content = std::fs::read_to_string(path)?;
        for (idx, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: MetricsRecord =
                serde_json::from_str(line).map_err(|e| Error::Parse {
                    line: idx + 1,
                    reason: format!("{path:?}: {e}"),
                })?;
            records.push(record);
        }
    }
    if records.is_empty() {
        return Err(Error::arg("paths", "no metrics records found"));
    }
    Ok(summarize_records(&records))
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

/// Minimal SVG polyline chart; enough for the per-distribution metric curves.
fn svg_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const MARGIN: f64 = 50.0;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.clone()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    ));
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    ));
    for (label, y) in [(format!("{y0:.2}"), H - MARGIN), (format!("{y1:.2}"), MARGIN)] {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{label}</text>\n",
            MARGIN - 6.0
        ));
    }
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{},{}", sx(x), sy(y))).collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in pts {
            out.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            W - MARGIN + 6.0 - 120.0,
            MARGIN + 16.0 * i as f64
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn emit_plots(out_dir: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut by_method: BTreeMap<String, Vec<&SummaryRow>> = BTreeMap::new();
    for row in summary {
        by_method.entry(row.method.clone()).or_default().push(row);
    }
    let series_of = |f: &dyn Fn(&SummaryRow) -> f64| -> Vec<(String, Vec<(f64, f64)>)> {
        by_method
            .iter()
            .map(|(m, rows)| {
                (
                    m.clone(),
                    rows.iter()
                        .map(|r| (r.distribution_index as f64, f(r)))
                        .collect(),
                )
            })
            .collect()
    };
    std::fs::write(
        out_dir.join("neg_test_elbo.svg"),
        svg_chart("Negative test ELBO (nats)", &series_of(&|r| r.neg_test_elbo_mean)),
    )?;
    std::fs::write(
        out_dir.join("log_frechet.svg"),
        svg_chart(
            "log-Frechet distance",
            &series_of(&|r| r.frechet_mean.max(1e-12).ln()),
        ),
    )?;
    Ok(())
}
