//! Experiment harness: pretraining, corrupted-stream evaluation, sweeps,
//! and report emission. Every run is a pure function of its seeds.

use crate::adaptation::{run_stream, AdaptConfig, AdaptMode, Method, VariationSource};
use crate::corruptions::{apply_corruption, CorruptionSpec};
use crate::data::{batch_iter, Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{mix_seed, PointCloud};
use crate::model::{
    forward_logits, loss_grads, ModelState, PointNetLiteConfig, Loss,
};
use crate::numerics::layers::softmax_entropy;
use crate::numerics::{adamw_step, AdamWState, NormMode};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

// seed stream tags so sub-seeds never collide
const TAG_SHUFFLE: u64 = 0x01;
const TAG_CORRUPT: u64 = 0x02;
const TAG_ADAPT: u64 = 0x03;
const TAG_PREDICT: u64 = 0x04;
const TAG_SAMPLING: u64 = 0x05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> PretrainConfig {
        PretrainConfig {
            epochs: 30,
            lr: 1e-3,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: Method,
    /// "kind:severity", or None for the clean stream.
    pub corruption: Option<String>,
    pub v: usize,
    pub iterations: usize,
    pub mode: AdaptMode,
    pub lr: f64,
    pub batch_size: usize,
    pub variation_source: VariationSource,
    pub reset_each_batch: bool,
    pub seed: u64,
    pub repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            method: Method::Svwa,
            corruption: None,
            v: 6,
            iterations: 1,
            mode: AdaptMode::Parallel,
            lr: 1e-3,
            batch_size: 128,
            variation_source: VariationSource::Sampling,
            reset_each_batch: false,
            seed: 0,
            repeats: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn adapt_config(&self, rep_seed: u64) -> AdaptConfig {
        AdaptConfig {
            v: self.v,
            iterations: self.iterations,
            mode: self.mode,
            lr: self.lr,
            batch_size: self.batch_size,
            base_seed: mix_seed(rep_seed, TAG_ADAPT),
            prediction_seed: mix_seed(rep_seed, TAG_PREDICT),
            variation_source: self.variation_source,
            reset_each_batch: self.reset_each_batch,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One (method, corruption, severity, seed) evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub corruption: String,
    pub severity: u8,
    pub seed: u64,
    pub accuracy: f64,
    pub mean_entropy_before: f64,
    pub mean_entropy_after: f64,
    pub adaptable_fraction: f64,
    pub overhead_fraction: f64,
    pub v: usize,
    pub mode: String,
    pub variation_source: String,
    pub elapsed_ms: u64,
    pub fingerprint: String,
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

pub struct PretrainOutcome {
    pub state: ModelState,
    pub clean_accuracy: f64,
    pub log: String,
}

/// Canonical per-cloud FPS sampling used during training, keyed by the run
/// seed and cloud index (fixed across epochs).
fn training_points(
    dataset: &Dataset,
    indices: &[usize],
    m: usize,
    seed: u64,
) -> Result<crate::numerics::Tensor> {
    let batch: Vec<PointCloud> = indices.iter().map(|&i| dataset.clouds[i].clone()).collect();
    let patch_sets = batch
        .iter()
        .zip(indices)
        .map(|(cloud, &i)| {
            let padded = crate::geometry::cycle_pad(cloud, m);
            crate::geometry::patchify(&padded, m, 1, mix_seed(mix_seed(seed, TAG_SAMPLING), i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::geometry::centers_tensor(&patch_sets))
}

/// Supervised cross-entropy pretraining with AdamW and a constant learning
/// rate. Batch-norm running statistics accumulate during training.
pub fn run_pretrain(
    dataset: &Dataset,
    model_config: PointNetLiteConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("pretrain batch_size must be ≥ 2".into()));
    }
    let mut state = ModelState::init(model_config, mix_seed(seed, 0xA11))?;
    let mut opt = AdamWState::new(&state.params, cfg.lr);
    let m = state.config.fps_points;
    let mut log = String::new();
    for epoch in 0..cfg.epochs {
        let batches = batch_iter(dataset, Split::Train, cfg.batch_size, mix_seed(seed, epoch as u64))?;
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        let mut epoch_total = 0usize;
        let mut steps = 0usize;
        for batch in &batches {
            if batch.indices.len() < 2 {
                continue;
            }
            let points = training_points(dataset, &batch.indices, m, seed)?;
            let labels: Vec<usize> = batch
                .indices
                .iter()
                .map(|&i| dataset.clouds[i].label.expect("labeled training cloud"))
                .collect();
            let (loss, logits, grads) = loss_grads(
                &mut state,
                &points,
                Loss::CrossEntropy(&labels),
                NormMode::TrainBatchStats,
                true,
            )?;
            adamw_step(&mut state.params, &grads, &mut opt)?;
            let preds = crate::adaptation::argmax_rows(&crate::numerics::layers::softmax(&logits)?);
            epoch_correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            epoch_total += labels.len();
            epoch_loss += loss;
            steps += 1;
        }
        let _ = writeln!(
            log,
            "epoch {epoch}: loss {:.4} train-acc {:.4}",
            epoch_loss / steps.max(1) as f64,
            epoch_correct as f64 / epoch_total.max(1) as f64
        );
    }
    let clean_accuracy = clean_test_accuracy(&mut state, dataset, cfg.batch_size, seed)?;
    let _ = writeln!(log, "clean test accuracy {clean_accuracy:.4}");
    Ok(PretrainOutcome {
        state,
        clean_accuracy,
        log,
    })
}

/// Source-only evaluation on the clean test split; the identical computation
/// `run_adapt_eval` performs for corruption=None, method=source-only.
pub fn clean_test_accuracy(
    state: &mut ModelState,
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let rep_seed = mix_seed(seed, 0);
    let stream = build_test_stream(dataset, None, batch_size, rep_seed)?;
    let cfg = AdaptConfig {
        batch_size,
        base_seed: mix_seed(rep_seed, TAG_ADAPT),
        prediction_seed: mix_seed(rep_seed, TAG_PREDICT),
        ..AdaptConfig::default()
    };
    let report = run_stream(state, &stream, &cfg, Method::SourceOnly)?;
    report
        .mean_accuracy
        .ok_or_else(|| Error::Config("clean test stream produced no batches".into()))
}

// ---------------------------------------------------------------------------
// Adaptation evaluation
// ---------------------------------------------------------------------------

/// Shuffle the test split into batches and corrupt each cloud; corruption is
/// applied after normalization and before the method's own sampling.
pub fn build_test_stream(
    dataset: &Dataset,
    corruption: Option<&CorruptionSpec>,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<PointCloud>>> {
    let batches = batch_iter(dataset, Split::Test, batch_size, mix_seed(seed, TAG_SHUFFLE))?;
    let corrupt_seed = mix_seed(seed, TAG_CORRUPT);
    let mut stream = Vec::with_capacity(batches.len());
    for batch in batches {
        let mut clouds = Vec::with_capacity(batch.indices.len());
        for &i in &batch.indices {
            let cloud = crate::geometry::normalize_cloud(&dataset.clouds[i]);
            let cloud = match corruption {
                Some(spec) => {
                    apply_corruption(&cloud, &spec.with_seed(mix_seed(corrupt_seed, i as u64)))?
                }
                None => cloud,
            };
            clouds.push(cloud);
        }
        stream.push(clouds);
    }
    Ok(stream)
}

/// Evaluate one configuration over `repeats` seeds, one row per seed.
pub fn run_adapt_eval(
    checkpoint: &ModelState,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<ResultRow>> {
    let corruption = cfg
        .corruption
        .as_deref()
        .filter(|s| *s != "none")
        .map(|s| CorruptionSpec::parse(s, 0))
        .transpose()?;
    let fingerprint = format!("{:016x}", cfg.fingerprint());
    let mut rows = Vec::with_capacity(cfg.repeats);
    for rep in 0..cfg.repeats.max(1) {
        let rep_seed = mix_seed(cfg.seed, rep as u64);
        let stream = build_test_stream(dataset, corruption.as_ref(), cfg.batch_size, rep_seed)?;
        let mut state = checkpoint.clone();
        let adapt_cfg = cfg.adapt_config(rep_seed);
        let start = Instant::now();
        let report = run_stream(&mut state, &stream, &adapt_cfg, cfg.method)?;
        let elapsed_ms = start.elapsed().as_millis() as u64;
        let n = report.records.len().max(1) as f64;
        rows.push(ResultRow {
            method: cfg.method.name().to_string(),
            corruption: corruption
                .as_ref()
                .map(|c| c.kind.name().to_string())
                .unwrap_or_else(|| "clean".to_string()),
            severity: corruption.as_ref().map(|c| c.severity).unwrap_or(0),
            seed: rep_seed,
            accuracy: report.mean_accuracy.unwrap_or(f64::NAN),
            mean_entropy_before: report.records.iter().map(|r| r.entropy_before).sum::<f64>() / n,
            mean_entropy_after: report.records.iter().map(|r| r.entropy_after).sum::<f64>() / n,
            adaptable_fraction: report.adaptable_fraction,
            overhead_fraction: report.overhead_fraction,
            v: cfg.v,
            mode: format!("{:?}", cfg.mode).to_lowercase(),
            variation_source: cfg.variation_source.name().to_string(),
            elapsed_ms,
            fingerprint: fingerprint.clone(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

pub const CSV_HEADER: &str = "method,corruption,severity,seed,accuracy,mean_entropy_before,mean_entropy_after,adaptable_fraction,overhead_fraction,v,mode,variation_source,elapsed_ms,fingerprint";

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::EmptyReport);
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.8},{:.8},{},{},{},{},{}",
            r.method,
            r.corruption,
            r.severity,
            r.seed,
            r.accuracy,
            r.mean_entropy_before,
            r.mean_entropy_after,
            r.adaptable_fraction,
            r.overhead_fraction,
            r.v,
            r.mode,
            r.variation_source,
            r.elapsed_ms,
            r.fingerprint
        );
    }
    Ok(out)
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyReport)?;
    if header != CSV_HEADER {
        return Err(Error::Format {
            offset: 0,
            msg: "unexpected CSV header".into(),
        });
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(Error::Format {
                offset: ln + 1,
                msg: format!("expected 14 fields, got {}", f.len()),
            });
        }
        let parse_err = |msg: &str| Error::Format {
            offset: ln + 1,
            msg: msg.to_string(),
        };
        rows.push(ResultRow {
            method: f[0].to_string(),
            corruption: f[1].to_string(),
            severity: f[2].parse().map_err(|_| parse_err("severity"))?,
            seed: f[3].parse().map_err(|_| parse_err("seed"))?,
            accuracy: f[4].parse().map_err(|_| parse_err("accuracy"))?,
            mean_entropy_before: f[5].parse().map_err(|_| parse_err("entropy"))?,
            mean_entropy_after: f[6].parse().map_err(|_| parse_err("entropy"))?,
            adaptable_fraction: f[7].parse().map_err(|_| parse_err("fraction"))?,
            overhead_fraction: f[8].parse().map_err(|_| parse_err("fraction"))?,
            v: f[9].parse().map_err(|_| parse_err("v"))?,
            mode: f[10].to_string(),
            variation_source: f[11].to_string(),
            elapsed_ms: f[12].parse().map_err(|_| parse_err("elapsed"))?,
            fingerprint: f[13].to_string(),
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyReport);
    }
    Ok(rows)
}

/// Summary table shaped methods × corruptions with a trailing Mean column;
/// cells are seed-mean accuracies.
pub fn summary_csv(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::EmptyReport);
    }
    let mut corruptions: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        let key = format!("{}:{}", r.corruption, r.severity);
        if !corruptions.contains(&key) {
            corruptions.push(key);
        }
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut out = String::from("method");
    for c in &corruptions {
        let _ = write!(out, ",{c}");
    }
    out.push_str(",mean\n");
    for m in &methods {
        let _ = write!(out, "{m}");
        let mut cell_means = Vec::new();
        for c in &corruptions {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| &r.method == m && format!("{}:{}", r.corruption, r.severity) == *c)
                .map(|r| r.accuracy)
                .collect();
            if vals.is_empty() {
                let _ = write!(out, ",");
            } else {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                cell_means.push(mean);
                let _ = write!(out, ",{mean:.6}");
            }
        }
        let mean = cell_means.iter().sum::<f64>() / cell_means.len().max(1) as f64;
        let _ = writeln!(out, ",{mean:.6}");
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Write rows plus a summary table. The long-format CSV is plot-ready.
pub fn emit_report(rows: &[ResultRow], format: ReportFormat, out_dir: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyReport);
    }
    std::fs::create_dir_all(out_dir)?;
    match format {
        ReportFormat::Csv => {
            std::fs::write(out_dir.join("rows.csv"), rows_to_csv(rows)?)?;
            std::fs::write(out_dir.join("summary.csv"), summary_csv(rows)?)?;
        }
        ReportFormat::Json => {
            let json = serde_json::to_string_pretty(rows).expect("rows serialize");
            std::fs::write(out_dir.join("rows.json"), json)?;
        }
    }
    Ok(())
}

/// Seed-aggregated accuracy per (method, corruption, severity) cell:
/// (label, mean, population std).
pub fn aggregate_rows(rows: &[ResultRow]) -> Vec<(String, f64, f64)> {
    let mut cells: Vec<(String, Vec<f64>)> = Vec::new();
    for r in rows {
        let key = format!("{} {}:{}", r.method, r.corruption, r.severity);
        match cells.iter_mut().find(|(k, _)| *k == key) {
            Some((_, vals)) => vals.push(r.accuracy),
            None => cells.push((key, vec![r.accuracy])),
        }
    }
    cells
        .into_iter()
        .map(|(key, vals)| {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (key, mean, var.sqrt())
        })
        .collect()
}

/// Seed-mean accuracy of the rows matching a method.
pub fn mean_accuracy(rows: &[ResultRow], method: &str) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method)
        .map(|r| r.accuracy)
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Mean per-batch entropy of the averaged model on a clean stream; exposed
/// for diagnostics.
pub fn mean_entropy_eval(state: &mut ModelState, stream: &[Vec<PointCloud>], prediction_seed: u64) -> Result<f64> {
    let m = state.config.fps_points;
    let mut total = 0.0;
    let mut n = 0;
    for (bi, batch) in stream.iter().enumerate() {
        if batch.len() < 2 {
            continue;
        }
        let pts = crate::adaptation::canonical_points(batch, m, prediction_seed, bi as u64)?;
        let (logits, _) = forward_logits(state, &pts, NormMode::EvalRunningStats, false)?;
        total += softmax_entropy(&logits)?.0;
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_dataset;

    fn row(method: &str, corruption: &str, severity: u8, seed: u64, acc: f64) -> ResultRow {
        ResultRow {
            method: method.to_string(),
            corruption: corruption.to_string(),
            severity,
            seed,
            accuracy: acc,
            mean_entropy_before: 1.0,
            mean_entropy_after: 0.5,
            adaptable_fraction: 0.01,
            overhead_fraction: 0.06,
            v: 6,
            mode: "parallel".to_string(),
            variation_source: "sampling".to_string(),
            elapsed_ms: 10,
            fingerprint: "00112233aabbccdd".to_string(),
        }
    }

    #[test]
    fn csv_roundtrip() {
        let rows = vec![
            row("tent", "gaussian", 3, 1, 0.75),
            row("svwa", "gaussian", 3, 1, 0.78),
        ];
        let csv = rows_to_csv(&rows).unwrap();
        let back = rows_from_csv(&csv).unwrap();
        assert_eq!(rows.len(), back.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.method, b.method);
            assert!((a.accuracy - b.accuracy).abs() < 1e-9);
            assert_eq!(a.fingerprint, b.fingerprint);
        }
    }

    #[test]
    fn empty_rows_is_an_error() {
        assert!(matches!(rows_to_csv(&[]), Err(Error::EmptyReport)));
        assert!(matches!(summary_csv(&[]), Err(Error::EmptyReport)));
    }

    #[test]
    fn summary_mean_column_is_mean_of_cells() {
        let rows = vec![
            row("tent", "gaussian", 3, 1, 0.70),
            row("tent", "gaussian", 3, 2, 0.80),
            row("tent", "uniform", 3, 1, 0.60),
        ];
        let csv = summary_csv(&rows).unwrap();
        let line = csv.lines().nth(1).unwrap();
        let cells: Vec<&str> = line.split(',').collect();
        // gaussian mean 0.75, uniform 0.60, Mean 0.675
        assert_eq!(cells[0], "tent");
        assert!((cells[1].parse::<f64>().unwrap() - 0.75).abs() < 1e-9);
        assert!((cells[2].parse::<f64>().unwrap() - 0.60).abs() < 1e-9);
        assert!((cells[3].parse::<f64>().unwrap() - 0.675).abs() < 1e-9);
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.v = 12;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn untrained_model_near_chance() {
        let dataset = make_dataset(3, 4, 64, 11).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            lr: 1e-3,
            batch_size: 8,
        };
        let model = PointNetLiteConfig {
            num_classes: 8,
            mlp_channels: vec![8, 16],
            head_dims: vec![8],
            fps_points: 16,
        };
        let outcome = run_pretrain(&dataset, model, &cfg, 5).unwrap();
        // 8 classes, chance 12.5%
        assert!(
            (outcome.clean_accuracy - 0.125).abs() < 0.15,
            "accuracy {}",
            outcome.clean_accuracy
        );
    }

    #[test]
    fn pretrain_same_seed_same_checkpoint() {
        let dataset = make_dataset(3, 2, 64, 12).unwrap();
        let cfg = PretrainConfig {
            epochs: 2,
            lr: 1e-3,
            batch_size: 8,
        };
        let model = PointNetLiteConfig {
            num_classes: 8,
            mlp_channels: vec![8, 16],
            head_dims: vec![8],
            fps_points: 16,
        };
        let a = run_pretrain(&dataset, model.clone(), &cfg, 9).unwrap();
        let b = run_pretrain(&dataset, model, &cfg, 9).unwrap();
        assert_eq!(
            crate::model::checkpoint_to_bytes(&a.state),
            crate::model::checkpoint_to_bytes(&b.state)
        );
    }

    #[test]
    fn source_only_clean_matches_pretrain_log() {
        let dataset = make_dataset(3, 3, 64, 13).unwrap();
        let cfg = PretrainConfig {
            epochs: 1,
            lr: 1e-3,
            batch_size: 8,
        };
        let model = PointNetLiteConfig {
            num_classes: 8,
            mlp_channels: vec![8, 16],
            head_dims: vec![8],
            fps_points: 16,
        };
        let outcome = run_pretrain(&dataset, model, &cfg, 17).unwrap();
        let exp = ExperimentConfig {
            method: Method::SourceOnly,
            corruption: None,
            batch_size: 8,
            seed: 17,
            repeats: 1,
            ..ExperimentConfig::default()
        };
        let rows = run_adapt_eval(&outcome.state, &dataset, &exp).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].accuracy, outcome.clean_accuracy);
    }
}
