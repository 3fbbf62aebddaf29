//! Test-time adaptation: TENT entropy minimization on normalization affine
//! parameters, and its combination with sampling variation plus weight
//! averaging (parallel and sequential modes).

use crate::corruptions::{apply_augmentation, AugmentationKind, AugmentationSpec};
use crate::error::{Error, Result};
use crate::geometry::{cycle_pad, generate_variations, mix_seed, patchify, centers_tensor, PointCloud};
use crate::model::{forward_logits, norm_grads, ModelState, Loss};
use crate::numerics::layers::softmax_entropy;
use crate::numerics::{adamw_step, AdamWState, NormMode, ParamSet, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    Parallel,
    Sequential,
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<AdaptMode> {
        match s {
            "parallel" => Ok(AdaptMode::Parallel),
            "sequential" => Ok(AdaptMode::Sequential),
            _ => Err(Error::Config(format!("unknown mode '{s}'"))),
        }
    }
}

/// How the V per-branch views of a batch are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariationSource {
    Sampling,
    Jitter,
    Rotation,
    Flip,
    Scale,
    JitterSampling,
}

impl VariationSource {
    pub fn name(&self) -> &'static str {
        match self {
            VariationSource::Sampling => "sampling",
            VariationSource::Jitter => "jitter",
            VariationSource::Rotation => "rotation",
            VariationSource::Flip => "flip",
            VariationSource::Scale => "scale",
            VariationSource::JitterSampling => "jitter+sampling",
        }
    }
}

impl FromStr for VariationSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<VariationSource> {
        [
            VariationSource::Sampling,
            VariationSource::Jitter,
            VariationSource::Rotation,
            VariationSource::Flip,
            VariationSource::Scale,
            VariationSource::JitterSampling,
        ]
        .iter()
        .find(|v| v.name() == s)
        .copied()
        .ok_or_else(|| Error::Config(format!("unknown variation source '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Number of sampling variations (N^V).
    pub v: usize,
    pub iterations: usize,
    pub mode: AdaptMode,
    pub lr: f64,
    pub batch_size: usize,
    pub base_seed: u64,
    /// Canonical sampling used for the final prediction.
    pub prediction_seed: u64,
    pub variation_source: VariationSource,
    /// Reset branches to the pretrained γ/β at every batch instead of
    /// continuing from the current averaged parameters.
    pub reset_each_batch: bool,
}

impl Default for AdaptConfig {
    fn default() -> AdaptConfig {
        AdaptConfig {
            v: 6,
            iterations: 1,
            mode: AdaptMode::Parallel,
            lr: 1e-3,
            batch_size: 128,
            base_seed: 0,
            prediction_seed: 0x5157_4131,
            variation_source: VariationSource::Sampling,
            reset_each_batch: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.v == 0 || self.iterations == 0 || self.lr <= 0.0 {
            return Err(Error::Config("AdaptConfig: V ≥ 1, iterations ≥ 1, lr > 0".into()));
        }
        Ok(())
    }
}

/// One per-variation adaptation branch: its own copy of the γ/β partition
/// and its own persistent optimizer state.
#[derive(Debug, Clone)]
pub struct AdaptBranch {
    pub branch_index: usize,
    pub norm_params: ParamSet,
    pub optimizer: AdamWState,
}

pub fn make_branches(state: &ModelState, cfg: &AdaptConfig) -> Vec<AdaptBranch> {
    let norm = state.get_norm_params();
    (0..cfg.v)
        .map(|i| AdaptBranch {
            branch_index: i,
            norm_params: norm.clone(),
            optimizer: AdamWState::new(&norm, cfg.lr),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchRecord {
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub predictions: Vec<usize>,
    pub accuracy: Option<f64>,
    pub per_branch_entropy: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptReport {
    pub records: Vec<BatchRecord>,
    pub mean_accuracy: Option<f64>,
    pub adaptable_fraction: f64,
    pub overhead_fraction: f64,
}

impl AdaptReport {
    fn summarize(records: Vec<BatchRecord>, adaptable_fraction: f64, v: usize) -> AdaptReport {
        let accs: Vec<f64> = records.iter().filter_map(|r| r.accuracy).collect();
        let total: usize = records
            .iter()
            .filter(|r| r.accuracy.is_some())
            .map(|r| r.predictions.len())
            .sum();
        let mean_accuracy = if accs.is_empty() {
            None
        } else {
            // weighted by batch size
            let correct: f64 = records
                .iter()
                .filter_map(|r| r.accuracy.map(|a| a * r.predictions.len() as f64))
                .sum();
            Some(correct / total as f64)
        };
        AdaptReport {
            records,
            mean_accuracy,
            adaptable_fraction,
            overhead_fraction: v as f64 * adaptable_fraction,
        }
    }
}

pub struct TentOutcome {
    pub entropy_before: f64,
    pub entropy_after: f64,
}

/// TENT: minimize prediction entropy by updating only γ/β, using test-batch
/// statistics. Frozen weights are untouched.
pub fn tent_adapt(
    state: &mut ModelState,
    batch: &Tensor,
    opt: &mut AdamWState,
    iterations: usize,
) -> Result<TentOutcome> {
    if iterations == 0 {
        return Err(Error::Config("tent_adapt: iterations ≥ 1".into()));
    }
    let mut norm = state.get_norm_params();
    let mut entropy_before = f64::NAN;
    for it in 0..iterations {
        let (h, grads) = norm_grads(state, batch, Loss::Entropy, NormMode::TrainBatchStats)?;
        if it == 0 {
            entropy_before = h;
        }
        adamw_step(&mut norm, &grads, opt)?;
        state.set_norm_params(&norm)?;
    }
    let (logits, _) = forward_logits(state, batch, NormMode::TrainBatchStats, false)?;
    let (entropy_after, _) = softmax_entropy(&logits)?;
    Ok(TentOutcome {
        entropy_before,
        entropy_after,
    })
}

/// Elementwise arithmetic mean of structurally identical parameter sets.
pub fn weight_average(param_sets: &[ParamSet]) -> Result<ParamSet> {
    let first = param_sets
        .first()
        .ok_or_else(|| Error::Structure("weight_average: empty input".into()))?;
    for set in &param_sets[1..] {
        first.check_aligned(set, "weight_average")?;
    }
    let v = param_sets.len() as f64;
    let mut avg = first.zeros_like();
    for set in param_sets {
        for ((_, acc), (_, src)) in avg.iter_mut().zip(set.iter()) {
            for (a, s) in acc.data.iter_mut().zip(&src.data) {
                *a += s;
            }
        }
    }
    for (_, t) in avg.iter_mut() {
        for x in &mut t.data {
            *x /= v;
        }
    }
    Ok(avg)
}

/// Canonical sampling of a batch: per-cloud FPS keyed by
/// (prediction_seed, batch_index, cloud_index), K=1.
pub fn canonical_points(
    batch: &[PointCloud],
    m: usize,
    prediction_seed: u64,
    batch_index: u64,
) -> Result<Tensor> {
    sample_batch(batch, m, mix_seed(prediction_seed, batch_index))
}

fn sample_batch(batch: &[PointCloud], m: usize, seed: u64) -> Result<Tensor> {
    let patch_sets = batch
        .iter()
        .enumerate()
        .map(|(i, cloud)| {
            let padded = cycle_pad(cloud, m);
            patchify(&padded, m, 1, mix_seed(seed, i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(centers_tensor(&patch_sets))
}

/// Build the V per-branch input tensors for one batch.
pub fn variation_inputs(
    batch: &[PointCloud],
    cfg: &AdaptConfig,
    m: usize,
    batch_seed: u64,
) -> Result<Vec<Tensor>> {
    match cfg.variation_source {
        VariationSource::Sampling => {
            let padded: Vec<PointCloud> = batch.iter().map(|c| cycle_pad(c, m)).collect();
            let vs = generate_variations(&padded, cfg.v, m, 1, batch_seed)?;
            Ok(vs
                .variations
                .iter()
                .map(|v| centers_tensor(&v.patch_sets))
                .collect())
        }
        VariationSource::JitterSampling => {
            let mut out = Vec::with_capacity(cfg.v);
            for vi in 0..cfg.v {
                let seed = mix_seed(batch_seed, vi as u64);
                let jittered = apply_augmentation(
                    batch,
                    &AugmentationSpec {
                        kind: AugmentationKind::Jitter,
                        seed,
                    },
                );
                out.push(sample_batch(&jittered, m, seed)?);
            }
            Ok(out)
        }
        source => {
            let kind = match source {
                VariationSource::Jitter => AugmentationKind::Jitter,
                VariationSource::Rotation => AugmentationKind::RotationZ,
                VariationSource::Flip => AugmentationKind::HorizontalFlip,
                VariationSource::Scale => AugmentationKind::UniformScale,
                _ => unreachable!(),
            };
            let mut out = Vec::with_capacity(cfg.v);
            for vi in 0..cfg.v {
                let seed = mix_seed(batch_seed, vi as u64);
                let augmented = apply_augmentation(batch, &AugmentationSpec { kind, seed });
                // augmentation sources share one canonical sampling; only the
                // transform differs per branch
                out.push(sample_batch(&augmented, m, cfg.prediction_seed)?);
            }
            Ok(out)
        }
    }
}

/// Adapt each branch on its own variation, average the adapted γ/β, install
/// the average, and predict on the canonical sampling.
pub fn svwa_adapt(
    state: &mut ModelState,
    batch: &[PointCloud],
    cfg: &AdaptConfig,
    branches: &mut [AdaptBranch],
    batch_index: u64,
) -> Result<(Vec<usize>, BatchRecord)> {
    cfg.validate()?;
    if branches.len() != cfg.v {
        return Err(Error::Structure(format!(
            "expected {} branches, got {}",
            cfg.v,
            branches.len()
        )));
    }
    let m = state.config.fps_points;
    let batch_seed = mix_seed(cfg.base_seed, batch_index);
    let inputs = variation_inputs(batch, cfg, m, batch_seed)?;
    let start_norm = state.get_norm_params();

    let mut per_branch_entropy = Vec::with_capacity(cfg.v);
    match cfg.mode {
        AdaptMode::Parallel => {
            // every branch restarts from the model's current γ/β and adapts
            // independently; frozen weights are shared read-only
            let results: Vec<Result<(ParamSet, AdamWState, f64)>> = branches
                .par_iter()
                .zip(inputs.par_iter())
                .map(|(branch, input)| {
                    let mut local = state.clone();
                    local.set_norm_params(&start_norm)?;
                    let mut opt = branch.optimizer.clone();
                    let outcome = tent_adapt(&mut local, input, &mut opt, cfg.iterations)?;
                    Ok((local.get_norm_params(), opt, outcome.entropy_before))
                })
                .collect();
            for (branch, result) in branches.iter_mut().zip(results) {
                let (params, opt, h) = result?;
                branch.norm_params = params;
                branch.optimizer = opt;
                per_branch_entropy.push(h);
            }
        }
        AdaptMode::Sequential => {
            // one shared optimizer threaded through the chain; each branch
            // starts from the previous branch's adapted parameters
            let mut local = state.clone();
            local.set_norm_params(&start_norm)?;
            let mut opt = branches[0].optimizer.clone();
            for (branch, input) in branches.iter_mut().zip(&inputs) {
                let outcome = tent_adapt(&mut local, input, &mut opt, cfg.iterations)?;
                branch.norm_params = local.get_norm_params();
                per_branch_entropy.push(outcome.entropy_before);
            }
            branches[0].optimizer = opt;
        }
    }

    let adapted: Vec<ParamSet> = branches.iter().map(|b| b.norm_params.clone()).collect();
    let avg = weight_average(&adapted)?;
    state.set_norm_params(&avg)?;

    let canonical = canonical_points(batch, m, cfg.prediction_seed, batch_index)?;
    let (logits, _) = forward_logits(state, &canonical, NormMode::TrainBatchStats, false)?;
    let (entropy_after, probs) = softmax_entropy(&logits)?;
    let predictions = argmax_rows(&probs);
    let accuracy = batch_accuracy(batch, &predictions);
    let entropy_before = per_branch_entropy.iter().sum::<f64>() / per_branch_entropy.len() as f64;
    let record = BatchRecord {
        entropy_before,
        entropy_after,
        predictions: predictions.clone(),
        accuracy,
        per_branch_entropy,
    };
    Ok((predictions, record))
}

pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let c = probs.dim(1);
    probs
        .data
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0
        })
        .collect()
}

fn batch_accuracy(batch: &[PointCloud], predictions: &[usize]) -> Option<f64> {
    let labeled: Vec<(usize, usize)> = batch
        .iter()
        .zip(predictions)
        .filter_map(|(c, &p)| c.label.map(|l| (l, p)))
        .collect();
    if labeled.len() != batch.len() || labeled.is_empty() {
        return None;
    }
    let correct = labeled.iter().filter(|(l, p)| l == p).count();
    Some(correct as f64 / labeled.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SourceOnly,
    Tent,
    Svwa,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::SourceOnly => "source-only",
            Method::Tent => "tent",
            Method::Svwa => "svwa",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s {
            "source-only" => Ok(Method::SourceOnly),
            "tent" => Ok(Method::Tent),
            "svwa" => Ok(Method::Svwa),
            _ => Err(Error::Config(format!("unknown method '{s}'"))),
        }
    }
}

/// Online evaluation over a stream of batches. TENT and SVWA adapt
/// continually, carrying state across batches; source-only never updates.
/// Batches smaller than 2 are skipped.
pub fn run_stream(
    state: &mut ModelState,
    stream: &[Vec<PointCloud>],
    cfg: &AdaptConfig,
    method: Method,
) -> Result<AdaptReport> {
    cfg.validate()?;
    let fraction = state.adaptable_fraction();
    let m = state.config.fps_points;
    let pretrained_norm = state.get_norm_params();
    let mut records = Vec::new();
    let mut branches = make_branches(state, cfg);
    let mut tent_opt = AdamWState::new(&pretrained_norm, cfg.lr);

    for (bi, batch) in stream.iter().enumerate() {
        if batch.len() < 2 {
            eprintln!("warning: skipping batch {bi} with {} sample(s)", batch.len());
            continue;
        }
        let batch_index = bi as u64;
        match method {
            Method::SourceOnly => {
                let canonical = canonical_points(batch, m, cfg.prediction_seed, batch_index)?;
                let (logits, _) =
                    forward_logits(state, &canonical, NormMode::EvalRunningStats, false)?;
                let (h, probs) = softmax_entropy(&logits)?;
                let predictions = argmax_rows(&probs);
                let accuracy = batch_accuracy(batch, &predictions);
                records.push(BatchRecord {
                    entropy_before: h,
                    entropy_after: h,
                    predictions,
                    accuracy,
                    per_branch_entropy: vec![],
                });
            }
            Method::Tent => {
                if cfg.reset_each_batch {
                    state.set_norm_params(&pretrained_norm)?;
                    tent_opt = AdamWState::new(&pretrained_norm, cfg.lr);
                }
                let canonical = canonical_points(batch, m, cfg.prediction_seed, batch_index)?;
                let outcome = tent_adapt(state, &canonical, &mut tent_opt, cfg.iterations)?;
                let (logits, _) =
                    forward_logits(state, &canonical, NormMode::TrainBatchStats, false)?;
                let (_, probs) = softmax_entropy(&logits)?;
                let predictions = argmax_rows(&probs);
                let accuracy = batch_accuracy(batch, &predictions);
                records.push(BatchRecord {
                    entropy_before: outcome.entropy_before,
                    entropy_after: outcome.entropy_after,
                    predictions,
                    accuracy,
                    per_branch_entropy: vec![],
                });
            }
            Method::Svwa => {
                if cfg.reset_each_batch {
                    state.set_norm_params(&pretrained_norm)?;
                    branches = make_branches(state, cfg);
                }
                let (_, record) = svwa_adapt(state, batch, cfg, &mut branches, batch_index)?;
                records.push(record);
            }
        }
    }
    let v = if method == Method::Svwa { cfg.v } else { 1 };
    Ok(AdaptReport::summarize(records, fraction, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PointNetLiteConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_state(seed: u64) -> ModelState {
        let config = PointNetLiteConfig {
            num_classes: 3,
            mlp_channels: vec![8, 16],
            head_dims: vec![8],
            fps_points: 8,
        };
        ModelState::init(config, seed).unwrap()
    }

    fn random_batch_tensor(b: usize, m: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * m * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![b, m, 3], data).unwrap()
    }

    fn random_clouds(b: usize, n: usize, seed: u64) -> Vec<PointCloud> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b)
            .map(|_| {
                let pts = (0..n)
                    .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                    .collect();
                PointCloud::with_label(pts, 0)
            })
            .collect()
    }

    #[test]
    fn tent_descends_for_tiny_lr() {
        for seed in 0..10 {
            let mut state = tiny_state(seed);
            let batch = random_batch_tensor(4, 8, 100 + seed);
            let mut opt = AdamWState::new(&state.get_norm_params(), 1e-6);
            let outcome = tent_adapt(&mut state, &batch, &mut opt, 1).unwrap();
            assert!(
                outcome.entropy_after <= outcome.entropy_before + 1e-12,
                "seed {seed}: {} -> {}",
                outcome.entropy_before,
                outcome.entropy_after
            );
        }
    }

    #[test]
    fn tent_zero_gradient_fixed_point() {
        let mut state = tiny_state(0);
        // zeroed final layer ⇒ exactly uniform logits ⇒ zero entropy gradient
        for name in ["out.weight", "out.bias"] {
            for x in &mut state.params.get_mut(name).unwrap().data {
                *x = 0.0;
            }
        }
        let before = state.get_norm_params();
        let batch = random_batch_tensor(4, 8, 7);
        let mut opt = AdamWState::new(&before, 1e-3);
        let outcome = tent_adapt(&mut state, &batch, &mut opt, 1).unwrap();
        assert_eq!(state.get_norm_params(), before);
        assert!((outcome.entropy_before - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn tent_iterations_compose() {
        let batch = random_batch_tensor(4, 8, 9);
        let mut s1 = tiny_state(1);
        let mut o1 = AdamWState::new(&s1.get_norm_params(), 1e-3);
        tent_adapt(&mut s1, &batch, &mut o1, 3).unwrap();

        let mut s2 = tiny_state(1);
        let mut o2 = AdamWState::new(&s2.get_norm_params(), 1e-3);
        for _ in 0..3 {
            tent_adapt(&mut s2, &batch, &mut o2, 1).unwrap();
        }
        assert_eq!(s1.get_norm_params(), s2.get_norm_params());
        assert_eq!(o1, o2);
    }

    #[test]
    fn weight_average_identities() {
        let state = tiny_state(2);
        let base = state.get_norm_params();
        // idempotence
        let avg = weight_average(&[base.clone(), base.clone(), base.clone()]).unwrap();
        assert_eq!(avg, base);
        // mean of pair
        let mut plus = base.clone();
        let mut minus = base.clone();
        for ((_, p), (_, m)) in plus.iter_mut().zip(minus.iter_mut()) {
            for (a, b) in p.data.iter_mut().zip(m.data.iter_mut()) {
                *a += 0.25;
                *b -= 0.25;
            }
        }
        let avg = weight_average(&[plus.clone(), minus.clone()]).unwrap();
        for ((_, a), (_, b)) in avg.iter().zip(base.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        // permutation invariance
        let fwd = weight_average(&[plus.clone(), minus.clone()]).unwrap();
        let rev = weight_average(&[minus, plus]).unwrap();
        assert_eq!(fwd, rev);
        // simple arithmetic
        let mut a = ParamSet::new();
        a.insert("w", Tensor::scalar(1.0));
        let mut b = ParamSet::new();
        b.insert("w", Tensor::scalar(3.0));
        assert_eq!(weight_average(&[a, b]).unwrap().get("w").unwrap().data[0], 2.0);
    }

    #[test]
    fn weight_average_rejects_mismatch() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::scalar(1.0));
        let mut b = ParamSet::new();
        b.insert("x", Tensor::scalar(1.0));
        assert!(weight_average(&[a, b]).is_err());
    }

    #[test]
    fn svwa_v1_equals_tent_on_that_variation() {
        let batch = random_clouds(4, 16, 3);
        let cfg = AdaptConfig {
            v: 1,
            batch_size: 4,
            ..AdaptConfig::default()
        };
        for mode in [AdaptMode::Parallel, AdaptMode::Sequential] {
            let cfg = AdaptConfig { mode, ..cfg.clone() };
            let mut state = tiny_state(4);
            let mut branches = make_branches(&state, &cfg);
            svwa_adapt(&mut state, &batch, &cfg, &mut branches, 0).unwrap();

            let mut reference = tiny_state(4);
            let m = reference.config.fps_points;
            let input = variation_inputs(&batch, &cfg, m, mix_seed(cfg.base_seed, 0))
                .unwrap()
                .remove(0);
            let mut opt = AdamWState::new(&reference.get_norm_params(), cfg.lr);
            tent_adapt(&mut reference, &input, &mut opt, cfg.iterations).unwrap();
            assert_eq!(state.get_norm_params(), reference.get_norm_params());
        }
    }

    #[test]
    fn svwa_frozen_weights_untouched() {
        let batch = random_clouds(4, 16, 5);
        let cfg = AdaptConfig {
            v: 3,
            batch_size: 4,
            ..AdaptConfig::default()
        };
        let mut state = tiny_state(6);
        let frozen_before: Vec<(String, Tensor)> = state
            .params
            .iter()
            .filter(|(n, _)| !crate::model::is_norm_param(n))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let mut branches = make_branches(&state, &cfg);
        svwa_adapt(&mut state, &batch, &cfg, &mut branches, 0).unwrap();
        for (name, before) in frozen_before {
            assert_eq!(state.params.get(&name).unwrap(), &before, "{name}");
        }
    }

    #[test]
    fn run_stream_deterministic() {
        let stream: Vec<Vec<PointCloud>> = (0..3).map(|i| random_clouds(4, 16, 50 + i)).collect();
        let cfg = AdaptConfig {
            v: 3,
            batch_size: 4,
            ..AdaptConfig::default()
        };
        for method in [Method::SourceOnly, Method::Tent, Method::Svwa] {
            let mut s1 = tiny_state(7);
            let r1 = run_stream(&mut s1, &stream, &cfg, method).unwrap();
            let mut s2 = tiny_state(7);
            let r2 = run_stream(&mut s2, &stream, &cfg, method).unwrap();
            assert_eq!(
                serde_json::to_string(&r1).unwrap(),
                serde_json::to_string(&r2).unwrap()
            );
            assert_eq!(s1.params, s2.params);
        }
    }

    #[test]
    fn source_only_leaves_state_unchanged() {
        let stream = vec![random_clouds(4, 16, 80)];
        let cfg = AdaptConfig {
            v: 2,
            batch_size: 4,
            ..AdaptConfig::default()
        };
        let mut state = tiny_state(8);
        let before = crate::model::checkpoint_to_bytes(&state);
        run_stream(&mut state, &stream, &cfg, Method::SourceOnly).unwrap();
        assert_eq!(crate::model::checkpoint_to_bytes(&state), before);
    }

    #[test]
    fn empty_stream_empty_report() {
        let mut state = tiny_state(9);
        let report = run_stream(&mut state, &[], &AdaptConfig::default(), Method::Svwa).unwrap();
        assert!(report.records.is_empty());
        assert!(report.mean_accuracy.is_none());
    }

    #[test]
    fn entropy_bounds_hold() {
        let stream: Vec<Vec<PointCloud>> = (0..2).map(|i| random_clouds(4, 16, 90 + i)).collect();
        let cfg = AdaptConfig {
            v: 2,
            batch_size: 4,
            ..AdaptConfig::default()
        };
        let mut state = tiny_state(10);
        let report = run_stream(&mut state, &stream, &cfg, Method::Svwa).unwrap();
        let ln_c = (state.config.num_classes as f64).ln();
        for r in &report.records {
            assert!(r.entropy_before >= 0.0 && r.entropy_before <= ln_c + 1e-12);
            assert!(r.entropy_after >= 0.0 && r.entropy_after <= ln_c + 1e-12);
        }
        assert!((report.overhead_fraction - 2.0 * report.adaptable_fraction).abs() < 1e-18);
    }
}
