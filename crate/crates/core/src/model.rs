//! PointNet-lite classifier: shared per-point MLP (linear → batch norm →
//! ReLU), max pooling over points, then a fully-connected head. The backward
//! pass yields gradients for every parameter; adaptation keeps only the
//! normalization affine subset.

use crate::error::{Error, Result};
use crate::numerics::layers::{
    batchnorm_backward, batchnorm_forward, cross_entropy, cross_entropy_backward, linear_backward,
    linear_forward, max_pool_points, max_pool_points_backward, relu_backward, relu_forward,
    softmax_entropy, softmax_entropy_backward, BatchNormCache, NormMode, RunningStats,
};
use crate::numerics::{GradSet, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVWA";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointNetLiteConfig {
    pub num_classes: usize,
    pub mlp_channels: Vec<usize>,
    pub head_dims: Vec<usize>,
    /// Number of FPS-selected points the model consumes per cloud.
    pub fps_points: usize,
}

impl PointNetLiteConfig {
    pub fn new(num_classes: usize) -> PointNetLiteConfig {
        PointNetLiteConfig {
            num_classes,
            mlp_channels: vec![64, 64, 128, 1024],
            head_dims: vec![512, 256],
            fps_points: 1024,
        }
    }

    /// Small configuration for desk-scale experiments.
    pub fn desk(num_classes: usize, fps_points: usize) -> PointNetLiteConfig {
        PointNetLiteConfig {
            num_classes,
            mlp_channels: vec![32, 64, 128],
            head_dims: vec![64],
            fps_points,
        }
    }

    /// Full-size reference parameterization used for overhead accounting:
    /// its normalization affine parameters are ≈0.3% of all parameters, so
    /// keeping V=6 copies of them costs ≈1.8% extra memory.
    pub fn reference_full() -> PointNetLiteConfig {
        PointNetLiteConfig {
            num_classes: 40,
            mlp_channels: vec![64, 64, 128, 1024],
            head_dims: vec![1152, 640],
            fps_points: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be ≥ 2".into()));
        }
        if self.mlp_channels.is_empty() || self.mlp_channels.iter().any(|&d| d == 0) {
            return Err(Error::Config("mlp_channels must be non-empty positive".into()));
        }
        if self.head_dims.iter().any(|&d| d == 0) || self.fps_points == 0 {
            return Err(Error::Config("dims must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in definition order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let mut d_in = 3;
        for (i, &ch) in self.mlp_channels.iter().enumerate() {
            layout.push((format!("mlp{i}.linear.weight"), vec![d_in, ch]));
            layout.push((format!("mlp{i}.linear.bias"), vec![ch]));
            layout.push((format!("mlp{i}.bn.gamma"), vec![ch]));
            layout.push((format!("mlp{i}.bn.beta"), vec![ch]));
            d_in = ch;
        }
        for (i, &dim) in self.head_dims.iter().enumerate() {
            layout.push((format!("head{i}.linear.weight"), vec![d_in, dim]));
            layout.push((format!("head{i}.linear.bias"), vec![dim]));
            layout.push((format!("head{i}.bn.gamma"), vec![dim]));
            layout.push((format!("head{i}.bn.beta"), vec![dim]));
            d_in = dim;
        }
        layout.push(("out.weight".to_string(), vec![d_in, self.num_classes]));
        layout.push(("out.bias".to_string(), vec![self.num_classes]));
        layout
    }

    /// Batch-norm layer names (running-stat keys) with channel counts, in order.
    pub fn bn_layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, &ch) in self.mlp_channels.iter().enumerate() {
            out.push((format!("mlp{i}.bn"), ch));
        }
        for (i, &dim) in self.head_dims.iter().enumerate() {
            out.push((format!("head{i}.bn"), dim));
        }
        out
    }
}

/// True for the normalization affine parameters γ and β.
pub fn is_norm_param(name: &str) -> bool {
    name.ends_with(".bn.gamma") || name.ends_with(".bn.beta")
}

/// Model parameters plus per-layer batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ParamSet,
    pub running_stats: Vec<(String, RunningStats)>,
    pub config: PointNetLiteConfig,
}

impl ModelState {
    /// Seeded random initialization: weights and biases U(−1/√fan_in, 1/√fan_in),
    /// γ=1, β=0.
    pub fn init(config: PointNetLiteConfig, seed: u64) -> Result<ModelState> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut fan_in = 3;
        for (name, shape) in config.param_layout() {
            let tensor = if name.ends_with(".bn.gamma") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".bn.beta") {
                Tensor::zeros(shape)
            } else {
                // weights set the layer's fan-in; the bias that follows reuses it
                if shape.len() == 2 {
                    fan_in = shape[0];
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, tensor);
        }
        let running_stats = config
            .bn_layout()
            .into_iter()
            .map(|(name, ch)| (name, RunningStats::new(ch)))
            .collect();
        Ok(ModelState {
            params,
            running_stats,
            config,
        })
    }

    fn running(&self, name: &str) -> &RunningStats {
        &self
            .running_stats
            .iter()
            .find(|(n, _)| n == name)
            .expect("running stats key")
            .1
    }

    fn running_mut(&mut self, name: &str) -> &mut RunningStats {
        &mut self
            .running_stats
            .iter_mut()
            .find(|(n, _)| n == name)
            .expect("running stats key")
            .1
    }

    /// Deep copy of the γ/β partition, in definition order.
    pub fn get_norm_params(&self) -> ParamSet {
        self.params
            .iter()
            .filter(|(n, _)| is_norm_param(n))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Overwrite exactly the γ/β partition.
    pub fn set_norm_params(&mut self, values: &ParamSet) -> Result<()> {
        let current = self.get_norm_params();
        current.check_aligned(values, "set_norm_params")?;
        for (name, t) in values.iter() {
            self.params.get_mut(name).unwrap().data.copy_from_slice(&t.data);
        }
        Ok(())
    }

    /// (#γ,β scalars) / (#all parameter scalars)
    pub fn adaptable_fraction(&self) -> f64 {
        adaptable_fraction(&self.config)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }
}

/// Scalar counts (total, adaptable) computed symbolically from the config.
pub fn param_counts(config: &PointNetLiteConfig) -> (usize, usize) {
    let mut total = 0;
    let mut adaptable = 0;
    for (name, shape) in config.param_layout() {
        let n: usize = shape.iter().product();
        total += n;
        if is_norm_param(&name) {
            adaptable += n;
        }
    }
    (total, adaptable)
}

pub fn adaptable_fraction(config: &PointNetLiteConfig) -> f64 {
    let (total, adaptable) = param_counts(config);
    adaptable as f64 / total as f64
}

struct StageCache {
    input: Tensor,
    bn_cache: BatchNormCache,
    bn_out: Tensor,
}

/// Activations recorded during a forward pass, consumed by `backward`.
pub struct ForwardTrace {
    batch: usize,
    points_per_cloud: usize,
    mlp: Vec<StageCache>,
    pool_argmax: Vec<usize>,
    head: Vec<StageCache>,
    out_input: Tensor,
    pub logits: Tensor,
}

/// (B*M)×C → B×C×M
fn to_bcn(x: &Tensor, b: usize, m: usize) -> Tensor {
    let c = x.dim(1);
    let mut out = Tensor::zeros(vec![b, c, m]);
    for bi in 0..b {
        for mi in 0..m {
            let src = (bi * m + mi) * c;
            for ci in 0..c {
                out.data[(bi * c + ci) * m + mi] = x.data[src + ci];
            }
        }
    }
    out
}

/// B×C×M → (B*M)×C
fn from_bcn(x: &Tensor) -> Tensor {
    let (b, c, m) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Tensor::zeros(vec![b * m, c]);
    for bi in 0..b {
        for ci in 0..c {
            for mi in 0..m {
                out.data[(bi * m + mi) * c + ci] = x.data[(bi * c + ci) * m + mi];
            }
        }
    }
    out
}

/// Forward pass. `batch_points` is B×M×3 with M = config.fps_points.
/// Running statistics are updated only when `update_running` is set (and the
/// mode uses batch statistics).
pub fn forward_logits(
    state: &mut ModelState,
    batch_points: &Tensor,
    mode: NormMode,
    update_running: bool,
) -> Result<(Tensor, ForwardTrace)> {
    if batch_points.rank() != 3 || batch_points.dim(2) != 3 {
        return Err(Error::Shape("forward expects B×M×3 input".into()));
    }
    let (b, m) = (batch_points.dim(0), batch_points.dim(1));
    if m != state.config.fps_points {
        return Err(Error::Shape(format!(
            "forward: {} points per cloud, config expects {}",
            m, state.config.fps_points
        )));
    }
    if mode == NormMode::TrainBatchStats && b < 2 {
        return Err(Error::DegenerateBatch(b));
    }
    batch_points.assert_finite("forward input")?;

    // row-major B×M×3 reads as (B*M)×3
    let mut x = Tensor::new(vec![b * m, 3], batch_points.data.clone())?;
    let mut mlp = Vec::new();
    let n_mlp = state.config.mlp_channels.len();
    for i in 0..n_mlp {
        let w = state.params.get(&format!("mlp{i}.linear.weight")).unwrap().clone();
        let bias = state.params.get(&format!("mlp{i}.linear.bias")).unwrap().clone();
        let gamma = state.params.get(&format!("mlp{i}.bn.gamma")).unwrap().clone();
        let beta = state.params.get(&format!("mlp{i}.bn.beta")).unwrap().clone();
        let lin = linear_forward(&x, &w, &bias)?;
        let bn_key = format!("mlp{i}.bn");
        let (bn_out, bn_cache) = if update_running {
            let rs = state.running_mut(&bn_key);
            batchnorm_forward(&lin, &gamma, &beta, mode, Some(rs), 1e-5)?
        } else {
            let mut rs = state.running(&bn_key).clone();
            let r = batchnorm_forward(&lin, &gamma, &beta, mode, Some(&mut rs), 1e-5)?;
            r
        };
        let act = relu_forward(&bn_out);
        mlp.push(StageCache {
            input: x,
            bn_cache,
            bn_out,
        });
        x = act;
    }

    let stacked = to_bcn(&x, b, m);
    let (pooled, pool_argmax) = max_pool_points(&stacked)?;
    let mut z = pooled;

    let mut head = Vec::new();
    for i in 0..state.config.head_dims.len() {
        let w = state.params.get(&format!("head{i}.linear.weight")).unwrap().clone();
        let bias = state.params.get(&format!("head{i}.linear.bias")).unwrap().clone();
        let gamma = state.params.get(&format!("head{i}.bn.gamma")).unwrap().clone();
        let beta = state.params.get(&format!("head{i}.bn.beta")).unwrap().clone();
        let lin = linear_forward(&z, &w, &bias)?;
        let bn_key = format!("head{i}.bn");
        let (bn_out, bn_cache) = if update_running {
            let rs = state.running_mut(&bn_key);
            batchnorm_forward(&lin, &gamma, &beta, mode, Some(rs), 1e-5)?
        } else {
            let mut rs = state.running(&bn_key).clone();
            batchnorm_forward(&lin, &gamma, &beta, mode, Some(&mut rs), 1e-5)?
        };
        let act = relu_forward(&bn_out);
        head.push(StageCache {
            input: z,
            bn_cache,
            bn_out,
        });
        z = act;
    }

    let w = state.params.get("out.weight").unwrap();
    let bias = state.params.get("out.bias").unwrap();
    let logits = linear_forward(&z, w, bias)?;

    Ok((
        logits.clone(),
        ForwardTrace {
            batch: b,
            points_per_cloud: m,
            mlp,
            pool_argmax,
            head,
            out_input: z,
            logits,
        },
    ))
}

/// Full backward pass from grad_logits down to every parameter.
pub fn backward(state: &ModelState, trace: &ForwardTrace, grad_logits: &Tensor) -> Result<GradSet> {
    let mut grads = state.params.zeros_like();
    let set = |grads: &mut GradSet, name: &str, t: Tensor| {
        grads.get_mut(name).unwrap().data.copy_from_slice(&t.data);
    };

    let w_out = state.params.get("out.weight").unwrap();
    let (mut g, gw, gb) = linear_backward(&trace.out_input, w_out, grad_logits)?;
    set(&mut grads, "out.weight", gw);
    set(&mut grads, "out.bias", gb);

    for (i, cache) in trace.head.iter().enumerate().rev() {
        g = relu_backward(&cache.bn_out, &g);
        let (g_bn, g_gamma, g_beta) = batchnorm_backward(&cache.bn_cache, &g)?;
        set(&mut grads, &format!("head{i}.bn.gamma"), g_gamma);
        set(&mut grads, &format!("head{i}.bn.beta"), g_beta);
        let w = state.params.get(&format!("head{i}.linear.weight")).unwrap();
        let (g_in, gw, gb) = linear_backward(&cache.input, w, &g_bn)?;
        set(&mut grads, &format!("head{i}.linear.weight"), gw);
        set(&mut grads, &format!("head{i}.linear.bias"), gb);
        g = g_in;
    }

    let last_c = *state.config.mlp_channels.last().unwrap();
    let g_stacked = max_pool_points_backward(&g, &trace.pool_argmax, trace.points_per_cloud)?;
    debug_assert_eq!(g_stacked.shape, vec![trace.batch, last_c, trace.points_per_cloud]);
    g = from_bcn(&g_stacked);

    for (i, cache) in trace.mlp.iter().enumerate().rev() {
        g = relu_backward(&cache.bn_out, &g);
        let (g_bn, g_gamma, g_beta) = batchnorm_backward(&cache.bn_cache, &g)?;
        set(&mut grads, &format!("mlp{i}.bn.gamma"), g_gamma);
        set(&mut grads, &format!("mlp{i}.bn.beta"), g_beta);
        let w = state.params.get(&format!("mlp{i}.linear.weight")).unwrap();
        let (g_in, gw, gb) = linear_backward(&cache.input, w, &g_bn)?;
        set(&mut grads, &format!("mlp{i}.linear.weight"), gw);
        set(&mut grads, &format!("mlp{i}.linear.bias"), gb);
        g = g_in;
    }

    Ok(grads)
}

/// Objective driving the backward pass.
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    Entropy,
    CrossEntropy(&'a [usize]),
}

/// Loss value, logits, and the full gradient set.
pub fn loss_grads(
    state: &mut ModelState,
    batch_points: &Tensor,
    loss: Loss,
    mode: NormMode,
    update_running: bool,
) -> Result<(f64, Tensor, GradSet)> {
    let (logits, trace) = forward_logits(state, batch_points, mode, update_running)?;
    let (value, grad_logits) = match loss {
        Loss::Entropy => {
            let (h, probs) = softmax_entropy(&logits)?;
            (h, softmax_entropy_backward(&probs))
        }
        Loss::CrossEntropy(labels) => {
            let (l, probs) = cross_entropy(&logits, labels)?;
            (l, cross_entropy_backward(&probs, labels))
        }
    };
    let grads = backward(state, &trace, &grad_logits)?;
    Ok((value, logits, grads))
}

/// Loss value and gradients restricted to the γ/β partition.
pub fn norm_grads(
    state: &mut ModelState,
    batch_points: &Tensor,
    loss: Loss,
    mode: NormMode,
) -> Result<(f64, GradSet)> {
    let (value, _, full) = loss_grads(state, batch_points, loss, mode, false)?;
    let norm_only: GradSet = full
        .iter()
        .filter(|(n, _)| is_norm_param(n))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    Ok((value, norm_only))
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

struct ByteReader<'a> {
    data: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.data.len() {
            return Err(Error::Format {
                offset: self.offset,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.dtype.tag());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in &t.shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t.dtype {
        crate::numerics::Dtype::F32 => {
            for &v in &t.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        crate::numerics::Dtype::F64 => {
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn read_tensor(r: &mut ByteReader, expect_name: &str) -> Result<Tensor> {
    let name_len = r.u16("name length")? as usize;
    let name_off = r.offset;
    let name_bytes = r.take(name_len, "name")?;
    let name = std::str::from_utf8(name_bytes).map_err(|_| Error::Format {
        offset: name_off,
        msg: "name is not UTF-8".into(),
    })?;
    if name != expect_name {
        return Err(Error::Format {
            offset: name_off,
            msg: format!("expected parameter {expect_name}, found {name}"),
        });
    }
    let dtype_off = r.offset;
    let dtype = crate::numerics::Dtype::from_tag(r.u8("dtype")?).ok_or_else(|| Error::Format {
        offset: dtype_off,
        msg: "unknown dtype tag".into(),
    })?;
    let rank = r.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("dim")? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        crate::numerics::Dtype::F32 => {
            for _ in 0..n {
                data.push(r.f32("values")? as f64);
            }
        }
        crate::numerics::Dtype::F64 => {
            for _ in 0..n {
                data.push(r.f64("values")?);
            }
        }
    }
    let mut t = Tensor::new(shape, data)?;
    t.dtype = dtype;
    Ok(t)
}

pub fn checkpoint_to_bytes(state: &ModelState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = &state.config;
    buf.extend_from_slice(&(cfg.num_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.fps_points as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.mlp_channels.len() as u32).to_le_bytes());
    for &d in &cfg.mlp_channels {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(cfg.head_dims.len() as u32).to_le_bytes());
    for &d in &cfg.head_dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for (name, t) in state.params.iter() {
        write_tensor(&mut buf, name, t);
    }
    for (name, rs) in &state.running_stats {
        write_tensor(&mut buf, &format!("{name}.running_mean"), &rs.mean);
        write_tensor(&mut buf, &format!("{name}.running_var"), &rs.var);
    }
    buf
}

pub fn checkpoint_from_bytes(data: &[u8]) -> Result<ModelState> {
    let mut r = ByteReader { data, offset: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, not a checkpoint file".into(),
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let num_classes = r.u32("num_classes")? as usize;
    let fps_points = r.u32("fps_points")? as usize;
    let n_mlp = r.u32("mlp count")? as usize;
    let mut mlp_channels = Vec::with_capacity(n_mlp);
    for _ in 0..n_mlp {
        mlp_channels.push(r.u32("mlp dim")? as usize);
    }
    let n_head = r.u32("head count")? as usize;
    let mut head_dims = Vec::with_capacity(n_head);
    for _ in 0..n_head {
        head_dims.push(r.u32("head dim")? as usize);
    }
    let config = PointNetLiteConfig {
        num_classes,
        mlp_channels,
        head_dims,
        fps_points,
    };
    config.validate()?;

    let mut params = ParamSet::new();
    for (name, shape) in config.param_layout() {
        let t = read_tensor(&mut r, &name)?;
        if t.shape != shape {
            return Err(Error::Format {
                offset: r.offset,
                msg: format!("parameter {name}: shape {:?}, expected {:?}", t.shape, shape),
            });
        }
        params.insert(name, t);
    }
    let mut running_stats = Vec::new();
    for (name, ch) in config.bn_layout() {
        let mean = read_tensor(&mut r, &format!("{name}.running_mean"))?;
        let var = read_tensor(&mut r, &format!("{name}.running_var"))?;
        if mean.len() != ch || var.len() != ch {
            return Err(Error::Format {
                offset: r.offset,
                msg: format!("running stats {name}: wrong channel count"),
            });
        }
        running_stats.push((
            name,
            RunningStats {
                mean,
                var,
                momentum: 0.1,
            },
        ));
    }
    if r.offset != data.len() {
        return Err(Error::Format {
            offset: r.offset,
            msg: "trailing bytes after checkpoint".into(),
        });
    }
    Ok(ModelState {
        params,
        running_stats,
        config,
    })
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(state);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}
