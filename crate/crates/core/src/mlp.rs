//! Two-hidden-layer perceptron used by each of the six resampling tasks.
//!
//! Hidden layers are rectified, the output is logistic, and training
//! minimizes mean binary cross-entropy plus an L2 penalty on weights with
//! seeded mini-batch gradient descent.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::features::FEATURE_LEN;

/// The six binary resampling / compression tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(rename = "jpeg_below_85")]
    JpegBelow85,
    Upsample,
    Downsample,
    RotateCw,
    RotateCcw,
    Shear,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::JpegBelow85,
        TaskKind::Upsample,
        TaskKind::Downsample,
        TaskKind::RotateCw,
        TaskKind::RotateCcw,
        TaskKind::Shear,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::JpegBelow85 => "jpeg_below_85",
            TaskKind::Upsample => "upsample",
            TaskKind::Downsample => "downsample",
            TaskKind::RotateCw => "rotate_cw",
            TaskKind::RotateCcw => "rotate_ccw",
            TaskKind::Shear => "shear",
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_LAYERS: [usize; 4] = [FEATURE_LEN, 128, 32, 1];

/// Dense layer; `weights[i * outputs + o]` connects input `i` to output `o`.
#[derive(Clone, Debug, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    /// `out = b + W^T x`, accumulated input by input so the inner loop is a
    /// contiguous axpy.
    fn affine(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.biases);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.outputs..(i + 1) * self.outputs];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

/// Feed-forward network with rectified hidden layers and a logistic output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    task: Option<TaskKind>,
    layers: Vec<Layer>,
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// One labelled training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: u8,
}

/// Flat gradient with the same layout as [`Mlp::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Mlp {
    /// All parameters zero.
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0));
        assert_eq!(*sizes.last().unwrap(), 1, "output layer must have one unit");
        Self {
            task: None,
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn glorot(sizes: &[usize], seed: u64) -> Self {
        let mut model = Self::zeros(sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        model
    }

    pub fn with_task(mut self, task: TaskKind) -> Self {
        self.task = Some(task);
        self
    }

    pub fn task(&self) -> Option<TaskKind> {
        self.task
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].inputs];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    /// Logistic pre-activation of the output unit.
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_len() {
            return Err(Error::Shape {
                expected: self.input_len(),
                actual: x.len(),
            });
        }
        let mut current = x.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.outputs];
            layer.affine(&current, &mut next);
            if li != last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            current = next;
        }
        Ok(current[0])
    }

    /// Probability that `x` carries the task's manipulation.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.logit(x).map(logistic)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flat parameters: per layer, weights (input-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return &mut l.biases[index];
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    /// Whether flat index `i` is a weight (penalized) rather than a bias.
    #[cfg(test)]
    fn is_weight(&self, mut index: usize) -> bool {
        for l in &self.layers {
            if index < l.weights.len() {
                return true;
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return false;
            }
            index -= l.biases.len();
        }
        false
    }

    fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter())
            .map(|w| w * w)
            .sum()
    }

    /// On/off state of every hidden unit for every sample in `batch`.
    fn relu_states(&self, batch: &[Sample]) -> Vec<bool> {
        let mut states = Vec::new();
        let hidden = &self.layers[..self.layers.len() - 1];
        for s in batch {
            let mut current = s.x.to_vec();
            for layer in hidden {
                let mut next = vec![0.0; layer.outputs];
                layer.affine(&current, &mut next);
                states.extend(next.iter().map(|&v| v > 0.0));
                next.iter_mut().for_each(|v| *v = v.max(0.0));
                current = next;
            }
        }
        states
    }

    /// Mean cross-entropy over `batch` plus `0.5 * l2 * ||W||^2`.
    pub fn loss(&self, batch: &[Sample], l2: f64) -> Result<f64> {
        let mut total = 0.0;
        for s in batch {
            let z = self.logit(&s.x)?;
            total += softplus(z) - s.y as f64 * z;
        }
        Ok(total / batch.len() as f64 + 0.5 * l2 * self.weight_norm_sq())
    }

    /// Analytic gradient of [`Mlp::loss`].
    pub fn gradients(&self, batch: &[Sample], l2: f64) -> Result<Gradients> {
        let mut grad = vec![0.0; self.param_count()];
        let mut scratch = Scratch::new(self);
        for s in batch {
            self.accumulate(s, &mut grad, &mut scratch)?;
        }
        let inv = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        if l2 > 0.0 {
            let mut offset = 0;
            for l in &self.layers {
                for (g, w) in grad[offset..offset + l.weights.len()].iter_mut().zip(&l.weights) {
                    *g += l2 * w;
                }
                offset += l.param_count();
            }
        }
        Ok(Gradients(grad))
    }

    /// Backpropagates one sample's cross-entropy into `grad` (summed, not averaged).
    fn accumulate(&self, s: &Sample, grad: &mut [f64], scratch: &mut Scratch) -> Result<()> {
        if s.x.len() != self.input_len() {
            return Err(Error::Shape {
                expected: self.input_len(),
                actual: s.x.len(),
            });
        }
        let n = self.layers.len();
        scratch.acts[0].copy_from_slice(&s.x);
        for (li, layer) in self.layers.iter().enumerate() {
            let (before, after) = scratch.acts.split_at_mut(li + 1);
            let out = &mut after[0];
            layer.affine(&before[li], out);
            if li + 1 != n {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let z = scratch.acts[n][0];
        scratch.deltas[n - 1][0] = logistic(z) - s.y as f64;

        let mut offsets = Vec::with_capacity(n);
        let mut acc = 0;
        for l in &self.layers {
            offsets.push(acc);
            acc += l.param_count();
        }
        for li in (0..n).rev() {
            let layer = &self.layers[li];
            let base = offsets[li];
            let (dw, db) = grad[base..base + layer.param_count()].split_at_mut(layer.weights.len());
            let delta = &scratch.deltas[li];
            for (g, d) in db.iter_mut().zip(delta) {
                *g += d;
            }
            let input = &scratch.acts[li];
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (g, d) in dw[i * layer.outputs..(i + 1) * layer.outputs].iter_mut().zip(delta) {
                    *g += xi * d;
                }
            }
            if li > 0 {
                let (lower, upper) = scratch.deltas.split_at_mut(li);
                let prev = &mut lower[li - 1];
                let delta = &upper[0];
                for (i, p) in prev.iter_mut().enumerate() {
                    if input[i] <= 0.0 {
                        *p = 0.0;
                        continue;
                    }
                    let row = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
                    *p = row.iter().zip(delta).map(|(w, d)| w * d).sum();
                }
            }
        }
        Ok(())
    }

    fn apply_step(&mut self, grad: &[f64], lr: f64) {
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            for (w, g) in l.weights.iter_mut().zip(&grad[offset..offset + nw]) {
                *w -= lr * g;
            }
            let nb = l.biases.len();
            for (b, g) in l.biases.iter_mut().zip(&grad[offset + nw..offset + nw + nb]) {
                *b -= lr * g;
            }
            offset += nw + nb;
        }
    }
}

struct Scratch {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(model: &Mlp) -> Self {
        let sizes = model.layer_sizes();
        Self {
            acts: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            deltas: sizes[1..].iter().map(|&s| vec![0.0; s]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub l2: f64,
    /// Heavy-ball momentum; 0 gives plain mini-batch gradient descent.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 30,
            seed: 42,
            l2: 1e-4,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate, batch size and epochs must be positive: {self:?}"
            )));
        }
        if !(self.l2 >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "l2 must be >= 0 and momentum in [0, 1): {self:?}"
            )));
        }
        Ok(())
    }
}

/// Trains a fresh network with the default layer sizes for `data`'s width.
pub fn train(data: &[Sample], cfg: &TrainConfig) -> Result<Mlp> {
    train_with_history(data, cfg, None).map(|(m, _)| m)
}

/// Like [`train`], returning the full-data loss after each epoch.
///
/// `sizes` overrides the hidden layout (input width must match the data).
pub fn train_with_history(
    data: &[Sample],
    cfg: &TrainConfig,
    sizes: Option<&[usize]>,
) -> Result<(Mlp, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    if let Some(bad) = data.iter().find(|s| s.y > 1) {
        return Err(Error::InvalidArgument(format!("label {} not in {{0, 1}}", bad.y)));
    }
    let positives = data.iter().filter(|s| s.y == 1).count();
    if positives == 0 || positives == data.len() {
        return Err(Error::SingleClass);
    }
    let width = data[0].x.len();
    let default_sizes = [width, DEFAULT_LAYERS[1], DEFAULT_LAYERS[2], 1];
    let sizes = sizes.unwrap_or(&default_sizes);
    if sizes[0] != width {
        return Err(Error::Shape {
            expected: sizes[0],
            actual: width,
        });
    }
    let mut model = Mlp::glorot(sizes, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; model.param_count()];
    let mut velocity = vec![0.0; model.param_count()];
    let mut scratch = Scratch::new(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                model.accumulate(&data[i], &mut grad, &mut scratch)?;
            }
            let inv = 1.0 / batch.len() as f64;
            let mut offset = 0;
            for l in &model.layers {
                let nw = l.weights.len();
                for (g, w) in grad[offset..offset + nw].iter_mut().zip(&l.weights) {
                    *g = *g * inv + cfg.l2 * w;
                }
                for g in &mut grad[offset + nw..offset + l.param_count()] {
                    *g *= inv;
                }
                offset += l.param_count();
            }
            for (v, g) in velocity.iter_mut().zip(&grad) {
                *v = cfg.momentum * *v + g;
            }
            model.apply_step(&velocity, cfg.learning_rate);
        }
        history.push(model.loss(data, cfg.l2)?);
    }
    Ok((model, history))
}

/// Fraction of samples classified correctly at probability 0.5.
pub fn accuracy(model: &Mlp, data: &[Sample]) -> Result<f64> {
    let mut correct = 0usize;
    for s in data {
        let p = model.forward(&s.x)?;
        if (p >= 0.5) == (s.y == 1) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Finite-difference step for [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;
/// Parameters probed per check.
pub const FD_PROBES: usize = 128;

/// Max relative disagreement between the analytic gradient and central
/// differences over a seeded random subset of parameters. Probes whose
/// perturbation switches a hidden unit on or off are redrawn.
pub fn gradient_check(model: &Mlp, batch: &[Sample], l2: f64, seed: u64) -> Result<f64> {
    let grads = model.gradients(batch, l2)?;
    gradient_check_against(model, batch, l2, &grads, seed)
}

/// Checks a supplied gradient (e.g. a deliberately corrupted one) against
/// central differences.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-4)`; the floor keeps
/// near-zero entries from turning rounding noise into large ratios.
pub fn gradient_check_against(
    model: &Mlp,
    batch: &[Sample],
    l2: f64,
    analytic: &Gradients,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("gradient check needs a batch".into()));
    }
    if analytic.0.len() != model.param_count() {
        return Err(Error::Shape {
            expected: model.param_count(),
            actual: analytic.0.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = model.param_count();
    let mut probes: Vec<usize> = if count <= FD_PROBES {
        (0..count).collect()
    } else {
        (0..FD_PROBES).map(|_| rng.random_range(0..count)).collect()
    };
    // make sure biases and every layer get probed
    probes.push(count - 1);
    let base = model.relu_states(batch);
    let mut probe_model = model.clone();
    let mut worst = 0.0f64;
    let (mut checked, mut kinks) = (0usize, 0usize);
    let mut k = 0;
    while k < probes.len() {
        let i = probes[k];
        k += 1;
        let orig = *probe_model.param_mut(i);
        *probe_model.param_mut(i) = orig + FD_STEP;
        let up = probe_model.loss(batch, l2)?;
        let crossed_up = probe_model.relu_states(batch) != base;
        *probe_model.param_mut(i) = orig - FD_STEP;
        let down = probe_model.loss(batch, l2)?;
        let crossed_down = probe_model.relu_states(batch) != base;
        *probe_model.param_mut(i) = orig;
        if crossed_up || crossed_down {
            // the difference straddles a ReLU kink, where the loss has no derivative
            kinks += 1;
            if count > FD_PROBES && kinks <= FD_PROBES {
                probes.push(rng.random_range(0..count));
            }
            continue;
        }
        checked += 1;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.0[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    if checked == 0 {
        return Err(Error::InsufficientData("every probe straddles a ReLU kink".into()));
    }
    Ok(worst)
}

const MAGIC: &[u8; 5] = b"FSMLP";
pub const FORMAT_VERSION: u8 = b'1';
const NO_TASK: u8 = 0xFF;

/// Serialized layout: `FSMLP`, version byte `'1'`, task byte (0xFF for none),
/// u32 layer-size count, u32 sizes, then per layer the f64 weights
/// (input-major) and biases, all little-endian.
pub fn encode_model(model: &Mlp) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(model.task.map_or(NO_TASK, |t| t.index() as u8));
    let sizes = model.layer_sizes();
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for s in sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Mlp> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::TruncatedModel);
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(MAGIC.len())? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = take(1)?[0];
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let task = match take(1)?[0] {
        NO_TASK => None,
        b => Some(TaskKind::from_index(b as usize).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown task byte {b}"))
        })?),
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let n_sizes = u32_at(take(4)?);
    if !(2..=16).contains(&n_sizes) {
        return Err(Error::InvalidArgument(format!("implausible layer count {n_sizes}")));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(u32_at(take(4)?));
    }
    if sizes.iter().any(|&s| s == 0 || s > 1 << 20) || *sizes.last().expect("non-empty") != 1 {
        return Err(Error::InvalidArgument(format!("invalid layer sizes {sizes:?}")));
    }
    let mut model = Mlp::zeros(&sizes);
    model.task = task;
    for i in 0..model.param_count() {
        let v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        *model.param_mut(i) = v;
    }
    if !cur.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} trailing bytes after model parameters",
            cur.len()
        )));
    }
    Ok(model)
}

pub fn save_model(model: &Mlp, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).with_path(path)?;
    f.write_all(&encode_model(model)).with_path(path)
}

pub fn load_model(path: &Path) -> Result<Mlp> {
    let bytes = std::fs::read(path).with_path(path)?;
    decode_model(&bytes)
}
