//! MLP behavior-cloning policy: inputs, forward pass, scaled loss, manual
//! backpropagation and an AdamW training loop.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{mirror_augment, ActionChunk, DemoDataset, TrainingSample, CHUNK_DT, CHUNK_LEN, RANGE_RAYS};
use crate::error::{Error, Result};
use crate::exec;

/// Per-step input width: the range fan plus the goal vector.
pub const STEP_DIM: usize = RANGE_RAYS + 2;
pub const OUTPUT_DIM: usize = CHUNK_LEN * 2;
const CHECKPOINT_MAGIC: &[u8; 8] = b"NAVSCMLP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Latest observation only.
    MlpBc,
    /// Six concatenated observation/goal steps.
    HistBc,
}

impl Variant {
    pub fn history(self) -> usize {
        match self {
            Variant::MlpBc => 1,
            Variant::HistBc => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub history: usize,
    pub hidden: Vec<usize>,
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            history: 1,
            hidden: vec![256, 256, 128],
        }
    }
}

impl PolicyArch {
    pub fn input_dim(&self) -> usize {
        self.history * STEP_DIM
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(&self.hidden);
        w.push(OUTPUT_DIM);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    pub history: usize,
    pub layers: Vec<Layer>,
}

/// Concatenates `[ranges_1 ‖ goal_1 ‖ … ‖ ranges_P ‖ goal_P]`.
pub fn encode_inputs(obs_history: &[Vec<f64>], goal_history: &[[f64; 2]], history: usize) -> Result<Vec<f64>> {
    for len in [obs_history.len(), goal_history.len()] {
        if len != history {
            return Err(Error::HistoryLength {
                expected: history,
                got: len,
            });
        }
    }
    let mut x = Vec::with_capacity(history * STEP_DIM);
    for (r, g) in obs_history.iter().zip(goal_history) {
        if r.len() != RANGE_RAYS {
            return Err(Error::InputDim {
                expected: RANGE_RAYS,
                got: r.len(),
            });
        }
        x.extend_from_slice(r);
        x.extend_from_slice(g);
    }
    Ok(x)
}

/// Goal input from a distance in metres and a relative bearing in radians.
pub fn normalize_goal(distance_m: f64, bearing_rad: f64) -> [f64; 2] {
    [
        (distance_m / 1000.0).clamp(0.0, 1.0),
        crate::posegraph::wrap_angle(bearing_rad) / std::f64::consts::PI,
    ]
}

impl MlpPolicy {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &PolicyArch, rng: &mut R) -> Self {
        let widths = arch.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    w: Array2::from_shape_simple_fn((w[1], w[0]), || rng.random_range(-bound..bound)),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self {
            history: arch.history,
            layers,
        }
    }

    pub fn zeros(arch: &PolicyArch) -> Self {
        let layers = arch
            .widths()
            .windows(2)
            .map(|w| Layer {
                w: Array2::zeros((w[1], w[0])),
                b: Array1::zeros(w[1]),
            })
            .collect();
        Self {
            history: arch.history,
            layers,
        }
    }

    pub fn arch(&self) -> PolicyArch {
        PolicyArch {
            history: self.history,
            hidden: self.layers[..self.layers.len() - 1].iter().map(|l| l.b.len()).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Batched forward pass; rows are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            a = a.dot(&l.w.t()) + &l.b;
            if k < last {
                a.mapv_inplace(f64::tanh);
            }
        }
        a
    }

    /// Normalized `(v, omega)` chunk for one input vector.
    pub fn forward(&self, input: &[f64]) -> Result<ActionChunk> {
        if input.len() != self.input_dim() {
            return Err(Error::InputDim {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let y = self.forward_batch(x);
        Ok(row_to_chunk(y.row(0).as_slice().expect("contiguous row")))
    }

    /// Sum of per-sample scaled losses and its gradient.
    fn loss_and_grad_sum(&self, x: ArrayView2<f64>, t: ArrayView2<f64>, scales: &[f64]) -> (f64, Gradients) {
        let last = self.layers.len() - 1;
        let mut acts = vec![x.to_owned()];
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = acts[k].dot(&l.w.t()) + &l.b;
            if k < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        let mut delta = &acts[last + 1] - &t;
        let mut loss = 0.0;
        for (i, mut row) in delta.axis_iter_mut(Axis(0)).enumerate() {
            loss += scales[i] * row.iter().map(|d| d * d).sum::<f64>() / OUTPUT_DIM as f64;
            row *= 2.0 * scales[i] / OUTPUT_DIM as f64;
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let gw = delta.t().dot(&acts[k]);
            let gb = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut prev = delta.dot(&self.layers[k].w);
                prev.zip_mut_with(&acts[k], |d, a| *d *= 1.0 - a * a);
                delta = prev;
            }
            grads.push(Layer { w: gw, b: gb });
        }
        grads.reverse();
        (loss, Gradients { layers: grads })
    }

    /// Mean scaled loss over a batch and its exact gradient.
    ///
    /// The batch is cut into fixed chunks whose partial sums are combined in
    /// a fixed tree, so the result does not depend on the worker count.
    pub fn backward(&self, batch: &Batch, s_min: f64, s_max: f64) -> Result<(f64, Gradients)> {
        let n = batch.inputs.nrows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if batch.inputs.ncols() != self.input_dim() {
            return Err(Error::InputDim {
                expected: self.input_dim(),
                got: batch.inputs.ncols(),
            });
        }
        let scales: Vec<f64> = batch
            .targets
            .axis_iter(Axis(0))
            .map(|r| loss_scale(r.as_slice().expect("contiguous row"), s_min, s_max))
            .collect();
        let n_chunks = n.div_ceil(GRAD_CHUNK);
        let parts = exec::map_range(n_chunks, |c| {
            let (lo, hi) = (c * GRAD_CHUNK, ((c + 1) * GRAD_CHUNK).min(n));
            self.loss_and_grad_sum(
                batch.inputs.slice(s![lo..hi, ..]),
                batch.targets.slice(s![lo..hi, ..]),
                &scales[lo..hi],
            )
        });
        let (loss, mut g) = exec::tree_reduce(parts, |(la, mut ga), (lb, gb)| {
            ga.add_assign(&gb);
            (la + lb, ga)
        })
        .expect("non-empty batch");
        g.scale(1.0 / n as f64);
        Ok((loss / n as f64, g))
    }

    /// Writes the versioned binary checkpoint.
    pub fn write_checkpoint<W: Write>(&self, out: W) -> Result<()> {
        self.write_checkpoint_with_meta(out, "")
    }

    /// Checkpoint carrying a free-form UTF-8 header, such as provenance.
    pub fn write_checkpoint_with_meta<W: Write>(&self, mut out: W, meta: &str) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(meta.len() as u32).to_le_bytes())?;
        out.write_all(meta.as_bytes())?;
        for v in [self.history as u32, self.layers.len() as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for l in &self.layers {
            out.write_all(&(l.w.nrows() as u32).to_le_bytes())?;
            out.write_all(&(l.w.ncols() as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.w.iter().chain(l.b.iter()) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        Ok(Self::read_checkpoint_with_meta(input)?.0)
    }

    pub fn read_checkpoint_with_meta<R: Read>(mut input: R) -> Result<(Self, String)> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut u32_le = || -> Result<u32> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = u32_le()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = u32_le()? as usize;
        if meta_len > 1 << 20 {
            return Err(Error::Checkpoint(format!("implausible header length {meta_len}")));
        }
        let mut meta = vec![0u8; meta_len];
        input.read_exact(&mut meta)?;
        let meta = String::from_utf8(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut u32_le = || -> Result<u32> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let history = u32_le()? as usize;
        let n_layers = u32_le()? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let mut dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            dims.push((u32_le()? as usize, u32_le()? as usize));
        }
        let mut f64_le = || -> Result<f64> {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let mut layers = Vec::with_capacity(n_layers);
        for (rows, cols) in dims {
            let w: Vec<f64> = (0..rows * cols).map(|_| f64_le()).collect::<Result<_>>()?;
            let b: Vec<f64> = (0..rows).map(|_| f64_le()).collect::<Result<_>>()?;
            layers.push(Layer {
                w: Array2::from_shape_vec((rows, cols), w).map_err(|e| Error::Checkpoint(e.to_string()))?,
                b: Array1::from(b),
            });
        }
        let policy = Self { history, layers };
        if policy.input_dim() != history * STEP_DIM
            || policy.layers.last().map(|l| l.b.len()) != Some(OUTPUT_DIM)
            || policy.layers.windows(2).any(|w| w[0].w.nrows() != w[1].w.ncols())
        {
            return Err(Error::Checkpoint("inconsistent layer dimensions".into()));
        }
        Ok((policy, meta))
    }
}

/// Samples per gradient work unit.
pub const GRAD_CHUNK: usize = 32;

fn row_to_chunk(row: &[f64]) -> ActionChunk {
    let mut c = [[0.0; 2]; CHUNK_LEN];
    for (k, a) in c.iter_mut().enumerate() {
        *a = [row[2 * k], row[2 * k + 1]];
    }
    c
}

fn chunk_to_row(c: &ActionChunk) -> [f64; OUTPUT_DIM] {
    let mut r = [0.0; OUTPUT_DIM];
    for (k, a) in c.iter().enumerate() {
        r[2 * k] = a[0];
        r[2 * k + 1] = a[1];
    }
    r
}

/// Loss weight from the largest target angular-velocity magnitude.
///
/// `target` is a flattened chunk `[v_0, w_0, v_1, w_1, …]`.
pub fn loss_scale(target: &[f64], s_min: f64, s_max: f64) -> f64 {
    let w = target
        .iter()
        .skip(1)
        .step_by(2)
        .fold(0.0_f64, |m, x| m.max(x.abs()))
        .min(1.0);
    s_min + (s_max - s_min) * w
}

/// Mean squared error over all chunk components times [`loss_scale`].
pub fn loss_scaled(pred: &ActionChunk, target: &ActionChunk, s_min: f64, s_max: f64) -> f64 {
    let (p, t) = (chunk_to_row(pred), chunk_to_row(target));
    let l2 = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / OUTPUT_DIM as f64;
    l2 * loss_scale(&t, s_min, s_max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.w *= k;
            l.b *= k;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Stacked inputs and flattened normalized target chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn from_samples(samples: &[&TrainingSample], history: usize) -> Result<Self> {
        let n = samples.len();
        let mut inputs = Array2::zeros((n, history * STEP_DIM));
        let mut targets = Array2::zeros((n, OUTPUT_DIM));
        for (i, s) in samples.iter().enumerate() {
            let x = encode_inputs(&s.obs_history, &s.goal_history, history)?;
            inputs.row_mut(i).assign(&Array1::from(x));
            targets.row_mut(i).assign(&Array1::from(chunk_to_row(&s.target_chunk).to_vec()));
        }
        Ok(Self { inputs, targets })
    }
}

/// Anything that can emit a fresh epoch of training samples.
pub trait TrainingData: Sync {
    fn history(&self) -> usize;
    /// Number of samples per epoch.
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn draw_epoch(&self, rng: &mut ChaCha8Rng) -> Vec<TrainingSample>;
}

impl TrainingData for DemoDataset {
    fn history(&self) -> usize {
        self.history
    }
    fn len(&self) -> usize {
        DemoDataset::len(self)
    }
    fn draw_epoch(&self, rng: &mut ChaCha8Rng) -> Vec<TrainingSample> {
        DemoDataset::draw_epoch(self, rng)
    }
}

/// A fixed sample set, reused every epoch.
#[derive(Debug, Clone)]
pub struct StaticSamples {
    pub history: usize,
    pub samples: Vec<TrainingSample>,
}

impl TrainingData for StaticSamples {
    fn history(&self) -> usize {
        self.history
    }
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn draw_epoch(&self, _rng: &mut ChaCha8Rng) -> Vec<TrainingSample> {
        self.samples.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub mirror_prob: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr: 1e-4,
            epochs: 2,
            mirror_prob: 0.5,
            s_min: 1.0,
            s_max: 10.0,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.s_max >= self.s_min && self.s_min >= 0.0) {
            return Err(Error::Config("need s_max >= s_min >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::Config("mirror_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at step 0 to zero at the last step.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return lr0;
    }
    let u = step as f64 / (total_steps - 1) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * u.min(1.0)).cos())
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Gradients,
    v: Gradients,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(policy: &MlpPolicy, weight_decay: f64) -> Self {
        let zeros = Gradients {
            layers: policy
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        };
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, policy: &mut MlpPolicy, g: &Gradients, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (eps, wd) = (self.eps, self.weight_decay);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * (mh / (vh.sqrt() + eps) + wd * *p);
        };
        for (k, l) in policy.layers.iter_mut().enumerate() {
            let (gl, ml, vl) = (&g.layers[k], &mut self.m.layers[k], &mut self.v.layers[k]);
            ndarray::Zip::from(&mut l.w)
                .and(&gl.w)
                .and(&mut ml.w)
                .and(&mut vl.w)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut l.b)
                .and(&gl.b)
                .and(&mut ml.b)
                .and(&mut vl.b)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_csv<W: Write>(curve: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in curve {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: MlpPolicy,
    pub curve: Vec<LossRecord>,
}

/// Trains a fresh policy on `data`.
pub fn train(data: &dyn TrainingData, arch: &PolicyArch, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if arch.history != data.history() {
        return Err(Error::HistoryLength {
            expected: arch.history,
            got: data.history(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = MlpPolicy::init(arch, &mut rng);
    let mut opt = AdamW::new(&policy, cfg.weight_decay);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut curve = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut samples = data.draw_epoch(&mut rng);
        for s in samples.iter_mut() {
            if cfg.mirror_prob > 0.0 && rng.random_bool(cfg.mirror_prob) {
                *s = mirror_augment(s);
            }
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&TrainingSample> = idx.iter().map(|&i| &samples[i]).collect();
            let batch = Batch::from_samples(&refs, arch.history)?;
            let (loss, g) = policy.backward(&batch, cfg.s_min, cfg.s_max)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            let lr = cosine_lr(cfg.lr, step, total);
            opt.step(&mut policy, &g, lr);
            curve.push(LossRecord { step, epoch, lr, loss });
            step += 1;
        }
    }
    if !policy.is_finite() {
        return Err(Error::Diverged { step });
    }
    Ok(TrainOutput { policy, curve })
}

/// Mean normalized loss of `policy` on fixed samples.
pub fn evaluate_loss(policy: &MlpPolicy, samples: &[TrainingSample], s_min: f64, s_max: f64) -> Result<f64> {
    let refs: Vec<&TrainingSample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, policy.history)?;
    Ok(policy.backward(&batch, s_min, s_max)?.0)
}

/// Command applied over one control period from a normalized chunk: the
/// time-weighted mean of the chunk actions falling inside `dt`, clipped.
pub fn chunk_command(chunk: &ActionChunk, dt: f64) -> [f64; 2] {
    chunk_window(chunk, 0.0, dt)
}

/// Time-weighted mean of the chunk actions over `[start, start + dt)`,
/// clipped. Windows past the chunk end hold its last action.
pub fn chunk_window(chunk: &ActionChunk, start: f64, dt: f64) -> [f64; 2] {
    let end = start + dt;
    let (mut acc, mut wsum) = ([0.0; 2], 0.0);
    for (k, a) in chunk.iter().enumerate() {
        let t0 = k as f64 * CHUNK_DT;
        let w = (end.min(t0 + CHUNK_DT) - start.max(t0)).max(0.0);
        acc[0] += w * a[0].clamp(-1.0, 1.0);
        acc[1] += w * a[1].clamp(-1.0, 1.0);
        wsum += w;
    }
    if wsum == 0.0 {
        let k = if start > 0.0 { CHUNK_LEN - 1 } else { 0 };
        return [chunk[k][0].clamp(-1.0, 1.0), chunk[k][1].clamp(-1.0, 1.0)];
    }
    [acc[0] / wsum, acc[1] / wsum]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> PolicyArch {
        PolicyArch {
            history: 1,
            hidden: vec![8, 6],
        }
    }

    #[test]
    fn input_encoding() {
        let r = vec![0.5; RANGE_RAYS];
        let x = encode_inputs(&[r.clone()], &[[0.1, -0.2]], 1).unwrap();
        assert_eq!(x.len(), 66);
        assert_eq!(&x[64..], &[0.1, -0.2]);
        assert!(matches!(
            encode_inputs(&[r.clone(), r], &[[0.0, 0.0]], 2),
            Err(Error::HistoryLength { expected: 2, got: 1 })
        ));
        assert_eq!(normalize_goal(10.0, std::f64::consts::PI)[1], 1.0);
        assert_eq!(normalize_goal(2300.0, 0.0)[0], 1.0);
    }

    #[test]
    fn zero_weights_give_zero_chunk() {
        let p = MlpPolicy::zeros(&arch());
        let c = p.forward(&[0.3; 66]).unwrap();
        assert!(c.iter().all(|a| a == &[0.0, 0.0]));
    }

    #[test]
    fn single_layer_identity() {
        let mut p = MlpPolicy::zeros(&PolicyArch {
            history: 1,
            hidden: vec![],
        });
        for k in 0..OUTPUT_DIM {
            p.layers[0].w[[k, k]] = 1.0;
            p.layers[0].b[k] = 0.5;
        }
        let x: Vec<f64> = (0..66).map(|i| i as f64).collect();
        let c = p.forward(&x).unwrap();
        assert_eq!(c[3], [6.5, 7.5]);
    }

    #[test]
    fn scale_values() {
        let mut t = [[0.3, 0.0]; CHUNK_LEN];
        assert_eq!(loss_scale(&chunk_to_row(&t), 1.0, 10.0), 1.0);
        t[4][1] = -1.0;
        assert_eq!(loss_scale(&chunk_to_row(&t), 1.0, 10.0), 10.0);
        t[4][1] = 0.5;
        assert_eq!(loss_scale(&chunk_to_row(&t), 1.0, 10.0), 5.5);
        let pred = [[0.0; 2]; CHUNK_LEN];
        let l2 = t.iter().map(|a| a[0] * a[0] + a[1] * a[1]).sum::<f64>() / 20.0;
        assert!((loss_scaled(&pred, &t, 1.0, 10.0) - 5.5 * l2).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpPolicy::init(&arch(), &mut rng);
        let x = Array2::from_shape_simple_fn((5, 66), || rng.random_range(0.0..1.0));
        let targets = p.forward_batch(x.view());
        let (loss, g) = p.backward(&Batch { inputs: x, targets }, 1.0, 10.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 100), 1e-4);
        assert!(cosine_lr(1e-4, 99, 100) <= 1e-8);
        assert_eq!(cosine_lr(1e-4, 0, 1), 1e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MlpPolicy::init(&arch(), &mut rng);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(MlpPolicy::read_checkpoint(&buf[..]).unwrap(), p);
        buf[0] = b'X';
        assert!(MlpPolicy::read_checkpoint(&buf[..]).is_err());
    }

    #[test]
    fn chunk_command_weights_first_quarter_second() {
        let mut c = [[0.0; 2]; CHUNK_LEN];
        c[0] = [1.0, 0.0];
        c[1] = [1.0, 0.0];
        c[2] = [0.0, 2.0];
        let a = chunk_command(&c, 0.25);
        assert!((a[0] - 0.8).abs() < 1e-12);
        assert!((a[1] - 0.2).abs() < 1e-12);
    }
}
