//! Optimiser, schedule, augmentation, and the training and evaluation loops.
//!
//! Every random draw is derived from `(seed, epoch)` for the data order and
//! `(seed, step, slot)` for augmentation, so a run resumed from a checkpoint
//! replays exactly the losses of an uninterrupted one.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{Archive, TensorData};
use crate::model::{forward, forward_batch, param_specs, CRNetConfig, ExposureStack};
use crate::objective::{l1_tonemapped_loss, MetricReport};
use crate::params::{is_bias_path, ModelParams, ParamSpec};
use crate::synth::{sample_seed, SampleRecord};
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.crt1a";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_gamma: f64,
    pub lr_step_epochs: usize,
    /// Square crop side; must be even.
    pub crop: usize,
    pub epochs: usize,
    /// Stops early after this many optimiser steps; 0 means no cap.
    pub max_steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Checkpoint cadence in epochs; 0 writes only at the end.
    pub checkpoint_every: usize,
    /// Random flips and quarter turns in addition to the crop.
    pub flip_rotate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            lr_gamma: 0.5,
            lr_step_epochs: 80,
            crop: 128,
            epochs: 240,
            max_steps: 0,
            batch: 4,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 10,
            flip_rotate: true,
        }
    }
}

impl TrainConfig {
    /// Laptop-scale run: 32 px crops, 200 steps.
    pub fn desk() -> Self {
        TrainConfig {
            initial_lr: 2e-3,
            lr_step_epochs: 100_000,
            crop: 32,
            epochs: 100_000,
            max_steps: 200,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("train_config", d));
        if self.crop == 0 || self.crop % 2 != 0 {
            return bad(format!("crop {} must be even and non-zero", self.crop));
        }
        if self.epochs == 0 || self.batch == 0 || self.lr_step_epochs == 0 {
            return bad("epochs, batch and lr_step_epochs must be at least 1".into());
        }
        if !(self.initial_lr > 0.0) || !(self.lr_gamma > 0.0) {
            return bad("initial_lr and lr_gamma must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        Ok(())
    }
}

/// Step decay: `initial_lr * lr_gamma ^ floor(epoch / lr_step_epochs)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.initial_lr * cfg.lr_gamma.powi((epoch / cfg.lr_step_epochs.max(1)) as i32)
}

/// AdamW moments and hyperparameters. Moments are stored in parameter
/// declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Element> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl<T: Element> OptimState<T> {
    pub fn new(params: &ModelParams<T>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr: cfg.initial_lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            eps: cfg.eps,
        }
    }
}

/// Gradients of every parameter, failing on the first one without any.
pub fn collect_grads<T: Element>(params: &ModelParams<T>) -> Result<Vec<Vec<T>>> {
    params
        .iter()
        .map(|(k, t)| t.grad().ok_or_else(|| Error::MissingGradient(k.to_string())))
        .collect()
}

/// One AdamW update. Weight decay is decoupled and applied first as
/// `p -= lr * wd * p` (skipped for biases); then
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)` with bias-corrected moments.
/// Updated parameters are fresh leaves with empty gradient slots.
pub fn adamw_step<T: Element>(params: &mut ModelParams<T>, grads: &[Vec<T>], state: &mut OptimState<T>) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(
            "adamw_step",
            format!("{} parameters, {} gradients, {} moment buffers", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - state.beta1), T::lit(1.0 - state.beta2));
    let bc1 = T::lit(1.0 - state.beta1.powi(t));
    let bc2 = T::lit(1.0 - state.beta2.powi(t));
    let lr = T::lit(state.lr);
    let decay = T::lit(state.lr * state.weight_decay);
    let eps = T::lit(state.eps);

    let paths: Vec<String> = params.keys().map(str::to_string).collect();
    for (i, path) in paths.iter().enumerate() {
        let p = params.get(path)?;
        let g = &grads[i];
        if g.len() != p.numel() {
            return Err(Error::Param {
                path: path.clone(),
                detail: format!("gradient has {} values, parameter {}", g.len(), p.numel()),
            });
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let decays = !is_bias_path(path);
        let data: Vec<T> = p
            .data()
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                let w = if decays { w - decay * w } else { w };
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w - lr * m_hat / (v_hat.sqrt() + eps)
            })
            .collect();
        let shape = p.shape().to_vec();
        params.set(path, Tensor::param(&shape, data)?)?;
    }
    Ok(())
}

/// Geometric part of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Mirror columns before rotating.
    pub flip: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
}

impl AugmentDraw {
    pub fn identity(height: usize, width: usize) -> Self {
        AugmentDraw {
            top: 0,
            left: 0,
            height,
            width,
            flip: false,
            quarter_turns: 0,
        }
    }
}

fn transform_planes(t: &Tensor<f32>, d: &AugmentDraw) -> Result<Tensor<f32>> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ch, cw) = (d.height, d.width);
    let (oh, ow) = if d.quarter_turns % 2 == 1 { (cw, ch) } else { (ch, cw) };
    let src = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for p in 0..c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                // invert the rotation to find the source pixel in the crop
                let (cy, cx) = match d.quarter_turns % 4 {
                    0 => (y, x),
                    1 => (x, cw - 1 - y),
                    2 => (ch - 1 - y, cw - 1 - x),
                    _ => (ch - 1 - x, y),
                };
                let cx = if d.flip { cw - 1 - cx } else { cx };
                out.push(plane[(d.top + cy) * w + d.left + cx]);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Applies one draw to every frame and the target alike.
pub fn apply_augment(sample: &SampleRecord, d: &AugmentDraw) -> Result<SampleRecord> {
    let (h, w) = sample.stack.extent();
    if d.height == 0 || d.width == 0 || d.top + d.height > h || d.left + d.width > w {
        return Err(Error::invalid(
            "augment",
            format!("crop {}x{} at ({}, {}) exceeds {h}x{w}", d.height, d.width, d.top, d.left),
        ));
    }
    let frames = sample
        .stack
        .frames
        .iter()
        .map(|f| transform_planes(f, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleRecord {
        id: sample.id.clone(),
        stack: ExposureStack::new(frames, sample.stack.exposure_times.clone())?,
        gt: transform_planes(&sample.gt, d)?,
    })
}

/// Random square crop of side `crop`, optionally with a random flip and
/// quarter turn, shared by all frames and the target.
pub fn augment<R: Rng>(sample: &SampleRecord, crop: usize, flip_rotate: bool, rng: &mut R) -> Result<SampleRecord> {
    let (h, w) = sample.stack.extent();
    if crop == 0 || crop > h || crop > w {
        return Err(Error::invalid("augment", format!("crop {crop} does not fit {h}x{w}")));
    }
    let top = rng.random_range(0..=h - crop);
    let left = rng.random_range(0..=w - crop);
    let (flip, quarter_turns) = if flip_rotate {
        (rng.random_bool(0.5), rng.random_range(0..4u8))
    } else {
        (false, 0)
    };
    apply_augment(
        sample,
        &AugmentDraw {
            top,
            left,
            height: crop,
            width: crop,
            flip,
            quarter_turns,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,epoch,lr,loss\n");
    for r in history {
        let _ = writeln!(s, "{},{},{:e},{:.9}", r.step, r.epoch, r.lr, r.loss);
    }
    s
}

/// Parameters plus optimiser progress; `step` counts completed updates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub optim: OptimState<f32>,
    pub step: usize,
}

const MODEL_PREFIX: &str = "model.";

impl TrainState {
    pub fn new(model: &CRNetConfig, cfg: &TrainConfig) -> Self {
        let params = ModelParams::init(&param_specs(model), cfg.seed);
        let optim = OptimState::new(&params, cfg);
        TrainState { params, optim, step: 0 }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        self.params.write_into(&mut a, MODEL_PREFIX);
        for (i, (path, t)) in self.params.iter().enumerate() {
            let shape = t.shape().to_vec();
            for (ns, buf) in [("optim.m.", &self.optim.m[i]), ("optim.v.", &self.optim.v[i])] {
                a.insert(format!("{ns}{path}"), TensorData::F32 { shape: shape.clone(), data: buf.clone() });
            }
        }
        let scalars = [
            ("optim.step", self.optim.step as f64),
            ("optim.lr", self.optim.lr),
            ("optim.beta1", self.optim.beta1),
            ("optim.beta2", self.optim.beta2),
            ("optim.weight_decay", self.optim.weight_decay),
            ("optim.eps", self.optim.eps),
            ("train.step", self.step as f64),
        ];
        for (k, v) in scalars {
            a.insert(k, TensorData::F64 { shape: vec![1], data: vec![v] });
        }
        a
    }

    pub fn from_archive(a: &Archive, specs: &[ParamSpec], file: &Path) -> Result<Self> {
        let params = ModelParams::read_from(a, MODEL_PREFIX, specs)?;
        let missing = |name: String| Error::Format {
            file: file.to_path_buf(),
            offset: 0,
            detail: format!("missing entry `{name}`"),
        };
        let scalar = |name: &str| -> Result<f64> {
            let d = a.get(name).ok_or_else(|| missing(name.to_string()))?;
            d.to_f64_vec().first().copied().ok_or_else(|| missing(name.to_string()))
        };
        let mut m = Vec::with_capacity(specs.len());
        let mut v = Vec::with_capacity(specs.len());
        for s in specs {
            for (ns, dst) in [("optim.m.", &mut m), ("optim.v.", &mut v)] {
                let key = format!("{ns}{}", s.path);
                let d = a.get(&key).ok_or_else(|| missing(key.clone()))?;
                if d.shape() != s.shape.as_slice() {
                    return Err(Error::Param { path: key, detail: format!("shape {:?}, expected {:?}", d.shape(), s.shape) });
                }
                dst.push(d.to_tensor::<f32>().to_vec());
            }
        }
        Ok(TrainState {
            params,
            optim: OptimState {
                m,
                v,
                step: scalar("optim.step")? as u64,
                lr: scalar("optim.lr")?,
                beta1: scalar("optim.beta1")?,
                beta2: scalar("optim.beta2")?,
                weight_decay: scalar("optim.weight_decay")?,
                eps: scalar("optim.eps")?,
            },
            step: scalar("train.step")? as usize,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        self.to_archive().write(&tmp)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, model: &CRNetConfig) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, &param_specs(model), path)
    }
}

/// Model parameters from a training checkpoint, ignoring optimiser state.
pub fn load_params(path: &Path, model: &CRNetConfig) -> Result<ModelParams<f32>> {
    ModelParams::read_from(&Archive::read(path)?, MODEL_PREFIX, &param_specs(model))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<LossRecord>,
    /// Checkpoint written last, if any.
    pub checkpoint: Option<PathBuf>,
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Data rows of an existing loss CSV whose step is below `before`.
fn earlier_rows(path: &Path, before: usize) -> String {
    let Ok(text) = fs::read_to_string(path) else { return String::new() };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|v| v.parse::<usize>().ok()).is_some_and(|s| s < before))
        .map(|l| format!("{l}\n"))
        .collect()
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch) ^ 0x0D0E));
    order
}

/// Trains from `start` (or a fresh state) until `cfg.epochs` epochs or
/// `cfg.max_steps` updates are done. An epoch is `ceil(n / batch)` steps;
/// batches cycle through the epoch's shuffled order, so sets smaller than a
/// batch repeat samples with independent crops.
///
/// With `out_dir`, a checkpoint and the loss CSV are written every
/// `checkpoint_every` epochs and at the end. A non-finite loss aborts with
/// [`Error::Numeric`] and leaves the last checkpoint untouched.
pub fn train(
    dataset: &[SampleRecord],
    model: &CRNetConfig,
    cfg: &TrainConfig,
    start: Option<TrainState>,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    model.validate()?;
    cfg.validate()?;
    model.check_extent(cfg.crop, cfg.crop)?;
    let mut state = start.unwrap_or_else(|| TrainState::new(model, cfg));
    state.params.check_against(&param_specs(model))?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // a resumed run keeps the rows logged before its starting step
    let prior = match out_dir {
        Some(dir) if state.step > 0 => earlier_rows(&dir.join(LOSS_FILE), state.step),
        _ => String::new(),
    };
    let write_loss = |history: &[LossRecord]| -> Result<()> {
        let Some(dir) = out_dir else { return Ok(()) };
        let csv = dir.join(LOSS_FILE);
        let text = loss_csv(history);
        let (header, rows) = text.split_at(text.find('\n').map_or(0, |i| i + 1));
        fs::write(&csv, format!("{header}{prior}{rows}")).map_err(|e| Error::io(csv, e))
    };

    let n = dataset.len();
    let spe = steps_per_epoch(n, cfg.batch);
    let mut total = cfg.epochs * spe;
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    let mut history = Vec::new();
    let mut checkpoint: Option<PathBuf> = None;
    let save = |state: &TrainState, history: &[LossRecord]| -> Result<Option<PathBuf>> {
        let Some(dir) = out_dir else { return Ok(None) };
        let path = dir.join(CHECKPOINT_FILE);
        state.save(&path)?;
        write_loss(history)?;
        Ok(Some(path))
    };

    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    while state.step < total {
        let step = state.step;
        let epoch = step / spe;
        if epoch != order_epoch {
            order = epoch_order(n, cfg.seed, epoch);
            order_epoch = epoch;
        }
        let lr = lr_at(epoch, cfg);
        let mut batch = Vec::with_capacity(cfg.batch);
        for slot in 0..cfg.batch {
            let idx = order[((step % spe) * cfg.batch + slot) % n];
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ 0xA0A0, step));
            rng.set_stream(slot as u64);
            batch.push(augment(&dataset[idx], cfg.crop, cfg.flip_rotate, &mut rng)?);
        }
        let stacks: Vec<ExposureStack<f32>> = batch.iter().map(|s| s.stack.clone()).collect();
        let gts: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.gt).collect();
        let gt = Tensor::concat(&gts, 0)?.reshape(&[cfg.batch, 4, cfg.crop, cfg.crop])?;

        let pred = forward_batch(&stacks, &state.params, model, None)?;
        let loss = l1_tonemapped_loss(&pred, &gt, model.mu)?;
        let value = loss.item()? as f64;
        if !value.is_finite() {
            let kept = match &checkpoint {
                Some(p) => format!("last good checkpoint kept at {}", p.display()),
                None => "no checkpoint had been written".to_string(),
            };
            write_loss(&history)?;
            return Err(Error::Numeric(format!("loss is {value} at step {step}; {kept}")));
        }
        loss.backward()?;
        let grads = collect_grads(&state.params)?;
        state.optim.lr = lr;
        adamw_step(&mut state.params, &grads, &mut state.optim)?;
        state.step += 1;

        let rec = LossRecord { step, epoch, lr, loss: value };
        progress(&rec);
        history.push(rec);

        let epoch_done = state.step % spe == 0;
        if epoch_done && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && state.step < total {
            checkpoint = save(&state, &history)?.or(checkpoint);
        }
    }
    checkpoint = save(&state, &history)?.or(checkpoint);
    Ok(TrainOutcome { state, history, checkpoint })
}

/// Per-sample metrics on full-size samples and their mean.
pub fn evaluate(
    dataset: &[SampleRecord],
    params: &ModelParams<f32>,
    model: &CRNetConfig,
) -> Result<(Vec<(String, MetricReport)>, MetricReport)> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluate", "dataset is empty"));
    }
    let frozen = detached(params);
    let rows = dataset
        .iter()
        .map(|s| {
            let pred = forward(&s.stack, &frozen, model, None)?;
            Ok((s.id.clone(), MetricReport::compute(&pred, &s.gt, model.mu)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    let mean = MetricReport::mean(&reports).expect("non-empty");
    Ok((rows, mean))
}

/// Copies of `params` that do not record a graph.
pub fn detached<T: Element>(params: &ModelParams<T>) -> ModelParams<T> {
    ModelParams::from_map(params.iter().map(|(k, t)| (k.to_string(), t.detach())).collect())
}
