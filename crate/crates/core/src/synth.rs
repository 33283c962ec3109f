//! Procedural scenes and degraded exposure brackets.
//!
//! Scenes are built in log radiance from ramps, soft disks and straight
//! edges, then mapped onto `[D / 1024, D]` where `D` is the dynamic range.
//! Each bracket frame is the shifted (and for long exposures, motion-blurred)
//! scene scaled by its exposure, clipped to `[0, 1]`, perturbed by read and
//! shot noise and quantised. Noise is added after clipping and is not clipped
//! again, so frames may stray slightly outside `[0, 1]`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{Archive, TensorData};
use crate::model::{ExposureStack, FlowField, FRAMES, RAW_CHANNELS};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.txt";
pub const ARCHIVE_EXT: &str = "crt1a";

/// Global translation of each frame relative to the scene, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    /// Per-frame drift; frame `i` is displaced by `i * drift`.
    pub drift: (f64, f64),
}

impl Motion {
    pub fn none() -> Self {
        Motion { drift: (0.0, 0.0) }
    }

    pub fn offset(&self, frame: usize) -> (f64, f64) {
        (self.drift.0 * frame as f64, self.drift.1 * frame as f64)
    }
}

impl Default for Motion {
    fn default() -> Self {
        Motion { drift: (1.0, 0.5) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_gradients: usize,
    pub n_disks: usize,
    pub n_edges: usize,
    /// Peak radiance in relative units.
    pub dynamic_range: f64,
    pub motion: Motion,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            height: 64,
            width: 64,
            n_gradients: 2,
            n_disks: 4,
            n_edges: 2,
            dynamic_range: 16.0,
            motion: Motion::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::invalid(
                "scene_spec",
                format!("size {}x{} must be non-zero and even", self.height, self.width),
            ));
        }
        if !(self.dynamic_range > 1.0) {
            return Err(Error::invalid("scene_spec", format!("dynamic_range {} must exceed 1", self.dynamic_range)));
        }
        Ok(())
    }

    fn is_blank(&self) -> bool {
        self.n_gradients == 0 && self.n_disks == 0 && self.n_edges == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradeSpec {
    pub exposure_times: [f64; FRAMES],
    /// Read noise standard deviation for the shortest exposure; longer
    /// frames see `sigma / sqrt(t_i / t_1)`.
    pub read_noise_sigma: f64,
    /// Variance of shot noise per unit of exposed signal.
    pub shot_noise_scale: f64,
    /// Sub-positions integrated by the blurred frames.
    pub blur_taps: usize,
    /// Index of the first frame that receives motion blur.
    pub blur_from: usize,
    pub bits: u32,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        DegradeSpec {
            exposure_times: [1.0, 4.0, 16.0, 64.0, 256.0],
            read_noise_sigma: 0.02,
            shot_noise_scale: 1e-3,
            blur_taps: 8,
            blur_from: 3,
            bits: 12,
        }
    }
}

impl DegradeSpec {
    /// Noise-free, blur-free rendering.
    pub fn clean() -> Self {
        DegradeSpec {
            read_noise_sigma: 0.0,
            shot_noise_scale: 0.0,
            blur_taps: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.exposure_times;
        if !(t[0] > 0.0) || t.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::invalid("degrade_spec", format!("exposure times {t:?} must be positive and strictly increasing")));
        }
        if self.read_noise_sigma < 0.0 || self.shot_noise_scale < 0.0 {
            return Err(Error::invalid("degrade_spec", "noise parameters must be non-negative"));
        }
        if self.blur_taps == 0 || !(1..=24).contains(&self.bits) {
            return Err(Error::invalid("degrade_spec", "blur_taps must be >= 1 and bits in 1..=24"));
        }
        Ok(())
    }
}

/// A bracket with its clean target.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    pub stack: ExposureStack<f32>,
    /// `[RAW_CHANNELS, H, W]` radiance.
    pub gt: Tensor<f32>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Deterministic scene radiance `[RAW_CHANNELS, H, W]` in `[D / 1024, D]`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let d = spec.dynamic_range;
    if spec.is_blank() {
        // geometric midpoint of the radiance range
        return Ok(Tensor::full(&[RAW_CHANNELS, h, w], (d * d / 1024.0).sqrt() as f32));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = h.max(w) as f64;
    let mut field = vec![0.0f64; h * w];
    let mut add = |f: &dyn Fn(f64, f64) -> f64| {
        for y in 0..h {
            for x in 0..w {
                field[y * w + x] += f(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
    };
    for _ in 0..spec.n_gradients {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let slope: f64 = rng.random_range(1.0..4.0);
        add(&|x, y| slope * (x * theta.cos() + y * theta.sin()) / size);
    }
    for _ in 0..spec.n_disks {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = rng.random_range(0.05..0.25) * size;
        let amp = rng.random_range(-3.0..3.0);
        add(&|x, y| amp * sigmoid(r - ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()));
    }
    for _ in 0..spec.n_edges {
        let px = rng.random_range(0.0..w as f64);
        let py = rng.random_range(0.0..h as f64);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(-2.0..2.0);
        add(&|x, y| amp * sigmoid(((x - px) * theta.cos() + (y - py) * theta.sin()) / 0.5));
    }
    // mild per-plane tint; the two green planes share one
    let g: f64 = rng.random_range(-0.3..0.3);
    let tint = [rng.random_range(-0.3..0.3), g, g, rng.random_range(-0.3..0.3)];

    let (lo, hi) = field
        .iter()
        .flat_map(|v| tint.iter().map(move |t| v + t))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (log_lo, log_hi) = ((d / 1024.0).ln(), d.ln());
    let span = hi - lo;
    let mut data = Vec::with_capacity(RAW_CHANNELS * h * w);
    for t in tint {
        for v in &field {
            let u = if span > 0.0 { (v + t - lo) / span } else { 0.5 };
            data.push((log_lo + u * (log_hi - log_lo)).exp().clamp(d / 1024.0, d) as f32);
        }
    }
    Tensor::from_vec(&[RAW_CHANNELS, h, w], data)
}

/// Scene shifted so that frame content moves by `offset`, with edge clamping.
fn shifted(scene: &Tensor<f32>, offset: (f64, f64)) -> Result<Tensor<f32>> {
    let s = scene.shape();
    let (h, w) = (s[1], s[2]);
    if offset == (0.0, 0.0) {
        return Ok(scene.clone());
    }
    let flow = FlowField::uniform(h, w, -offset.0 as f32, -offset.1 as f32);
    crate::model::warp_by_flow(&scene.reshape(&[1, RAW_CHANNELS, h, w])?, &flow)?.reshape(&[RAW_CHANNELS, h, w])
}

/// Renders five degraded frames from clean radiance. `seed` drives the noise.
pub fn render_bracket(
    scene: &Tensor<f32>,
    degrade: &DegradeSpec,
    dynamic_range: f64,
    motion: &Motion,
    seed: u64,
) -> Result<ExposureStack<f32>> {
    degrade.validate()?;
    if scene.ndim() != 3 || scene.shape()[0] != RAW_CHANNELS {
        return Err(Error::shape("render_bracket", "scene", format!("expected [{RAW_CHANNELS}, H, W], got {:?}", scene.shape())));
    }
    if let Some(v) = scene.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid("render_bracket", format!("scene radiance must be non-negative, found {v}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let levels = ((1u64 << degrade.bits) - 1) as f64;
    let t0 = degrade.exposure_times[0];
    let mut frames = Vec::with_capacity(FRAMES);
    for i in 0..FRAMES {
        let ratio = degrade.exposure_times[i] / t0;
        let (ox, oy) = motion.offset(i);
        let taps = if i >= degrade.blur_from { degrade.blur_taps } else { 1 };
        let mut acc = vec![0.0f64; scene.numel()];
        for k in 0..taps {
            // sub-positions spread over one drift step, centred on the frame offset
            let t = (k as f64 + 0.5) / taps as f64 - 0.5;
            let view = shifted(scene, (ox + t * motion.drift.0, oy + t * motion.drift.1))?;
            for (a, v) in acc.iter_mut().zip(view.data()) {
                *a += *v as f64;
            }
        }
        let read_sigma = degrade.read_noise_sigma / ratio.sqrt();
        let data = acc
            .into_iter()
            .map(|a| {
                let v = (a / taps as f64 * ratio / dynamic_range).clamp(0.0, 1.0);
                let sigma = (read_sigma * read_sigma + degrade.shot_noise_scale * v).sqrt();
                let noisy = if sigma > 0.0 {
                    v + sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    v
                };
                ((noisy * levels).round() / levels) as f32
            })
            .collect();
        frames.push(Tensor::from_vec(scene.shape(), data)?);
    }
    ExposureStack::new(frames, degrade.exposure_times.to_vec())
}

/// Seed of sample `index` in a set generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// One sample: scene from `scene.seed`, noise from a derived stream.
pub fn generate_sample(id: impl Into<String>, scene: &SceneSpec, degrade: &DegradeSpec) -> Result<SampleRecord> {
    let gt = generate_scene(scene)?;
    let stack = render_bracket(&gt, degrade, scene.dynamic_range, &scene.motion, scene.seed ^ 0x5EED)?;
    Ok(SampleRecord { id: id.into(), stack, gt })
}

/// `count` samples with per-sample seeds derived from `seed`. Generation runs
/// in parallel; the result depends only on the arguments.
pub fn generate_dataset(count: usize, seed: u64, scene: &SceneSpec, degrade: &DegradeSpec) -> Result<Vec<SampleRecord>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec {
                seed: sample_seed(seed, i),
                ..scene.clone()
            };
            generate_sample(sample_id(i), &spec, degrade)
        })
        .collect()
}

pub fn sample_to_archive(sample: &SampleRecord) -> Archive {
    let mut a = Archive::new();
    for (i, f) in sample.stack.frames.iter().enumerate() {
        a.insert_tensor(format!("frame{i}"), f);
    }
    a.insert(
        "exposure_times",
        TensorData::F64 {
            shape: vec![FRAMES],
            data: sample.stack.exposure_times.clone(),
        },
    );
    a.insert_tensor("gt", &sample.gt);
    a
}

pub fn sample_from_archive(id: &str, a: &Archive, file: &Path) -> Result<SampleRecord> {
    let get = |name: &str| {
        a.get(name).ok_or_else(|| Error::Format {
            file: file.to_path_buf(),
            offset: 0,
            detail: format!("missing entry `{name}`"),
        })
    };
    let frames = (0..FRAMES)
        .map(|i| get(&format!("frame{i}")).map(|d| d.to_tensor::<f32>()))
        .collect::<Result<Vec<_>>>()?;
    let times = get("exposure_times")?.to_f64_vec();
    let gt = get("gt")?.to_tensor::<f32>();
    let stack = ExposureStack::new(frames, times).map_err(|e| Error::Format {
        file: file.to_path_buf(),
        offset: 0,
        detail: e.to_string(),
    })?;
    Ok(SampleRecord { id: id.to_string(), stack, gt })
}

/// Writes `index.txt` and one archive per sample into `dir`.
pub fn write_dataset(samples: &[SampleRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for s in samples {
        if s.id.is_empty() || s.id.contains(['/', '\\', '\n', '\t']) {
            return Err(Error::invalid("write_dataset", format!("unusable sample id `{}`", s.id)));
        }
        sample_to_archive(s).write(&dir.join(format!("{}.{ARCHIVE_EXT}", s.id)))?;
        index.push_str(&s.id);
        index.push('\n');
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(path, e))
}

/// Reads every sample listed in `dir/index.txt`, in index order.
pub fn read_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let path = dir.join(INDEX_FILE);
    let index = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    index
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let file = dir.join(format!("{id}.{ARCHIVE_EXT}"));
            sample_from_archive(id, &Archive::read(&file)?, &file)
        })
        .collect()
}
