//! Flat `key = value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::path::Path;

use crnet_core::blocks::{CebKernel, FfnMode, MbbSplit};
use crnet_core::model::{CRNetConfig, FusionMode, FRAMES};
use crnet_core::synth::{DegradeSpec, Motion, SceneSpec};
use crnet_core::tensor::PoolKind;
use crnet_core::train::TrainConfig;

/// Every accepted key with a one-line description, in help order.
pub const KEYS: &[(&str, &str)] = &[
    ("model.base_channels", "feature width"),
    ("model.n_ceb", "enhancement blocks per module"),
    ("model.n_hfem", "frequency enhancement modules"),
    ("model.mbb_split", "multi-branch depths a,b with a+b=4"),
    ("model.pool_kind", "avg|max pooling for the low band"),
    ("model.attn_window", "attention window side"),
    ("model.attn_heads", "attention heads"),
    ("model.ffn_mode", "inverted|normal_bottleneck|flat"),
    ("model.ffn_expansion", "feed-forward width factor"),
    ("model.ceb_kernel", "dw7|three_dw3|dw5_dw3"),
    ("model.ca_reduction", "channel attention reduction"),
    ("model.fusion_mode", "joint|recurrent"),
    ("model.freq_sep", "split features into frequency bands"),
    ("model.gamma", "gamma of the mapped input copy"),
    ("model.mu", "tone mapping strength"),
    ("train.initial_lr", "learning rate at epoch 0"),
    ("train.lr_gamma", "decay factor per step"),
    ("train.lr_step_epochs", "epochs between decays"),
    ("train.crop", "square training crop side"),
    ("train.epochs", "epochs to run"),
    ("train.max_steps", "stop after this many steps, 0 = no cap"),
    ("train.batch", "samples per step"),
    ("train.seed", "seed for init, order and augmentation"),
    ("train.weight_decay", "decoupled weight decay (not on biases)"),
    ("train.beta1", "first moment decay"),
    ("train.beta2", "second moment decay"),
    ("train.eps", "optimiser epsilon"),
    ("train.checkpoint_every", "checkpoint cadence in epochs, 0 = end only"),
    ("train.flip_rotate", "random flips and quarter turns"),
    ("data.height", "scene height"),
    ("data.width", "scene width"),
    ("data.n_gradients", "log-radiance ramps per scene"),
    ("data.n_disks", "soft disks per scene"),
    ("data.n_edges", "straight edges per scene"),
    ("data.dynamic_range", "peak scene radiance"),
    ("data.drift_x", "horizontal motion per frame, pixels"),
    ("data.drift_y", "vertical motion per frame, pixels"),
    ("data.exposure_times", "five increasing exposure times"),
    ("data.read_noise_sigma", "read noise of the shortest exposure"),
    ("data.shot_noise_scale", "shot noise variance per unit signal"),
    ("data.blur_taps", "motion blur sub-positions"),
    ("data.blur_from", "first blurred frame index"),
    ("data.bits", "quantisation bit depth"),
];

pub const PRESETS: &[&str] = &["default", "desk"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: CRNetConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub degrade: DegradeSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: CRNetConfig::default(),
            train: TrainConfig::default(),
            scene: SceneSpec::default(),
            degrade: DegradeSpec::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{key}: cannot parse `{v}`: {e}"))
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, String> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(RunConfig {
                model: CRNetConfig::desk(),
                train: TrainConfig::desk(),
                scene: SceneSpec {
                    height: 32,
                    width: 32,
                    ..SceneSpec::default()
                },
                degrade: DegradeSpec::default(),
            }),
            other => Err(format!("unknown preset `{other}` (expected {})", PRESETS.join("|"))),
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t, s, d) = (&self.model, &self.train, &self.scene, &self.degrade);
        Some(match key {
            "model.base_channels" => m.base_channels.to_string(),
            "model.n_ceb" => m.n_ceb.to_string(),
            "model.n_hfem" => m.n_hfem.to_string(),
            "model.mbb_split" => m.mbb_split.to_string(),
            "model.pool_kind" => m.pool_kind.to_string(),
            "model.attn_window" => m.attn_window.to_string(),
            "model.attn_heads" => m.attn_heads.to_string(),
            "model.ffn_mode" => m.ffn_mode.to_string(),
            "model.ffn_expansion" => m.ffn_expansion.to_string(),
            "model.ceb_kernel" => m.ceb_kernel.to_string(),
            "model.ca_reduction" => m.ca_reduction.to_string(),
            "model.fusion_mode" => m.fusion_mode.to_string(),
            "model.freq_sep" => m.freq_sep.to_string(),
            "model.gamma" => m.gamma.to_string(),
            "model.mu" => m.mu.to_string(),
            "train.initial_lr" => t.initial_lr.to_string(),
            "train.lr_gamma" => t.lr_gamma.to_string(),
            "train.lr_step_epochs" => t.lr_step_epochs.to_string(),
            "train.crop" => t.crop.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.max_steps" => t.max_steps.to_string(),
            "train.batch" => t.batch.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.eps" => t.eps.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.flip_rotate" => t.flip_rotate.to_string(),
            "data.height" => s.height.to_string(),
            "data.width" => s.width.to_string(),
            "data.n_gradients" => s.n_gradients.to_string(),
            "data.n_disks" => s.n_disks.to_string(),
            "data.n_edges" => s.n_edges.to_string(),
            "data.dynamic_range" => s.dynamic_range.to_string(),
            "data.drift_x" => s.motion.drift.0.to_string(),
            "data.drift_y" => s.motion.drift.1.to_string(),
            "data.exposure_times" => join(&d.exposure_times),
            "data.read_noise_sigma" => d.read_noise_sigma.to_string(),
            "data.shot_noise_scale" => d.shot_noise_scale.to_string(),
            "data.blur_taps" => d.blur_taps.to_string(),
            "data.blur_from" => d.blur_from.to_string(),
            "data.bits" => d.bits.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let (m, t, s, d) = (&mut self.model, &mut self.train, &mut self.scene, &mut self.degrade);
        match key {
            "model.base_channels" => m.base_channels = parse(key, v)?,
            "model.n_ceb" => m.n_ceb = parse(key, v)?,
            "model.n_hfem" => m.n_hfem = parse(key, v)?,
            "model.mbb_split" => m.mbb_split = parse::<MbbSplit>(key, v)?,
            "model.pool_kind" => m.pool_kind = parse::<PoolKind>(key, v)?,
            "model.attn_window" => m.attn_window = parse(key, v)?,
            "model.attn_heads" => m.attn_heads = parse(key, v)?,
            "model.ffn_mode" => m.ffn_mode = parse::<FfnMode>(key, v)?,
            "model.ffn_expansion" => m.ffn_expansion = parse(key, v)?,
            "model.ceb_kernel" => m.ceb_kernel = parse::<CebKernel>(key, v)?,
            "model.ca_reduction" => m.ca_reduction = parse(key, v)?,
            "model.fusion_mode" => m.fusion_mode = parse::<FusionMode>(key, v)?,
            "model.freq_sep" => m.freq_sep = parse(key, v)?,
            "model.gamma" => m.gamma = parse(key, v)?,
            "model.mu" => m.mu = parse(key, v)?,
            "train.initial_lr" => t.initial_lr = parse(key, v)?,
            "train.lr_gamma" => t.lr_gamma = parse(key, v)?,
            "train.lr_step_epochs" => t.lr_step_epochs = parse(key, v)?,
            "train.crop" => t.crop = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.max_steps" => t.max_steps = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.flip_rotate" => t.flip_rotate = parse(key, v)?,
            "data.height" => s.height = parse(key, v)?,
            "data.width" => s.width = parse(key, v)?,
            "data.n_gradients" => s.n_gradients = parse(key, v)?,
            "data.n_disks" => s.n_disks = parse(key, v)?,
            "data.n_edges" => s.n_edges = parse(key, v)?,
            "data.dynamic_range" => s.dynamic_range = parse(key, v)?,
            "data.drift_x" => s.motion = Motion { drift: (parse(key, v)?, s.motion.drift.1) },
            "data.drift_y" => s.motion = Motion { drift: (s.motion.drift.0, parse(key, v)?) },
            "data.exposure_times" => {
                let times = v
                    .split(',')
                    .map(|x| parse::<f64>(key, x.trim()))
                    .collect::<Result<Vec<_>, _>>()?;
                d.exposure_times = times
                    .try_into()
                    .map_err(|t: Vec<f64>| format!("{key}: expected {FRAMES} values, got {}", t.len()))?;
            }
            "data.read_noise_sigma" => d.read_noise_sigma = parse(key, v)?,
            "data.shot_noise_scale" => d.shot_noise_scale = parse(key, v)?,
            "data.blur_taps" => d.blur_taps = parse(key, v)?,
            "data.blur_from" => d.blur_from = parse(key, v)?,
            "data.bits" => d.bits = parse(key, v)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected `key = value`", n + 1))?;
            self.set(k.trim(), v.trim()).map_err(|e| format!("{origin}:{}: {e}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }
}

/// Key listing appended to `--help`.
pub fn keys_help() -> String {
    let defaults = RunConfig::default();
    let mut s = String::from("Config keys (set with --config FILE or --set KEY=VALUE; default shown):\n");
    for (k, desc) in KEYS {
        let _ = writeln!(s, "  {k} = {}    {desc}", defaults.get(k).expect("listed key"));
    }
    let _ = write!(s, "\nPresets (--preset): {}", PRESETS.join(", "));
    s
}
