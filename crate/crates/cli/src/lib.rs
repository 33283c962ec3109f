//! Command implementations behind the `crnet` binary.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use crnet_core::io::{write_tensor_file, Archive};
use crnet_core::model::{
    build_ablation_variant, count_params, forward, param_breakdown, AblationVariant, ExposureStack, FlowField, FRAMES,
    RAW_CHANNELS,
};
use crnet_core::objective::{MetricReport, CSV_HEADER};
use crnet_core::synth::{generate_dataset, read_dataset, write_dataset};
use crnet_core::tensor::Tensor;
use crnet_core::train::{self, evaluate, load_params, TrainState, CHECKPOINT_FILE};
use crnet_core::Error;

use config::RunConfig;

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "crnet", version, about = "Multi-exposure raw burst restoration and HDR reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Start from a named preset before applying the file and overrides.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on a dataset and write a checkpoint, loss history and config.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `OUT/checkpoint.crt1a`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print per-sample metrics as CSV, followed by their mean.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Reconstruct one stack; writes CRT1 plus one PFM per raw plane.
    Infer {
        /// Sample archive holding frame0..frame4 and exposure_times.
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip flow estimation and treat the frames as aligned.
        #[arg(long)]
        zero_flow: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate a named ablation variant (or `all`).
    Ablate {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the parameter count and a per-module breakdown.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Failure with the exit code and greppable class it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub class: String,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            class: "usage".into(),
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument { .. } => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        };
        Failure {
            code,
            class: e.class().to_string(),
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

impl ConfigArgs {
    /// Preset, then file, then overrides. Without an explicit file,
    /// `fallback` is used when it exists.
    pub fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::preset(self.preset.as_deref().unwrap_or("default")).map_err(Failure::usage)?;
        match (&self.config, fallback) {
            (Some(file), _) => cfg.apply_file(file).map_err(Failure::usage)?,
            (None, Some(f)) if f.exists() => cfg.apply_file(f).map_err(Failure::usage)?,
            _ => {}
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(Failure::usage)?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Outcome {
    match cli.command {
        Command::Gen { out: dir, count, seed, force, cfg } => cmd_gen(&dir, count, seed, force, &cfg.resolve(None)?, out),
        Command::Train { data, out: dir, resume, cfg } => cmd_train(&data, &dir, resume, &cfg, out),
        Command::Eval { data, ckpt, cfg } => {
            let rc = cfg.resolve(sibling_config(&ckpt).as_deref())?;
            cmd_eval(&data, &ckpt, &rc, out)
        }
        Command::Infer { stack, ckpt, out: path, zero_flow, cfg } => {
            let rc = cfg.resolve(sibling_config(&ckpt).as_deref())?;
            cmd_infer(&stack, &ckpt, &path, zero_flow, &rc, out)
        }
        Command::Ablate { variant, data, out: dir, cfg } => cmd_ablate(&variant, &data, &dir, &cfg.resolve(None)?, out),
        Command::Params { cfg } => cmd_params(&cfg.resolve(None)?, out),
    }
}

fn sibling_config(ckpt: &Path) -> Option<PathBuf> {
    ckpt.parent().map(|d| d.join(CONFIG_FILE))
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> Outcome {
    out.write_all(text.as_bytes()).map_err(|e| Failure {
        code: 3,
        class: "io".into(),
        message: format!("writing output: {e}"),
    })
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

pub fn cmd_gen(dir: &Path, count: usize, seed: u64, force: bool, rc: &RunConfig, out: &mut dyn std::io::Write) -> Outcome {
    if count == 0 {
        return Err(Failure::usage("--count must be at least 1"));
    }
    if dir.exists() && !force {
        let non_empty = fs::read_dir(dir).map_err(|e| io_failure(dir, e))?.next().is_some();
        if non_empty {
            return Err(Failure::usage(format!("{} is not empty (use --force to write anyway)", dir.display())));
        }
    }
    rc.scene.validate()?;
    rc.degrade.validate()?;
    let samples = generate_dataset(count, seed, &rc.scene, &rc.degrade)?;
    write_dataset(&samples, dir)?;
    let mut text = String::new();
    for s in &samples {
        let g = s.gt.data();
        let mean = g.iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64;
        let peak = g.iter().cloned().fold(0.0f32, f32::max);
        let (h, w) = s.stack.extent();
        let _ = writeln!(text, "{} {h}x{w} gt_mean={mean:.4} gt_max={peak:.4}", s.id);
    }
    let _ = writeln!(text, "wrote {count} samples to {}", dir.display());
    emit(out, &text)
}

pub fn cmd_train(data: &Path, dir: &Path, resume: bool, args: &ConfigArgs, out: &mut dyn std::io::Write) -> Outcome {
    let fallback = if resume { Some(dir.join(CONFIG_FILE)) } else { None };
    let rc = args.resolve(fallback.as_deref())?;
    let dataset = read_dataset(data)?;
    let start = if resume {
        Some(TrainState::load(&dir.join(CHECKPOINT_FILE), &rc.model)?)
    } else {
        None
    };
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, rc.to_text()).map_err(|e| io_failure(&cfg_path, e))?;
    let every = (rc.train.max_steps / 20).max(1);
    let mut log = std::io::stderr();
    let outcome = train::train(&dataset, &rc.model, &rc.train, start, Some(dir), |r| {
        if r.step % every == 0 {
            let _ = writeln!(log, "step {} epoch {} lr {:e} loss {:.6}", r.step, r.epoch, r.lr, r.loss);
        }
    })?;
    let last = outcome.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    emit(
        out,
        &format!(
            "trained {} steps, final loss {last:.6}, checkpoint {}\n",
            outcome.state.step,
            dir.join(CHECKPOINT_FILE).display()
        ),
    )
}

fn metrics_csv(rows: &[(String, MetricReport)], mean: &MetricReport) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for (id, r) in rows {
        s.push_str(&r.csv_row(id));
        s.push('\n');
    }
    s.push_str(&mean.csv_row("mean"));
    s.push('\n');
    s
}

pub fn cmd_eval(data: &Path, ckpt: &Path, rc: &RunConfig, out: &mut dyn std::io::Write) -> Outcome {
    let params = load_params(ckpt, &rc.model)?;
    let dataset = read_dataset(data)?;
    let (rows, mean) = evaluate(&dataset, &params, &rc.model)?;
    emit(out, &metrics_csv(&rows, &mean))
}

/// Grayscale little-endian PFM, rows stored bottom to top.
pub fn write_pfm(path: &Path, width: usize, height: usize, plane: &[f32]) -> Result<(), Failure> {
    let mut bytes = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        for v in &plane[y * width..(y + 1) * width] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

/// Frames and exposure times from an archive; `gt` is optional here.
fn read_stack(archive: &Archive, file: &Path) -> Result<ExposureStack<f32>, Failure> {
    let missing = |name: String| Error::Format {
        file: file.to_path_buf(),
        offset: 0,
        detail: format!("missing entry `{name}`"),
    };
    let frames = (0..FRAMES)
        .map(|i| {
            let key = format!("frame{i}");
            archive.get(&key).map(|d| d.to_tensor::<f32>()).ok_or_else(|| missing(key))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let times = archive
        .get("exposure_times")
        .ok_or_else(|| missing("exposure_times".into()))?
        .to_f64_vec();
    Ok(ExposureStack::new(frames, times)?)
}

pub fn cmd_infer(stack: &Path, ckpt: &Path, dest: &Path, zero_flow: bool, rc: &RunConfig, out: &mut dyn std::io::Write) -> Outcome {
    let params = train::detached(&load_params(ckpt, &rc.model)?);
    let archive = Archive::read(stack)?;
    let input = read_stack(&archive, stack)?;
    let (h, w) = input.extent();
    let flows = zero_flow.then(|| vec![FlowField::zeros(h, w); FRAMES - 1]);
    let pred: Tensor<f32> = forward(&input, &params, &rc.model, flows.as_deref())?;
    write_tensor_file(dest, &pred)?;
    let mut text = format!("wrote {}\n", dest.display());
    let stem = dest.with_extension("");
    for c in 0..RAW_CHANNELS {
        let path = PathBuf::from(format!("{}_c{c}.pfm", stem.display()));
        write_pfm(&path, w, h, &pred.data()[c * h * w..(c + 1) * h * w])?;
        let _ = writeln!(text, "wrote {}", path.display());
    }
    if let Some(gt) = archive.get("gt") {
        let m = MetricReport::compute(&pred, &gt.to_tensor::<f32>(), rc.model.mu)?;
        text.push_str(&format!("{m}\n"));
    }
    emit(out, &text)
}

pub fn cmd_ablate(variant: &str, data: &Path, dir: &Path, rc: &RunConfig, out: &mut dyn std::io::Write) -> Outcome {
    let variants: Vec<AblationVariant> = if variant == "all" {
        AblationVariant::ALL.to_vec()
    } else {
        vec![variant.parse().map_err(Failure::usage)?]
    };
    let dataset = read_dataset(data)?;
    let mut text = format!("variant,params,final_loss,{}\n", &CSV_HEADER["sample_id,".len()..]);
    for v in variants {
        let (model, params) = build_ablation_variant::<f32>(v, &rc.model, rc.train.seed);
        let start = TrainState {
            optim: train::OptimState::new(&params, &rc.train),
            params,
            step: 0,
        };
        let vdir = dir.join(v.name());
        fs::create_dir_all(&vdir).map_err(|e| io_failure(&vdir, e))?;
        let vrc = RunConfig { model: model.clone(), ..rc.clone() };
        let cfg_path = vdir.join(CONFIG_FILE);
        fs::write(&cfg_path, vrc.to_text()).map_err(|e| io_failure(&cfg_path, e))?;
        let outcome = train::train(&dataset, &model, &rc.train, Some(start), Some(&vdir), |_| {})?;
        let (_, mean) = evaluate(&dataset, &outcome.state.params, &model)?;
        let last = outcome.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
        let row = mean.csv_row(v.name());
        let metrics = row.split_once(',').map(|x| x.1).unwrap_or_default();
        let _ = writeln!(text, "{},{},{last:.6},{metrics}", v.name(), count_params(&model));
    }
    emit(out, &text)
}

pub fn cmd_params(rc: &RunConfig, out: &mut dyn std::io::Write) -> Outcome {
    let mut text = format!("total {}\n", count_params(&rc.model));
    for (module, n) in param_breakdown(&rc.model) {
        let _ = writeln!(text, "  {module} {n}");
    }
    emit(out, &text)
}
