//! The full network: preprocessing, alignment, frequency enhancement modules
//! and the fusion head.

mod ablation;
mod flow;
mod preprocess;
pub use ablation::{build_ablation_variant, AblationVariant};
pub use flow::{estimate_flow, warp_by_flow, FlowField, DEFAULT_BLOCK, DEFAULT_RADIUS};
pub use preprocess::{preprocess, ExposureStack, PreprocessedInputs, FRAMES, RAW_CHANNELS};

use std::fmt;
use std::str::FromStr;

use crate::blocks::{self, CebKernel, FfnMode, MbbSplit};
use crate::error::{Error, Result};
use crate::params::{Init, ModelParams, ParamBuilder, ParamScope, ParamSpec};
use crate::tensor::{Conv2d, Element, PoolKind, Tensor};

/// How the five aligned frames enter the enhancement modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// All frames concatenated and reduced in one step.
    #[default]
    Joint,
    /// Frames folded in one at a time into a running state that passes
    /// through the enhancement modules after every frame.
    Recurrent,
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "joint" => Ok(FusionMode::Joint),
            "recurrent" => Ok(FusionMode::Recurrent),
            other => Err(format!("unknown fusion mode `{other}` (expected joint|recurrent)")),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Joint => "joint",
            FusionMode::Recurrent => "recurrent",
        })
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CRNetConfig {
    pub base_channels: usize,
    /// Enhancement blocks per module.
    pub n_ceb: usize,
    pub n_hfem: usize,
    pub mbb_split: MbbSplit,
    pub pool_kind: PoolKind,
    pub attn_window: usize,
    pub attn_heads: usize,
    pub ffn_mode: FfnMode,
    pub ffn_expansion: usize,
    pub ceb_kernel: CebKernel,
    pub ca_reduction: usize,
    pub fusion_mode: FusionMode,
    /// When false the high branch sees the unseparated map and the low
    /// branch its pooled copy.
    pub freq_sep: bool,
    pub gamma: f64,
    pub mu: f64,
}

impl Default for CRNetConfig {
    fn default() -> Self {
        CRNetConfig {
            base_channels: 64,
            n_ceb: 10,
            n_hfem: 3,
            mbb_split: MbbSplit::default(),
            pool_kind: PoolKind::Avg,
            attn_window: 8,
            attn_heads: 4,
            ffn_mode: FfnMode::Inverted,
            ffn_expansion: 4,
            ceb_kernel: CebKernel::Dw7,
            ca_reduction: 4,
            fusion_mode: FusionMode::Joint,
            freq_sep: true,
            gamma: 1.0 / 2.2,
            mu: crate::objective::DEFAULT_MU,
        }
    }
}

impl CRNetConfig {
    /// Small network used for laptop-scale training runs.
    pub fn desk() -> Self {
        CRNetConfig {
            base_channels: 8,
            n_ceb: 2,
            n_hfem: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("model_config", detail));
        let counts = [
            ("base_channels", self.base_channels),
            ("n_ceb", self.n_ceb),
            ("n_hfem", self.n_hfem),
            ("attn_window", self.attn_window),
            ("attn_heads", self.attn_heads),
            ("ffn_expansion", self.ffn_expansion),
            ("ca_reduction", self.ca_reduction),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{k} must be at least 1"));
        }
        MbbSplit::new(self.mbb_split.a, self.mbb_split.b)?;
        if self.base_channels % self.attn_heads != 0 {
            return bad(format!(
                "base_channels {} not divisible by attn_heads {}",
                self.base_channels, self.attn_heads
            ));
        }
        if self.base_channels % self.ca_reduction != 0 {
            return bad(format!(
                "base_channels {} not divisible by ca_reduction {}",
                self.base_channels, self.ca_reduction
            ));
        }
        if !(self.gamma > 0.0) || !(self.mu > 0.0) {
            return bad(format!("gamma {} and mu {} must be positive", self.gamma, self.mu));
        }
        Ok(())
    }

    /// Checks that an `h x w` input fits the pooling and attention windows.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let need = if self.attn_window % 2 == 0 { self.attn_window } else { 2 * self.attn_window };
        for (axis, n) in [("axis 1 (height)", h), ("axis 2 (width)", w)] {
            if n == 0 || n % need != 0 {
                return Err(Error::shape(
                    "forward",
                    axis,
                    format!("extent {n} must be a multiple of {need} (pooling and attention window)"),
                ));
            }
        }
        Ok(())
    }
}

fn declare_hfem(b: &mut ParamBuilder, cfg: &CRNetConfig) {
    let c = cfg.base_channels;
    b.scoped("attn", |b| blocks::declare_window_attention(b, c));
    b.scoped("mbb_h", |b| blocks::declare_multi_branch(b, c, cfg.mbb_split));
    for j in 0..3 {
        b.scoped(&format!("mbb_l{j}"), |b| blocks::declare_multi_branch(b, c, cfg.mbb_split));
    }
    b.scoped("fuse", |b| blocks::declare_freq_fuse(b, c, cfg.ca_reduction));
    for j in 0..cfg.n_ceb {
        b.scoped(&format!("ceb{j}"), |b| {
            blocks::declare_enhancement_block(b, c, cfg.ceb_kernel, cfg.ffn_mode, cfg.ffn_expansion)
        });
    }
}

/// Every learnable tensor of the network, in a fixed order. The fusion mode
/// and frequency separation switch do not change the key set.
pub fn param_specs(cfg: &CRNetConfig) -> Vec<ParamSpec> {
    let c = cfg.base_channels;
    let mut b = ParamBuilder::new();
    b.scoped("align", |b| {
        b.conv("shallow", 2 * RAW_CHANNELS, c, 3, 1);
        b.conv("reduce", FRAMES * c, c, 1, 1);
    });
    for k in 0..cfg.n_hfem {
        b.scoped(&format!("hfem{k}"), |b| declare_hfem(b, cfg));
    }
    b.scoped("fusion", |b| {
        b.conv("ref", c, c, 3, 1);
        b.conv("merge0", (cfg.n_hfem + 1) * c, c, 3, 1);
        b.conv("merge1", c, c, 3, 1);
    });
    b.scoped("head", |b| {
        b.declare("weight", &[RAW_CHANNELS, c, 3, 3], Init::FanInUniform { fan_in: c * 9 });
        // starts every output plane above the clamp so none begins dead
        b.declare("bias", &[RAW_CHANNELS], Init::Constant(HEAD_BIAS_INIT));
    });
    b.finish()
}

/// Initial value of the output bias.
pub const HEAD_BIAS_INIT: f64 = 0.5;

/// Learnable scalars of the default configuration.
pub const DEFAULT_PARAM_COUNT: usize = 3_649_844;

/// Total learnable scalars for `cfg`.
pub fn count_params(cfg: &CRNetConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Learnable scalars grouped by top-level module, in declaration order.
pub fn param_breakdown(cfg: &CRNetConfig) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for s in param_specs(cfg) {
        let module = s.path.split('.').next().unwrap_or_default().to_string();
        match out.last_mut() {
            Some((m, n)) if *m == module => *n += s.numel(),
            _ => out.push((module, s.numel())),
        }
    }
    out
}

/// One frequency enhancement module on `[B, C, H, W]`.
pub fn hfem<T: Element>(f: &Tensor<T>, p: &ParamScope<'_, T>, cfg: &CRNetConfig) -> Result<Tensor<T>> {
    let (high, low) = if cfg.freq_sep {
        let pair = blocks::frequency_separate(f, cfg.pool_kind)?;
        (pair.high, pair.low)
    } else {
        (f.clone(), f.pool2d(cfg.pool_kind, 2, 2)?)
    };
    let h1 = blocks::window_self_attention(&high, &p.scope("attn"), cfg.attn_heads, cfg.attn_window)?;
    let h = blocks::multi_branch_block(&h1, &p.scope("mbb_h"), cfg.mbb_split)?;
    let mut l = low;
    for j in 0..3 {
        l = blocks::multi_branch_block(&l, &p.scope(&format!("mbb_l{j}")), cfg.mbb_split)?;
    }
    let mut y = blocks::freq_fuse(&h, &l, &p.scope("fuse"), cfg.ca_reduction)?;
    for j in 0..cfg.n_ceb {
        y = blocks::conv_enhancement_block(&y, &p.scope(&format!("ceb{j}")), cfg.ceb_kernel)?;
    }
    Ok(y)
}

fn hfem_chain<T: Element>(f: &Tensor<T>, params: &ModelParams<T>, cfg: &CRNetConfig) -> Result<Vec<Tensor<T>>> {
    let mut outs = Vec::with_capacity(cfg.n_hfem);
    let mut x = f.clone();
    for k in 0..cfg.n_hfem {
        x = hfem(&x, &params.scope(&format!("hfem{k}")), cfg)?;
        outs.push(x.clone());
    }
    Ok(outs)
}

/// Gamma-mapped planes of a preprocessed input, averaged into one plane.
fn matching_plane<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let (h, w) = (s[1], s[2]);
    let d = &input.data()[RAW_CHANNELS * h * w..];
    let inv = T::lit(1.0 / RAW_CHANNELS as f64);
    let data = (0..h * w)
        .map(|i| (0..RAW_CHANNELS).fold(T::zero(), |acc, c| acc + d[c * h * w + i]) * inv)
        .collect();
    Tensor::from_vec(&[h, w], data).expect("plane shape")
}

/// Flows for frames 2..5 estimated against the reference from the
/// gamma-mapped halves of the preprocessed inputs.
pub fn estimate_stack_flows<T: Element>(pre: &PreprocessedInputs<T>) -> Result<Vec<FlowField>> {
    let reference = matching_plane(&pre.inputs[0]);
    pre.inputs[1..]
        .iter()
        .map(|i| estimate_flow(&reference, &matching_plane(i), DEFAULT_BLOCK, DEFAULT_RADIUS))
        .collect()
}

/// Runs the network on a batch of stacks sharing one extent and returns
/// `[B, RAW_CHANNELS, H, W]`. `flows[b]` holds the fields for frames 2..5
/// of sample `b`; when absent they are estimated by block matching.
pub fn forward_batch<T: Element>(
    stacks: &[ExposureStack<T>],
    params: &ModelParams<T>,
    cfg: &CRNetConfig,
    flows: Option<&[Vec<FlowField>]>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let first = stacks.first().ok_or_else(|| Error::invalid("forward", "empty batch"))?;
    let (h, w) = first.extent();
    cfg.check_extent(h, w)?;
    if let Some(i) = stacks.iter().position(|s| s.extent() != (h, w)) {
        return Err(Error::shape("forward", "batch", format!("sample {i} is {:?}, sample 0 is {:?}", stacks[i].extent(), (h, w))));
    }
    if let Some(f) = flows {
        if f.len() != stacks.len() || f.iter().any(|v| v.len() != FRAMES - 1) {
            return Err(Error::invalid(
                "forward",
                format!("need {} flow fields per sample for {} samples", FRAMES - 1, stacks.len()),
            ));
        }
    }
    let pre = stacks
        .iter()
        .map(|s| preprocess(s, cfg.gamma))
        .collect::<Result<Vec<_>>>()?;
    let estimated;
    let flows: &[Vec<FlowField>] = match flows {
        Some(f) => f,
        None => {
            estimated = pre.iter().map(estimate_stack_flows).collect::<Result<Vec<_>>>()?;
            &estimated
        }
    };

    let c = cfg.base_channels;
    let bsz = stacks.len();
    let align = params.scope("align");
    let mut feats = Vec::with_capacity(FRAMES);
    for i in 0..FRAMES {
        let per_sample: Vec<&Tensor<T>> = pre.iter().map(|p| &p.inputs[i]).collect();
        let x = Tensor::concat(&per_sample, 0)?.reshape(&[bsz, 2 * RAW_CHANNELS, h, w])?;
        let s = align.conv("shallow", &x, Conv2d::same(3))?;
        feats.push(if i == 0 {
            s
        } else {
            let fields: Vec<&FlowField> = flows.iter().map(|f| &f[i - 1]).collect();
            s.warp(&FlowField::batch_tensor(&fields)?)?
        });
    }

    let outs = match cfg.fusion_mode {
        FusionMode::Joint => {
            let refs: Vec<&Tensor<T>> = feats.iter().collect();
            let z = align.conv("reduce", &Tensor::concat(&refs, 1)?, Conv2d::same(1))?;
            hfem_chain(&z, params, cfg)?
        }
        FusionMode::Recurrent => {
            let weight = align.get("reduce.weight")?;
            let bias = align.get("reduce.bias")?;
            let mut state: Option<Tensor<T>> = None;
            let mut outs = Vec::new();
            for (t, f) in feats.iter().enumerate() {
                let slice = weight.narrow(1, t * c, c)?;
                let step = f.conv2d(&slice, (t == 0).then_some(bias), Conv2d::same(1))?;
                let z = match &state {
                    Some(hs) => hs.add(&step)?,
                    None => step,
                };
                outs = hfem_chain(&z, params, cfg)?;
                state = outs.last().cloned();
            }
            outs
        }
    };

    let fusion = params.scope("fusion");
    let reference = fusion.conv("ref", &feats[0], Conv2d::same(3))?.gelu();
    let mut parts = vec![&reference];
    parts.extend(outs.iter());
    let merged = fusion.conv("merge0", &Tensor::concat(&parts, 1)?, Conv2d::same(3))?.gelu();
    let merged = fusion.conv("merge1", &merged, Conv2d::same(3))?.gelu();
    Ok(params.root().conv("head", &merged, Conv2d::same(3))?.clamp_min(0.0))
}

/// Single-sample forward returning `[RAW_CHANNELS, H, W]`.
pub fn forward<T: Element>(
    stack: &ExposureStack<T>,
    params: &ModelParams<T>,
    cfg: &CRNetConfig,
    flows: Option<&[FlowField]>,
) -> Result<Tensor<T>> {
    let (h, w) = stack.extent();
    let owned = flows.map(|f| vec![f.to_vec()]);
    let y = forward_batch(std::slice::from_ref(stack), params, cfg, owned.as_deref())?;
    y.reshape(&[RAW_CHANNELS, h, w])
}
