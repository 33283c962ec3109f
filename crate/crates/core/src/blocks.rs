//! Building blocks of the restoration network.
//!
//! Every block comes as a pair: a `declare_*` function that registers its
//! parameters with a [`ParamBuilder`], and a forward function that reads them
//! back through a [`ParamScope`] rooted at the same prefix. Blocks with a skip
//! path reduce to the identity when all of their weights and biases are zero.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamScope};
use crate::tensor::{Conv2d, Element, PoolKind, Tensor};

/// Low- and high-frequency parts of a feature map.
#[derive(Clone, Debug)]
pub struct FreqPair<T: Element> {
    /// Pooled map at half resolution.
    pub low: Tensor<T>,
    /// Residual at full resolution.
    pub high: Tensor<T>,
}

/// Splits `f` into `low = pool(f)` and `high = f - upsample(low)`.
pub fn frequency_separate<T: Element>(f: &Tensor<T>, pool: PoolKind) -> Result<FreqPair<T>> {
    let [_, _, h, w] = f.dims4("frequency_separate")?;
    let low = f.pool2d(pool, 2, 2)?;
    let high = f.sub(&low.bilinear_upsample(h, w)?)?;
    Ok(FreqPair { low, high })
}

pub fn declare_window_attention(b: &mut ParamBuilder, channels: usize) {
    for name in ["q", "k", "v", "proj"] {
        b.conv(name, channels, channels, 1, 1);
    }
}

/// Multi-head self-attention inside non-overlapping `window x window` tiles,
/// followed by an output projection and a skip connection.
pub fn window_self_attention<T: Element>(
    x: &Tensor<T>,
    p: &ParamScope<'_, T>,
    heads: usize,
    window: usize,
) -> Result<Tensor<T>> {
    Ok(attend(x, p, heads, window)?.0)
}

/// Attention weights `[windows * heads, window², window²]` of
/// [`window_self_attention`], one row per query token.
pub fn window_attention_weights<T: Element>(
    x: &Tensor<T>,
    p: &ParamScope<'_, T>,
    heads: usize,
    window: usize,
) -> Result<Tensor<T>> {
    Ok(attend(x, p, heads, window)?.1)
}

// [B, C, H, W] -> [B * nh * nw * heads, window², C / heads]
const TO_TOKENS: [usize; 7] = [0, 3, 5, 1, 4, 6, 2];
const FROM_TOKENS: [usize; 7] = [0, 3, 6, 1, 4, 2, 5];

fn attend<T: Element>(
    x: &Tensor<T>,
    p: &ParamScope<'_, T>,
    heads: usize,
    window: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "window_self_attention";
    let [b, c, h, w] = x.dims4(OP)?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(OP, "axis 1 (channels)", format!("{c} channels not divisible by {heads} heads")));
    }
    if window == 0 || h % window != 0 {
        return Err(Error::shape(OP, "axis 2 (height)", format!("{h} not divisible by window {window}")));
    }
    if w % window != 0 {
        return Err(Error::shape(OP, "axis 3 (width)", format!("{w} not divisible by window {window}")));
    }
    let d = c / heads;
    let (nh, nw) = (h / window, w / window);
    let split = [b, heads, d, nh, window, nw, window];
    let tokens = [b * nh * nw * heads, window * window, d];
    let to_tokens = |t: Tensor<T>| t.reshape(&split)?.permute(&TO_TOKENS)?.reshape(&tokens);

    let q = to_tokens(p.conv("q", x, Conv2d::same(1))?)?;
    let k = to_tokens(p.conv("k", x, Conv2d::same(1))?)?;
    let v = to_tokens(p.conv("v", x, Conv2d::same(1))?)?;
    let scores = q.matmul(&k.transpose_last()?)?.mul_scalar(1.0 / (d as f64).sqrt());
    let weights = scores.softmax(2)?;
    let mixed = weights
        .matmul(&v)?
        .reshape(&[b, nh, nw, heads, window, window, d])?
        .permute(&FROM_TOKENS)?
        .reshape(&[b, c, h, w])?;
    let out = x.add(&p.conv("proj", &mixed, Conv2d::same(1))?)?;
    Ok((out, weights))
}

/// Branch depths of a multi-branch block. The two depths always total four
/// convolutions so that every split costs the same.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MbbSplit {
    pub a: usize,
    pub b: usize,
}

impl MbbSplit {
    pub const BUDGET: usize = 4;

    pub fn new(a: usize, b: usize) -> Result<Self> {
        if a + b != Self::BUDGET || a == 0 {
            return Err(Error::invalid(
                "multi_branch_block",
                format!("split ({a},{b}) must satisfy a + b = {} with a >= 1", Self::BUDGET),
            ));
        }
        Ok(MbbSplit { a, b })
    }
}

impl Default for MbbSplit {
    fn default() -> Self {
        MbbSplit { a: 3, b: 1 }
    }
}

impl FromStr for MbbSplit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| format!("expected `a,b`, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        MbbSplit::new(parse(a)?, parse(b)?).map_err(|e| e.to_string())
    }
}

impl fmt::Display for MbbSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.a, self.b)
    }
}

pub fn declare_multi_branch(b: &mut ParamBuilder, channels: usize, split: MbbSplit) {
    for j in 0..split.a {
        b.conv(&format!("a{j}"), channels, channels, 3, 1);
    }
    for j in 0..split.b {
        b.conv(&format!("b{j}"), channels, channels, 3, 1);
    }
}

fn conv_chain<T: Element>(x: &Tensor<T>, p: &ParamScope<'_, T>, prefix: char, n: usize) -> Result<Tensor<T>> {
    let mut y = x.clone();
    for j in 0..n {
        y = p.conv(&format!("{prefix}{j}"), &y, Conv2d::same(3))?.gelu();
    }
    Ok(y)
}

/// Two chains of 3x3 conv + GELU of depths `split.a` and `split.b`, summed
/// with a skip path. With `split.b == 0` the second branch is the identity
/// and the result is `branch_a(f) + f`.
pub fn multi_branch_block<T: Element>(f: &Tensor<T>, p: &ParamScope<'_, T>, split: MbbSplit) -> Result<Tensor<T>> {
    let split = MbbSplit::new(split.a, split.b)?;
    let a = conv_chain(f, p, 'a', split.a)?;
    if split.b == 0 {
        return a.add(f);
    }
    let b = conv_chain(f, p, 'b', split.b)?;
    a.add(&b)?.add(f)
}

pub fn declare_channel_attention(b: &mut ParamBuilder, channels: usize, reduction: usize) {
    let hidden = (channels / reduction.max(1)).max(1);
    b.conv("down", channels, hidden, 1, 1);
    b.conv("up", hidden, channels, 1, 1);
}

/// Gates each channel by `sigmoid(up(gelu(down(mean_hw(f)))))`.
pub fn channel_attention<T: Element>(f: &Tensor<T>, p: &ParamScope<'_, T>, reduction: usize) -> Result<Tensor<T>> {
    let [_, c, _, _] = f.dims4("channel_attention")?;
    if reduction == 0 || c % reduction != 0 {
        return Err(Error::shape(
            "channel_attention",
            "axis 1 (channels)",
            format!("{c} channels not divisible by reduction {reduction}"),
        ));
    }
    let pooled = f.global_avg_pool()?;
    let gate = p
        .conv("up", &p.conv("down", &pooled, Conv2d::same(1))?.gelu(), Conv2d::same(1))?
        .sigmoid();
    f.mul(&gate)
}

pub fn declare_freq_fuse(b: &mut ParamBuilder, channels: usize, reduction: usize) {
    b.conv("merge", 2 * channels, channels, 3, 1);
    b.scoped("ca", |b| declare_channel_attention(b, channels, reduction));
    b.conv("out", channels, channels, 1, 1);
}

/// `out(ca(merge(concat(upsample(low), high))))`. No skip path.
pub fn freq_fuse<T: Element>(
    high: &Tensor<T>,
    low: &Tensor<T>,
    p: &ParamScope<'_, T>,
    reduction: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "freq_fuse";
    let [hb, hc, hh, hw] = high.dims4(OP)?;
    let [lb, lc, lh, lw] = low.dims4(OP)?;
    if hb != lb || hc != lc {
        return Err(Error::shape(OP, "axes 0-1", format!("high {:?} vs low {:?}", high.shape(), low.shape())));
    }
    if 2 * lh != hh {
        return Err(Error::shape(OP, "axis 2 (height)", format!("low height {lh} is not half of {hh}")));
    }
    if 2 * lw != hw {
        return Err(Error::shape(OP, "axis 3 (width)", format!("low width {lw} is not half of {hw}")));
    }
    let up = low.bilinear_upsample(hh, hw)?;
    let merged = p.conv("merge", &Tensor::concat(&[&up, high], 1)?, Conv2d::same(3))?;
    let gated = channel_attention(&merged, &p.scope("ca"), reduction)?;
    p.conv("out", &gated, Conv2d::same(1))
}

/// Hidden width policy of the pointwise feed-forward unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FfnMode {
    /// `C -> e*C -> C`
    #[default]
    Inverted,
    /// `C -> C/e -> C`
    NormalBottleneck,
    /// `C -> C -> C`
    Flat,
}

impl FfnMode {
    pub fn hidden(self, channels: usize, expansion: usize) -> usize {
        match self {
            FfnMode::Inverted => channels * expansion,
            FfnMode::NormalBottleneck => (channels / expansion).max(1),
            FfnMode::Flat => channels,
        }
    }
}

impl FromStr for FfnMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "inverted" => Ok(FfnMode::Inverted),
            "normal_bottleneck" => Ok(FfnMode::NormalBottleneck),
            "flat" => Ok(FfnMode::Flat),
            other => Err(format!("unknown ffn mode `{other}` (expected inverted|normal_bottleneck|flat)")),
        }
    }
}

impl fmt::Display for FfnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FfnMode::Inverted => "inverted",
            FfnMode::NormalBottleneck => "normal_bottleneck",
            FfnMode::Flat => "flat",
        })
    }
}

pub fn declare_conv_ffn(b: &mut ParamBuilder, channels: usize, mode: FfnMode, expansion: usize) {
    let hidden = mode.hidden(channels, expansion.max(1));
    b.conv("expand", channels, hidden, 1, 1);
    b.conv("project", hidden, channels, 1, 1);
}

/// `f + project(gelu(expand(f)))` with pointwise convolutions.
pub fn conv_ffn<T: Element>(f: &Tensor<T>, p: &ParamScope<'_, T>) -> Result<Tensor<T>> {
    let hidden = p.conv("expand", f, Conv2d::same(1))?.gelu();
    f.add(&p.conv("project", &hidden, Conv2d::same(1))?)
}

/// Depthwise stage of the enhancement block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CebKernel {
    /// One 7x7.
    #[default]
    Dw7,
    /// Three chained 3x3.
    ThreeDw3,
    /// A 5x5 followed by a 3x3.
    Dw5Dw3,
}

impl CebKernel {
    /// Parameter names and kernel sizes of the depthwise convolutions, in order.
    pub fn stages(self) -> &'static [(&'static str, usize)] {
        match self {
            CebKernel::Dw7 => &[("dw7", 7)],
            CebKernel::ThreeDw3 => &[("dw3_0", 3), ("dw3_1", 3), ("dw3_2", 3)],
            CebKernel::Dw5Dw3 => &[("dw5", 5), ("dw3", 3)],
        }
    }
}

impl FromStr for CebKernel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dw7" => Ok(CebKernel::Dw7),
            "three_dw3" => Ok(CebKernel::ThreeDw3),
            "dw5_dw3" => Ok(CebKernel::Dw5Dw3),
            other => Err(format!("unknown kernel mode `{other}` (expected dw7|three_dw3|dw5_dw3)")),
        }
    }
}

impl fmt::Display for CebKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CebKernel::Dw7 => "dw7",
            CebKernel::ThreeDw3 => "three_dw3",
            CebKernel::Dw5Dw3 => "dw5_dw3",
        })
    }
}

pub fn declare_enhancement_block(
    b: &mut ParamBuilder,
    channels: usize,
    kernel: CebKernel,
    ffn: FfnMode,
    expansion: usize,
) {
    b.conv("pw_in", channels, channels, 1, 1);
    for &(name, k) in kernel.stages() {
        b.conv(name, channels, channels, k, channels);
    }
    b.conv("pw_out", channels, channels, 1, 1);
    b.scoped("ffn", |b| declare_conv_ffn(b, channels, ffn, expansion));
}

/// Pointwise, depthwise and pointwise convolutions, each followed by GELU,
/// then the feed-forward unit, all wrapped in a skip connection.
pub fn conv_enhancement_block<T: Element>(
    f1: &Tensor<T>,
    p: &ParamScope<'_, T>,
    kernel: CebKernel,
) -> Result<Tensor<T>> {
    let [_, c, _, _] = f1.dims4("conv_enhancement_block")?;
    let mut y = p.conv("pw_in", f1, Conv2d::same(1))?.gelu();
    for &(name, k) in kernel.stages() {
        y = p.conv(name, &y, Conv2d::depthwise(k, c))?.gelu();
    }
    y = p.conv("pw_out", &y, Conv2d::same(1))?.gelu();
    f1.add(&conv_ffn(&y, &p.scope("ffn"))?)
}
