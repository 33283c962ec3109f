//! Pooling, bilinear resampling and flow-driven backward warping.

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolKind {
    #[default]
    Avg,
    Max,
}

impl std::str::FromStr for PoolKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "avg" => Ok(PoolKind::Avg),
            "max" => Ok(PoolKind::Max),
            other => Err(format!("unknown pool kind `{other}` (expected avg|max)")),
        }
    }
}

impl std::fmt::Display for PoolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolKind::Avg => "avg",
            PoolKind::Max => "max",
        })
    }
}

/// One output coordinate of a linear resampling along an axis: the two
/// neighbouring source indices and the weight of the second.
#[derive(Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

fn clamped_tap<T: Element>(pos: f64, extent: usize) -> Tap<T> {
    let max = (extent - 1) as f64;
    let p = pos.clamp(0.0, max);
    let i0 = (p.floor() as usize).min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    Tap {
        i0,
        i1,
        frac: T::lit(p - i0 as f64),
    }
}

/// `a + t (b - a)`: exact at `t = 0` and for `a == b`.
#[inline]
fn lerp<T: Element>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

fn check_pool(op: &'static str, shape: [usize; 4], k: usize, stride: usize) -> Result<(usize, usize)> {
    let [_, _, h, w] = shape;
    if k == 0 || stride == 0 {
        return Err(Error::invalid(op, "window and stride must be positive"));
    }
    if h % stride != 0 {
        return Err(Error::shape(op, "axis 2 (height)", format!("{h} not divisible by stride {stride}")));
    }
    if w % stride != 0 {
        return Err(Error::shape(op, "axis 3 (width)", format!("{w} not divisible by stride {stride}")));
    }
    if k > h || k > w {
        return Err(Error::shape(op, "axes 2-3 (spatial)", format!("window {k} larger than {h}x{w}")));
    }
    Ok(((h - k) / stride + 1, (w - k) / stride + 1))
}

impl<T: Element> Tensor<T> {
    /// Mean over `k x k` windows. Each window is summed row by row and the
    /// row sums are then added, so a constant input pools to itself exactly
    /// for `k = 2`.
    pub fn avg_pool2d(&self, k: usize, stride: usize) -> Result<Tensor<T>> {
        let shape = self.dims4("avg_pool2d")?;
        let [b, c, h, w] = shape;
        let (ho, wo) = check_pool("avg_pool2d", shape, k, stride)?;
        let inv = T::lit(1.0 / (k * k) as f64);
        let src = self.data();
        let mut data = Vec::with_capacity(b * c * ho * wo);
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut total = T::zero();
                    for ky in 0..k {
                        let row = &plane[(oy * stride + ky) * w + ox * stride..][..k];
                        let mut rs = T::zero();
                        for &v in row {
                            rs += v;
                        }
                        total += rs;
                    }
                    data.push(total * inv);
                }
            }
        }
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let mut out = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = g[(p * ho + oy) * wo + ox] * inv;
                        for ky in 0..k {
                            let base = p * h * w + (oy * stride + ky) * w + ox * stride;
                            for o in &mut out[base..base + k] {
                                *o += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(out)]
        });
        Ok(Tensor::from_op(vec![b, c, ho, wo], data, "avg_pool2d", vec![self.clone()], backward))
    }

    /// Max over `k x k` windows. The gradient goes to the first maximal
    /// element in row-major window order.
    pub fn max_pool2d(&self, k: usize, stride: usize) -> Result<Tensor<T>> {
        let shape = self.dims4("max_pool2d")?;
        let [b, c, h, w] = shape;
        let (ho, wo) = check_pool("max_pool2d", shape, k, stride)?;
        let src = self.data();
        let mut data = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for p in 0..b * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = p * h * w + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    data.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let n = self.numel();
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let mut out = vec![T::zero(); n];
            for (gv, &idx) in g.iter().zip(&argmax) {
                out[idx] += *gv;
            }
            vec![Some(out)]
        });
        Ok(Tensor::from_op(vec![b, c, ho, wo], data, "max_pool2d", vec![self.clone()], backward))
    }

    pub fn pool2d(&self, kind: PoolKind, k: usize, stride: usize) -> Result<Tensor<T>> {
        match kind {
            PoolKind::Avg => self.avg_pool2d(k, stride),
            PoolKind::Max => self.max_pool2d(k, stride),
        }
    }

    /// Bilinear resize to `out_h x out_w` with half-pixel centres
    /// (source coordinate `(i + 0.5) * in / out - 0.5`) and edge clamping.
    pub fn bilinear_upsample(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let [b, c, h, w] = self.dims4("bilinear_upsample")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_upsample", "target size must be non-zero"));
        }
        if out_h < h {
            return Err(Error::shape("bilinear_upsample", "axis 2 (height)", format!("target {out_h} < source {h}")));
        }
        if out_w < w {
            return Err(Error::shape("bilinear_upsample", "axis 3 (width)", format!("target {out_w} < source {w}")));
        }
        let taps = |n_out: usize, n_in: usize| -> Vec<Tap<T>> {
            let scale = n_in as f64 / n_out as f64;
            (0..n_out)
                .map(|o| clamped_tap((o as f64 + 0.5) * scale - 0.5, n_in))
                .collect()
        };
        let ty = taps(out_h, h);
        let tx = taps(out_w, w);
        let src = self.data();
        let mut data = Vec::with_capacity(b * c * out_h * out_w);
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in &ty {
                for x in &tx {
                    let top = lerp(plane[y.i0 * w + x.i0], plane[y.i0 * w + x.i1], x.frac);
                    let bot = lerp(plane[y.i1 * w + x.i0], plane[y.i1 * w + x.i1], x.frac);
                    data.push(lerp(top, bot, y.frac));
                }
            }
        }
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let mut out = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let plane = &mut out[p * h * w..(p + 1) * h * w];
                for (yi, y) in ty.iter().enumerate() {
                    for (xi, x) in tx.iter().enumerate() {
                        let gv = g[(p * out_h + yi) * out_w + xi];
                        scatter_bilinear(plane, w, y, x, gv);
                    }
                }
            }
            vec![Some(out)]
        });
        Ok(Tensor::from_op(
            vec![b, c, out_h, out_w],
            data,
            "bilinear_upsample",
            vec![self.clone()],
            backward,
        ))
    }

    /// Backward warp: output pixel `(x, y)` samples this tensor bilinearly at
    /// `(x + dx, y + dy)`, clamped to the image. `flow` is `[B, 2, H, W]` with
    /// channel 0 = dx and channel 1 = dy. Differentiable with respect to the
    /// warped tensor only; the flow is treated as a constant.
    pub fn warp(&self, flow: &Tensor<T>) -> Result<Tensor<T>> {
        let [b, c, h, w] = self.dims4("warp")?;
        let expected = [b, 2, h, w];
        if flow.shape() != expected {
            return Err(Error::shape(
                "warp",
                "flow",
                format!("expected {expected:?}, got {:?}", flow.shape()),
            ));
        }
        let fl = flow.data();
        let mut taps = Vec::with_capacity(b * h * w);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let dx = fl[((bi * 2) * h + y) * w + x].as_f64();
                    let dy = fl[((bi * 2 + 1) * h + y) * w + x].as_f64();
                    taps.push((clamped_tap::<T>(y as f64 + dy, h), clamped_tap::<T>(x as f64 + dx, w)));
                }
            }
        }
        let src = self.data();
        let mut data = Vec::with_capacity(self.numel());
        for bi in 0..b {
            let tb = &taps[bi * h * w..(bi + 1) * h * w];
            for ch in 0..c {
                let plane = &src[(bi * c + ch) * h * w..][..h * w];
                for (ty, tx) in tb {
                    let top = lerp(plane[ty.i0 * w + tx.i0], plane[ty.i0 * w + tx.i1], tx.frac);
                    let bot = lerp(plane[ty.i1 * w + tx.i0], plane[ty.i1 * w + tx.i1], tx.frac);
                    data.push(lerp(top, bot, ty.frac));
                }
            }
        }
        let backward = Box::new(move |g: &[T], needs: &[bool]| {
            let mut out = vec![T::zero(); b * c * h * w];
            for bi in 0..b {
                let tb = &taps[bi * h * w..(bi + 1) * h * w];
                for ch in 0..c {
                    let off = (bi * c + ch) * h * w;
                    let plane = &mut out[off..off + h * w];
                    for (i, (ty, tx)) in tb.iter().enumerate() {
                        scatter_bilinear(plane, w, ty, tx, g[off + i]);
                    }
                }
            }
            vec![Some(out), needs[1].then(|| vec![T::zero(); 2 * b * h * w])]
        });
        Ok(Tensor::from_op(
            vec![b, c, h, w],
            data,
            "warp",
            vec![self.clone(), flow.clone()],
            backward,
        ))
    }
}

fn scatter_bilinear<T: Element>(plane: &mut [T], w: usize, y: &Tap<T>, x: &Tap<T>, g: T) {
    let one = T::one();
    let (wy0, wy1) = (one - y.frac, y.frac);
    let (wx0, wx1) = (one - x.frac, x.frac);
    plane[y.i0 * w + x.i0] += g * wy0 * wx0;
    plane[y.i0 * w + x.i1] += g * wy0 * wx1;
    plane[y.i1 * w + x.i0] += g * wy1 * wx0;
    plane[y.i1 * w + x.i1] += g * wy1 * wx1;
}
