//! Grouped 2-D convolution (cross-correlation) with direct loops.
//!
//! Each output plane is produced by exactly one task in a fixed accumulation
//! order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Stride 1 with `(k - 1) / 2` padding, which preserves extents for odd `k`.
    pub fn same(k: usize) -> Self {
        Conv2d {
            stride: 1,
            padding: (k - 1) / 2,
            groups: 1,
        }
    }

    /// Same-size depthwise convolution over `channels` channels.
    pub fn depthwise(k: usize, channels: usize) -> Self {
        Conv2d {
            groups: channels,
            ..Self::same(k)
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geometry {
    /// Output columns `ox` whose input column `ox * stride + kx - pad` is in range.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        // largest ox with ox*stride + kx - pad <= w - 1
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn row_range(&self, ky: usize) -> (usize, usize) {
        let lo = if ky >= self.pad {
            0
        } else {
            (self.pad - ky).div_ceil(self.stride)
        };
        let hi = if self.h + self.pad > ky {
            ((self.h + self.pad - ky - 1) / self.stride + 1).min(self.ho)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

impl<T: Element> Tensor<T> {
    /// Cross-correlates `[B, Cin, H, W]` with `[Cout, Cin / groups, kh, kw]`,
    /// adding an optional `[Cout]` bias.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, opts: Conv2d) -> Result<Tensor<T>> {
        let [batch, cin, h, w] = self.dims4("conv2d")?;
        let [cout, cin_g, kh, kw] = match weight.shape() {
            &[a, b, c, d] => [a, b, c, d],
            s => return Err(Error::shape("conv2d", "weight", format!("expected 4 axes, got {s:?}"))),
        };
        let Conv2d { stride, padding, groups } = opts;
        if stride == 0 || groups == 0 {
            return Err(Error::invalid("conv2d", "stride and groups must be positive"));
        }
        if cin % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                "axis 1 (input channels)",
                format!("{cin} channels not divisible by {groups} groups"),
            ));
        }
        if cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                "weight axis 0 (output channels)",
                format!("{cout} not divisible by {groups} groups"),
            ));
        }
        if cin_g != cin / groups {
            return Err(Error::shape(
                "conv2d",
                "weight axis 1 (channels per group)",
                format!("weight expects {cin_g}, input provides {}", cin / groups),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", "weight axes 2-3 (kernel)", format!("kernel {kh}x{kw} must be odd")));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                "axes 2-3 (spatial)",
                format!("{h}x{w} with padding {padding} smaller than kernel {kh}x{kw}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d", "bias", format!("expected [{cout}], got {:?}", b.shape())));
            }
        }
        let g = Geometry {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
            stride,
            pad: padding,
            cin_g,
            cout_g: cout / groups,
        };

        let data = forward(self.data(), weight.data(), bias.map(|b| b.data()), &g);

        let input = self.clone();
        let wt = weight.clone();
        let has_bias = bias.is_some();
        let backward = Box::new(move |gout: &[T], needs: &[bool]| {
            let gi = needs[0].then(|| grad_input(gout, wt.data(), &g));
            let gw = needs[1].then(|| grad_weight(gout, input.data(), &g));
            let mut grads = vec![gi, gw];
            if has_bias {
                grads.push(needs[2].then(|| grad_bias(gout, &g)));
            }
            grads
        });
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![batch, cout, g.ho, g.wo],
            data,
            "conv2d",
            parents,
            backward,
        ))
    }
}

fn forward<T: Element>(input: &[T], weight: &[T], bias: Option<&[T]>, g: &Geometry) -> Vec<T> {
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    let ksize = g.kh * g.kw;
    let mut out = vec![T::zero(); g.batch * g.cout * plane_out];
    let kernel = |(idx, plane): (usize, &mut [T])| {
        let (b, oc) = (idx / g.cout, idx % g.cout);
        let grp = oc / g.cout_g;
        if let Some(bias) = bias {
            plane.fill(bias[oc]);
        }
        for icg in 0..g.cin_g {
            let ic = grp * g.cin_g + icg;
            let src = &input[(b * g.cin + ic) * plane_in..][..plane_in];
            let wk = &weight[(oc * g.cin_g + icg) * ksize..][..ksize];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.row_range(ky);
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    let (ox0, ox1) = g.col_range(kx);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut plane[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (d, &s) in dst[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + (ox1 - ox0)]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] += wv * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    };
    let work = g.batch * g.cout * plane_out * g.cin_g * ksize;
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane_out).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(plane_out).enumerate().for_each(kernel);
    }
    out
}

fn grad_input<T: Element>(gout: &[T], weight: &[T], g: &Geometry) -> Vec<T> {
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    let ksize = g.kh * g.kw;
    let mut gin = vec![T::zero(); g.batch * g.cin * plane_in];
    let kernel = |(idx, plane): (usize, &mut [T])| {
        let (b, ic) = (idx / g.cin, idx % g.cin);
        let grp = ic / g.cin_g;
        let icg = ic % g.cin_g;
        for ocg in 0..g.cout_g {
            let oc = grp * g.cout_g + ocg;
            let go = &gout[(b * g.cout + oc) * plane_out..][..plane_out];
            let wk = &weight[(oc * g.cin_g + icg) * ksize..][..ksize];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.row_range(ky);
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    let (ox0, ox1) = g.col_range(kx);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                        let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (d, &s) in dst[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&grow[ox0..ox1]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox * g.stride + kx - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    };
    let work = g.batch * g.cout * plane_out * g.cin_g * ksize;
    if work >= PAR_THRESHOLD {
        gin.par_chunks_mut(plane_in).enumerate().for_each(kernel);
    } else {
        gin.chunks_mut(plane_in).enumerate().for_each(kernel);
    }
    gin
}

fn grad_weight<T: Element>(gout: &[T], input: &[T], g: &Geometry) -> Vec<T> {
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    let ksize = g.kh * g.kw;
    let mut gw = vec![T::zero(); g.cout * g.cin_g * ksize];
    // one task per (oc, icg) kernel slice
    let kernel = |(idx, wk): (usize, &mut [T])| {
        let (oc, icg) = (idx / g.cin_g, idx % g.cin_g);
        let ic = (oc / g.cout_g) * g.cin_g + icg;
        for ky in 0..g.kh {
            let (oy0, oy1) = g.row_range(ky);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.col_range(kx);
                let mut acc = T::zero();
                for b in 0..g.batch {
                    let go = &gout[(b * g.cout + oc) * plane_out..][..plane_out];
                    let src = &input[(b * g.cin + ic) * plane_in..][..plane_in];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (&a, &s) in grow[ox0..ox1].iter().zip(&row[ix0..ix0 + (ox1 - ox0)]) {
                                acc += a * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                acc += grow[ox] * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
                wk[ky * g.kw + kx] = acc;
            }
        }
    };
    let work = g.batch * g.cout * plane_out * g.cin_g * ksize;
    if work >= PAR_THRESHOLD {
        gw.par_chunks_mut(ksize).enumerate().for_each(kernel);
    } else {
        gw.chunks_mut(ksize).enumerate().for_each(kernel);
    }
    gw
}

fn grad_bias<T: Element>(gout: &[T], g: &Geometry) -> Vec<T> {
    let plane_out = g.ho * g.wo;
    let mut gb = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        for (oc, acc) in gb.iter_mut().enumerate() {
            let go = &gout[(b * g.cout + oc) * plane_out..][..plane_out];
            for &v in go {
                *acc += v;
            }
        }
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Direct definition of cross-correlation with zero padding.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, o: Conv2d) -> Vec<f64> {
        let [bn, cin, h, wd] = x.dims4("oracle").unwrap();
        let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * o.padding - kh) / o.stride + 1;
        let wo = (wd + 2 * o.padding - kw) / o.stride + 1;
        let cout_g = cout / o.groups;
        let mut out = Vec::new();
        for bi in 0..bn {
            for oc in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                        for icg in 0..cin_g {
                            let ic = (oc / cout_g) * cin_g + icg;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * o.stride + ky) as isize - o.padding as isize;
                                    let ix = (ox * o.stride + kx) as isize - o.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((bi * cin + ic) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((oc * cin_g + icg) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_center_and_corner() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let y = x.conv2d(&w, None, Conv2d::same(3)).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn identity_kernels() {
        let x = pseudo(&[2, 3, 5, 6], 1).cast::<f32>();
        let w = Tensor::<f32>::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let single = x.narrow(1, 0, 1).unwrap();
        assert_eq!(single.conv2d(&w, None, Conv2d::same(1)).unwrap().data(), single.data());

        let mut delta = vec![0.0f32; 3 * 9];
        for c in 0..3 {
            delta[c * 9 + 4] = 1.0;
        }
        let dw = Tensor::from_vec(&[3, 1, 3, 3], delta).unwrap();
        let y = x.conv2d(&dw, None, Conv2d::depthwise(3, 3)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_direct_oracle() {
        let cases = [
            ([2, 4, 7, 6], [6, 4, 3, 3], Conv2d::same(3)),
            ([1, 4, 8, 8], [4, 1, 7, 7], Conv2d::depthwise(7, 4)),
            ([1, 4, 9, 8], [2, 2, 3, 3], Conv2d { stride: 2, padding: 1, groups: 2 }),
            ([1, 2, 6, 5], [3, 2, 5, 3], Conv2d { stride: 1, padding: 0, groups: 1 }),
            ([1, 3, 5, 5], [3, 3, 1, 1], Conv2d::same(1)),
        ];
        for (i, (xs, ws, o)) in cases.into_iter().enumerate() {
            let x = pseudo(&xs, 10 + i as u64);
            let w = pseudo(&ws, 20 + i as u64);
            let b = pseudo(&[ws[0]], 30 + i as u64);
            let y = x.conv2d(&w, Some(&b), o).unwrap();
            let expected = conv_oracle(&x, &w, Some(&b), o);
            assert_eq!(y.numel(), expected.len());
            for (a, e) in y.data().iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12, "case {i}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn same_padding_preserves_extent() {
        for k in [1, 3, 5, 7] {
            let x = Tensor::<f32>::zeros(&[1, 2, 9, 10]);
            let w = Tensor::<f32>::zeros(&[3, 2, k, k]);
            assert_eq!(x.conv2d(&w, None, Conv2d::same(k)).unwrap().shape(), &[1, 3, 9, 10]);
        }
    }

    #[test]
    fn rejects_bad_channels() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        let err = x.conv2d(&w, None, Conv2d::same(3)).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
        let err = x.conv2d(&w, None, Conv2d::depthwise(3, 2)).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cases = [
            ([1, 4, 6, 6], [4, 4, 3, 3], Conv2d::same(3)),
            ([1, 4, 8, 8], [4, 1, 7, 7], Conv2d::depthwise(7, 4)),
            ([2, 2, 5, 6], [2, 1, 3, 3], Conv2d { stride: 2, padding: 1, groups: 2 }),
        ];
        for (i, (xs, ws, o)) in cases.into_iter().enumerate() {
            let x = pseudo(&xs, 40 + i as u64);
            let w = pseudo(&ws, 50 + i as u64);
            let b = pseudo(&[ws[0]], 60 + i as u64);
            let y_shape = x.conv2d(&w, Some(&b), o).unwrap().shape().to_vec();
            let weights = pseudo(&y_shape, 70 + i as u64);
            let ex = finite_difference_check(|t| Ok(t.conv2d(&w, Some(&b), o)?.mul(&weights)?.sum_all()), &x, 1e-5).unwrap();
            let ew = finite_difference_check(|t| Ok(x.conv2d(t, Some(&b), o)?.mul(&weights)?.sum_all()), &w, 1e-5).unwrap();
            let eb = finite_difference_check(|t| Ok(x.conv2d(&w, Some(t), o)?.mul(&weights)?.sum_all()), &b, 1e-5).unwrap();
            assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6, "case {i}: {ex} {ew} {eb}");
        }
    }

    #[test]
    fn parallel_path_is_bit_identical_to_serial_oracle_order() {
        // large enough to take the threaded path
        let x = pseudo(&[2, 8, 32, 32], 3).cast::<f32>();
        let w = pseudo(&[8, 8, 3, 3], 4).cast::<f32>();
        let a = x.conv2d(&w, None, Conv2d::same(3)).unwrap();
        let b = x.conv2d(&w, None, Conv2d::same(3)).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
