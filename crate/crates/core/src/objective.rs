//! Tone mapping, the training loss and image quality metrics.
//!
//! The tone curve is `T(x) = ln(1 + mu x) / ln(1 + mu)`. Any log base gives
//! the same ratio; the natural log is used throughout.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_MU: f64 = 5000.0;

/// SSIM window extent.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Differentiable mu-law tone mapping. Inputs are expected to be
/// non-negative; clamping is the caller's job (see [`mu_law_checked`]).
pub fn mu_law<T: Element>(x: &Tensor<T>, mu: f64) -> Tensor<T> {
    let denom = T::lit(mu).ln_1p();
    x.mul_scalar(mu).ln_1p().div_by(denom)
}

/// [`mu_law`] that rejects negative inputs and a non-positive `mu`.
pub fn mu_law_checked<T: Element>(x: &Tensor<T>, mu: f64) -> Result<Tensor<T>> {
    if !(mu > 0.0) {
        return Err(Error::invalid("mu_law", format!("mu must be positive, got {mu}")));
    }
    if let Some(i) = x.data().iter().position(|&v| v < T::zero()) {
        return Err(Error::invalid(
            "mu_law",
            format!("negative input {} at element {i}", x.data()[i]),
        ));
    }
    Ok(mu_law(x, mu))
}

fn tone_map_f64(v: f64, mu: f64) -> f64 {
    (mu * v).ln_1p() / mu.ln_1p()
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            "operands",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Mean absolute difference between the tone-mapped prediction and target.
pub fn l1_tonemapped_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, mu: f64) -> Result<Tensor<T>> {
    same_shape("l1_tonemapped_loss", pred, target)?;
    Ok(mu_law(pred, mu).sub(&mu_law(target, mu))?.abs().mean_all())
}

/// Peak signal-to-noise ratio in dB. Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let mse = mse(a.data().iter().map(|v| v.as_f64()), b.data().iter().map(|v| v.as_f64()), a.numel());
    Ok(psnr_from_mse(mse, max_val))
}

/// PSNR after tone mapping both inputs, with peak 1.
pub fn psnr_mu<T: Element>(a: &Tensor<T>, b: &Tensor<T>, mu: f64) -> Result<f64> {
    same_shape("psnr_mu", a, b)?;
    let ta = a.data().iter().map(|v| tone_map_f64(v.as_f64(), mu));
    let tb = b.data().iter().map(|v| tone_map_f64(v.as_f64(), mu));
    Ok(psnr_from_mse(mse(ta, tb, a.numel()), 1.0))
}

fn mse(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>, n: usize) -> f64 {
    a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64
}

fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable Gaussian filter of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = g.iter().enumerate().map(|(k, gk)| gk * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = g.iter().enumerate().map(|(k, gk)| gk * rows[(y + k) * wo + x]).sum();
        }
    }
    out
}

fn ssim_planes(a: &[f64], b: &[f64], shape: &[usize]) -> Result<f64> {
    let nd = shape.len();
    if nd < 2 {
        return Err(Error::shape("ssim", "ndim", format!("need at least 2 axes, got {shape:?}")));
    }
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            "axes -2/-1 (spatial)",
            format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let plane = h * w;
    let channels = a.len() / plane;
    let mut total = 0.0;
    for c in 0..channels {
        let pa = &a[c * plane..(c + 1) * plane];
        let pb = &b[c * plane..(c + 1) * plane];
        let prod = |f: fn(f64, f64) -> f64| pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
        let mu_a = filter_valid(pa, h, w, &g);
        let mu_b = filter_valid(pb, h, w, &g);
        let saa = filter_valid(&prod(|x, _| x * x), h, w, &g);
        let sbb = filter_valid(&prod(|_, y| y * y), h, w, &g);
        let sab = filter_valid(&prod(|x, y| x * y), h, w, &g);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok((total / channels as f64).clamp(-1.0, 1.0))
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03 and dynamic range 1. The mean is taken over valid window
/// positions of each plane, then over planes (every leading axis counts as a
/// channel).
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let fa: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let fb: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
    ssim_planes(&fa, &fb, a.shape())
}

/// SSIM of the tone-mapped inputs.
pub fn ssim_mu<T: Element>(a: &Tensor<T>, b: &Tensor<T>, mu: f64) -> Result<f64> {
    same_shape("ssim_mu", a, b)?;
    let fa: Vec<f64> = a.data().iter().map(|v| tone_map_f64(v.as_f64(), mu)).collect();
    let fb: Vec<f64> = b.data().iter().map(|v| tone_map_f64(v.as_f64(), mu)).collect();
    ssim_planes(&fa, &fb, a.shape())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr_linear: f64,
    pub psnr_mu: f64,
    pub ssim_linear: f64,
    pub ssim_mu: f64,
}

pub const CSV_HEADER: &str = "sample_id,psnr_l,psnr_mu,ssim_l,ssim_mu";

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub fn compute<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, mu: f64) -> Result<Self> {
        Ok(MetricReport {
            psnr_linear: psnr(pred, target, 1.0)?,
            psnr_mu: psnr_mu(pred, target, mu)?,
            ssim_linear: ssim(pred, target)?,
            ssim_mu: ssim_mu(pred, target, mu)?,
        })
    }

    /// Field-wise arithmetic mean. `None` for an empty slice.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            psnr_linear: avg(|r| r.psnr_linear),
            psnr_mu: avg(|r| r.psnr_mu),
            ssim_linear: avg(|r| r.ssim_linear),
            ssim_mu: avg(|r| r.ssim_mu),
        })
    }

    pub fn csv_row(&self, sample_id: &str) -> String {
        format!(
            "{sample_id},{},{},{},{}",
            fmt_metric(self.psnr_linear),
            fmt_metric(self.psnr_mu),
            fmt_metric(self.ssim_linear),
            fmt_metric(self.ssim_mu)
        )
    }
}

/// Flat `key=value` block, one metric per line.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "psnr_l={}", fmt_metric(self.psnr_linear))?;
        writeln!(f, "psnr_mu={}", fmt_metric(self.psnr_mu))?;
        writeln!(f, "ssim_l={}", fmt_metric(self.ssim_linear))?;
        writeln!(f, "ssim_mu={}", fmt_metric(self.ssim_mu))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use proptest::prelude::*;

    fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn tone_curve_endpoints_are_exact() {
        let x = Tensor::<f32>::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(mu_law(&x, DEFAULT_MU).data(), &[0.0, 1.0]);
        let x = t64(&[2], vec![0.0, 1.0]);
        assert_eq!(mu_law(&x, DEFAULT_MU).data(), &[0.0, 1.0]);
    }

    #[test]
    fn tone_curve_half() {
        // ln(2501)/ln(5001), evaluated at 40 digits
        let y = mu_law(&t64(&[1], vec![0.5]), 5000.0).item().unwrap();
        assert!((y - 0.918_643_271_879_646_3).abs() < 1e-15);
    }

    #[test]
    fn tone_curve_strictly_monotone() {
        let grid: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        let y = mu_law(&t64(&[1000], grid), DEFAULT_MU);
        assert!(y.data().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn checked_rejects_negative() {
        assert!(mu_law_checked(&t64(&[2], vec![0.1, -0.1]), 5000.0).is_err());
        assert!(mu_law_checked(&t64(&[1], vec![0.1]), 0.0).is_err());
    }

    #[test]
    fn tone_curve_gradient() {
        let x = t64(&[6], vec![0.0, 0.01, 0.2, 0.5, 1.0, 3.0]);
        let err = finite_difference_check(|t| Ok(mu_law(t, DEFAULT_MU).sum_all()), &x.add_scalar(1e-3), 1e-7).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn loss_two_pixels() {
        let pred = t64(&[2], vec![0.5, 2.0]);
        let gt = t64(&[2], vec![0.25, 1.0]);
        let l = l1_tonemapped_loss(&pred, &gt, 5000.0).unwrap().item().unwrap();
        assert!((l - 0.081_350_865_697_882_43).abs() < 1e-14, "{l}");
        let l2 = l1_tonemapped_loss(&gt, &pred, 5000.0).unwrap().item().unwrap();
        assert_eq!(l, l2);
        assert_eq!(l1_tonemapped_loss(&pred, &pred, 5000.0).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn loss_gradient() {
        let pred = t64(&[2, 3], vec![0.1, 0.7, 1.9, 0.02, 0.4, 3.0]);
        let gt = t64(&[2, 3], vec![0.2, 0.5, 1.0, 0.05, 0.45, 2.0]);
        let err = finite_difference_check(|t| l1_tonemapped_loss(t, &gt, DEFAULT_MU), &pred, 1e-7).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn loss_shape_mismatch() {
        assert!(l1_tonemapped_loss(&t64(&[2], vec![0.0; 2]), &t64(&[3], vec![0.0; 3]), 5000.0).is_err());
    }

    #[test]
    fn psnr_cases() {
        let a = t64(&[4], vec![0.2, 0.4, 0.6, 0.8]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr_mu(&a, &a, 5000.0).unwrap(), f64::INFINITY);
        // every error 0.1 -> MSE 0.01 -> 20 dB
        let b = t64(&[4], vec![0.3, 0.5, 0.5, 0.9]);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let a3 = a.mul_scalar(3.0);
        let b3 = b.mul_scalar(3.0);
        assert!((psnr(&a3, &b3, 3.0).unwrap() - psnr(&a, &b, 1.0).unwrap()).abs() < 1e-9);
    }

    fn frozen_pair() -> (Tensor<f64>, Tensor<f64>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..16 {
            for j in 0..16 {
                let v = ((i * 7 + j * 13) % 17) as f64 / 16.0;
                a.push(v);
                b.push(0.8 * v + 0.1 * ((i + 2 * j) as f64).sin() + 0.05);
            }
        }
        (t64(&[16, 16], a), t64(&[16, 16], b))
    }

    #[test]
    fn ssim_matches_direct_formula() {
        // Computed with an explicit 2-D windowed sum and cross-checked with an
        // independent library implementation.
        let (a, b) = frozen_pair();
        let s = ssim(&a, &b).unwrap();
        assert!((s - 0.948_676_398_695_808_6).abs() <= 1e-6, "{s}");
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let (a, _) = frozen_pair();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
        let inv = a.neg().add_scalar(1.0);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f32>::zeros(&[4, 10, 16]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn report_serialisation() {
        let r = MetricReport {
            psnr_linear: f64::INFINITY,
            psnr_mu: 31.5,
            ssim_linear: 1.0,
            ssim_mu: 0.25,
        };
        assert_eq!(r.csv_row("s0"), "s0,inf,31.500000,1.000000,0.250000");
        assert!(r.to_string().starts_with("psnr_l=inf\npsnr_mu=31.500000\n"));
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(seed in any::<u32>()) {
            let gen = |k: u32| -> Vec<f64> {
                (0..2 * 12 * 13).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed.wrapping_add(k)) % 1000) as f64 / 999.0).collect()
            };
            let a = t64(&[2, 12, 13], gen(1));
            let b = t64(&[2, 12, 13], gen(7));
            let s1 = ssim(&a, &b).unwrap();
            let s2 = ssim(&b, &a).unwrap();
            prop_assert!((s1 - s2).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&s1));
        }

        #[test]
        fn loss_nonnegative_zero_iff_equal(vals in proptest::collection::vec(0.0f64..4.0, 8), shift in 0usize..8) {
            let a = t64(&[8], vals.clone());
            let l = l1_tonemapped_loss(&a, &a, DEFAULT_MU).unwrap().item().unwrap();
            prop_assert_eq!(l, 0.0);
            let mut other = vals;
            other[shift] += 0.5;
            let b = t64(&[8], other);
            prop_assert!(l1_tonemapped_loss(&a, &b, DEFAULT_MU).unwrap().item().unwrap() > 0.0);
        }
    }
}
