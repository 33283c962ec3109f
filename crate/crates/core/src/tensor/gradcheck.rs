use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences, element by element, and returns the largest relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// Runs in double precision only. `f` must return a one-element tensor and
/// must be deterministic.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = x.requiring_grad();
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::shape(
            "finite_difference_check",
            "output",
            format!("function must be scalar-valued, got {:?}", y.shape()),
        ));
    }
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let base = x.to_vec();
    let mut worst = 0.0f64;
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let up = f(&Tensor::from_vec(x.shape(), probe.clone())?)?.item()?;
        probe[i] = base[i] - eps;
        let down = f(&Tensor::from_vec(x.shape(), probe.clone())?)?.item()?;
        probe[i] = base[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(&[2, 3], vec![0.1, -2.0, 3.5, 4.0, -0.7, 11.0]).unwrap();
        let err = finite_difference_check(|t| Ok(t.sum_all()), &x, DEFAULT_FD_EPS).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // clamp_min at a point sitting on the kink: analytic says 0, numeric 0.5
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let err = finite_difference_check(|t| Ok(t.clamp_min(0.0).sum_all()), &x, DEFAULT_FD_EPS).unwrap();
        assert!(err > 0.5);
    }
}
