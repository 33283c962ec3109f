use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Number of frames in a bracket.
pub const FRAMES: usize = 5;
/// Packed RGGB planes per raw frame.
pub const RAW_CHANNELS: usize = 4;

/// Five raw frames ordered from shortest to longest exposure. The first frame
/// is the reference the output is aligned to.
#[derive(Clone, Debug)]
pub struct ExposureStack<T: Element> {
    /// `[RAW_CHANNELS, H, W]` each.
    pub frames: Vec<Tensor<T>>,
    /// Relative exposure times, strictly increasing.
    pub exposure_times: Vec<f64>,
}

impl<T: Element> ExposureStack<T> {
    pub fn new(frames: Vec<Tensor<T>>, exposure_times: Vec<f64>) -> Result<Self> {
        let s = ExposureStack { frames, exposure_times };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "exposure_stack";
        if self.frames.len() != FRAMES || self.exposure_times.len() != FRAMES {
            return Err(Error::invalid(
                OP,
                format!(
                    "expected {FRAMES} frames and exposure times, got {} and {}",
                    self.frames.len(),
                    self.exposure_times.len()
                ),
            ));
        }
        let shape = self.frames[0].shape();
        if shape.len() != 3 || shape[0] != RAW_CHANNELS {
            return Err(Error::shape(OP, "frame 0", format!("expected [{RAW_CHANNELS}, H, W], got {shape:?}")));
        }
        for (i, f) in self.frames.iter().enumerate().skip(1) {
            if f.shape() != shape {
                return Err(Error::shape(OP, format!("frame {i}"), format!("{:?} vs {shape:?}", f.shape())));
            }
        }
        let t = &self.exposure_times;
        if !(t[0] > 0.0) || !t[0].is_finite() {
            return Err(Error::invalid(OP, format!("exposure time {} must be positive", t[0])));
        }
        if let Some(i) = (1..FRAMES).find(|&i| !(t[i] > t[i - 1]) || !t[i].is_finite()) {
            return Err(Error::invalid(
                OP,
                format!("exposure times must strictly increase: t[{}] = {} after {}", i, t[i], t[i - 1]),
            ));
        }
        Ok(())
    }

    /// `(H, W)` of every frame.
    pub fn extent(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    /// `t_i / t_1` for every frame.
    pub fn ratios(&self) -> Vec<f64> {
        self.exposure_times.iter().map(|t| t / self.exposure_times[0]).collect()
    }
}

/// Per-frame network inputs `[2 * RAW_CHANNELS, H, W]`: the exposure
/// normalised frame followed by its gamma-mapped copy.
#[derive(Clone, Debug)]
pub struct PreprocessedInputs<T: Element> {
    pub inputs: Vec<Tensor<T>>,
}

/// Normalises each frame by its exposure ratio, clips at zero, and appends
/// the gamma curve of the result.
pub fn preprocess<T: Element>(stack: &ExposureStack<T>, gamma: f64) -> Result<PreprocessedInputs<T>> {
    stack.validate()?;
    let inputs = stack
        .frames
        .iter()
        .zip(stack.ratios())
        .map(|(frame, ratio)| {
            let norm = frame.div_scalar(ratio).clamp_min(0.0);
            let mapped = norm.powf(gamma);
            Tensor::concat(&[&norm, &mapped], 0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreprocessedInputs { inputs })
}
