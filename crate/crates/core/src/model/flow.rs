use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_BLOCK: usize = 8;
pub const DEFAULT_RADIUS: usize = 4;

/// Dense per-pixel displacement. Warping a frame by its flow samples it at
/// `(x + dx, y + dy)`, so a frame whose content moved right by two pixels
/// relative to the reference carries `dx = +2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// `dx` plane followed by `dy` plane, row-major.
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![0.0; 2 * height * width],
        }
    }

    pub fn uniform(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        let n = height * width;
        let mut data = vec![dx; 2 * n];
        data[n..].fill(dy);
        FlowField { height, width, data }
    }

    pub fn from_planes(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 2 * height * width {
            return Err(Error::shape(
                "flow_field",
                "data",
                format!("{} values for a {height}x{width} field", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid("flow_field", format!("non-finite displacement at {i}")));
        }
        Ok(FlowField { height, width, data })
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dx(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn dy(&self, y: usize, x: usize) -> f32 {
        self.data[(self.height + y) * self.width + x]
    }

    pub fn planes(&self) -> &[f32] {
        &self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Stacks one field per batch entry into a `[B, 2, H, W]` tensor.
    pub fn batch_tensor<T: Element>(fields: &[&FlowField]) -> Result<Tensor<T>> {
        let Some(first) = fields.first() else {
            return Err(Error::invalid("flow_field", "empty batch"));
        };
        let (h, w) = first.extent();
        let mut data = Vec::with_capacity(fields.len() * 2 * h * w);
        for f in fields {
            if f.extent() != (h, w) {
                return Err(Error::shape("flow_field", "extent", format!("{:?} vs {:?}", f.extent(), (h, w))));
            }
            data.extend(f.data.iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::from_vec(&[fields.len(), 2, h, w], data)
    }
}

/// Backward-warps every batch entry of `[B, C, H, W]` by the same field.
pub fn warp_by_flow<T: Element>(feature: &Tensor<T>, flow: &FlowField) -> Result<Tensor<T>> {
    let [b, _, h, w] = feature.dims4("warp_by_flow")?;
    if flow.extent() != (h, w) {
        return Err(Error::shape(
            "warp_by_flow",
            "flow",
            format!("field is {:?}, feature is {:?}", flow.extent(), (h, w)),
        ));
    }
    let refs = vec![flow; b];
    feature.warp(&FlowField::batch_tensor(&refs)?)
}

/// Integer block matching. Each `block x block` tile of `reference` is
/// compared with `frame` displaced by every `(dx, dy)` within `radius`, using
/// the sum of absolute differences over all leading channels with clamped
/// sampling. Ties go to the smaller `dx² + dy²`, then to the earlier
/// candidate in row-major `(dy, dx)` order.
///
/// Inputs are `[..., H, W]` with matching shapes.
pub fn estimate_flow<T: Element>(
    reference: &Tensor<T>,
    frame: &Tensor<T>,
    block: usize,
    radius: usize,
) -> Result<FlowField> {
    const OP: &str = "estimate_flow";
    if reference.shape() != frame.shape() {
        return Err(Error::shape(OP, "operands", format!("{:?} vs {:?}", reference.shape(), frame.shape())));
    }
    if reference.ndim() < 2 {
        return Err(Error::shape(OP, "ndim", format!("need [..., H, W], got {:?}", reference.shape())));
    }
    if block == 0 {
        return Err(Error::invalid(OP, "block size must be positive"));
    }
    let nd = reference.ndim();
    let (h, w) = (reference.shape()[nd - 2], reference.shape()[nd - 1]);
    let planes = reference.numel() / (h * w).max(1);
    let (rf, fr) = (reference.data(), frame.data());

    let r = radius as isize;
    let mut candidates: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
    // stable sort keeps row-major order among equal magnitudes
    candidates.sort_by_key(|&(dx, dy)| dx * dx + dy * dy);

    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = FlowField::zeros(h, w);
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ye, xe) = ((by + block).min(h), (bx + block).min(w));
            let mut best = (f64::INFINITY, 0isize, 0isize);
            for &(dx, dy) in &candidates {
                let mut sad = 0.0f64;
                for p in 0..planes {
                    let rp = &rf[p * h * w..(p + 1) * h * w];
                    let fp = &fr[p * h * w..(p + 1) * h * w];
                    for y in by..ye {
                        let sy = clamp(y as isize + dy, h);
                        for x in bx..xe {
                            let sx = clamp(x as isize + dx, w);
                            sad += (fp[sy * w + sx].as_f64() - rp[y * w + x].as_f64()).abs();
                        }
                    }
                }
                if sad < best.0 {
                    best = (sad, dx, dy);
                }
            }
            for y in by..ye {
                for x in bx..xe {
                    out.data[y * w + x] = best.1 as f32;
                    out.data[(h + y) * w + x] = best.2 as f32;
                }
            }
        }
    }
    Ok(out)
}
