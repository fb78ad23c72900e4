//! Dense 2-D kernels: convolution (plain and dilated), upsamplers, pooling.

mod conv;
mod resample;

pub use conv::{conv2d, conv2d_backward, dilate_kernel, ConvGrads, ConvKernel};
pub use resample::{
    cubic_weight, gaussian_kernel, resample, resample_to, Factor, ResampleConfig, ResampleMethod,
    BICUBIC_A, EDGE_KERNEL, GAUSSIAN_SIGMA,
};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Block mean over non-overlapping `factor x factor` tiles.
pub fn mean_pool(x: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    if factor == 0 {
        return Err(Error::domain("pool factor must be >= 1"));
    }
    if !x.height().is_multiple_of(factor) || !x.width().is_multiple_of(factor) {
        return Err(Error::domain(format!(
            "{}x{} is not divisible by pool factor {factor}",
            x.height(),
            x.width()
        )));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let norm = 1.0 / (factor * factor) as f64;
    Ok(ImageTensor::from_fn(
        x.channels(),
        x.height() / factor,
        x.width() / factor,
        |c, y, xx| {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += x.get(c, y * factor + dy, xx * factor + dx);
                }
            }
            acc * norm
        },
    ))
}
