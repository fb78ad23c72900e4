use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Square convolution kernel bank with optional dilation.
///
/// Weights are laid out `[out][in][ky][kx]`. Kernel taps are indexed by their
/// offset from the centre, and the operator is a true convolution:
/// `out(p) = bias + sum_t F(p - dilation * t) * k(t)`, with zero fill outside
/// the input and an output the same spatial size as the input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    out_channels: usize,
    in_channels: usize,
    size: usize,
    dilation: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        size: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::domain("kernel channel counts must be positive"));
        }
        if size.is_multiple_of(2) {
            return Err(Error::domain(format!(
                "kernel size must be odd, got {size}"
            )));
        }
        let expected = out_channels * in_channels * size * size;
        if weights.len() != expected {
            return Err(Error::shape(
                format!("{expected} weights"),
                format!("{} weights", weights.len()),
            ));
        }
        if bias.len() != out_channels {
            return Err(Error::shape(
                format!("{out_channels} biases"),
                format!("{} biases", bias.len()),
            ));
        }
        Ok(Self {
            out_channels,
            in_channels,
            size,
            dilation: 1,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, size: usize) -> Result<Self> {
        Self::new(
            out_channels,
            in_channels,
            size,
            vec![0.0; out_channels * in_channels * size * size],
            vec![0.0; out_channels],
        )
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Same weights, different tap spacing. No retuning involved.
    pub fn dilated(&self, dilation: usize) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::domain("dilation must be >= 1"));
        }
        Ok(Self {
            dilation,
            ..self.clone()
        })
    }

    pub fn set_dilation(&mut self, dilation: usize) -> Result<()> {
        if dilation == 0 {
            return Err(Error::domain("dilation must be >= 1"));
        }
        self.dilation = dilation;
        Ok(())
    }

    /// `dilation * (size - 1) + 1`.
    pub fn receptive_field(&self) -> usize {
        self.dilation * (self.size - 1) + 1
    }

    #[inline]
    pub fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.size + ky) * self.size + kx
    }

    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[self.widx(o, i, ky, kx)]
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Undilated kernel of size `dilation * (size - 1) + 1` with zeros between
    /// the original taps.
    pub fn zero_stuffed(&self) -> Self {
        let big = self.receptive_field();
        let mut k = Self::zeros(self.out_channels, self.in_channels, big).expect("valid dims");
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for ky in 0..self.size {
                    for kx in 0..self.size {
                        let idx = k.widx(o, i, ky * self.dilation, kx * self.dilation);
                        k.weights[idx] = self.weight(o, i, ky, kx);
                    }
                }
            }
        }
        k.bias.clone_from(&self.bias);
        k
    }
}

/// Returns `kernel` with its dilation replaced by `delta`.
pub fn dilate_kernel(kernel: &ConvKernel, delta: usize) -> Result<ConvKernel> {
    kernel.dilated(delta)
}

/// Range of output coordinates `p` for which `p - offset` lies in `0..len`.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = offset.max(0) as usize;
    let hi = (len as isize + offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

pub fn conv2d(input: &ImageTensor, kernel: &ConvKernel) -> Result<ImageTensor> {
    if input.channels() != kernel.in_channels {
        return Err(Error::shape(
            format!("{} input channels", kernel.in_channels),
            format!("{} input channels", input.channels()),
        ));
    }
    let (h, w) = (input.height(), input.width());
    let centre = (kernel.size / 2) as isize;
    let d = kernel.dilation as isize;
    let mut out = ImageTensor::zeros(kernel.out_channels, h, w);
    for o in 0..kernel.out_channels {
        let plane = out.channel_mut(o);
        plane.fill(kernel.bias[o]);
        for i in 0..kernel.in_channels {
            let src = input.channel(i);
            for ky in 0..kernel.size {
                let dy = d * (ky as isize - centre);
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..kernel.size {
                    let wgt = kernel.weight(o, i, ky, kx);
                    if wgt == 0.0 {
                        continue;
                    }
                    let dx = d * (kx as isize - centre);
                    let (x0, x1) = valid_range(w, dx);
                    for y in y0..y1 {
                        let sy = (y as isize - dy) as usize;
                        let dst_row = &mut plane[y * w..(y + 1) * w];
                        let src_row = &src[sy * w..(sy + 1) * w];
                        for x in x0..x1 {
                            dst_row[x] += wgt * src_row[(x as isize - dx) as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss through [`conv2d`].
pub struct ConvGrads {
    pub input: ImageTensor,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &ImageTensor,
    kernel: &ConvKernel,
    grad_out: &ImageTensor,
) -> Result<ConvGrads> {
    let (h, w) = (input.height(), input.width());
    if grad_out.channels() != kernel.out_channels || grad_out.height() != h || grad_out.width() != w
    {
        return Err(Error::shape(
            format!("{}x{}x{}", kernel.out_channels, h, w),
            grad_out.shape(),
        ));
    }
    let centre = (kernel.size / 2) as isize;
    let d = kernel.dilation as isize;
    let mut g_in = ImageTensor::zeros(input.channels(), h, w);
    let mut g_w = vec![0.0; kernel.weights.len()];
    let g_b: Vec<f64> = (0..kernel.out_channels)
        .map(|o| grad_out.channel(o).iter().sum())
        .collect();
    for o in 0..kernel.out_channels {
        let g = grad_out.channel(o);
        for i in 0..kernel.in_channels {
            let src = input.channel(i);
            for ky in 0..kernel.size {
                let dy = d * (ky as isize - centre);
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..kernel.size {
                    let dx = d * (kx as isize - centre);
                    let (x0, x1) = valid_range(w, dx);
                    let widx = kernel.widx(o, i, ky, kx);
                    let wgt = kernel.weights[widx];
                    let mut acc = 0.0;
                    let gi = g_in.channel_mut(i);
                    for y in y0..y1 {
                        let sy = (y as isize - dy) as usize;
                        for x in x0..x1 {
                            let sx = (x as isize - dx) as usize;
                            let go = g[y * w + x];
                            acc += go * src[sy * w + sx];
                            gi[sy * w + sx] += go * wgt;
                        }
                    }
                    g_w[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    })
}
