//! Non-parametric upsamplers bridging resolutions at a relay point.
//!
//! Sample positions follow the align-corners=false convention: output index
//! `j` reads source coordinate `(j + 0.5) * in / out - 0.5`. Source indices
//! outside the image are clamped to the edge.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Catmull-Rom cubic parameter.
pub const BICUBIC_A: f64 = -0.5;
/// Standard deviation of the 5x5 post-filter used by [`ResampleMethod::BicubicGaussian`].
pub const GAUSSIAN_SIGMA: f64 = 1.0;
/// 3x3 sharpening kernel used by [`ResampleMethod::BicubicEdge`].
pub const EDGE_KERNEL: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum ResampleMethod {
    /// Config-A.
    Bilinear,
    /// Config-B, the default upsampler.
    #[default]
    Bicubic,
    /// Config-C: bicubic followed by a normalized 5x5 Gaussian.
    BicubicGaussian,
    /// Config-D: bicubic followed by a 3x3 edge-enhancement kernel.
    BicubicEdge,
}

impl ResampleMethod {
    pub const ALL: [ResampleMethod; 4] = [
        ResampleMethod::Bilinear,
        ResampleMethod::Bicubic,
        ResampleMethod::BicubicGaussian,
        ResampleMethod::BicubicEdge,
    ];

    /// Ablation label (`A`..`D`).
    pub fn config_label(self) -> char {
        match self {
            ResampleMethod::Bilinear => 'A',
            ResampleMethod::Bicubic => 'B',
            ResampleMethod::BicubicGaussian => 'C',
            ResampleMethod::BicubicEdge => 'D',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ResampleMethod::Bilinear => "bilinear",
            ResampleMethod::Bicubic => "bicubic",
            ResampleMethod::BicubicGaussian => "bicubic_gaussian",
            ResampleMethod::BicubicEdge => "bicubic_edge",
        }
    }
}

impl fmt::Display for ResampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bilinear" | "a" => Ok(ResampleMethod::Bilinear),
            "bicubic" | "b" => Ok(ResampleMethod::Bicubic),
            "bicubic_gaussian" | "c" => Ok(ResampleMethod::BicubicGaussian),
            "bicubic_edge" | "d" => Ok(ResampleMethod::BicubicEdge),
            other => Err(Error::domain(format!("unknown resample method {other:?}"))),
        }
    }
}

/// Positive rational scale `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub num: u32,
    pub den: u32,
}

impl Factor {
    pub const ONE: Factor = Factor { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::domain(format!(
                "factor {num}/{den} must be positive"
            )));
        }
        Ok(Self { num, den })
    }

    pub fn integer(n: u32) -> Self {
        Self { num: n, den: 1 }
    }

    /// `round(len * num / den)`, halves rounded away from zero.
    pub fn apply(self, len: usize) -> usize {
        let n = len as u64 * self.num as u64;
        let d = self.den as u64;
        ((2 * n + d) / (2 * d)) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub method: ResampleMethod,
    pub factor_h: Factor,
    pub factor_w: Factor,
}

impl ResampleConfig {
    pub fn uniform(method: ResampleMethod, factor: Factor) -> Self {
        Self {
            method,
            factor_h: factor,
            factor_w: factor,
        }
    }
}

pub fn resample(x: &ImageTensor, cfg: &ResampleConfig) -> Result<ImageTensor> {
    let h = cfg.factor_h.apply(x.height());
    let w = cfg.factor_w.apply(x.width());
    resample_to(x, cfg.method, h, w)
}

/// Resamples to an explicit target size. A same-size request returns the
/// input unchanged for every method, post-filters included.
pub fn resample_to(
    x: &ImageTensor,
    method: ResampleMethod,
    height: usize,
    width: usize,
) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(Error::domain(format!(
            "degenerate resample target {height}x{width}"
        )));
    }
    if height == x.height() && width == x.width() {
        return Ok(x.clone());
    }
    let taps = match method {
        ResampleMethod::Bilinear => Taps::Linear,
        _ => Taps::Cubic,
    };
    let rows = axis_weights(x.height(), height, taps);
    let cols = axis_weights(x.width(), width, taps);
    let interpolated = separable(x, &rows, &cols, height, width);
    match method {
        ResampleMethod::Bilinear | ResampleMethod::Bicubic => Ok(interpolated),
        ResampleMethod::BicubicGaussian => Ok(filter_clamped(&interpolated, &gaussian_kernel())),
        ResampleMethod::BicubicEdge => Ok(filter_clamped(&interpolated, &EDGE_KERNEL)),
    }
}

#[derive(Clone, Copy)]
enum Taps {
    Linear,
    Cubic,
}

/// Per-output list of `(source index, weight)` pairs.
type AxisWeights = Vec<Vec<(usize, f64)>>;

pub fn cubic_weight(t: f64) -> f64 {
    let a = BICUBIC_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

fn axis_weights(src_len: usize, dst_len: usize, taps: Taps) -> AxisWeights {
    let scale = src_len as f64 / dst_len as f64;
    let last = src_len as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    (0..dst_len)
        .map(|j| {
            let src = (j as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let i0 = base as isize;
            match taps {
                Taps::Linear => vec![(clamp(i0), 1.0 - frac), (clamp(i0 + 1), frac)],
                Taps::Cubic => (-1..=2)
                    .map(|k| (clamp(i0 + k), cubic_weight(frac - k as f64)))
                    .collect(),
            }
        })
        .collect()
}

fn separable(
    x: &ImageTensor,
    rows: &AxisWeights,
    cols: &AxisWeights,
    height: usize,
    width: usize,
) -> ImageTensor {
    let src_h = x.height();
    let src_w = x.width();
    let mut out = ImageTensor::zeros(x.channels(), height, width);
    let mut tmp = vec![0.0; src_h * width];
    for c in 0..x.channels() {
        let src = x.channel(c);
        for sy in 0..src_h {
            for (ox, taps) in cols.iter().enumerate() {
                tmp[sy * width + ox] = taps.iter().map(|&(i, wt)| wt * src[sy * src_w + i]).sum();
            }
        }
        let dst = out.channel_mut(c);
        for (oy, taps) in rows.iter().enumerate() {
            for ox in 0..width {
                dst[oy * width + ox] = taps.iter().map(|&(i, wt)| wt * tmp[i * width + ox]).sum();
            }
        }
    }
    out
}

/// 5x5 Gaussian with `sigma = 1`, normalized to unit sum.
pub fn gaussian_kernel() -> [[f64; 5]; 5] {
    let mut k = [[0.0; 5]; 5];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 2.0, j as f64 - 2.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp();
            total += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    k
}

/// Correlation with a small symmetric kernel, reading edge-clamped source
/// pixels.
fn filter_clamped<const N: usize>(x: &ImageTensor, kernel: &[[f64; N]; N]) -> ImageTensor {
    let (h, w) = (x.height() as isize, x.width() as isize);
    let r = (N / 2) as isize;
    ImageTensor::from_fn(x.channels(), x.height(), x.width(), |c, y, xx| {
        let mut acc = 0.0;
        for (ky, row) in kernel.iter().enumerate() {
            let sy = (y as isize + ky as isize - r).clamp(0, h - 1) as usize;
            for (kx, &wt) in row.iter().enumerate() {
                let sx = (xx as isize + kx as isize - r).clamp(0, w - 1) as usize;
                acc += wt * x.get(c, sy, sx);
            }
        }
        acc
    })
}
