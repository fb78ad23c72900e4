//! Dense `channels x height x width` grids of reals.
//!
//! One type carries pixel images and latent codes alike. Storage is row-major
//! with the channel as the outermost axis.

use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Per-tensor summary used by trace manifests.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageTensor({})", self.shape())
    }
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "tensor dimensions must be positive"
        );
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::domain(format!(
                "tensor dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::shape(
                format!("{expected} elements"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    t.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        t
    }

    /// I.i.d. standard normal entries.
    pub fn randn(channels: usize, height: usize, width: usize, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(channels, height, width);
        rng.fill_normal(&mut t.data);
        t
    }

    pub fn randn_like(&self, rng: &mut Rng) -> Self {
        Self::randn(self.channels, self.height, self.width, rng)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &ImageTensor, b: f64) -> Result<Self> {
        self.zip_with(other, |x, y| a * x + b * y)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Stacks channels of `self` followed by channels of `other`.
    pub fn concat_channels(&self, other: &ImageTensor) -> Result<Self> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                format!("{}x{} spatial", self.height, self.width),
                format!("{}x{} spatial", other.height, other.width),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn stats(&self) -> Stats {
        let n = self.data.len() as f64;
        let mean = self.sum() / n;
        let var = self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let (min, max) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Stats {
            min,
            max,
            mean,
            std: var.sqrt(),
        }
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Maps a nominal `[-1, 1]` value to an 8-bit level.
pub fn to_u8(v: f64) -> u8 {
    let scaled = ((v + 1.0) * 0.5 * 255.0).round();
    scaled.clamp(0.0, 255.0) as u8
}

impl ImageTensor {
    /// Binary PGM (1 channel) or PPM (3 channels).
    pub fn write_pnm<W: Write>(&self, mut w: W) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => {
                return Err(Error::domain(format!(
                    "PNM output needs 1 or 3 channels, got {c}"
                )))
            }
        };
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    bytes.push(to_u8(self.get(c, y, x)));
                }
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    /// Writes a viewable image: 1 and 3 channel tensors as-is, anything else
    /// as its first channel.
    pub fn write_preview<W: Write>(&self, w: W) -> Result<()> {
        match self.channels {
            1 | 3 => self.write_pnm(w),
            _ => ImageTensor::from_vec(1, self.height, self.width, self.channel(0).to_vec())?
                .write_pnm(w),
        }
    }

    /// Raw dump: ASCII header `MFT1 c h w\n`, then little-endian `f32` values.
    pub fn write_mft<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "MFT1 {} {} {}", self.channels, self.height, self.width)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_mft<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some("MFT1") {
            return Err(Error::format("MFT1", "missing magic"));
        }
        let dims: Vec<usize> = parts
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("MFT1", e.to_string()))?;
        let [c, h, w] = dims[..] else {
            return Err(Error::format("MFT1", "expected three dimensions"));
        };
        let mut bytes = vec![0u8; c * h * w * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        ImageTensor::from_vec(c, h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(ImageTensor::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(ImageTensor::from_vec(0, 2, 2, vec![]).is_err());
    }

    #[test]
    fn row_major_layout() {
        let t = ImageTensor::from_vec(2, 2, 3, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(0, 0, 2), 2.0);
        assert_eq!(t.get(0, 1, 0), 3.0);
        assert_eq!(t.get(1, 0, 0), 6.0);
        assert_eq!(t.channel(1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn pnm_mapping_endpoints() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.0), 128);
        assert_eq!(to_u8(-7.0), 0);
        assert_eq!(to_u8(3.0), 255);
    }

    #[test]
    fn pgm_header_and_payload() {
        let t = ImageTensor::from_vec(1, 1, 2, vec![-1.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        t.write_pnm(&mut buf).unwrap();
        assert_eq!(&buf[..], b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn ppm_interleaves_channels() {
        let t = ImageTensor::from_vec(3, 1, 1, vec![-1.0, 0.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        t.write_pnm(&mut buf).unwrap();
        assert_eq!(&buf[buf.len() - 3..], &[0, 128, 255]);
        assert!(buf.starts_with(b"P6\n1 1\n255\n"));
    }

    #[test]
    fn mft_roundtrip_is_f32_exact() {
        let mut rng = Rng::seed_from_u64(5);
        let t = ImageTensor::randn(2, 3, 4, &mut rng).map(|v| v as f32 as f64);
        let mut buf = Vec::new();
        t.write_mft(&mut buf).unwrap();
        assert!(buf.starts_with(b"MFT1 2 3 4\n"));
        let back = ImageTensor::read_mft(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn stats_of_known_tensor() {
        let t = ImageTensor::from_vec(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = t.stats();
        assert_eq!((s.min, s.max, s.mean), (1.0, 4.0, 2.5));
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
    }
}
