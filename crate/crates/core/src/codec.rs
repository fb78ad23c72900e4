//! Exactly invertible pseudo-latent codec.
//!
//! Each non-overlapping `f x f` patch of each image channel is multiplied by a
//! fixed orthonormal `f^2 x f^2` matrix (the 2-D Haar basis), producing
//! `channels * f^2` latent channels at `1/f` the spatial size. Latent channel
//! `c * f^2 + k` holds coefficient `k` of image channel `c`; `k = 0` is the DC
//! term.

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec {
    factor: usize,
    /// Row-major `f^2 x f^2`; row `k` is basis vector `k` over the patch
    /// pixels in row-major order.
    basis: Vec<f64>,
    /// Zero every non-DC coefficient after encoding.
    lossy: bool,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self::haar(2).expect("2 is a power of two")
    }
}

/// Orthonormal 1-D Haar matrix of size `n` (a power of two).
fn haar_1d(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let half = n / 2;
    let prev = haar_1d(half);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut m = vec![0.0; n * n];
    // top half: coarse basis upsampled; bottom half: finest differences
    for r in 0..half {
        for c in 0..half {
            let v = prev[r * half + c] * s;
            m[r * n + 2 * c] = v;
            m[r * n + 2 * c + 1] = v;
        }
        m[(half + r) * n + 2 * r] = s;
        m[(half + r) * n + 2 * r + 1] = -s;
    }
    m
}

impl LatentCodec {
    /// 2-D Haar codec with patch size `factor`, which must be a power of two.
    pub fn haar(factor: usize) -> Result<Self> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(Error::domain(format!(
                "codec factor must be a power of two, got {factor}"
            )));
        }
        let h = haar_1d(factor);
        let n = factor * factor;
        // Kronecker product: basis (a, b) over pixel (y, x) = h[a][y] * h[b][x]
        let mut basis = vec![0.0; n * n];
        for a in 0..factor {
            for b in 0..factor {
                let k = a * factor + b;
                for y in 0..factor {
                    for x in 0..factor {
                        basis[k * n + y * factor + x] = h[a * factor + y] * h[b * factor + x];
                    }
                }
            }
        }
        Ok(Self {
            factor,
            basis,
            lossy: false,
        })
    }

    /// Variant that discards detail coefficients, for studying how codec
    /// error propagates through a relay.
    pub fn lossy(mut self, lossy: bool) -> Self {
        self.lossy = lossy;
        self
    }

    pub fn is_lossy(&self) -> bool {
        self.lossy
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn patch_len(&self) -> usize {
        self.factor * self.factor
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn latent_channels(&self, image_channels: usize) -> usize {
        image_channels * self.patch_len()
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let f = self.factor;
        if !x.height().is_multiple_of(f) || !x.width().is_multiple_of(f) {
            return Err(Error::domain(format!(
                "{}x{} image is not divisible by codec factor {f}",
                x.height(),
                x.width()
            )));
        }
        let n = self.patch_len();
        let (lh, lw) = (x.height() / f, x.width() / f);
        let mut z = ImageTensor::zeros(x.channels() * n, lh, lw);
        let mut patch = vec![0.0; n];
        for c in 0..x.channels() {
            for py in 0..lh {
                for px in 0..lw {
                    for y in 0..f {
                        for xx in 0..f {
                            patch[y * f + xx] = x.get(c, py * f + y, px * f + xx);
                        }
                    }
                    for k in 0..n {
                        let v = if self.lossy && k > 0 {
                            0.0
                        } else {
                            let row = &self.basis[k * n..(k + 1) * n];
                            row.iter().zip(&patch).map(|(b, p)| b * p).sum()
                        };
                        z.set(c * n + k, py, px, v);
                    }
                }
            }
        }
        Ok(z)
    }

    pub fn decode(&self, z: &ImageTensor) -> Result<ImageTensor> {
        let f = self.factor;
        let n = self.patch_len();
        if !z.channels().is_multiple_of(n) {
            return Err(Error::domain(format!(
                "latent channel count {} is not divisible by {n}",
                z.channels()
            )));
        }
        let channels = z.channels() / n;
        let mut x = ImageTensor::zeros(channels, z.height() * f, z.width() * f);
        let mut coeffs = vec![0.0; n];
        for c in 0..channels {
            for py in 0..z.height() {
                for px in 0..z.width() {
                    for (k, v) in coeffs.iter_mut().enumerate() {
                        *v = z.get(c * n + k, py, px);
                    }
                    for y in 0..f {
                        for xx in 0..f {
                            let j = y * f + xx;
                            let v: f64 = (0..n).map(|k| self.basis[k * n + j] * coeffs[k]).sum();
                            x.set(c, py * f + y, px * f + xx, v);
                        }
                    }
                }
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn basis_is_orthonormal() {
        for f in [1, 2, 4] {
            let c = LatentCodec::haar(f).unwrap();
            let n = c.patch_len();
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = (0..n)
                        .map(|p| c.basis[i * n + p] * c.basis[j * n + p])
                        .sum();
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expected).abs() < 1e-12, "f={f} ({i},{j}) {dot}");
                }
            }
        }
        assert!(LatentCodec::haar(3).is_err());
    }

    #[test]
    fn constant_image_goes_to_dc() {
        let codec = LatentCodec::default();
        let z = codec.encode(&ImageTensor::filled(1, 4, 4, 0.3)).unwrap();
        assert_eq!(z.channels(), 4);
        assert_eq!((z.height(), z.width()), (2, 2));
        for v in z.channel(0) {
            assert!((v - 0.6).abs() < 1e-15);
        }
        for k in 1..4 {
            assert!(z.channel(k).iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn zero_maps_to_zero() {
        let codec = LatentCodec::default();
        let z = codec.encode(&ImageTensor::zeros(3, 4, 6)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let x = codec.decode(&ImageTensor::zeros(8, 2, 2)).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_dc_decodes_to_inverse_factor() {
        for f in [2, 4] {
            let codec = LatentCodec::haar(f).unwrap();
            let mut z = ImageTensor::zeros(f * f, 2, 3);
            z.channel_mut(0).fill(1.0);
            let x = codec.decode(&z).unwrap();
            assert!(x.data().iter().all(|v| (v - 1.0 / f as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn roundtrip_random() {
        let codec = LatentCodec::default();
        let mut rng = Rng::seed_from_u64(8);
        let x = ImageTensor::randn(1, 4, 4, &mut rng);
        let back = codec.decode(&codec.encode(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-9);
        let z = ImageTensor::randn(4, 3, 5, &mut rng);
        let back = codec.encode(&codec.decode(&z).unwrap()).unwrap();
        assert!(back.max_abs_diff(&z).unwrap() < 1e-9);
    }

    #[test]
    fn errors() {
        let codec = LatentCodec::default();
        assert!(codec.encode(&ImageTensor::zeros(1, 3, 4)).is_err());
        assert!(codec.decode(&ImageTensor::zeros(3, 2, 2)).is_err());
    }

    #[test]
    fn lossy_keeps_only_dc() {
        let codec = LatentCodec::default().lossy(true);
        let mut rng = Rng::seed_from_u64(3);
        let x = ImageTensor::randn(1, 4, 4, &mut rng);
        let back = codec.decode(&codec.encode(&x).unwrap()).unwrap();
        // each 2x2 patch becomes its mean
        for py in 0..2 {
            for px in 0..2 {
                let mean = (0..4)
                    .map(|j| x.get(0, 2 * py + j / 2, 2 * px + j % 2))
                    .sum::<f64>()
                    / 4.0;
                for j in 0..4 {
                    let v = back.get(0, 2 * py + j / 2, 2 * px + j % 2);
                    assert!((v - mean).abs() < 1e-12);
                }
            }
        }
    }
}
