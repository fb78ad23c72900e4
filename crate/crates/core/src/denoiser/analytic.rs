use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

use super::{DenoiseRequest, Denoiser};

/// Exact noise predictor for data `x0 ~ Normal(mu_c, sigma2_c)`, independent
/// per pixel with per-channel parameters.
///
/// Given `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`, the posterior mean is
/// `E[x0 | x_t] = mu + sqrt(ab) sigma2 / (ab sigma2 + 1 - ab) * (x_t - sqrt(ab) mu)`
/// and the prediction is `(x_t - sqrt(ab) E[x0 | x_t]) / sqrt(1 - ab)`.
///
/// A text condition, when given, shifts the per-channel mean by its entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticGaussianDenoiser {
    mu: Vec<f64>,
    sigma2: Vec<f64>,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if mu.is_empty() || mu.len() != sigma2.len() {
            return Err(Error::shape(
                format!("{} variances", mu.len()),
                format!("{}", sigma2.len()),
            ));
        }
        if let Some(v) = sigma2.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::domain(format!("variance must be positive, got {v}")));
        }
        Ok(Self { mu, sigma2 })
    }

    /// The same data model seen through `codec`: the DC coefficient of image
    /// channel `c` has mean `f * mu_c`, detail coefficients have mean 0, and
    /// every coefficient keeps variance `sigma2_c` (the patch transform is
    /// orthonormal).
    pub fn for_latent(&self, codec: &LatentCodec) -> Self {
        let n = codec.patch_len();
        let f = codec.factor() as f64;
        let mut mu = Vec::with_capacity(self.mu.len() * n);
        let mut sigma2 = Vec::with_capacity(self.mu.len() * n);
        for (&m, &v) in self.mu.iter().zip(&self.sigma2) {
            for k in 0..n {
                mu.push(if k == 0 { f * m } else { 0.0 });
                sigma2.push(v);
            }
        }
        Self { mu, sigma2 }
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    /// `E[x0 | x_t]` for a scalar observation at noise level `alpha_bar`.
    pub fn posterior_mean(mu: f64, sigma2: f64, alpha_bar: f64, xt: f64) -> f64 {
        let sa = alpha_bar.sqrt();
        mu + sa * sigma2 / (alpha_bar * sigma2 + 1.0 - alpha_bar) * (xt - sa * mu)
    }

    /// Draws `x0` from the data model.
    pub fn sample(&self, height: usize, width: usize, rng: &mut crate::rng::Rng) -> ImageTensor {
        let mut x = ImageTensor::randn(self.mu.len(), height, width, rng);
        for c in 0..self.mu.len() {
            let (m, s) = (self.mu[c], self.sigma2[c].sqrt());
            for v in x.channel_mut(c) {
                *v = m + s * *v;
            }
        }
        x
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn data_channels(&self) -> usize {
        self.mu.len()
    }

    fn predict_eps(&self, req: &DenoiseRequest<'_>) -> Result<ImageTensor> {
        req.validate()?;
        let x = req.input;
        if x.channels() != self.mu.len() {
            return Err(Error::shape(
                format!("{} channels", self.mu.len()),
                format!("{} channels", x.channels()),
            ));
        }
        if let Some(c) = req.text_cond {
            if c.len() != self.mu.len() {
                return Err(Error::shape(
                    format!("text condition of length {}", self.mu.len()),
                    c.len(),
                ));
            }
        }
        let ab = req.schedule.alpha_bar(req.t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = ImageTensor::zeros(x.channels(), x.height(), x.width());
        for c in 0..x.channels() {
            let mu = self.mu[c] + req.text_cond.map_or(0.0, |v| v[c]);
            let s2 = self.sigma2[c];
            let src = x.channel(c);
            for (o, &xt) in out.channel_mut(c).iter_mut().zip(src) {
                let x0 = Self::posterior_mean(mu, s2, ab, xt);
                *o = (xt - sa * x0) / sn;
            }
        }
        Ok(out)
    }
}
