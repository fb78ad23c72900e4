//! Noise predictors.
//!
//! [`Denoiser`] abstracts `eps_hat(input, t, conditions)`. Two implementations
//! ship: [`AnalyticGaussianDenoiser`], the exact posterior-mean predictor for
//! Gaussian data and the reference every sampler is checked against, and
//! [`TinyDenoiser`], a three-layer convolutional net whose middle layer can be
//! dilated at inference time.

mod analytic;
mod tiny;
mod train;

pub use analytic::AnalyticGaussianDenoiser;
pub use tiny::{sinusoidal_embedding, Activation, TinyConfig, TinyDenoiser, EMBED_DIM};
pub use train::{
    evaluate_mse, grad_check, train_tiny, GradProbe, SampleKind, SyntheticDataset, TrainConfig,
    TrainExample, TrainOutcome, GRAD_CHECK_STEP,
};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

/// One `eps_hat` query.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseRequest<'a> {
    /// `x_t` or `z_t`.
    pub input: &'a ImageTensor,
    pub t: usize,
    /// Text-like condition vector. `None` selects the unconditional branch.
    pub text_cond: Option<&'a [f64]>,
    /// Image condition, already resampled to the input's spatial size.
    pub image_cond: Option<&'a ImageTensor>,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> DenoiseRequest<'a> {
    pub fn new(input: &'a ImageTensor, t: usize, schedule: &'a NoiseSchedule) -> Self {
        Self {
            input,
            t,
            text_cond: None,
            image_cond: None,
            schedule,
        }
    }

    pub fn with_text(mut self, cond: Option<&'a [f64]>) -> Self {
        self.text_cond = cond;
        self
    }

    pub fn with_image(mut self, cond: Option<&'a ImageTensor>) -> Self {
        self.image_cond = cond;
        self
    }

    pub fn unconditional(&self) -> Self {
        Self {
            text_cond: None,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.check_t(self.t)?;
        if let Some(c) = self.image_cond {
            if c.height() != self.input.height() || c.width() != self.input.width() {
                return Err(Error::shape(
                    format!(
                        "image condition at {}x{}",
                        self.input.height(),
                        self.input.width()
                    ),
                    format!("{}x{}", c.height(), c.width()),
                ));
            }
        }
        Ok(())
    }
}

pub trait Denoiser: Send + Sync {
    /// Channel count of the data (or latent) this predictor operates on.
    fn data_channels(&self) -> usize;

    /// Number of image-condition channels concatenated to the input.
    fn image_cond_channels(&self) -> usize {
        0
    }

    fn predict_eps(&self, req: &DenoiseRequest<'_>) -> Result<ImageTensor>;

    /// Dilation of the middle layers; 1 for predictors without convolutions.
    fn middle_dilation(&self) -> usize {
        1
    }

    /// Predictors without dilatable layers ignore this.
    fn set_middle_dilation(&mut self, _delta: usize) -> Result<()> {
        Ok(())
    }
}

/// Classifier-free guidance: `eps(null) + w * (eps(c) - eps(null))`.
///
/// Without a text condition there is nothing to guide and the plain
/// prediction is returned. `w == 1` and `w == 0` return the conditional and
/// unconditional predictions exactly.
pub fn guided_eps(d: &dyn Denoiser, req: &DenoiseRequest<'_>, w: f64) -> Result<ImageTensor> {
    if req.text_cond.is_none() {
        return d.predict_eps(req);
    }
    if w == 1.0 {
        return d.predict_eps(req);
    }
    let uncond = d.predict_eps(&req.unconditional())?;
    if w == 0.0 {
        return Ok(uncond);
    }
    let cond = d.predict_eps(req)?;
    uncond.zip_with(&cond, |u, c| u + w * (c - u))
}

/// Either concrete predictor, cloneable so concurrent runs can each own one.
#[derive(Clone, Debug)]
pub enum AnyDenoiser {
    Analytic(AnalyticGaussianDenoiser),
    Tiny(TinyDenoiser),
}

impl Denoiser for AnyDenoiser {
    fn data_channels(&self) -> usize {
        match self {
            AnyDenoiser::Analytic(d) => d.data_channels(),
            AnyDenoiser::Tiny(d) => d.data_channels(),
        }
    }

    fn image_cond_channels(&self) -> usize {
        match self {
            AnyDenoiser::Analytic(d) => d.image_cond_channels(),
            AnyDenoiser::Tiny(d) => d.image_cond_channels(),
        }
    }

    fn predict_eps(&self, req: &DenoiseRequest<'_>) -> Result<ImageTensor> {
        match self {
            AnyDenoiser::Analytic(d) => d.predict_eps(req),
            AnyDenoiser::Tiny(d) => d.predict_eps(req),
        }
    }

    fn middle_dilation(&self) -> usize {
        match self {
            AnyDenoiser::Analytic(d) => d.middle_dilation(),
            AnyDenoiser::Tiny(d) => d.middle_dilation(),
        }
    }

    fn set_middle_dilation(&mut self, delta: usize) -> Result<()> {
        match self {
            AnyDenoiser::Analytic(d) => d.set_middle_dilation(delta),
            AnyDenoiser::Tiny(d) => Denoiser::set_middle_dilation(d, delta),
        }
    }
}
