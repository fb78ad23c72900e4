use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::denoiser::{guided_eps, DenoiseRequest, Denoiser};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;
use crate::tensorops::{resample_to, ResampleMethod};

/// Reverse update used by [`reverse_step`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - sigma^2) eps_hat + sigma z`.
    #[default]
    Ddim,
    /// `(z - (1 - a) / sqrt(1 - ab) eps_hat) / sqrt(a) + sigma z`.
    Ancestral,
}

/// Sampler state for one run.
#[derive(Clone, Debug)]
pub struct RunState {
    /// `z_t` (latent) or `x_t` (pixel).
    pub current: ImageTensor,
    /// Noise level of `current`; starts at `T` and reaches 0.
    pub t: usize,
    pub stage_index: usize,
    pub rng: Rng,
}

/// Conditions shared by every stage.
#[derive(Clone, Debug, Default)]
pub struct Conditions {
    pub text: Option<Vec<f64>>,
    /// Image condition in data (pixel) space at any resolution; resampled to
    /// each stage and encoded in latent mode.
    pub image: Option<ImageTensor>,
}

/// `x0_hat = (z_t - sqrt(1 - ab) eps_hat) / sqrt(ab)`.
pub fn predict_clean_from(
    z: &ImageTensor,
    eps_hat: &ImageTensor,
    alpha_bar: f64,
) -> Result<ImageTensor> {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z.zip_with(eps_hat, |z, e| (z - sn * e) / sa)
}

/// One reverse update from level `t` to `t - 1` given `eps_hat`. `noise` is
/// only read when `sigma_t > 0`.
pub fn step_update(
    z: &ImageTensor,
    eps_hat: &ImageTensor,
    s: &NoiseSchedule,
    t: usize,
    rule: StepRule,
    noise: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    s.check_t(t)?;
    z.ensure_same_shape(eps_hat)?;
    let sigma = s.sigma(t);
    let mut out = match rule {
        StepRule::Ancestral => {
            let a = s.alpha(t);
            let c = (1.0 - a) / (1.0 - s.alpha_bar(t)).sqrt();
            let inv = 1.0 / a.sqrt();
            z.zip_with(eps_hat, |z, e| inv * (z - c * e))?
        }
        StepRule::Ddim => {
            let ab_prev = s.alpha_bar(t - 1);
            let x0 = predict_clean_from(z, eps_hat, s.alpha_bar(t))?;
            let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            x0.axpby(ab_prev.sqrt(), eps_hat, dir)?
        }
    };
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| Error::domain("stochastic step needs a noise tensor"))?;
        out = out.axpby(1.0, n, sigma)?;
    }
    Ok(out)
}

/// Everything needed to query the denoiser at one stage.
pub struct StageContext<'a> {
    pub schedule: &'a NoiseSchedule,
    pub text: Option<&'a [f64]>,
    /// Already at the stage's working resolution and space.
    pub image: Option<&'a ImageTensor>,
    pub guidance: f64,
}

impl StageContext<'_> {
    pub fn eps(&self, d: &dyn Denoiser, z: &ImageTensor, t: usize) -> Result<ImageTensor> {
        let req = DenoiseRequest::new(z, t, self.schedule)
            .with_text(self.text)
            .with_image(self.image);
        guided_eps(d, &req, self.guidance)
    }
}

/// Advances `state` by one reverse step at its current level.
pub fn reverse_step(
    state: &mut RunState,
    d: &dyn Denoiser,
    ctx: &StageContext<'_>,
    rule: StepRule,
) -> Result<()> {
    if state.t == 0 {
        return Err(Error::domain("reverse step requested at t = 0"));
    }
    let eps = ctx.eps(d, &state.current, state.t)?;
    let noise = if ctx.schedule.sigma(state.t) > 0.0 {
        Some(state.current.randn_like(&mut state.rng))
    } else {
        None
    };
    let next = step_update(
        &state.current,
        &eps,
        ctx.schedule,
        state.t,
        rule,
        noise.as_ref(),
    )?;
    if !next.all_finite() {
        return Err(Error::NonFinite {
            stage: state.stage_index + 1,
            t: state.t,
            context: "reverse step".into(),
        });
    }
    state.current = next;
    state.t -= 1;
    Ok(())
}

/// Clean estimate at the state's current level; `t` is not advanced.
pub fn predict_clean(
    state: &RunState,
    d: &dyn Denoiser,
    ctx: &StageContext<'_>,
) -> Result<ImageTensor> {
    ctx.schedule.check_t(state.t)?;
    let eps = ctx.eps(d, &state.current, state.t)?;
    predict_clean_from(&state.current, &eps, ctx.schedule.alpha_bar(state.t))
}

/// `sqrt(ab) z_up + sqrt(1 - ab) eps`, drawing `eps` only when `ab < 1`.
pub fn relay_renoise(z_up: &ImageTensor, alpha_bar: f64, rng: &mut Rng) -> Result<ImageTensor> {
    if 1.0 - alpha_bar == 0.0 {
        return Ok(z_up.clone());
    }
    let eps = z_up.randn_like(rng);
    z_up.axpby(alpha_bar.sqrt(), &eps, (1.0 - alpha_bar).sqrt())
}

/// Moves a clean estimate to the next stage's resolution: decode, resample
/// in image space, encode. Returns the upsampled image and working tensor.
pub fn upsample_clean(
    clean: &ImageTensor,
    codec: Option<&LatentCodec>,
    method: ResampleMethod,
    height: usize,
    width: usize,
) -> Result<(ImageTensor, ImageTensor)> {
    match codec {
        Some(c) => {
            let img = c.decode(clean)?;
            let up = resample_to(&img, method, height, width)?;
            let z = c.encode(&up)?;
            Ok((up, z))
        }
        None => {
            let up = resample_to(clean, method, height, width)?;
            Ok((up.clone(), up))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ImageTensor {
        ImageTensor::filled(1, 1, 1, v)
    }

    /// Single-step schedule with the given `alpha_bar`, plus a leading level so
    /// `alpha` and `alpha_bar` can differ.
    fn two_level(a1: f64, a2: f64) -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![1.0 - a1, 1.0 - a2], 0.0).unwrap()
    }

    #[test]
    fn ancestral_hand_value() {
        // alpha_t = 0.99, alpha_bar_t = 0.9
        let s = two_level(0.9 / 0.99, 0.99);
        assert!((s.alpha(2) - 0.99).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.9).abs() < 1e-15);
        let out =
            step_update(&scalar(1.0), &scalar(0.5), &s, 2, StepRule::Ancestral, None).unwrap();
        let expected = (1.0 - 0.01 * 0.5 / 0.1f64.sqrt()) / 0.99f64.sqrt();
        assert!((out.data()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.989147).abs() < 1e-6);
    }

    #[test]
    fn zero_prediction_divides_by_sqrt_alpha() {
        let s = two_level(0.8, 0.9);
        for rule in [StepRule::Ddim, StepRule::Ancestral] {
            let out = step_update(&scalar(0.7), &scalar(0.0), &s, 2, rule, None).unwrap();
            assert!(
                (out.data()[0] - 0.7 / s.alpha(2).sqrt()).abs() < 1e-14,
                "{rule:?}"
            );
        }
    }

    #[test]
    fn rules_agree_at_full_stochasticity() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2, 1.0).unwrap();
        let z = ImageTensor::from_vec(1, 1, 3, vec![0.3, -1.1, 2.0]).unwrap();
        let e = ImageTensor::from_vec(1, 1, 3, vec![0.5, 0.1, -0.8]).unwrap();
        let n = ImageTensor::from_vec(1, 1, 3, vec![1.0, -0.2, 0.4]).unwrap();
        for t in 2..=10 {
            let a = step_update(&z, &e, &s, t, StepRule::Ddim, Some(&n)).unwrap();
            let b = step_update(&z, &e, &s, t, StepRule::Ancestral, Some(&n)).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn predict_clean_hand_value_and_inversion() {
        let out = predict_clean_from(&scalar(1.0), &scalar(0.3), 0.72).unwrap();
        let expected = (1.0 - 0.28f64.sqrt() * 0.3) / 0.72f64.sqrt();
        assert!((out.data()[0] - expected).abs() < 1e-15);
        assert!((expected - 0.991428).abs() < 1e-6);

        let s = NoiseSchedule::linear(20, 0.01, 0.3, 0.0).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let x0 = ImageTensor::randn(2, 3, 3, &mut rng);
        let eps = ImageTensor::randn(2, 3, 3, &mut rng);
        for t in [1, 7, 20] {
            let xt = s.forward_diffuse(&x0, t, &eps).unwrap();
            let back = predict_clean_from(&xt, &eps, s.alpha_bar(t)).unwrap();
            assert!(back.max_abs_diff(&x0).unwrap() < 1e-10);
        }
        let z = scalar(0.4);
        let zero = predict_clean_from(&z, &scalar(0.0), 0.64).unwrap();
        assert!((zero.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn renoise_limits() {
        let mut rng = Rng::seed_from_u64(1);
        let z = ImageTensor::from_vec(1, 1, 2, vec![0.2, -0.4]).unwrap();
        assert_eq!(relay_renoise(&z, 1.0, &mut rng).unwrap(), z);
        let mut untouched = rng.clone();
        let _ = relay_renoise(&z, 1.0, &mut rng).unwrap();
        assert_eq!(untouched.next_u64(), rng.clone().next_u64());
        let out = relay_renoise(&z, 0.0, &mut rng).unwrap();
        assert_ne!(out, z);
    }

    #[test]
    fn stochastic_step_requires_noise() {
        let s = NoiseSchedule::linear(5, 0.01, 0.2, 1.0).unwrap();
        assert!(step_update(&scalar(0.0), &scalar(0.0), &s, 3, StepRule::Ddim, None).is_err());
    }
}
