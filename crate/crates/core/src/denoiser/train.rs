use rayon::prelude::*;

use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;
use crate::tensorops::{mean_pool, resample_to, ResampleMethod};

use super::{DenoiseRequest, TinyDenoiser};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    Blobs,
    Checkerboard,
}

impl SampleKind {
    /// One-hot class vector used as the text-like condition.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            SampleKind::Blobs => [1.0, 0.0],
            SampleKind::Checkerboard => [0.0, 1.0],
        }
    }
}

/// Procedural single-channel images in `[-1, 1]`: a few Gaussian blobs on a
/// dark background, or the sum of a coarse and a fine checkerboard.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub size: usize,
    /// When set, samples are returned in latent form.
    pub codec: Option<LatentCodec>,
}

/// One training example.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub x0: ImageTensor,
    pub kind: SampleKind,
    /// Bilinear upsampling of the 2x mean-pooled image, in data space.
    pub image_cond: ImageTensor,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        Self {
            size: 16,
            codec: None,
        }
    }
}

impl SyntheticDataset {
    pub fn new(size: usize) -> Result<Self> {
        if size < 4 || !size.is_multiple_of(2) {
            return Err(Error::domain(format!(
                "dataset size must be even and >= 4, got {size}"
            )));
        }
        Ok(Self { size, codec: None })
    }

    pub fn with_codec(mut self, codec: Option<LatentCodec>) -> Self {
        self.codec = codec;
        self
    }

    /// Channel count of the returned tensors.
    pub fn channels(&self) -> usize {
        self.codec.as_ref().map_or(1, |c| c.latent_channels(1))
    }

    pub fn image(&self, kind: SampleKind, rng: &mut Rng) -> ImageTensor {
        let n = self.size;
        match kind {
            SampleKind::Blobs => {
                let count = rng.range_inclusive(1, 3);
                let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
                    .map(|_| {
                        let cy = rng.uniform() * n as f64;
                        let cx = rng.uniform() * n as f64;
                        let r = n as f64 * (0.1 + 0.15 * rng.uniform());
                        let amp = 0.6 + 0.4 * rng.uniform();
                        (cy, cx, r, amp)
                    })
                    .collect();
                ImageTensor::from_fn(1, n, n, |_, y, x| {
                    let v: f64 = blobs
                        .iter()
                        .map(|&(cy, cx, r, a)| {
                            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                            a * (-d2 / (2.0 * r * r)).exp()
                        })
                        .sum();
                    2.0 * v.min(1.0) - 1.0
                })
            }
            SampleKind::Checkerboard => {
                let coarse = if rng.uniform() < 0.5 { 4 } else { 8 };
                let (oy, ox) = (
                    rng.range_inclusive(0, coarse - 1),
                    rng.range_inclusive(0, coarse - 1),
                );
                let sign = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
                let check = |y: usize, x: usize, cell: usize| {
                    if ((y + oy) / cell + (x + ox) / cell).is_multiple_of(2) {
                        1.0
                    } else {
                        -1.0
                    }
                };
                ImageTensor::from_fn(1, n, n, |_, y, x| {
                    sign * (0.6 * check(y, x, coarse) + 0.3 * check(y, x, 1))
                })
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<TrainExample> {
        let kind = if rng.uniform() < 0.5 {
            SampleKind::Blobs
        } else {
            SampleKind::Checkerboard
        };
        let img = self.image(kind, rng);
        let low = mean_pool(&img, 2)?;
        let mut image_cond = resample_to(&low, ResampleMethod::Bilinear, self.size, self.size)?;
        let x0 = match &self.codec {
            Some(c) => {
                image_cond = c.encode(&image_cond)?;
                c.encode(&img)?
            }
            None => img,
        };
        Ok(TrainExample {
            x0,
            kind,
            image_cond,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Probability of replacing the class condition with the learned null
    /// condition (and the image condition with zeros).
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TinyDenoiser,
    /// Batch-mean epsilon MSE at each step, before that step's update.
    pub losses: Vec<f64>,
}

struct Item {
    xt: ImageTensor,
    eps: ImageTensor,
    t: usize,
    text: Option<Vec<f64>>,
    image: Option<ImageTensor>,
}

fn draw_batch(
    net: &TinyDenoiser,
    data: &SyntheticDataset,
    schedule: &NoiseSchedule,
    batch: usize,
    dropout: f64,
    rng: &mut Rng,
) -> Result<Vec<Item>> {
    let cfg = net.config();
    (0..batch)
        .map(|_| {
            let ex = data.sample(rng)?;
            let t = rng.range_inclusive(1, schedule.num_steps());
            let eps = ex.x0.randn_like(rng);
            let xt = schedule.forward_diffuse(&ex.x0, t, &eps)?;
            let drop = rng.uniform() < dropout;
            let text =
                (cfg.text_dim > 0 && !drop).then(|| ex.kind.one_hot()[..cfg.text_dim].to_vec());
            let image = (cfg.cond_channels > 0 && !drop).then_some(ex.image_cond);
            Ok(Item {
                xt,
                eps,
                t,
                text,
                image,
            })
        })
        .collect()
}

/// Minimizes the epsilon-prediction MSE with SGD plus momentum. Each step
/// draws a fresh batch; `t` is uniform over the schedule. Deterministic for a
/// given seed: batches are drawn sequentially and per-example gradients are
/// reduced in order.
pub fn train_tiny(
    net: &TinyDenoiser,
    data: &SyntheticDataset,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::domain(
            "training needs batch_size >= 1, lr > 0 and momentum in [0, 1)",
        ));
    }
    if data.channels() != net.config().data_channels {
        return Err(Error::shape(
            format!("{} data channels", net.config().data_channels),
            format!("{} dataset channels", data.channels()),
        ));
    }
    let mut model = net.clone();
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut params = model.params();
    let mut velocity = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(cfg.steps);
    let inv = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let batch = draw_batch(
            &model,
            data,
            schedule,
            cfg.batch_size,
            cfg.cond_dropout,
            &mut rng,
        )?;
        let results: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_iter()
            .map(|it| {
                let req = DenoiseRequest::new(&it.xt, it.t, schedule)
                    .with_text(it.text.as_deref())
                    .with_image(it.image.as_ref());
                model.loss_and_grad(&req, &it.eps)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; params.len()];
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        loss *= inv;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v + g * inv;
            *p -= cfg.lr * *v;
        }
        model.set_params(&params)?;
    }
    Ok(TrainOutcome { model, losses })
}

/// Mean epsilon MSE over `count` fresh examples drawn from `seed`, with the
/// class condition supplied.
pub fn evaluate_mse(
    net: &TinyDenoiser,
    data: &SyntheticDataset,
    schedule: &NoiseSchedule,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let batch = draw_batch(net, data, schedule, count, 0.0, &mut rng)?;
    let losses: Vec<Result<f64>> = batch
        .par_iter()
        .map(|it| {
            let req = DenoiseRequest::new(&it.xt, it.t, schedule)
                .with_text(it.text.as_deref())
                .with_image(it.image.as_ref());
            net.loss(&req, &it.eps)
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / count.max(1) as f64)
}

/// A fixed input/target pair for gradient checking.
#[derive(Clone, Debug)]
pub struct GradProbe {
    pub input: ImageTensor,
    pub target: ImageTensor,
    pub t: usize,
    pub text_cond: Option<Vec<f64>>,
    pub image_cond: Option<ImageTensor>,
    pub schedule: NoiseSchedule,
}

impl GradProbe {
    /// Random probe matching `net`'s inputs. Inputs are shifted away from
    /// exact zeros.
    pub fn random(net: &TinyDenoiser, size: usize, schedule: NoiseSchedule, rng: &mut Rng) -> Self {
        let cfg = net.config();
        let nudge = |v: f64| if v.abs() < 1e-3 { v + 1e-2 } else { v };
        let input = ImageTensor::randn(cfg.data_channels, size, size, rng).map(nudge);
        let target = ImageTensor::randn(cfg.data_channels, size, size, rng);
        let t = rng.range_inclusive(1, schedule.num_steps());
        let text_cond = (cfg.text_dim > 0 && rng.uniform() < 0.5)
            .then(|| (0..cfg.text_dim).map(|_| rng.normal()).collect());
        let image_cond = (cfg.cond_channels > 0)
            .then(|| ImageTensor::randn(cfg.cond_channels, size, size, rng).map(nudge));
        Self {
            input,
            target,
            t,
            text_cond,
            image_cond,
            schedule,
        }
    }

    pub fn request(&self) -> DenoiseRequest<'_> {
        DenoiseRequest::new(&self.input, self.t, &self.schedule)
            .with_text(self.text_cond.as_deref())
            .with_image(self.image_cond.as_ref())
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Max over parameters of `|a - n| / max(|a| + |n|, 1e-6)`, where `a` is the
/// backpropagated gradient and `n` the central difference with step 1e-4.
pub fn grad_check(net: &TinyDenoiser, probe: &GradProbe) -> Result<f64> {
    let req = probe.request();
    let (_, analytic) = net.loss_and_grad(&req, &probe.target)?;
    let base = net.params();
    let numeric: Vec<Result<f64>> = (0..base.len())
        .into_par_iter()
        .map(|i| {
            let mut m = net.clone();
            let mut p = base.clone();
            p[i] = base[i] + GRAD_CHECK_STEP;
            m.set_params(&p)?;
            let up = m.loss(&req, &probe.target)?;
            p[i] = base[i] - GRAD_CHECK_STEP;
            m.set_params(&p)?;
            let down = m.loss(&req, &probe.target)?;
            Ok((up - down) / (2.0 * GRAD_CHECK_STEP))
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let n = n?;
        worst = worst.max((a - n).abs() / (a.abs() + n.abs()).max(1e-6));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Activation, Denoiser, TinyConfig};
    use crate::schedule::LinearBetas;

    fn small_config() -> TinyConfig {
        TinyConfig {
            data_channels: 1,
            cond_channels: 1,
            text_dim: 2,
            hidden: 4,
            activation: Activation::Leaky(0.1),
        }
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::from_linear(50, LinearBetas::scaled_for(50), 0.0).unwrap()
    }

    #[test]
    fn random_net_gradients() {
        let net = TinyDenoiser::new(small_config(), 5).unwrap();
        assert!(net.num_params() <= 500);
        let mut rng = Rng::seed_from_u64(11);
        for _ in 0..3 {
            let probe = GradProbe::random(&net, 6, schedule(), &mut rng);
            let err = grad_check(&net, &probe).unwrap();
            assert!(err < 1e-4, "max relative error {err}");
        }
    }

    #[test]
    fn linear_net_gradients_are_exact() {
        let cfg = TinyConfig {
            activation: Activation::Identity,
            ..small_config()
        };
        let net = TinyDenoiser::new(cfg, 6).unwrap();
        let mut rng = Rng::seed_from_u64(12);
        let probe = GradProbe::random(&net, 5, schedule(), &mut rng);
        let (_, a) = net.loss_and_grad(&probe.request(), &probe.target).unwrap();
        let base = net.params();
        for i in (0..base.len()).step_by(7) {
            let mut m = net.clone();
            let mut p = base.clone();
            p[i] += GRAD_CHECK_STEP;
            m.set_params(&p).unwrap();
            let up = m.loss(&probe.request(), &probe.target).unwrap();
            p[i] = base[i] - GRAD_CHECK_STEP;
            m.set_params(&p).unwrap();
            let down = m.loss(&probe.request(), &probe.target).unwrap();
            let n = (up - down) / (2.0 * GRAD_CHECK_STEP);
            assert!((a[i] - n).abs() < 1e-8, "param {i}: {} vs {n}", a[i]);
        }
    }

    #[test]
    fn zero_net_bias_gradient_is_twice_mean_residual() {
        let net = TinyDenoiser::zeroed(small_config()).unwrap();
        let mut rng = Rng::seed_from_u64(13);
        let probe = GradProbe::random(&net, 4, schedule(), &mut rng);
        let (_, g) = net.loss_and_grad(&probe.request(), &probe.target).unwrap();
        let out = net.predict_eps(&probe.request()).unwrap();
        let resid = out.axpby(1.0, &probe.target, -1.0).unwrap();
        let mean_resid = resid.sum() / resid.len() as f64;
        let l = net.layers();
        let bias3 = l[0].num_params() + l[1].num_params() + l[2].weights.len();
        assert!((g[bias3] - 2.0 * mean_resid).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_leave_weights_unchanged() {
        let net = TinyDenoiser::new(small_config(), 1).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train_tiny(&net, &SyntheticDataset::default(), &schedule(), &cfg).unwrap();
        assert_eq!(out.model, net);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn zero_predictor_baseline_is_about_one() {
        let net = TinyDenoiser::zeroed(TinyConfig::default()).unwrap();
        let mse = evaluate_mse(&net, &SyntheticDataset::default(), &schedule(), 64, 3).unwrap();
        assert!((mse - 1.0).abs() < 0.05, "{mse}");
    }

    #[test]
    fn short_training_is_deterministic_and_helps() {
        let net = TinyDenoiser::new(TinyConfig::default(), 2).unwrap();
        let data = SyntheticDataset::default();
        let cfg = TrainConfig {
            steps: 60,
            ..TrainConfig::default()
        };
        let a = train_tiny(&net, &data, &schedule(), &cfg).unwrap();
        let b = train_tiny(&net, &data, &schedule(), &cfg).unwrap();
        assert_eq!(a.model, b.model);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.losses), bits(&b.losses));
        let before = evaluate_mse(&net, &data, &schedule(), 64, 9).unwrap();
        let after = evaluate_mse(&a.model, &data, &schedule(), 64, 9).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn dataset_ranges_and_latent_form() {
        let mut rng = Rng::seed_from_u64(4);
        let d = SyntheticDataset::default();
        for _ in 0..20 {
            let ex = d.sample(&mut rng).unwrap();
            assert_eq!(ex.x0.shape().to_string(), "1x16x16");
            assert!(ex.x0.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let l = d.with_codec(Some(LatentCodec::default()));
        let ex = l.sample(&mut rng).unwrap();
        assert_eq!(ex.x0.shape().to_string(), "4x8x8");
        assert_eq!(ex.image_cond.shape().to_string(), "4x8x8");
        assert!(SyntheticDataset::new(7).is_err());
    }
}
