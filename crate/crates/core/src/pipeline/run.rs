use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use crate::codec::LatentCodec;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, Shape, Stats};
use crate::tensorops::resample_to;

use super::plan::{RelayNoiseSource, Space, StagePlan};
use super::step::{
    predict_clean, relay_renoise, reverse_step, upsample_clean, Conditions, RunState, StageContext,
    StepRule,
};

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub guidance: f64,
    pub conditions: Conditions,
    pub rule: StepRule,
    /// Keep per-step tensor statistics in the trace.
    pub record_steps: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            guidance: 1.0,
            conditions: Conditions::default(),
            rule: StepRule::default(),
            record_steps: true,
        }
    }
}

/// Called before every reverse step with `(stage, t, middle_dilation)`;
/// stages are 1-based.
pub trait StepObserver {
    fn on_step(&mut self, stage: usize, t: usize, middle_dilation: usize);
}

impl<F: FnMut(usize, usize, usize)> StepObserver for F {
    fn on_step(&mut self, stage: usize, t: usize, middle_dilation: usize) {
        self(stage, t, middle_dilation)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StageRecord {
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    /// Shape of the tensor being denoised (latent shape in latent mode).
    pub working_shape: String,
    pub steps: usize,
    pub gamma: f64,
    pub dilation: usize,
    /// Noise level on entry and on exit.
    pub t_start: usize,
    pub t_end: usize,
    pub image_cond_shape: Option<String>,
    pub text_cond: bool,
}

#[derive(Clone, Debug)]
pub struct RelaySnapshot {
    /// Stage that just finished (1-based).
    pub stage: usize,
    /// Noise level of the relayed tensor.
    pub t: usize,
    pub alpha_bar_clean: f64,
    pub alpha_bar_renoise: f64,
    /// Clean estimate in image space at the finished stage's resolution.
    pub predicted_clean: ImageTensor,
    /// That estimate after upsampling to the next stage.
    pub upsampled: ImageTensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub stage: usize,
    /// Noise level after the step.
    pub t: usize,
    pub stats: Stats,
}

#[derive(Clone, Debug, Default)]
pub struct RunTrace {
    pub stages: Vec<StageRecord>,
    pub relays: Vec<RelaySnapshot>,
    pub steps: Vec<StepRecord>,
    /// Total reverse-step invocations.
    pub reverse_steps: usize,
}

impl RunTrace {
    /// CSV with one row per recorded step: `stage,global_t,min,max,mean,std`.
    pub fn write_manifest<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["stage", "global_t", "min", "max", "mean", "std"])?;
        for s in &self.steps {
            out.write_record(&[
                s.stage.to_string(),
                s.t.to_string(),
                format!("{:.9}", s.stats.min),
                format!("{:.9}", s.stats.max),
                format!("{:.9}", s.stats.mean),
                format!("{:.9}", s.stats.std),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Relay snapshots as `relay_<stage>.pgm`/`.ppm` plus `manifest.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for r in &self.relays {
            let ext = if r.predicted_clean.channels() == 3 {
                "ppm"
            } else {
                "pgm"
            };
            let f = fs::File::create(dir.join(format!("relay_{}.{ext}", r.stage)))?;
            r.predicted_clean.write_preview(BufWriter::new(f))?;
        }
        let f = fs::File::create(dir.join("manifest.csv"))?;
        self.write_manifest(BufWriter::new(f))
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Final image in data space.
    pub image: ImageTensor,
    /// Final working tensor (latent in latent mode).
    pub working: ImageTensor,
    pub trace: RunTrace,
}

/// Per-stage schedules: the base schedule rescheduled by each stage's gamma.
pub fn stage_schedules(plan: &StagePlan, base: &NoiseSchedule) -> Result<Vec<NoiseSchedule>> {
    if base.num_steps() != plan.total_steps {
        return Err(Error::Plan(format!(
            "schedule has {} steps, plan needs {}",
            base.num_steps(),
            plan.total_steps
        )));
    }
    (0..plan.num_stages())
        .map(|i| base.reschedule(plan.gamma(i)))
        .collect()
}

fn working_size(plan: &StagePlan, codec: Option<&LatentCodec>, i: usize) -> Result<(usize, usize)> {
    let s = &plan.stages[i];
    match codec {
        Some(c) => {
            let f = c.factor();
            if !s.height.is_multiple_of(f) || !s.width.is_multiple_of(f) {
                return Err(Error::Plan(format!(
                    "stage {} size {}x{} is not divisible by codec factor {f}",
                    i + 1,
                    s.height,
                    s.width
                )));
            }
            Ok((s.height / f, s.width / f))
        }
        None => Ok((s.height, s.width)),
    }
}

/// Checks that the plan, codec, and denoiser fit together before any work.
pub fn check_run(
    plan: &StagePlan,
    d: &dyn Denoiser,
    codec: Option<&LatentCodec>,
    base: &NoiseSchedule,
    opts: &RunOptions,
) -> Result<()> {
    plan.validate()?;
    match (plan.space, codec) {
        (Space::Latent, None) => return Err(Error::Plan("latent plan needs a codec".into())),
        (Space::Pixel, Some(_)) => return Err(Error::Plan("pixel plan takes no codec".into())),
        _ => {}
    }
    for i in 0..plan.num_stages() {
        working_size(plan, codec, i)?;
    }
    if let Some(c) = codec {
        if !d.data_channels().is_multiple_of(c.patch_len()) {
            return Err(Error::Plan(format!(
                "denoiser has {} channels, not a multiple of {}",
                d.data_channels(),
                c.patch_len()
            )));
        }
    }
    if base.num_steps() != plan.total_steps {
        return Err(Error::Plan(format!(
            "schedule has {} steps, plan needs {}",
            base.num_steps(),
            plan.total_steps
        )));
    }
    if !opts.guidance.is_finite() {
        return Err(Error::domain("guidance weight must be finite"));
    }
    if let Some(img) = &opts.conditions.image {
        let expected = match codec {
            Some(c) => d.image_cond_channels() / c.patch_len(),
            None => d.image_cond_channels(),
        };
        if img.channels() != expected || d.image_cond_channels() == 0 {
            return Err(Error::shape(
                format!("image condition with {expected} channels"),
                format!("{} channels", img.channels()),
            ));
        }
    }
    Ok(())
}

fn stage_condition(
    cond: Option<&ImageTensor>,
    plan: &StagePlan,
    codec: Option<&LatentCodec>,
    i: usize,
) -> Result<Option<ImageTensor>> {
    let Some(img) = cond else { return Ok(None) };
    let s = &plan.stages[i];
    let at = resample_to(img, plan.upsampler, s.height, s.width)?;
    Ok(Some(match codec {
        Some(c) => c.encode(&at)?,
        None => at,
    }))
}

/// Truncate-and-relay sampling. Starts from standard normal noise at stage
/// one, runs `T_i` reverse steps per stage, and between stages predicts the
/// clean tensor, upsamples it, and re-noises it at the current level. The
/// denoiser's middle dilation follows each stage and is restored on return.
pub fn run_pipeline(
    plan: &StagePlan,
    d: &mut dyn Denoiser,
    codec: Option<&LatentCodec>,
    base: &NoiseSchedule,
    opts: &RunOptions,
    seed: u64,
) -> Result<RunOutput> {
    run_pipeline_observed(plan, d, codec, base, opts, seed, None)
}

pub fn run_pipeline_observed(
    plan: &StagePlan,
    d: &mut dyn Denoiser,
    codec: Option<&LatentCodec>,
    base: &NoiseSchedule,
    opts: &RunOptions,
    seed: u64,
    observer: Option<&mut dyn StepObserver>,
) -> Result<RunOutput> {
    check_run(plan, d, codec, base, opts)?;
    let original = d.middle_dilation();
    let result = run_inner(plan, d, codec, base, opts, seed, observer);
    d.set_middle_dilation(original)?;
    result
}

fn run_inner(
    plan: &StagePlan,
    d: &mut dyn Denoiser,
    codec: Option<&LatentCodec>,
    base: &NoiseSchedule,
    opts: &RunOptions,
    seed: u64,
    mut observer: Option<&mut dyn StepObserver>,
) -> Result<RunOutput> {
    let schedules = stage_schedules(plan, base)?;
    let (h0, w0) = working_size(plan, codec, 0)?;
    let mut rng = Rng::seed_from_u64(seed);
    let current = ImageTensor::randn(d.data_channels(), h0, w0, &mut rng);
    let mut state = RunState {
        current,
        t: plan.total_steps,
        stage_index: 0,
        rng,
    };
    let mut trace = RunTrace::default();
    let text = opts.conditions.text.as_deref();

    for i in 0..plan.num_stages() {
        let stage = &plan.stages[i];
        state.stage_index = i;
        d.set_middle_dilation(stage.dilation)?;
        let image = stage_condition(opts.conditions.image.as_ref(), plan, codec, i)?;
        let ctx = StageContext {
            schedule: &schedules[i],
            text,
            image: image.as_ref(),
            guidance: opts.guidance,
        };
        let t_start = state.t;
        for _ in 0..stage.steps {
            if let Some(o) = observer.as_deref_mut() {
                o.on_step(i + 1, state.t, d.middle_dilation());
            }
            reverse_step(&mut state, d, &ctx, opts.rule)?;
            trace.reverse_steps += 1;
            if opts.record_steps {
                trace.steps.push(StepRecord {
                    stage: i + 1,
                    t: state.t,
                    stats: state.current.stats(),
                });
            }
        }
        trace.stages.push(StageRecord {
            stage: i + 1,
            height: stage.height,
            width: stage.width,
            working_shape: state.current.shape().to_string(),
            steps: stage.steps,
            gamma: plan.gamma(i),
            dilation: stage.dilation,
            t_start,
            t_end: state.t,
            image_cond_shape: image.as_ref().map(|c| c.shape().to_string()),
            text_cond: text.is_some(),
        });

        if i + 1 < plan.num_stages() {
            let next = &plan.stages[i + 1];
            let clean = predict_clean(&state, d, &ctx)?;
            let (up_img, z_up) =
                upsample_clean(&clean, codec, plan.upsampler, next.height, next.width)?;
            let renoise_schedule = match plan.relay_noise_source {
                RelayNoiseSource::Rescheduled => &schedules[i + 1],
                RelayNoiseSource::Original => base,
            };
            let ab = renoise_schedule.alpha_bar(state.t);
            let relayed = relay_renoise(&z_up, ab, &mut state.rng)?;
            if !relayed.all_finite() {
                return Err(Error::NonFinite {
                    stage: i + 1,
                    t: state.t,
                    context: "relay".into(),
                });
            }
            let predicted_clean = match codec {
                Some(c) => c.decode(&clean)?,
                None => clean,
            };
            trace.relays.push(RelaySnapshot {
                stage: i + 1,
                t: state.t,
                alpha_bar_clean: schedules[i].alpha_bar(state.t),
                alpha_bar_renoise: ab,
                predicted_clean,
                upsampled: up_img,
            });
            state.current = relayed;
        }
    }
    debug_assert_eq!(state.t, 0);
    let image = match codec {
        Some(c) => c.decode(&state.current)?,
        None => state.current.clone(),
    };
    Ok(RunOutput {
        image,
        working: state.current,
        trace,
    })
}

/// Comparison baseline: all `T` steps at the first stage's resolution, then a
/// single resample to the final resolution.
pub fn run_direct_upsample(
    plan: &StagePlan,
    d: &mut dyn Denoiser,
    codec: Option<&LatentCodec>,
    base: &NoiseSchedule,
    opts: &RunOptions,
    seed: u64,
) -> Result<RunOutput> {
    let low = plan.base_only();
    let mut out = run_pipeline(&low, d, codec, base, opts, seed)?;
    let last = plan.final_stage();
    out.image = resample_to(&out.image, plan.upsampler, last.height, last.width)?;
    Ok(out)
}

/// Shape of the working tensor for each stage.
pub fn working_shapes(
    plan: &StagePlan,
    d: &dyn Denoiser,
    codec: Option<&LatentCodec>,
) -> Result<Vec<Shape>> {
    (0..plan.num_stages())
        .map(|i| {
            let (h, w) = working_size(plan, codec, i)?;
            Ok(Shape::new(d.data_channels(), h, w))
        })
        .collect()
}
