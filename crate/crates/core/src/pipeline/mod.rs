//! Truncate-and-relay sampling across resolutions.
//!
//! A [`StagePlan`] splits `T` reverse steps into stages of increasing
//! resolution. Each stage denoises for its `T_i` steps on one shared global
//! timestep walk; between stages the clean estimate is upsampled (through the
//! codec in latent mode) and re-noised at the current level.

mod plan;
mod run;
mod step;

pub use plan::{preset, Preset, RelayNoiseSource, Space, Stage, StagePlan, PRESET_NAMES};
pub use run::{
    check_run, run_direct_upsample, run_pipeline, run_pipeline_observed, stage_schedules,
    working_shapes, RelaySnapshot, RunOptions, RunOutput, RunTrace, StageRecord, StepObserver,
    StepRecord,
};
pub use step::{
    predict_clean, predict_clean_from, relay_renoise, reverse_step, step_update, upsample_clean,
    Conditions, RunState, StageContext, StepRule,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LatentCodec;
    use crate::denoiser::{AnalyticGaussianDenoiser, Denoiser, TinyConfig, TinyDenoiser};
    use crate::schedule::{LinearBetas, NoiseSchedule};
    use crate::tensor::ImageTensor;
    use crate::tensorops::ResampleMethod;

    fn base(t: usize) -> NoiseSchedule {
        NoiseSchedule::from_linear(t, LinearBetas::scaled_for(t), 0.0).unwrap()
    }

    fn oracle() -> AnalyticGaussianDenoiser {
        AnalyticGaussianDenoiser::new(vec![0.4], vec![0.0225]).unwrap()
    }

    fn two_stage() -> StagePlan {
        StagePlan::new(
            vec![Stage::square(8, 40), Stage::square(16, 10)],
            Space::Pixel,
        )
        .unwrap()
    }

    #[test]
    fn consumes_exactly_t_steps() {
        let mut d = oracle();
        let out = run_pipeline(
            &two_stage(),
            &mut d,
            None,
            &base(50),
            &RunOptions::default(),
            1,
        )
        .unwrap();
        assert_eq!(out.trace.reverse_steps, 50);
        assert_eq!(out.trace.steps.len(), 50);
        assert_eq!(out.image.shape().to_string(), "1x16x16");
        assert_eq!(out.trace.relays.len(), 1);
        assert_eq!(out.trace.relays[0].t, 10);
        assert_eq!(out.trace.stages[0].t_end, 10);
        assert_eq!(out.trace.stages[1].t_start, 10);
        assert_eq!(out.trace.stages[1].t_end, 0);
    }

    #[test]
    fn single_stage_plan_never_relays() {
        let mut d = oracle();
        let plan = StagePlan::new(vec![Stage::square(8, 50)], Space::Pixel).unwrap();
        let s = base(50);
        let out = run_pipeline(&plan, &mut d, None, &s, &RunOptions::default(), 4).unwrap();
        assert!(out.trace.relays.is_empty());

        // same chain driven by hand
        let mut rng = crate::rng::Rng::seed_from_u64(4);
        let mut state = RunState {
            current: ImageTensor::randn(1, 8, 8, &mut rng),
            t: 50,
            stage_index: 0,
            rng,
        };
        let ctx = StageContext {
            schedule: &s,
            text: None,
            image: None,
            guidance: 1.0,
        };
        while state.t > 0 {
            reverse_step(&mut state, &d, &ctx, StepRule::Ddim).unwrap();
        }
        assert_eq!(state.current, out.image);
    }

    #[test]
    fn degenerate_plan_matches_prefix() {
        let mut d = oracle();
        let s = base(50);
        let one = StagePlan::new(vec![Stage::square(8, 50)], Space::Pixel).unwrap();
        let three = StagePlan::new(
            vec![
                Stage::square(8, 30),
                Stage::square(8, 12),
                Stage::square(8, 8),
            ],
            Space::Pixel,
        )
        .unwrap()
        .with_relay_noise(RelayNoiseSource::Original);
        let a = run_pipeline(&one, &mut d, None, &s, &RunOptions::default(), 9).unwrap();
        let b = run_pipeline(&three, &mut d, None, &s, &RunOptions::default(), 9).unwrap();
        for k in 0..30 {
            assert_eq!(a.trace.steps[k], b.trace.steps[k]);
        }
        assert_ne!(a.trace.steps[30], b.trace.steps[30]);
        assert_eq!(b.trace.reverse_steps, 50);
    }

    #[test]
    fn latent_mode_shapes() {
        let codec = LatentCodec::default();
        let mut d = oracle().for_latent(&codec);
        let plan = StagePlan::new(
            vec![
                Stage::square(8, 20),
                Stage::square(12, 5),
                Stage::square(16, 5),
            ],
            Space::Latent,
        )
        .unwrap();
        let out = run_pipeline(
            &plan,
            &mut d,
            Some(&codec),
            &base(30),
            &RunOptions::default(),
            2,
        )
        .unwrap();
        let shapes: Vec<&str> = out
            .trace
            .stages
            .iter()
            .map(|s| s.working_shape.as_str())
            .collect();
        assert_eq!(shapes, vec!["4x4x4", "4x6x6", "4x8x8"]);
        assert_eq!(out.image.shape().to_string(), "1x16x16");
        assert_eq!(out.trace.relays[1].upsampled.shape().to_string(), "1x16x16");
        assert!(run_pipeline(&plan, &mut d, None, &base(30), &RunOptions::default(), 2).is_err());
        let odd = StagePlan::new(
            vec![Stage::square(8, 20), Stage::square(9, 10)],
            Space::Latent,
        )
        .unwrap();
        assert!(run_pipeline(
            &odd,
            &mut d,
            Some(&codec),
            &base(30),
            &RunOptions::default(),
            2
        )
        .is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let mut d = oracle();
        let s = base(50).with_eta(1.0).unwrap();
        let a = run_pipeline(&two_stage(), &mut d, None, &s, &RunOptions::default(), 5).unwrap();
        let b = run_pipeline(&two_stage(), &mut d, None, &s, &RunOptions::default(), 5).unwrap();
        let c = run_pipeline(&two_stage(), &mut d, None, &s, &RunOptions::default(), 6).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.trace.steps, b.trace.steps);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn dilation_follows_stage_and_is_restored() {
        let mut d = TinyDenoiser::new(TinyConfig::default(), 1).unwrap();
        let plan = StagePlan::new(
            vec![Stage::square(8, 6), Stage::square(16, 4).with_dilation(2)],
            Space::Pixel,
        )
        .unwrap();
        let mut seen = Vec::new();
        let mut obs = |stage: usize, t: usize, dil: usize| seen.push((stage, t, dil));
        run_pipeline_observed(
            &plan,
            &mut d,
            None,
            &base(10),
            &RunOptions::default(),
            0,
            Some(&mut obs),
        )
        .unwrap();
        assert_eq!(seen.len(), 10);
        assert!(seen
            .iter()
            .all(|&(s, _, dil)| dil == if s == 1 { 1 } else { 2 }));
        assert_eq!(seen.first(), Some(&(1, 10, 1)));
        assert_eq!(seen.last(), Some(&(2, 1, 2)));
        assert_eq!(Denoiser::middle_dilation(&d), 1);
    }

    #[test]
    fn image_condition_reaches_every_stage() {
        let cfg = TinyConfig {
            cond_channels: 1,
            ..TinyConfig::default()
        };
        let mut d = TinyDenoiser::new(cfg, 3).unwrap();
        let opts = RunOptions {
            conditions: Conditions {
                text: None,
                image: Some(ImageTensor::filled(1, 4, 4, 0.2)),
            },
            ..RunOptions::default()
        };
        let out = run_pipeline(&two_stage(), &mut d, None, &base(50), &opts, 0).unwrap();
        let shapes: Vec<Option<String>> = out
            .trace
            .stages
            .iter()
            .map(|s| s.image_cond_shape.clone())
            .collect();
        assert_eq!(shapes, vec![Some("1x8x8".into()), Some("1x16x16".into())]);
        let bad = RunOptions {
            conditions: Conditions {
                text: None,
                image: Some(ImageTensor::zeros(2, 4, 4)),
            },
            ..RunOptions::default()
        };
        assert!(run_pipeline(&two_stage(), &mut d, None, &base(50), &bad, 0).is_err());
    }

    #[test]
    fn direct_upsample_baseline() {
        let mut d = oracle();
        let plan = two_stage().with_upsampler(ResampleMethod::Bilinear);
        let out =
            run_direct_upsample(&plan, &mut d, None, &base(50), &RunOptions::default(), 3).unwrap();
        assert_eq!(out.image.shape().to_string(), "1x16x16");
        assert_eq!(out.working.shape().to_string(), "1x8x8");
        assert!(out.trace.relays.is_empty());
    }

    #[test]
    fn schedule_length_must_match() {
        let mut d = oracle();
        assert!(run_pipeline(
            &two_stage(),
            &mut d,
            None,
            &base(40),
            &RunOptions::default(),
            0
        )
        .is_err());
    }

    #[test]
    fn trace_manifest_rows() {
        let mut d = oracle();
        let out = run_pipeline(
            &two_stage(),
            &mut d,
            None,
            &base(50),
            &RunOptions::default(),
            0,
        )
        .unwrap();
        let mut buf = Vec::new();
        out.trace.write_manifest(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "stage,global_t,min,max,mean,std");
        assert_eq!(lines.len(), 51);
        assert!(lines[50].starts_with("2,0,"));
    }
}
