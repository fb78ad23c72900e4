use proptest::prelude::*;

use megafusion::analysis::{pipeline_cost, CostModel};
use megafusion::codec::LatentCodec;
use megafusion::denoiser::{
    guided_eps, AnalyticGaussianDenoiser, DenoiseRequest, Denoiser, TinyConfig, TinyDenoiser,
};
use megafusion::pipeline::{run_pipeline, RunOptions, Space, Stage, StagePlan};
use megafusion::rng::Rng;
use megafusion::schedule::{LinearBetas, NoiseSchedule};
use megafusion::tensor::ImageTensor;
use megafusion::tensorops::{conv2d, mean_pool, resample_to, ConvKernel, ResampleMethod};

fn schedule(t: usize) -> NoiseSchedule {
    NoiseSchedule::from_linear(t, LinearBetas::scaled_for(t), 0.0).unwrap()
}

fn method() -> impl Strategy<Value = ResampleMethod> {
    prop::sample::select(ResampleMethod::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reschedule_divides_snr(t_total in 2usize..200, gamma in 0.1f64..16.0, frac in 0.0f64..1.0) {
        let s = schedule(t_total);
        let r = s.reschedule(gamma).unwrap();
        let t = 1 + ((t_total - 1) as f64 * frac) as usize;
        let a = s.snr(t).unwrap();
        let b = r.snr(t).unwrap();
        prop_assert!((b * gamma - a).abs() <= 1e-12 * a.max(1.0));
        for t in 1..=t_total {
            let prod: f64 = r.alphas()[..t].iter().product();
            prop_assert!((prod - r.alpha_bar(t)).abs() <= 1e-12);
        }
    }

    #[test]
    fn codec_is_linear_and_invertible(
        seed in any::<u64>(),
        log_f in 0u32..3,
        c in 1usize..3,
        hb in 1usize..5,
        wb in 1usize..5,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let f = 1usize << log_f;
        let codec = LatentCodec::haar(f).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        let x = ImageTensor::randn(c, hb * f, wb * f, &mut rng);
        let y = ImageTensor::randn(c, hb * f, wb * f, &mut rng);
        let lhs = codec.encode(&x.axpby(a, &y, b).unwrap()).unwrap();
        let rhs = codec
            .encode(&x)
            .unwrap()
            .axpby(a, &codec.encode(&y).unwrap(), b)
            .unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        let back = codec.decode(&codec.encode(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() <= 1e-12);
    }

    #[test]
    fn guidance_is_affine_in_w(seed in any::<u64>(), w in -2.0f64..10.0, t in 1usize..50) {
        let net = TinyDenoiser::new(TinyConfig { text_dim: 2, hidden: 4, ..TinyConfig::default() }, seed).unwrap();
        let s = schedule(50);
        let mut rng = Rng::seed_from_u64(seed ^ 1);
        let x = ImageTensor::randn(1, 6, 6, &mut rng);
        let text = [rng.normal(), rng.normal()];
        let req = DenoiseRequest::new(&x, t, &s).with_text(Some(&text));
        let e0 = guided_eps(&net, &req, 0.0).unwrap();
        let e1 = guided_eps(&net, &req, 1.0).unwrap();
        let ew = guided_eps(&net, &req, w).unwrap();
        let want = e0.axpby(1.0 - w, &e1, w).unwrap();
        prop_assert!(ew.max_abs_diff(&want).unwrap() <= 1e-10 * (1.0 + w.abs()));
    }

    #[test]
    fn dilated_conv_matches_zero_stuffed(seed in any::<u64>(), d in 1usize..5, h in 1usize..10, w in 1usize..10) {
        let mut rng = Rng::seed_from_u64(seed);
        let weights = (0..2 * 2 * 9).map(|_| rng.normal()).collect();
        let k = ConvKernel::new(2, 2, 3, weights, vec![rng.normal(), rng.normal()])
            .unwrap()
            .dilated(d)
            .unwrap();
        let x = ImageTensor::randn(2, h, w, &mut rng);
        let a = conv2d(&x, &k).unwrap();
        let b = conv2d(&x, &k.zero_stuffed()).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn plans_consume_every_step_and_restore_dilation(
        seed in any::<u64>(),
        steps in prop::collection::vec(1usize..6, 1..4),
        dil in 1usize..4,
    ) {
        let stages: Vec<Stage> = steps
            .iter()
            .enumerate()
            .map(|(i, &n)| Stage::square(4 + 2 * i, n).with_dilation(if i == 0 { 1 } else { dil }))
            .collect();
        let plan = StagePlan::new(stages, Space::Pixel).unwrap();
        let total: usize = steps.iter().sum();
        let mut net = TinyDenoiser::new(TinyConfig { hidden: 4, ..TinyConfig::default() }, seed).unwrap();
        let opts = RunOptions { record_steps: false, ..RunOptions::default() };
        let out = run_pipeline(&plan, &mut net, None, &schedule(total), &opts, seed).unwrap();
        prop_assert_eq!(out.trace.reverse_steps, total);
        prop_assert_eq!(net.middle_dilation(), 1);
        let last = plan.final_stage();
        prop_assert_eq!((out.image.height(), out.image.width()), (last.height, last.width));
        prop_assert_eq!(out.trace.relays.len(), steps.len() - 1);
    }

    #[test]
    fn cost_is_linear_in_steps(k in 1usize..6, a in 1usize..40, b in 1usize..40) {
        let m = CostModel::default();
        let plan = StagePlan::new(vec![Stage::square(8, a), Stage::square(16, b)], Space::Pixel).unwrap();
        let scaled = StagePlan::new(vec![Stage::square(8, k * a), Stage::square(16, k * b)], Space::Pixel).unwrap();
        let c1 = pipeline_cost(&plan, &plan.baseline(), &m).unwrap();
        let ck = pipeline_cost(&scaled, &scaled.baseline(), &m).unwrap();
        prop_assert!((ck.total - k as f64 * c1.total).abs() <= 1e-9 * ck.total);
        prop_assert!((ck.ratio - c1.ratio).abs() <= 1e-12);
        prop_assert!(c1.ratio > 0.0 && c1.ratio <= 1.0);
    }

    #[test]
    fn resample_same_size_is_identity(seed in any::<u64>(), m in method(), h in 1usize..12, w in 1usize..12) {
        let mut rng = Rng::seed_from_u64(seed);
        let x = ImageTensor::randn(2, h, w, &mut rng);
        prop_assert_eq!(resample_to(&x, m, h, w).unwrap(), x);
    }

    #[test]
    fn resample_preserves_constants(v in -2.0f64..2.0, m in method(), h in 1usize..8, w in 1usize..8, sh in 1usize..4, sw in 1usize..4) {
        let x = ImageTensor::filled(1, h, w, v);
        let y = resample_to(&x, m, h * sh, w * sw).unwrap();
        for &p in y.data() {
            prop_assert!((p - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn mean_pool_preserves_mean(seed in any::<u64>(), f in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let mut rng = Rng::seed_from_u64(seed);
        let x = ImageTensor::randn(1, h * f, w * f, &mut rng);
        let p = mean_pool(&x, f).unwrap();
        prop_assert!((p.sum() / p.len() as f64 - x.sum() / x.len() as f64).abs() <= 1e-12);
    }

    #[test]
    fn oracle_is_exact_on_its_own_forward_process(seed in any::<u64>(), t in 1usize..50) {
        let d = AnalyticGaussianDenoiser::new(vec![0.4], vec![0.0225]).unwrap();
        let s = schedule(50);
        let mut rng = Rng::seed_from_u64(seed);
        let x0 = ImageTensor::filled(1, 4, 4, 0.4);
        let eps = ImageTensor::randn(1, 4, 4, &mut rng);
        let xt = s.forward_diffuse(&x0, t, &eps).unwrap();
        let pred = d.predict_eps(&DenoiseRequest::new(&xt, t, &s)).unwrap();
        // With x0 at the mean, the posterior shrinks toward it but never past it.
        for (p, e) in pred.data().iter().zip(eps.data()) {
            prop_assert!(p * e >= 0.0 && p.abs() <= e.abs() + 1e-12);
        }
    }
}
