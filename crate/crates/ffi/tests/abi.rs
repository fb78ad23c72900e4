use std::ffi::{CStr, CString};
use std::ptr;

use megafusion_ffi::*;

fn last_error() -> String {
    let p = mf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn schedule_lifecycle() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(mf_schedule_new_scaled(50, 0.0, &mut s), MfStatus::Ok);
        assert_eq!(mf_schedule_num_steps(s), 50);
        let mut ab = 0.0;
        assert_eq!(mf_schedule_alpha_bar(s, 50, &mut ab), MfStatus::Ok);
        assert!(ab > 0.0 && ab < 1e-4);

        let mut r = ptr::null_mut();
        assert_eq!(mf_schedule_reschedule(s, 4.0, &mut r), MfStatus::Ok);
        for t in [1, 10, 50] {
            let (mut a, mut b) = (0.0, 0.0);
            assert_eq!(mf_schedule_snr(s, t, &mut a), MfStatus::Ok);
            assert_eq!(mf_schedule_snr(r, t, &mut b), MfStatus::Ok);
            assert!((b * 4.0 - a).abs() <= 1e-12 * a);
        }
        mf_schedule_free(r);
        mf_schedule_free(s);
        mf_schedule_free(ptr::null_mut());
    }
}

#[test]
fn linear_schedule_matches_core() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(
            mf_schedule_new_linear(10, 1e-4, 0.02, 0.0, &mut s),
            MfStatus::Ok
        );
        let core = megafusion::schedule::NoiseSchedule::linear(10, 1e-4, 0.02, 0.0).unwrap();
        let mut ab = 0.0;
        assert_eq!(mf_schedule_alpha_bar(s, 7, &mut ab), MfStatus::Ok);
        assert_eq!(ab, core.alpha_bar(7));
        mf_schedule_free(s);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(
            mf_schedule_new_linear(10, 1e-4, 0.02, 2.0, &mut s),
            MfStatus::InvalidArgument
        );
        assert!(s.is_null());
        assert!(last_error().contains("eta"));

        assert_eq!(
            mf_schedule_new_scaled(10, 0.0, ptr::null_mut()),
            MfStatus::NullPointer
        );
        let mut v = 0.0;
        assert_eq!(
            mf_schedule_snr(ptr::null(), 1, &mut v),
            MfStatus::NullPointer
        );

        assert_eq!(mf_schedule_new_scaled(10, 0.0, &mut s), MfStatus::Ok);
        assert!(mf_last_error().is_null());
        assert_eq!(
            mf_schedule_alpha_bar(s, 0, &mut v),
            MfStatus::InvalidArgument
        );
        assert_eq!(
            mf_schedule_alpha_bar(s, 11, &mut v),
            MfStatus::InvalidArgument
        );
        let mut r = ptr::null_mut();
        assert_eq!(
            mf_schedule_reschedule(s, -1.0, &mut r),
            MfStatus::InvalidArgument
        );
        mf_schedule_free(s);
    }
}

#[test]
fn preset_ratios() {
    let cases = [("sdxl", 0.4), ("sd3", 0.4642857142857143)];
    for (name, want) in cases {
        let name = CString::new(name).unwrap();
        let mut r = 0.0;
        assert_eq!(
            unsafe { mf_preset_cost_ratio(name.as_ptr(), &mut r) },
            MfStatus::Ok
        );
        assert!((r - want).abs() < 1e-12, "{r}");
    }
    let bad = CString::new("sd9").unwrap();
    let mut r = 0.0;
    assert_eq!(
        unsafe { mf_preset_cost_ratio(bad.as_ptr(), &mut r) },
        MfStatus::InvalidArgument
    );
    assert!(last_error().contains("unknown preset"));
}

#[test]
fn generate_matches_core_and_is_deterministic() {
    let preset = CString::new("sdxl-toy").unwrap();
    let run = || unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(
            mf_generate(ptr::null(), preset.as_ptr(), 3, &mut t),
            MfStatus::Ok
        );
        let (mut c, mut h, mut w) = (0, 0, 0);
        assert_eq!(mf_tensor_dims(t, &mut c, &mut h, &mut w), MfStatus::Ok);
        assert_eq!((c, h, w), (1, 64, 64));
        let mut buf = vec![0.0; c * h * w];
        assert_eq!(mf_tensor_copy(t, buf.as_mut_ptr(), buf.len()), MfStatus::Ok);
        let borrowed = std::slice::from_raw_parts(mf_tensor_data(t), buf.len());
        assert_eq!(borrowed, &buf[..]);
        let mut small = [0.0; 4];
        assert_eq!(
            mf_tensor_copy(t, small.as_mut_ptr(), small.len()),
            MfStatus::InvalidArgument
        );
        mf_tensor_free(t);
        buf
    };
    let a = run();
    assert_eq!(a, run());

    let mut cfg = megafusion::cli::RunConfig::default();
    cfg.preset = Some("sdxl-toy".into());
    let mut r = megafusion::cli::Resolved::new(&cfg).unwrap();
    let img = megafusion::pipeline::run_pipeline(
        &r.plan,
        &mut r.denoiser,
        r.codec.as_ref(),
        &r.schedule,
        &r.options,
        3,
    )
    .unwrap()
    .image;
    assert_eq!(img.data(), &a[..]);
}

#[test]
fn generate_from_json_config() {
    let cfg = CString::new(
        r#"{"spec_version":1,"plan":{"stages":[{"height":8,"width":8,"steps":8},{"height":16,"width":16,"steps":2}],"total_steps":10,"space":"pixel"}}"#,
    )
    .unwrap();
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(
            mf_generate(cfg.as_ptr(), ptr::null(), 1, &mut t),
            MfStatus::Ok
        );
        let (mut h, mut w) = (0, 0);
        assert_eq!(
            mf_tensor_dims(t, ptr::null_mut(), &mut h, &mut w),
            MfStatus::Ok
        );
        assert_eq!((h, w), (16, 16));
        mf_tensor_free(t);

        let bad = CString::new(r#"{"spec_version":9}"#).unwrap();
        assert_eq!(
            mf_generate(bad.as_ptr(), ptr::null(), 1, &mut t),
            MfStatus::InvalidArgument
        );
        assert!(last_error().contains("CONFIG_VERSION"));
        assert!(mf_tensor_data(ptr::null()).is_null());
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/megafusion.h");
    for name in [
        "mf_last_error",
        "mf_version",
        "mf_schedule_new_linear",
        "mf_schedule_new_scaled",
        "mf_schedule_num_steps",
        "mf_schedule_alpha_bar",
        "mf_schedule_snr",
        "mf_schedule_reschedule",
        "mf_schedule_free",
        "mf_preset_cost_ratio",
        "mf_generate",
        "mf_tensor_dims",
        "mf_tensor_data",
        "mf_tensor_copy",
        "mf_tensor_free",
        "MF_STATUS_NULL_POINTER",
        "typedef struct MfTensor MfTensor",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let v = unsafe { CStr::from_ptr(mf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
