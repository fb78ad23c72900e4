use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::analysis::{
    high_band_energy, plan_cost_ratio, psnr, radial_spectrum, write_spectrum_csv, CostModel,
    CostReport,
};
use crate::denoiser::{
    evaluate_mse, train_tiny, AnyDenoiser, SyntheticDataset, TinyDenoiser, TrainConfig,
};
use crate::pipeline::{run_direct_upsample, run_pipeline, RunOptions, RunOutput, StagePlan};
use crate::tensor::ImageTensor;
use crate::tensorops::ResampleMethod;

use super::config::{DenoiserSpec, Resolved, TraceLevel};
use super::{CliError, Common, Outputs};

fn image_name(stem: &str, img: &ImageTensor) -> String {
    let ext = if img.channels() == 3 { "ppm" } else { "pgm" };
    format!("{stem}.{ext}")
}

fn image_bytes(img: &ImageTensor) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    img.write_preview(&mut buf)?;
    Ok(buf)
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut buf = serde_json::to_vec_pretty(v)
        .map_err(|e| CliError::numeric("NUMERIC_JSON", e.to_string()))?;
    buf.push(b'\n');
    Ok(buf)
}

fn cost_bytes(report: &CostReport) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    Ok(buf)
}

fn denoiser_label(spec: &DenoiserSpec) -> String {
    match spec {
        DenoiserSpec::Oracle { .. } => "oracle".into(),
        DenoiserSpec::Tiny { weights } => format!(
            "tiny:{}",
            weights
                .file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
        ),
    }
}

fn run_once(
    r: &Resolved,
    plan: &StagePlan,
    opts: &RunOptions,
    seed: u64,
) -> Result<RunOutput, CliError> {
    let mut d = r.denoiser.clone();
    Ok(run_pipeline(
        plan,
        &mut d,
        r.codec.as_ref(),
        &r.schedule,
        opts,
        seed,
    )?)
}

pub fn generate(c: &Common) -> Result<(), CliError> {
    let cfg = c.load_config()?;
    let r = Resolved::new(&cfg)?;
    let out_dir = c.require_out_dir(&cfg)?;
    let out = run_once(&r, &r.plan, &r.options, cfg.seed)?;
    let cost = plan_cost_ratio(&r.plan, &CostModel::default())?;

    let mut files = Outputs::default();
    files.add(image_name("image", &out.image), image_bytes(&out.image)?);
    let mut raw = Vec::new();
    out.image.write_mft(&mut raw)?;
    files.add("image.mft", raw);
    if cfg.trace == TraceLevel::Relays {
        for s in &out.trace.relays {
            files.add(
                PathBuf::from("trace").join(image_name(
                    &format!("relay_{}", s.stage),
                    &s.predicted_clean,
                )),
                image_bytes(&s.predicted_clean)?,
            );
        }
        let mut m = Vec::new();
        out.trace.write_manifest(&mut m)?;
        files.add("trace/manifest.csv", m);
    }
    files.add("cost.csv", cost_bytes(&cost)?);

    let relays: Vec<_> = out
        .trace
        .relays
        .iter()
        .map(|s| {
            json!({
                "stage": s.stage,
                "t": s.t,
                "alpha_bar_clean": s.alpha_bar_clean,
                "alpha_bar_renoise": s.alpha_bar_renoise,
            })
        })
        .collect();
    let listed: Vec<String> = files
        .paths()
        .map(|p| p.to_string_lossy().into_owned())
        .chain(std::iter::once("manifest.json".to_string()))
        .collect();
    let manifest = json!({
        "spec_version": cfg.spec_version,
        "command": "generate",
        "seed": cfg.seed,
        "preset": cfg.preset,
        "plan": r.plan,
        "relay_timesteps": r.plan.relay_timesteps(),
        "schedule": {
            "num_steps": r.schedule.num_steps(),
            "eta": r.schedule.eta(),
            "beta_first": r.schedule.beta(1),
            "beta_last": r.schedule.beta(r.schedule.num_steps()),
            "sigma_policy": "rederived from each stage's rescheduled alpha_bar",
        },
        "step_rule": cfg.step_rule,
        "denoiser": denoiser_label(&cfg.denoiser),
        "codec": r.codec.as_ref().map(|k| json!({"factor": k.factor(), "lossy": k.is_lossy()})),
        "guidance": r.options.guidance,
        "text_cond": r.options.conditions.text,
        "reverse_steps": out.trace.reverse_steps,
        "stages": out.trace.stages,
        "relays": relays,
        "cost_ratio": cost.ratio,
        "image_shape": out.image.shape().to_string(),
        "image_stats": out.image.stats(),
        "files": listed,
    });
    files.add("manifest.json", json_bytes(&manifest)?);
    files.commit(&out_dir)?;
    let stats = out.image.stats();
    println!(
        "generate: stages={} reverse_steps={} image={} mean={:.6} std={:.6} cost_ratio={:.6} out={}",
        r.plan.num_stages(),
        out.trace.reverse_steps,
        out.image.shape(),
        stats.mean,
        stats.std,
        cost.ratio,
        out_dir.display()
    );
    Ok(())
}

pub fn cost(c: &Common) -> Result<(), CliError> {
    let cfg = c.load_config()?;
    let plan = cfg.resolve_plan()?;
    let report = plan_cost_ratio(&plan, &CostModel::default())?;
    let bytes = cost_bytes(&report)?;
    if let Some(dir) = c.out_dir(&cfg) {
        let mut files = Outputs::default();
        files.add("cost.csv", bytes);
        files.commit(&dir)?;
    }
    let mut stdout = std::io::stdout().lock();
    let name = cfg.preset.as_deref().unwrap_or("config");
    let _ = writeln!(
        stdout,
        "{:<8} {:>7} {:>7} {:>6} {:>16}",
        "stage", "height", "width", "steps", "cost"
    );
    for (i, s) in report.per_stage.iter().enumerate() {
        let _ = writeln!(
            stdout,
            "{:<8} {:>7} {:>7} {:>6} {:>16}",
            i + 1,
            s.height,
            s.width,
            s.steps,
            s.cost
        );
    }
    let _ = writeln!(
        stdout,
        "total {} baseline {}",
        report.total, report.baseline_total
    );
    let _ = writeln!(stdout, "{name} ratio {:.4}", report.ratio);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Upsampler,
    Gamma,
    Delta,
    Truncation,
    Guidance,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Upsampler => "upsampler",
            AblationKind::Gamma => "gamma",
            AblationKind::Delta => "delta",
            AblationKind::Truncation => "truncation",
            AblationKind::Guidance => "guidance",
        }
    }
}

pub const GAMMA_SWEEP: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
pub const DELTA_SWEEP: [usize; 3] = [1, 2, 3];
pub const GUIDANCE_SWEEP: [f64; 5] = [1.0, 3.0, 5.0, 7.0, 9.0];

/// The `(label, plan, guidance)` settings a sweep visits.
pub fn ablation_settings(
    kind: AblationKind,
    plan: &StagePlan,
    guidance: f64,
) -> Result<Vec<(String, StagePlan, f64)>, CliError> {
    let later = |f: &dyn Fn(&mut crate::pipeline::Stage)| {
        let mut p = plan.clone();
        p.stages.iter_mut().skip(1).for_each(f);
        p
    };
    let needs_relay = || {
        if plan.num_stages() < 2 {
            Err(CliError::config(
                "ABLATE_NEEDS_STAGES",
                format!(
                    "the {} sweep needs a plan with at least two stages",
                    kind.name()
                ),
            ))
        } else {
            Ok(())
        }
    };
    Ok(match kind {
        AblationKind::Upsampler => ResampleMethod::ALL
            .iter()
            .map(|&m| {
                (
                    format!("{}_{}", m.config_label(), m.name()),
                    plan.clone().with_upsampler(m),
                    guidance,
                )
            })
            .collect(),
        AblationKind::Gamma => {
            needs_relay()?;
            GAMMA_SWEEP
                .iter()
                .map(|&g| {
                    (
                        format!("gamma_{g}"),
                        later(&|s| s.gamma = Some(g)),
                        guidance,
                    )
                })
                .collect()
        }
        AblationKind::Delta => {
            needs_relay()?;
            DELTA_SWEEP
                .iter()
                .map(|&d| (format!("delta_{d}"), later(&|s| s.dilation = d), guidance))
                .collect()
        }
        AblationKind::Guidance => GUIDANCE_SWEEP
            .iter()
            .map(|&w| (format!("w_{w}"), plan.clone(), w))
            .collect(),
        AblationKind::Truncation => {
            needs_relay()?;
            let total = plan.total_steps;
            let rest_stages = plan.num_stages() - 1;
            let mut firsts: Vec<usize> = [0.5, 0.6, 0.7, 0.8, 0.9]
                .iter()
                .map(|f| (f * total as f64).round() as usize)
                .filter(|&t1| t1 >= 1 && total - t1 >= rest_stages)
                .collect();
            firsts.dedup();
            firsts
                .into_iter()
                .map(|t1| {
                    let rest = total - t1;
                    let mut p = plan.clone();
                    p.stages[0].steps = t1;
                    for (j, s) in p.stages.iter_mut().skip(1).enumerate() {
                        s.steps = rest / rest_stages + usize::from(j < rest % rest_stages);
                    }
                    let label = p
                        .stages
                        .iter()
                        .map(|s| s.steps.to_string())
                        .collect::<Vec<_>>()
                        .join("-");
                    (format!("steps_{label}"), p, guidance)
                })
                .collect()
        }
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub psnr_db: f64,
    pub high_band_energy: Option<f64>,
    pub cost_ratio: f64,
    pub reverse_steps: usize,
}

fn high_band(img: &ImageTensor) -> Option<f64> {
    radial_spectrum(img).ok().map(|b| high_band_energy(&b))
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn ablate(kind: AblationKind, c: &Common) -> Result<(), CliError> {
    let cfg = c.load_config()?;
    let r = Resolved::new(&cfg)?;
    let out_dir = c.require_out_dir(&cfg)?;
    if kind == AblationKind::Guidance && r.options.conditions.text.is_none() {
        return Err(CliError::config(
            "ABLATE_NEEDS_TEXT_COND",
            "the guidance sweep needs text_cond in the config",
        ));
    }
    let settings = ablation_settings(kind, &r.plan, r.options.guidance)?;
    for (label, plan, _) in &settings {
        plan.validate()
            .map_err(|e| CliError::config("CONFIG_INVALID_PLAN", format!("{label}: {e}")))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.jobs)
        .build()
        .map_err(|e| CliError::config("CONFIG_INVALID", e.to_string()))?;
    let seed = cfg.seed;
    let (reference, direct, runs) = pool.install(|| {
        let reference = run_once(&r, &r.plan.baseline(), &r.options, seed);
        let direct = {
            let mut d: AnyDenoiser = r.denoiser.clone();
            run_direct_upsample(
                &r.plan,
                &mut d,
                r.codec.as_ref(),
                &r.schedule,
                &r.options,
                seed,
            )
            .map_err(CliError::from)
        };
        let runs: Vec<Result<RunOutput, CliError>> = settings
            .par_iter()
            .map(|(_, plan, w)| {
                let opts = RunOptions {
                    guidance: *w,
                    ..r.options.clone()
                };
                run_once(&r, plan, &opts, seed)
            })
            .collect();
        (reference, direct, runs)
    });
    let reference = reference?;
    let direct = direct?;
    let model = CostModel::default();

    let mut files = Outputs::default();
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    let header = [
        "kind",
        "setting",
        "psnr_db",
        "high_band_energy",
        "cost_ratio",
        "reverse_steps",
    ];
    csv_out
        .write_record(header)
        .map_err(crate::error::Error::from)?;
    let mut rows = Vec::new();
    for ((label, plan, _), run) in settings.iter().zip(runs) {
        let run = run?;
        let row = AblationRow {
            setting: label.clone(),
            psnr_db: psnr(&run.image, &reference.image)?,
            high_band_energy: high_band(&run.image),
            cost_ratio: plan_cost_ratio(plan, &model)?.ratio,
            reverse_steps: run.trace.reverse_steps,
        };
        csv_out
            .write_record(&[
                kind.name().to_string(),
                row.setting.clone(),
                fmt_f64(row.psnr_db),
                row.high_band_energy.map_or_else(String::new, fmt_f64),
                format!("{:.6}", row.cost_ratio),
                row.reverse_steps.to_string(),
            ])
            .map_err(crate::error::Error::from)?;
        files.add(
            PathBuf::from("images").join(image_name(label, &run.image)),
            image_bytes(&run.image)?,
        );
        if let Ok(bands) = radial_spectrum(&run.image) {
            let mut buf = Vec::new();
            write_spectrum_csv(&bands, &mut buf)?;
            files.add(PathBuf::from("spectra").join(format!("{label}.csv")), buf);
        }
        rows.push(row);
    }
    let table = csv_out
        .into_inner()
        .map_err(|e| CliError::io("IO_WRITE", e.to_string()))?;
    files.add("ablation.csv", table);

    let mut base = csv::Writer::from_writer(Vec::new());
    base.write_record(["run", "psnr_db", "high_band_energy", "cost_ratio"])
        .map_err(crate::error::Error::from)?;
    let base_rows = [
        ("reference", &reference.image, 1.0),
        ("direct_upsample", &direct.image, {
            let low = r.plan.base_only();
            model.plan_cost(&low) / model.plan_cost(&r.plan.baseline())
        }),
    ];
    for (name, img, ratio) in base_rows {
        base.write_record(&[
            name.to_string(),
            fmt_f64(psnr(img, &reference.image)?),
            high_band(img).map_or_else(String::new, fmt_f64),
            format!("{ratio:.6}"),
        ])
        .map_err(crate::error::Error::from)?;
        files.add(
            PathBuf::from("images").join(image_name(name, img)),
            image_bytes(img)?,
        );
    }
    files.add(
        "baseline.csv",
        base.into_inner()
            .map_err(|e| CliError::io("IO_WRITE", e.to_string()))?,
    );
    let manifest = json!({
        "spec_version": cfg.spec_version,
        "command": "ablate",
        "kind": kind.name(),
        "seed": seed,
        "preset": cfg.preset,
        "plan": r.plan,
        "denoiser": denoiser_label(&cfg.denoiser),
        "reference": "all steps at the final resolution, same seed",
        "rows": rows,
    });
    files.add("manifest.json", json_bytes(&manifest)?);
    files.commit(&out_dir)?;
    println!(
        "ablate: kind={} settings={} out={}",
        kind.name(),
        settings.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn train(c: &Common) -> Result<(), CliError> {
    let cfg = c.load_config()?;
    let ts = &cfg.train;
    let out_dir = c.require_out_dir(&cfg)?;
    let codec = if ts.latent {
        Some(
            crate::codec::LatentCodec::haar(cfg.codec.factor)
                .map_err(|e| CliError::config("CONFIG_INVALID_CODEC", e.to_string()))?,
        )
    } else {
        None
    };
    let data = SyntheticDataset::new(ts.size)
        .map_err(|e| CliError::config("CONFIG_INVALID_TRAIN", e.to_string()))?
        .with_codec(codec.clone());
    let schedule = cfg.schedule(ts.total_steps)?;
    let net = TinyDenoiser::new(cfg.tiny_config(codec.as_ref()), cfg.seed)
        .map_err(|e| CliError::config("CONFIG_INVALID_TRAIN", e.to_string()))?
        .quantized_f32();
    let tc = TrainConfig {
        steps: ts.steps,
        lr: ts.lr,
        momentum: ts.momentum,
        batch_size: ts.batch_size,
        cond_dropout: ts.cond_dropout,
        seed: cfg.seed.wrapping_add(1),
    };
    if tc.batch_size == 0 || !(tc.lr > 0.0) || !(0.0..1.0).contains(&tc.momentum) {
        return Err(CliError::config(
            "CONFIG_INVALID_TRAIN",
            "training needs batch_size >= 1, lr > 0 and momentum in [0, 1)",
        ));
    }
    let outcome = train_tiny(&net, &data, &schedule, &tc)?;
    let trained = outcome.model.quantized_f32();
    let eval = evaluate_mse(&trained, &data, &schedule, 256, cfg.seed.wrapping_add(2))?;

    let mut files = Outputs::default();
    let mut init_bytes = Vec::new();
    net.write_weights(&mut init_bytes)?;
    files.add("init.mfw", init_bytes);
    let mut w = Vec::new();
    trained.write_weights(&mut w)?;
    files.add("weights.mfw", w);
    let mut loss = csv::Writer::from_writer(Vec::new());
    loss.write_record(["step", "mse"])
        .map_err(crate::error::Error::from)?;
    for (i, l) in outcome.losses.iter().enumerate() {
        loss.write_record(&[(i + 1).to_string(), format!("{l:.9}")])
            .map_err(crate::error::Error::from)?;
    }
    files.add(
        "loss.csv",
        loss.into_inner()
            .map_err(|e| CliError::io("IO_WRITE", e.to_string()))?,
    );
    let manifest = json!({
        "spec_version": cfg.spec_version,
        "command": "train",
        "seed": cfg.seed,
        "train": ts,
        "params": trained.num_params(),
        "final_loss": outcome.losses.last(),
        "eval_mse": eval,
    });
    files.add("train.json", json_bytes(&manifest)?);
    files.commit(&out_dir)?;
    println!(
        "train: steps={} params={} final_loss={} eval_mse={:.6} out={}",
        ts.steps,
        trained.num_params(),
        outcome
            .losses
            .last()
            .map_or_else(|| "n/a".to_string(), |l| format!("{l:.6}")),
        eval,
        out_dir.display()
    );
    Ok(())
}

pub fn schedule_dump(c: &Common) -> Result<(), CliError> {
    let cfg = c.load_config()?;
    let plan = if cfg.plan.is_some() || cfg.preset.is_some() {
        Some(cfg.resolve_plan()?)
    } else {
        None
    };
    let total = plan
        .as_ref()
        .map_or(cfg.train.total_steps, |p| p.total_steps);
    let base = cfg.schedule(total)?;
    let mut files = Outputs::default();
    let mut buf = Vec::new();
    base.write_csv(&mut buf)?;
    let base_csv = buf.clone();
    files.add("schedule.csv", buf);
    if let Some(p) = &plan {
        for i in 1..p.num_stages() {
            let s = base.reschedule(p.gamma(i))?;
            let mut buf = Vec::new();
            s.write_csv(&mut buf)?;
            files.add(format!("schedule_stage{}.csv", i + 1), buf);
        }
    }
    match c.out_dir(&cfg) {
        Some(dir) => {
            files.commit(&dir)?;
            println!("schedule-dump: steps={total} out={}", dir.display());
        }
        None => {
            let _ = std::io::stdout().write_all(&base_csv);
        }
    }
    Ok(())
}
