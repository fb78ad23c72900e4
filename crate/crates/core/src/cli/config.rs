use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::denoiser::{
    Activation, AnalyticGaussianDenoiser, AnyDenoiser, TinyConfig, TinyDenoiser,
};
use crate::pipeline::{preset, Conditions, RunOptions, Space, StagePlan, StepRule};
use crate::schedule::{LinearBetas, NoiseSchedule};
use crate::tensor::ImageTensor;

use super::CliError;

pub const SPEC_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    /// Both bounds unset: betas scaled to the step count (0.1/T .. 20/T).
    #[serde(default)]
    pub beta_start: Option<f64>,
    #[serde(default)]
    pub beta_end: Option<f64>,
    #[serde(default)]
    pub eta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSpec {
    /// Exact predictor for per-channel Gaussian image data; in latent mode the
    /// model is mapped through the codec.
    Oracle {
        mu: Vec<f64>,
        sigma2: Vec<f64>,
    },
    Tiny {
        weights: PathBuf,
    },
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::Oracle {
            mu: vec![0.4],
            sigma2: vec![0.0225],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    #[serde(default = "two")]
    pub factor: usize,
    #[serde(default)]
    pub lossy: bool,
}

fn two() -> usize {
    2
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self {
            factor: 2,
            lossy: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    None,
    /// Relay snapshots and the per-step manifest.
    #[default]
    Relays,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_dropout")]
    pub cond_dropout: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "two")]
    pub text_dim: usize,
    #[serde(default)]
    pub cond_channels: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    /// Train on codec latents instead of pixels.
    #[serde(default)]
    pub latent: bool,
    #[serde(default = "default_total")]
    pub total_steps: usize,
}

fn default_steps() -> usize {
    2000
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    8
}
fn default_dropout() -> f64 {
    0.1
}
fn default_hidden() -> usize {
    16
}
fn default_size() -> usize {
    16
}
fn default_total() -> usize {
    50
}

impl Default for TrainSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// The JSON document read by every command.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub spec_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<StagePlan>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub codec: CodecSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<f64>,
    /// Overrides for stages 2.., applied to every later stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_cond: Option<Vec<f64>>,
    /// Path to an MFT1 tensor used as image condition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_cond: Option<PathBuf>,
    #[serde(default)]
    pub step_rule: StepRule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub trace: TraceLevel,
    #[serde(default)]
    pub train: TrainSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str(&format!("{{\"spec_version\":{SPEC_VERSION}}}"))
            .expect("all fields have defaults")
    }
}

impl RunConfig {
    /// Parses a config document and checks its version.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| CliError::config("CONFIG_PARSE", e.to_string()))?;
        if cfg.spec_version != SPEC_VERSION {
            return Err(CliError::config(
                "CONFIG_VERSION",
                format!(
                    "spec_version {} is not supported (expected {SPEC_VERSION})",
                    cfg.spec_version
                ),
            ));
        }
        Ok(cfg)
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::config("CONFIG_NOT_FOUND", format!("{}: {e}", path.display()))
        })?;
        let mut cfg = Self::from_json(&text).map_err(|e| CliError {
            message: format!("{}: {}", path.display(), e.message),
            ..e
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DenoiserSpec::Tiny { weights } = &mut cfg.denoiser {
            fix(weights);
        }
        if let Some(p) = &mut cfg.image_cond {
            fix(p);
        }
        if let Some(p) = &mut cfg.out_dir {
            fix(p);
        }
        Ok(cfg)
    }

    /// Plan from `plan`, else `preset`, with gamma/delta overrides applied.
    pub fn resolve_plan(&self) -> Result<StagePlan, CliError> {
        let mut plan = match (&self.plan, &self.preset) {
            (Some(p), _) => p.clone(),
            (None, Some(name)) => {
                preset(name)
                    .map_err(|e| CliError::config("CONFIG_UNKNOWN_PRESET", e.to_string()))?
                    .plan
            }
            (None, None) => {
                return Err(CliError::config(
                    "CONFIG_NO_PLAN",
                    "config needs a plan or a preset",
                ))
            }
        };
        for s in plan.stages.iter_mut().skip(1) {
            if self.gamma.is_some() {
                s.gamma = self.gamma;
            }
            if let Some(d) = self.delta {
                s.dilation = d;
            }
        }
        plan.validate()
            .map_err(|e| CliError::config("CONFIG_INVALID_PLAN", e.to_string()))?;
        Ok(plan)
    }

    pub fn guidance(&self) -> f64 {
        self.guidance.unwrap_or_else(|| {
            self.preset
                .as_deref()
                .and_then(|p| preset(p).ok())
                .map_or(1.0, |p| p.guidance)
        })
    }

    pub fn schedule(&self, total_steps: usize) -> Result<NoiseSchedule, CliError> {
        let betas = match (self.schedule.beta_start, self.schedule.beta_end) {
            (None, None) => LinearBetas::scaled_for(total_steps),
            (Some(beta_start), Some(beta_end)) => LinearBetas {
                beta_start,
                beta_end,
            },
            _ => {
                return Err(CliError::config(
                    "CONFIG_INVALID_SCHEDULE",
                    "set both beta_start and beta_end or neither",
                ))
            }
        };
        NoiseSchedule::from_linear(total_steps, betas, self.schedule.eta)
            .map_err(|e| CliError::config("CONFIG_INVALID_SCHEDULE", e.to_string()))
    }

    pub fn codec(&self, space: Space) -> Result<Option<LatentCodec>, CliError> {
        match space {
            Space::Pixel => Ok(None),
            Space::Latent => LatentCodec::haar(self.codec.factor)
                .map(|c| Some(c.lossy(self.codec.lossy)))
                .map_err(|e| CliError::config("CONFIG_INVALID_CODEC", e.to_string())),
        }
    }

    pub fn denoiser(&self, codec: Option<&LatentCodec>) -> Result<AnyDenoiser, CliError> {
        match &self.denoiser {
            DenoiserSpec::Oracle { mu, sigma2 } => {
                let d = AnalyticGaussianDenoiser::new(mu.clone(), sigma2.clone())
                    .map_err(|e| CliError::config("CONFIG_INVALID_DENOISER", e.to_string()))?;
                Ok(AnyDenoiser::Analytic(match codec {
                    Some(c) => d.for_latent(c),
                    None => d,
                }))
            }
            DenoiserSpec::Tiny { weights } => {
                if !weights.is_file() {
                    return Err(CliError::config(
                        "CONFIG_WEIGHTS_NOT_FOUND",
                        format!("weight file {} does not exist", weights.display()),
                    ));
                }
                let f =
                    fs::File::open(weights).map_err(|e| CliError::io("IO_READ", e.to_string()))?;
                let net = TinyDenoiser::read_weights(BufReader::new(f))
                    .map_err(|e| CliError::config("CONFIG_BAD_WEIGHTS", e.to_string()))?;
                Ok(AnyDenoiser::Tiny(net))
            }
        }
    }

    pub fn image_cond(&self) -> Result<Option<ImageTensor>, CliError> {
        let Some(p) = &self.image_cond else {
            return Ok(None);
        };
        if !p.is_file() {
            return Err(CliError::config(
                "CONFIG_IMAGE_COND_NOT_FOUND",
                format!("image condition {} does not exist", p.display()),
            ));
        }
        let f = fs::File::open(p).map_err(|e| CliError::io("IO_READ", e.to_string()))?;
        ImageTensor::read_mft(BufReader::new(f))
            .map(Some)
            .map_err(|e| CliError::config("CONFIG_BAD_IMAGE_COND", e.to_string()))
    }

    pub fn run_options(&self) -> Result<RunOptions, CliError> {
        Ok(RunOptions {
            guidance: self.guidance(),
            conditions: Conditions {
                text: self.text_cond.clone(),
                image: self.image_cond()?,
            },
            rule: self.step_rule,
            record_steps: true,
        })
    }

    pub fn tiny_config(&self, codec: Option<&LatentCodec>) -> TinyConfig {
        let t = &self.train;
        let per = codec.map_or(1, |c| c.patch_len());
        TinyConfig {
            data_channels: per,
            cond_channels: t.cond_channels * per,
            text_dim: t.text_dim,
            hidden: t.hidden,
            activation: Activation::Leaky(0.1),
        }
    }
}

/// Everything `generate` and `ablate` need, validated up front.
pub struct Resolved {
    pub plan: StagePlan,
    pub schedule: NoiseSchedule,
    pub codec: Option<LatentCodec>,
    pub denoiser: AnyDenoiser,
    pub options: RunOptions,
}

impl Resolved {
    pub fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let plan = cfg.resolve_plan()?;
        let schedule = cfg.schedule(plan.total_steps)?;
        let codec = cfg.codec(plan.space)?;
        let denoiser = cfg.denoiser(codec.as_ref())?;
        let options = cfg.run_options()?;
        crate::pipeline::check_run(&plan, &denoiser, codec.as_ref(), &schedule, &options)
            .map_err(|e| CliError::config("CONFIG_INCOMPATIBLE", e.to_string()))?;
        if let Some(t) = &options.conditions.text {
            let ok = match &denoiser {
                AnyDenoiser::Analytic(a) => t.len() == a.mu().len(),
                AnyDenoiser::Tiny(n) => t.len() == n.config().text_dim,
            };
            if !ok {
                return Err(CliError::config(
                    "CONFIG_INCOMPATIBLE",
                    format!("text_cond has length {}, denoiser expects another", t.len()),
                ));
            }
        }
        Ok(Self {
            plan,
            schedule,
            codec,
            denoiser,
            options,
        })
    }
}
