use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorops::ResampleMethod;

fn one() -> usize {
    1
}

/// One resolution level of a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    /// Image-space size; latent size is this divided by the codec factor.
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    /// SNR multiplier for this stage's schedule. `None` uses the area ratio
    /// against the first stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Middle-layer dilation used while this stage runs.
    #[serde(default = "one")]
    pub dilation: usize,
}

impl Stage {
    pub fn new(height: usize, width: usize, steps: usize) -> Self {
        Self {
            height,
            width,
            steps,
            gamma: None,
            dilation: 1,
        }
    }

    pub fn square(size: usize, steps: usize) -> Self {
        Self::new(size, size, steps)
    }

    pub fn with_gamma(mut self, gamma: Option<f64>) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    #[default]
    Latent,
    Pixel,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Latent => "latent",
            Space::Pixel => "pixel",
        })
    }
}

/// Which schedule supplies `alpha_bar` when re-noising at a relay.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelayNoiseSource {
    /// The next stage's rescheduled schedule.
    #[default]
    Rescheduled,
    /// The base schedule.
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
    pub total_steps: usize,
    #[serde(default)]
    pub upsampler: ResampleMethod,
    #[serde(default)]
    pub space: Space,
    #[serde(default)]
    pub relay_noise_source: RelayNoiseSource,
}

impl StagePlan {
    /// Builds and validates a plan; `total_steps` is the sum of stage steps.
    pub fn new(stages: Vec<Stage>, space: Space) -> Result<Self> {
        let total_steps = stages.iter().map(|s| s.steps).sum();
        let plan = Self {
            stages,
            total_steps,
            upsampler: ResampleMethod::default(),
            space,
            relay_noise_source: RelayNoiseSource::default(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_upsampler(mut self, m: ResampleMethod) -> Self {
        self.upsampler = m;
        self
    }

    pub fn with_relay_noise(mut self, src: RelayNoiseSource) -> Self {
        self.relay_noise_source = src;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Plan("a plan needs at least one stage".into()));
        }
        let sum: usize = self.stages.iter().map(|s| s.steps).sum();
        if sum != self.total_steps {
            return Err(Error::Plan(format!(
                "stage steps sum to {sum}, declared total is {}",
                self.total_steps
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.steps == 0 || s.height == 0 || s.width == 0 {
                return Err(Error::Plan(format!(
                    "stage {} needs positive size and steps",
                    i + 1
                )));
            }
            if s.dilation == 0 {
                return Err(Error::Plan(format!("stage {} has dilation 0", i + 1)));
            }
            if let Some(g) = s.gamma {
                if !(g > 0.0 && g.is_finite()) {
                    return Err(Error::Plan(format!("stage {} has gamma {g}", i + 1)));
                }
            }
        }
        for (i, w) in self.stages.windows(2).enumerate() {
            if w[1].height < w[0].height || w[1].width < w[0].width {
                return Err(Error::Plan(format!(
                    "resolution decreases from stage {} to {}",
                    i + 1,
                    i + 2
                )));
            }
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn final_stage(&self) -> &Stage {
        self.stages.last().expect("validated plan is non-empty")
    }

    /// SNR multiplier for stage `i` (0-based).
    pub fn gamma(&self, i: usize) -> f64 {
        let s = &self.stages[i];
        s.gamma
            .unwrap_or_else(|| s.area() as f64 / self.stages[0].area() as f64)
    }

    /// Global step label at which each stage hands over: `T - sum_{j<=i} T_j + 1`.
    pub fn relay_timesteps(&self) -> Vec<usize> {
        let mut consumed = 0;
        self.stages[..self.stages.len() - 1]
            .iter()
            .map(|s| {
                consumed += s.steps;
                self.total_steps - consumed + 1
            })
            .collect()
    }

    /// All steps at the final resolution.
    pub fn baseline(&self) -> Self {
        let last = self.final_stage();
        Self {
            stages: vec![Stage::new(last.height, last.width, self.total_steps)],
            total_steps: self.total_steps,
            upsampler: self.upsampler,
            space: self.space,
            relay_noise_source: self.relay_noise_source,
        }
    }

    /// All steps at the first resolution.
    pub fn base_only(&self) -> Self {
        let first = &self.stages[0];
        Self {
            stages: vec![Stage::new(first.height, first.width, self.total_steps)],
            ..self.baseline()
        }
    }
}

/// Named resolution/step geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: String,
    pub plan: StagePlan,
    pub guidance: f64,
}

/// Full-scale plans; `-toy` variants divide every side by 32 (by 8 for
/// `floyd1`, whose 64px base would otherwise collapse to 2px).
pub const PRESET_NAMES: [&str; 5] = ["sdm", "sdxl", "sd3", "floyd1", "floyd2"];

pub fn preset(name: &str) -> Result<Preset> {
    let (base, toy) = match name.strip_suffix("-toy") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let (sizes, steps, space, guidance, toy_div): (&[usize], &[usize], Space, f64, usize) =
        match base {
            "sdm" => (&[512, 768, 1024], &[40, 5, 5], Space::Latent, 7.0, 32),
            "sdxl" => (&[1024, 2048], &[40, 10], Space::Latent, 7.0, 32),
            "sd3" => (&[1024, 2048], &[20, 8], Space::Latent, 7.0, 32),
            "floyd1" => (&[64, 128], &[80, 20], Space::Pixel, 7.0, 8),
            "floyd2" => (&[256, 512], &[40, 10], Space::Pixel, 4.0, 32),
            _ => {
                return Err(Error::Plan(format!(
                    "unknown preset {name:?}; known: {} (each also with -toy)",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
    let div = if toy { toy_div } else { 1 };
    let stages = sizes
        .iter()
        .zip(steps)
        .enumerate()
        .map(|(i, (&s, &n))| Stage::square(s / div, n).with_dilation(if i == 0 { 1 } else { 2 }))
        .collect();
    Ok(Preset {
        name: name.to_string(),
        plan: StagePlan::new(stages, space)?,
        guidance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sdm_relay_points() {
        let p = preset("sdm").unwrap().plan;
        assert_eq!(p.total_steps, 50);
        assert_eq!(p.relay_timesteps(), vec![11, 6]);
        assert_eq!(p.gamma(1), 2.25);
        assert_eq!(p.gamma(2), 4.0);
        assert_eq!(p.gamma(0), 1.0);
    }

    #[test]
    fn toy_geometry() {
        let p = preset("sdm-toy").unwrap().plan;
        let sizes: Vec<usize> = p.stages.iter().map(|s| s.height).collect();
        assert_eq!(sizes, vec![16, 24, 32]);
        assert_eq!(preset("floyd1-toy").unwrap().plan.stages[0].height, 8);
        assert_eq!(preset("floyd2").unwrap().guidance, 4.0);
        assert_eq!(preset("sd3").unwrap().plan.total_steps, 28);
        assert!(preset("sd4").is_err());
    }

    #[test]
    fn validation() {
        assert!(StagePlan::new(vec![], Space::Pixel).is_err());
        assert!(StagePlan::new(vec![Stage::square(8, 0)], Space::Pixel).is_err());
        assert!(StagePlan::new(
            vec![Stage::square(16, 5), Stage::square(8, 5)],
            Space::Pixel
        )
        .is_err());
        let mut p = StagePlan::new(vec![Stage::square(8, 5)], Space::Pixel).unwrap();
        p.total_steps = 6;
        assert!(p.validate().is_err());
        assert!(StagePlan::new(
            vec![Stage::square(8, 5).with_gamma(Some(0.0))],
            Space::Pixel
        )
        .is_err());
    }

    #[test]
    fn baseline_plans() {
        let p = preset("sdxl").unwrap().plan;
        let b = p.baseline();
        assert_eq!(b.stages, vec![Stage::square(2048, 50)]);
        assert_eq!(p.base_only().stages, vec![Stage::square(1024, 50)]);
        assert!(b.relay_timesteps().is_empty());
    }

    #[test]
    fn json_roundtrip_with_defaults() {
        let p: StagePlan = serde_json::from_str(
            r#"{"stages":[{"height":8,"width":8,"steps":40},{"height":16,"width":16,"steps":10,"dilation":2}],"total_steps":50,"space":"pixel"}"#,
        )
        .unwrap();
        p.validate().unwrap();
        assert_eq!(p.upsampler, ResampleMethod::Bicubic);
        assert_eq!(p.stages[1].dilation, 2);
        let back: StagePlan = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
