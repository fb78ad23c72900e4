//! Compute-cost accounting and image metrics.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::StagePlan;
use crate::tensor::ImageTensor;

/// Relative cost of one reverse step as a function of `(height, width)`.
pub type StepCost = Arc<dyn Fn(usize, usize) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct CostModel {
    pub per_step: StepCost,
    /// Fixed cost added once per run.
    pub overhead: f64,
}

impl Default for CostModel {
    /// Area-proportional steps, no overhead.
    fn default() -> Self {
        Self {
            per_step: Arc::new(|h, w| (h * w) as f64),
            overhead: 0.0,
        }
    }
}

impl fmt::Debug for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostModel")
            .field("overhead", &self.overhead)
            .finish_non_exhaustive()
    }
}

impl CostModel {
    pub fn new(per_step: StepCost, overhead: f64) -> Self {
        Self { per_step, overhead }
    }

    pub fn step_cost(&self, height: usize, width: usize) -> f64 {
        (self.per_step)(height, width)
    }

    pub fn plan_cost(&self, plan: &StagePlan) -> f64 {
        self.overhead
            + plan
                .stages
                .iter()
                .map(|s| s.steps as f64 * self.step_cost(s.height, s.width))
                .sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCost {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub per_stage: Vec<StageCost>,
    pub total: f64,
    pub baseline_total: f64,
    pub ratio: f64,
}

impl CostReport {
    /// One row per stage, then a `total` row and a `baseline` row; the ratio
    /// goes in the last column of the total row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["row", "height", "width", "steps", "cost", "ratio"])?;
        for (i, s) in self.per_stage.iter().enumerate() {
            out.write_record(&[
                format!("stage{}", i + 1),
                s.height.to_string(),
                s.width.to_string(),
                s.steps.to_string(),
                format!("{}", s.cost),
                String::new(),
            ])?;
        }
        let steps: usize = self.per_stage.iter().map(|s| s.steps).sum();
        out.write_record(&[
            "total".to_string(),
            String::new(),
            String::new(),
            steps.to_string(),
            format!("{}", self.total),
            format!("{:.6}", self.ratio),
        ])?;
        out.write_record(&[
            "baseline".to_string(),
            String::new(),
            String::new(),
            steps.to_string(),
            format!("{}", self.baseline_total),
            "1.000000".to_string(),
        ])?;
        out.flush()?;
        Ok(())
    }
}

/// Cost of `plan` against `baseline` under `m`.
pub fn pipeline_cost(plan: &StagePlan, baseline: &StagePlan, m: &CostModel) -> Result<CostReport> {
    plan.validate()?;
    baseline.validate()?;
    let per_stage: Vec<StageCost> = plan
        .stages
        .iter()
        .map(|s| StageCost {
            height: s.height,
            width: s.width,
            steps: s.steps,
            cost: s.steps as f64 * m.step_cost(s.height, s.width),
        })
        .collect();
    let total = m.overhead + per_stage.iter().map(|s| s.cost).sum::<f64>();
    let baseline_total = m.plan_cost(baseline);
    if !(baseline_total > 0.0) {
        return Err(Error::domain("baseline cost must be positive"));
    }
    Ok(CostReport {
        per_stage,
        total,
        baseline_total,
        ratio: total / baseline_total,
    })
}

/// Cost against the all-steps-at-final-resolution plan.
pub fn plan_cost_ratio(plan: &StagePlan, m: &CostModel) -> Result<CostReport> {
    pipeline_cost(plan, &plan.baseline(), m)
}

/// Dynamic range of images in `[-1, 1]`.
pub const PSNR_PEAK: f64 = 2.0;

/// `10 log10(peak^2 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a.axpby(1.0, b, -1.0)?.sum_squares() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10())
}

/// Energy in one ring of integer radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Band {
    pub radius: usize,
    /// Frequency bins in the ring.
    pub bins: usize,
    pub energy: f64,
    pub mean_energy: f64,
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Power spectrum binned by rounded radial frequency, summed over channels.
/// Normalized so the band energies add up to the spatial sum of squares.
pub fn radial_spectrum(x: &ImageTensor) -> Result<Vec<Band>> {
    let n = x.height();
    if x.width() != n {
        return Err(Error::shape(
            "square spatial dims",
            format!("{}x{}", x.height(), x.width()),
        ));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let max_r = ((2.0 * (n / 2) as f64 * (n / 2) as f64).sqrt()).round() as usize;
    let mut energy = vec![0.0; max_r + 1];
    let mut bins = vec![0usize; max_r + 1];
    let norm = 1.0 / (n * n) as f64;
    let mut buf = vec![Complex::new(0.0, 0.0); n * n];
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for c in 0..x.channels() {
        for (b, &v) in buf.iter_mut().zip(x.channel(c)) {
            *b = Complex::new(v, 0.0);
        }
        for row in buf.chunks_exact_mut(n) {
            fft.process(row);
        }
        for kx in 0..n {
            for y in 0..n {
                col[y] = buf[y * n + kx];
            }
            fft.process(&mut col);
            for y in 0..n {
                buf[y * n + kx] = col[y];
            }
        }
        for ky in 0..n {
            for kx in 0..n {
                let fy = signed_freq(ky, n);
                let fx = signed_freq(kx, n);
                let r = (fy * fy + fx * fx).sqrt().round() as usize;
                energy[r] += buf[ky * n + kx].norm_sqr() * norm;
                if c == 0 {
                    bins[r] += 1;
                }
            }
        }
    }
    Ok(energy
        .into_iter()
        .zip(bins)
        .enumerate()
        .map(|(radius, (e, b))| Band {
            radius,
            bins: b,
            energy: e,
            mean_energy: if b > 0 { e / b as f64 } else { 0.0 },
        })
        .collect())
}

/// Total energy in the top quartile of radii (`r >= 0.75 * r_max`).
pub fn high_band_energy(bands: &[Band]) -> f64 {
    let max_r = bands.last().map_or(0, |b| b.radius);
    let cut = (0.75 * max_r as f64).ceil() as usize;
    bands
        .iter()
        .filter(|b| b.radius >= cut)
        .map(|b| b.energy)
        .sum()
}

pub fn write_spectrum_csv<W: Write>(bands: &[Band], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["radius", "bins", "energy", "mean_energy"])?;
    for b in bands {
        out.write_record(&[
            b.radius.to_string(),
            b.bins.to_string(),
            format!("{:.9e}", b.energy),
            format!("{:.9e}", b.mean_energy),
        ])?;
    }
    out.flush()?;
    Ok(())
}
