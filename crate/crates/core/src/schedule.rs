//! Noise schedules, signal-to-noise ratios and resolution-aware re-scheduling.
//!
//! Timesteps are 1-based: `t = 1..=T`. `alpha_bar(0)` is defined as 1 so the
//! boundary formulas need no special cases.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Literal default beta range.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Default SNR multiplier for a 2x-per-axis resolution jump.
pub const DEFAULT_GAMMA: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    eta: f64,
}

/// Parameters of a linear-beta schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBetas {
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for LinearBetas {
    fn default() -> Self {
        Self {
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl LinearBetas {
    /// The default range rescaled so a `T`-step chain covers the same total
    /// noise as 1000 steps of the default: `beta * 1000 / T`.
    ///
    /// With the unscaled range a 50-step chain ends at `alpha_bar ~ 0.6`, far
    /// from the pure-noise initialization the samplers assume; the rescaled
    /// range ends at `alpha_bar ~ 7.7e-6`.
    pub fn scaled_for(num_steps: usize) -> Self {
        let scale = 1000.0 / num_steps.max(1) as f64;
        Self {
            beta_start: (DEFAULT_BETA_START * scale).min(0.5),
            beta_end: (DEFAULT_BETA_END * scale).min(0.999),
        }
    }
}

/// `eta * sqrt((1 - ab_prev) / (1 - ab)) * sqrt(1 - ab / ab_prev)`.
pub fn ddim_sigma(alpha_bar: f64, alpha_bar_prev: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    let ratio = ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar)).max(0.0);
    let step = (1.0 - alpha_bar / alpha_bar_prev).max(0.0);
    eta * ratio.sqrt() * step.sqrt()
}

/// `ab / (gamma - (gamma - 1) * ab)`: divides the SNR by `gamma`.
pub fn rescale_alpha_bar(alpha_bar: f64, gamma: f64) -> f64 {
    alpha_bar / (gamma - (gamma - 1.0) * alpha_bar)
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::domain(format!("eta must lie in [0, 1], got {eta}")));
    }
    Ok(())
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        if betas.is_empty() {
            return Err(Error::domain("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::domain(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigmas = Self::sigmas_for(&alpha_bars, eta);
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
            eta,
        })
    }

    /// Builds a schedule directly from cumulative products, which must be
    /// strictly decreasing inside `(0, 1)`.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        if alpha_bars.is_empty() {
            return Err(Error::domain("schedule needs at least one step"));
        }
        let mut prev = 1.0;
        let mut alphas = Vec::with_capacity(alpha_bars.len());
        for &ab in &alpha_bars {
            if !(ab > 0.0 && ab < prev) {
                return Err(Error::domain(format!(
                    "alpha_bar sequence must decrease strictly inside (0, 1); got {ab} after {prev}"
                )));
            }
            alphas.push(ab / prev);
            prev = ab;
        }
        let betas: Vec<f64> = alphas.iter().map(|a| 1.0 - a).collect();
        let alphas = betas.iter().map(|b| 1.0 - b).collect();
        let sigmas = Self::sigmas_for(&alpha_bars, eta);
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
            eta,
        })
    }

    /// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64, eta: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::domain("T must be >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::domain(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if num_steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (num_steps - 1) as f64;
            (0..num_steps)
                .map(|i| {
                    if i == num_steps - 1 {
                        beta_end
                    } else {
                        beta_start + step * i as f64
                    }
                })
                .collect()
        };
        Self::from_betas(betas, eta)
    }

    pub fn from_linear(num_steps: usize, betas: LinearBetas, eta: f64) -> Result<Self> {
        Self::linear(num_steps, betas.beta_start, betas.beta_end, eta)
    }

    fn sigmas_for(alpha_bars: &[f64], eta: f64) -> Vec<f64> {
        let mut prev = 1.0;
        alpha_bars
            .iter()
            .map(|&ab| {
                let s = ddim_sigma(ab, prev, eta);
                prev = ab;
                s
            })
            .collect()
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::Timestep {
                t,
                num_steps: self.num_steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Same cumulative products, different stochasticity.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        Ok(Self {
            sigmas: Self::sigmas_for(&self.alpha_bars, eta),
            eta,
            ..self.clone()
        })
    }

    /// `alpha_bar / (1 - alpha_bar)` at timestep `t`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        if ab >= 1.0 {
            return Err(Error::InfiniteSnr(t));
        }
        Ok(ab / (1.0 - ab))
    }

    /// Replaces every `alpha_bar` with `alpha_bar / (gamma - (gamma - 1) alpha_bar)`,
    /// dividing the SNR at every timestep by `gamma`. Per-step alphas are the
    /// ratios of consecutive new products; sigmas are re-derived with the
    /// same eta.
    pub fn reschedule(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::domain(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        if gamma == 1.0 {
            return Ok(self.clone());
        }
        let alpha_bars = self
            .alpha_bars
            .iter()
            .map(|&ab| rescale_alpha_bar(ab, gamma))
            .collect();
        Self::from_alpha_bars(alpha_bars, self.eta)
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn forward_diffuse(
        &self,
        x0: &ImageTensor,
        t: usize,
        eps: &ImageTensor,
    ) -> Result<ImageTensor> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// CSV with header `t,beta,alpha,alpha_bar,sigma`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "beta", "alpha", "alpha_bar", "sigma"])?;
        for t in 1..=self.num_steps() {
            out.write_record([
                t.to_string(),
                self.beta(t).to_string(),
                self.alpha(t).to_string(),
                self.alpha_bar(t).to_string(),
                self.sigma(t).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a schedule written by [`NoiseSchedule::write_csv`]. Eta is
    /// recovered from the stored sigmas.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let expected = ["t", "beta", "alpha", "alpha_bar", "sigma"];
        if headers.iter().ne(expected.iter().copied()) {
            return Err(Error::format(
                "schedule csv",
                format!("unexpected header {headers:?}"),
            ));
        }
        let mut rows: Vec<[f64; 5]> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let mut row = [0.0; 5];
            for (slot, field) in row.iter_mut().zip(rec.iter()) {
                *slot = field
                    .parse()
                    .map_err(|e| Error::format("schedule csv", format!("{field:?}: {e}")))?;
            }
            if row[0] as usize != rows.len() + 1 {
                return Err(Error::format(
                    "schedule csv",
                    "timesteps must run 1..T in order",
                ));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::format("schedule csv", "no rows"));
        }
        let alpha_bars: Vec<f64> = rows.iter().map(|r| r[3]).collect();
        let mut eta = 0.0;
        let mut prev = 1.0;
        for (row, &ab) in rows.iter().zip(&alpha_bars) {
            let unit = ddim_sigma(ab, prev, 1.0);
            if row[4] > 0.0 && unit > 0.0 {
                eta = (row[4] / unit).clamp(0.0, 1.0);
                break;
            }
            prev = ab;
        }
        let mut s = Self::from_alpha_bars(alpha_bars, eta)?;
        s.betas = rows.iter().map(|r| r[1]).collect();
        s.alphas = rows.iter().map(|r| r[2]).collect();
        s.sigmas = rows.iter().map(|r| r[4]).collect();
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn default_fifty_step_schedule_is_deterministic() {
        let s = NoiseSchedule::linear(50, DEFAULT_BETA_START, DEFAULT_BETA_END, 0.0).unwrap();
        assert_eq!(s.num_steps(), 50);
        assert!(s.sigmas().iter().all(|&v| v == 0.0));
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(50), 0.02);
    }

    #[test]
    fn explicit_betas_products() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2], 0.0).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn invariants_hold() {
        let s = NoiseSchedule::linear(50, 0.002, 0.4, 1.0).unwrap();
        for t in 1..=50 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn eta_one_sigma_is_posterior_std() {
        let s = NoiseSchedule::linear(20, 0.01, 0.2, 1.0).unwrap();
        for t in 1..=20 {
            let posterior = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
            assert!((s.sigma(t).powi(2) - posterior).abs() < 1e-14);
        }
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn constructor_errors() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02, 0.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02, 0.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02, 0.0).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0, 0.0).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 0.02, 1.5).is_err());
        assert!(NoiseSchedule::from_alpha_bars(vec![0.5, 0.6], 0.0).is_err());
    }

    #[test]
    fn snr_values() {
        let s = NoiseSchedule::from_alpha_bars(vec![0.72, 0.5, 1e-12], 0.0).unwrap();
        assert!((s.snr(1).unwrap() - 0.72 / 0.28).abs() < 1e-12);
        assert!((s.snr(1).unwrap() - 2.571_428_571_428_571).abs() < 1e-12);
        assert_eq!(s.snr(2).unwrap(), 1.0);
        assert!(s.snr(3).unwrap() < 1e-11);
        assert!(matches!(s.snr(4), Err(Error::Timestep { .. })));
    }

    #[test]
    fn infinite_snr_reported() {
        // alpha_bar rounds to exactly 1 in f64
        let s = NoiseSchedule::from_betas(vec![1e-17], 0.0).unwrap();
        assert!(matches!(s.snr(1), Err(Error::InfiniteSnr(1))));
    }

    #[test]
    fn reschedule_examples() {
        let s = NoiseSchedule::from_alpha_bars(vec![0.5, 0.25], 0.0).unwrap();
        assert_eq!(s.reschedule(1.0).unwrap(), s);
        let r = s.reschedule(4.0).unwrap();
        assert!((r.alpha_bar(1) - 0.2).abs() < 1e-15);
        assert!(s.reschedule(0.0).is_err());
        assert!(s.reschedule(-1.0).is_err());
    }

    #[test]
    fn reschedule_keeps_eta_and_rederives_sigma() {
        let s = NoiseSchedule::linear(30, 0.005, 0.3, 0.5).unwrap();
        let r = s.reschedule(4.0).unwrap();
        assert_eq!(r.eta(), 0.5);
        for t in 1..=30 {
            let expect = ddim_sigma(r.alpha_bar(t), r.alpha_bar(t - 1), 0.5);
            assert_eq!(r.sigma(t), expect);
        }
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = NoiseSchedule::from_alpha_bars(vec![0.72], 0.0).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let eps = ImageTensor::randn(1, 3, 3, &mut rng);
        let x0 = ImageTensor::zeros(1, 3, 3);
        let xt = s.forward_diffuse(&x0, 1, &eps).unwrap();
        for (a, e) in xt.data().iter().zip(eps.data()) {
            assert!((a - 0.28f64.sqrt() * e).abs() < 1e-15);
        }
        let c = ImageTensor::filled(1, 3, 3, 0.4);
        let xt = s
            .forward_diffuse(&c, 1, &ImageTensor::zeros(1, 3, 3))
            .unwrap();
        assert!(xt
            .data()
            .iter()
            .all(|v| (v - 0.72f64.sqrt() * 0.4).abs() < 1e-15));

        assert!(s.forward_diffuse(&c, 2, &eps).is_err());
        assert!(s
            .forward_diffuse(&c, 1, &ImageTensor::zeros(1, 2, 3))
            .is_err());
    }

    #[test]
    fn zero_noise_limit_returns_x0() {
        let s = NoiseSchedule::from_betas(vec![1e-17], 0.0).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0);
        let mut rng = Rng::seed_from_u64(4);
        let x0 = ImageTensor::randn(1, 2, 2, &mut rng);
        let eps = ImageTensor::randn(1, 2, 2, &mut rng);
        assert_eq!(s.forward_diffuse(&x0, 1, &eps).unwrap(), x0);
    }

    #[test]
    fn forward_variance_monte_carlo() {
        let s = NoiseSchedule::linear(50, 0.002, 0.4, 0.0).unwrap();
        let t = 10;
        let x0 = ImageTensor::filled(1, 100, 100, 0.3);
        let mut rng = Rng::seed_from_u64(77);
        let eps = ImageTensor::randn(1, 100, 100, &mut rng);
        let xt = s.forward_diffuse(&x0, t, &eps).unwrap();
        let n = xt.len() as f64;
        let mean = xt.sum() / n;
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 1.0 - s.alpha_bar(t);
        // standard error of a sample variance: target * sqrt(2 / (n - 1))
        let se = target * (2.0 / (n - 1.0)).sqrt();
        assert!((var - target).abs() < 3.0 * se, "{var} vs {target}");
    }

    #[test]
    fn scaled_default_reaches_pure_noise() {
        let b = LinearBetas::scaled_for(50);
        assert!((b.beta_start - 0.002).abs() < 1e-15);
        assert!((b.beta_end - 0.4).abs() < 1e-15);
        let s = NoiseSchedule::from_linear(50, b, 0.0).unwrap();
        assert!(s.alpha_bar(50) < 1e-5);
        let unscaled = NoiseSchedule::from_linear(50, LinearBetas::default(), 0.0).unwrap();
        assert!(unscaled.alpha_bar(50) > 0.6);
    }

    #[test]
    fn csv_roundtrip() {
        let s = NoiseSchedule::linear(12, 0.01, 0.3, 0.7)
            .unwrap()
            .reschedule(2.0)
            .unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,beta,alpha,alpha_bar,sigma\n1,"));
        let back = NoiseSchedule::read_csv(&buf[..]).unwrap();
        assert_eq!(back.alpha_bars(), s.alpha_bars());
        assert_eq!(back.sigmas(), s.sigmas());
        assert_eq!(back.betas(), s.betas());
        assert!((back.eta() - 0.7).abs() < 1e-12);
    }
}
