//! Two-component zero-mean random-effect normal mixture.
//!
//! A compound is null with probability `1 - p` and carries a signal
//! `mu ~ N(0, sigma_mu_sq)` otherwise. Each replicate adds independent noise
//! `N(0, sigma0_sq)`, and the model works on replicate means, so `r`
//! replicates shrink the noise variance to `sigma0_sq / r`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seed::Seed;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Parameters of the two-group model for a single replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    /// Non-null proportion.
    pub p: f64,
    /// Measurement-noise variance of one replicate.
    pub sigma0_sq: f64,
    /// Variance of the non-null signal.
    pub sigma_mu_sq: f64,
    /// Location removed before analysis; reporting only.
    #[serde(default)]
    pub mean_shift: f64,
}

impl MixtureParams {
    pub fn new(p: f64, sigma0_sq: f64, sigma_mu_sq: f64) -> Result<Self> {
        let params = MixtureParams {
            p,
            sigma0_sq,
            sigma_mu_sq,
            mean_shift: 0.0,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_mean_shift(mut self, mean_shift: f64) -> Self {
        self.mean_shift = mean_shift;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(invalid(format!("proportion p = {} outside [0, 1]", self.p)));
        }
        if !(self.sigma0_sq.is_finite() && self.sigma0_sq > 0.0) {
            return Err(invalid(format!(
                "null variance must be positive, got {}",
                self.sigma0_sq
            )));
        }
        if !(self.sigma_mu_sq.is_finite() && self.sigma_mu_sq >= 0.0) {
            return Err(invalid(format!(
                "signal variance must be non-negative, got {}",
                self.sigma_mu_sq
            )));
        }
        if !self.mean_shift.is_finite() {
            return Err(invalid("mean shift must be finite"));
        }
        Ok(())
    }

    /// Single-replicate variance of a non-null compound.
    pub fn marginal_alt_variance(&self) -> f64 {
        self.sigma_mu_sq + self.sigma0_sq
    }

    /// Stage-II parameters: the precision ratio divides the noise variance
    /// and leaves the signal variance untouched.
    pub fn with_precision_ratio(&self, ratio: f64) -> Result<Self> {
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(invalid(format!("precision ratio must be positive, got {ratio}")));
        }
        Ok(MixtureParams {
            sigma0_sq: self.sigma0_sq / ratio,
            ..*self
        })
    }

    pub fn with_proportion(&self, p: f64) -> Result<Self> {
        let out = MixtureParams { p, ..*self };
        out.validate()?;
        Ok(out)
    }
}

/// Mixture parameters paired with a replicate count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageModel {
    params: MixtureParams,
    replicates: u32,
}

impl StageModel {
    pub fn new(params: MixtureParams, replicates: u32) -> Result<Self> {
        params.validate()?;
        if replicates == 0 {
            return Err(invalid("replicate count must be at least 1"));
        }
        Ok(StageModel { params, replicates })
    }

    pub fn params(&self) -> &MixtureParams {
        &self.params
    }

    pub fn replicates(&self) -> u32 {
        self.replicates
    }

    pub fn null_variance(&self) -> f64 {
        self.params.sigma0_sq / f64::from(self.replicates)
    }

    pub fn alt_variance(&self) -> f64 {
        self.params.sigma_mu_sq + self.null_variance()
    }

    pub fn null_sd(&self) -> f64 {
        self.null_variance().sqrt()
    }

    pub fn alt_sd(&self) -> f64 {
        self.alt_variance().sqrt()
    }
}

/// Standard deviation of a mean of `r` null replicates.
pub fn effective_null_sd(sigma0_sq: f64, r: u32) -> Result<f64> {
    if !(sigma0_sq.is_finite() && sigma0_sq > 0.0) {
        return Err(invalid(format!("null variance must be positive, got {sigma0_sq}")));
    }
    if r == 0 {
        return Err(invalid("replicate count must be at least 1"));
    }
    Ok((sigma0_sq / f64::from(r)).sqrt())
}

/// Standard deviation of a mean of `r` replicates of a non-null compound.
pub fn effective_alt_sd(params: &MixtureParams, r: u32) -> Result<f64> {
    Ok(StageModel::new(*params, r)?.alt_sd())
}

/// Normal density with mean zero.
pub fn normal_pdf(x: f64, variance: f64) -> f64 {
    (-0.5 * x * x / variance - LN_SQRT_2PI - 0.5 * variance.ln()).exp()
}

pub(crate) fn normal_ln_pdf(x: f64, variance: f64) -> f64 {
    -0.5 * x * x / variance - LN_SQRT_2PI - 0.5 * variance.ln()
}

/// Returns `((1-p) f0(x), f(x))` under the replicate-adjusted densities.
pub fn mixture_density(x: f64, model: &StageModel) -> Result<(f64, f64)> {
    if !x.is_finite() {
        return Err(invalid(format!("observation must be finite, got {x}")));
    }
    let p = model.params.p;
    let null = (1.0 - p) * normal_pdf(x, model.null_variance());
    let alt = p * normal_pdf(x, model.alt_variance());
    Ok((null, null + alt))
}

/// One simulated stage: latent states and replicate-averaged measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScreen {
    theta: Vec<bool>,
    values: Vec<f64>,
    signal: Vec<f64>,
    seed: Seed,
}

impl SimulatedScreen {
    pub fn theta(&self) -> &[bool] {
        &self.theta
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn seed(&self) -> Seed {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn non_null_count(&self) -> usize {
        self.theta.iter().filter(|&&t| t).count()
    }

    pub(crate) fn signal(&self) -> &[f64] {
        &self.signal
    }
}

/// Draws `m` compounds from the stage model.
pub fn simulate_screen(model: &StageModel, m: usize, seed: Seed) -> Result<SimulatedScreen> {
    if m == 0 {
        return Err(invalid("screen size must be at least 1"));
    }
    let mut rng = seed.rng();
    let p = model.params.p;
    let signal_sd = model.params.sigma_mu_sq.sqrt();
    let noise_sd = model.null_sd();
    let mut theta = Vec::with_capacity(m);
    let mut signal = Vec::with_capacity(m);
    let mut values = Vec::with_capacity(m);
    for _ in 0..m {
        let active = rng.random::<f64>() < p;
        let mu = if active {
            signal_sd * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let noise: f64 = rng.sample(StandardNormal);
        theta.push(active);
        signal.push(mu);
        values.push(mu + noise_sd * noise);
    }
    Ok(SimulatedScreen {
        theta,
        values,
        signal,
        seed,
    })
}

/// Stage-II measurements for carried compounds with fresh signals: the latent
/// states are inherited and each non-null draws a new signal.
pub fn simulate_stage2_from_selection(
    selected_theta: &[bool],
    model2: &StageModel,
    seed: Seed,
) -> Result<SimulatedScreen> {
    if selected_theta.is_empty() {
        return Err(invalid("stage-II selection is empty"));
    }
    let mut rng = seed.rng();
    let signal_sd = model2.params.sigma_mu_sq.sqrt();
    let signal: Vec<f64> = selected_theta
        .iter()
        .map(|&t| {
            if t {
                signal_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        })
        .collect();
    let mut values = Vec::with_capacity(signal.len());
    fill_remeasured(&signal, model2.null_sd(), &mut rng, &mut values);
    Ok(SimulatedScreen {
        theta: selected_theta.to_vec(),
        values,
        signal,
        seed,
    })
}

/// Stage-II measurements that keep each carried compound's stage-I signal and
/// redraw only the measurement noise at the stage-II precision.
pub fn simulate_stage2_carried(
    parent: &SimulatedScreen,
    selected: &[usize],
    model2: &StageModel,
    seed: Seed,
) -> Result<SimulatedScreen> {
    if selected.is_empty() {
        return Err(invalid("stage-II selection is empty"));
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= parent.len()) {
        return Err(invalid(format!(
            "selected index {bad} out of bounds for screen of {}",
            parent.len()
        )));
    }
    let theta: Vec<bool> = selected.iter().map(|&i| parent.theta[i]).collect();
    let signal: Vec<f64> = selected.iter().map(|&i| parent.signal[i]).collect();
    let mut rng = seed.rng();
    let mut values = Vec::with_capacity(signal.len());
    fill_remeasured(&signal, model2.null_sd(), &mut rng, &mut values);
    Ok(SimulatedScreen {
        theta,
        values,
        signal,
        seed,
    })
}

/// Appends `signal[j] + noise_sd * z_j` for each signal, consuming one normal
/// draw per compound in order.
pub(crate) fn fill_remeasured<R: Rng>(
    signal: &[f64],
    noise_sd: f64,
    rng: &mut R,
    out: &mut Vec<f64>,
) {
    out.extend(
        signal
            .iter()
            .map(|&mu| mu + noise_sd * rng.sample::<f64, _>(StandardNormal)),
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn params(p: f64, s0: f64, smu: f64) -> MixtureParams {
        MixtureParams::new(p, s0, smu).unwrap()
    }

    fn sample_var(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn effective_sds_direct_cases() {
        assert_eq!(effective_null_sd(1.0, 1).unwrap(), 1.0);
        assert_eq!(effective_null_sd(1.0, 4).unwrap(), 0.5);
        assert_eq!(effective_alt_sd(&params(0.1, 1.0, 0.0), 1).unwrap(), 1.0);
        let v = effective_alt_sd(&params(0.1, 1.0, 6.25), 4).unwrap();
        assert!((v - 6.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn effective_sd_errors() {
        assert!(effective_null_sd(0.0, 1).is_err());
        assert!(effective_null_sd(-1.0, 1).is_err());
        assert!(effective_null_sd(1.0, 0).is_err());
        assert!(effective_alt_sd(&params(0.1, 1.0, 1.0), 0).is_err());
        assert!(MixtureParams::new(1.5, 1.0, 1.0).is_err());
        assert!(MixtureParams::new(0.5, 0.0, 1.0).is_err());
        assert!(MixtureParams::new(0.5, 1.0, -1.0).is_err());
    }

    #[test]
    fn null_sd_matches_empirical_replicate_means() {
        // Averages of 7 raw N(0, 0.5677) replicates, built without the
        // rescaling shortcut.
        let mut rng = Seed::new(11).rng();
        let sd = 0.5677f64.sqrt();
        let means: Vec<f64> = (0..1_000_000)
            .map(|_| {
                (0..7)
                    .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                    .sum::<f64>()
                    / 7.0
            })
            .collect();
        let empirical = sample_var(&means).sqrt();
        let expected = effective_null_sd(0.5677, 7).unwrap();
        // SE of a sample SD is about sd / sqrt(2n).
        assert!((empirical - expected).abs() < 5.0 * expected / (2e6f64).sqrt());
    }

    #[test]
    fn alt_sd_matches_empirical_replicate_means() {
        let mut rng = Seed::new(12).rng();
        let (smu, s0, r) = (3.0735f64, 0.5677f64, 10);
        let means: Vec<f64> = (0..200_000)
            .map(|_| {
                let mu = smu.sqrt() * rng.sample::<f64, _>(StandardNormal);
                (0..r)
                    .map(|_| mu + s0.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .sum::<f64>()
                    / r as f64
            })
            .collect();
        let empirical = sample_var(&means).sqrt();
        let expected = effective_alt_sd(&params(0.5, s0, smu), r).unwrap();
        assert!((empirical - expected).abs() < 5.0 * expected / (4e5f64).sqrt());
    }

    #[test]
    fn degenerate_proportions() {
        let none = StageModel::new(params(0.0, 1.0, 6.25), 1).unwrap();
        let all = StageModel::new(params(1.0, 1.0, 6.25), 1).unwrap();
        assert!(simulate_screen(&none, 100, Seed::new(1)).unwrap().theta().iter().all(|t| !t));
        assert!(simulate_screen(&all, 100, Seed::new(1)).unwrap().theta().iter().all(|&t| t));
        assert!(simulate_screen(&none, 0, Seed::new(1)).is_err());
    }

    #[test]
    fn screen_matches_mixture_distribution() {
        let model = StageModel::new(params(0.1, 1.0, 6.25), 1).unwrap();
        let n = 1_000_000;
        let screen = simulate_screen(&model, n, Seed::new(99)).unwrap();
        let var = sample_var(screen.values());
        let expected = 0.9 * 1.0 + 0.1 * 7.25;
        assert!((var / expected - 1.0).abs() < 0.01, "variance {var}");

        // Kolmogorov-Smirnov against the mixture CDF.
        let null = Normal::new(0.0, 1.0).unwrap();
        let alt = Normal::new(0.0, 7.25f64.sqrt()).unwrap();
        let mut xs = screen.values().to_vec();
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 0.9 * null.cdf(x) + 0.1 * alt.cdf(x);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        // Asymptotic critical value at level 1e-3 is 1.949 / sqrt(n).
        assert!(d < 1.949 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn non_null_fraction_within_binomial_band() {
        let model = StageModel::new(params(0.1, 1.0, 6.25), 3).unwrap();
        let screen = simulate_screen(&model, 100_000, Seed::new(5)).unwrap();
        let frac = screen.non_null_count() as f64 / 1e5;
        let se = (0.1f64 * 0.9 / 1e5).sqrt();
        assert!((frac - 0.1).abs() < 4.0 * se);
    }

    #[test]
    fn simulation_is_deterministic() {
        let model = StageModel::new(params(0.2, 1.0, 2.0), 2).unwrap();
        let a = simulate_screen(&model, 500, Seed::new(3)).unwrap();
        let b = simulate_screen(&model, 500, Seed::new(3)).unwrap();
        let c = simulate_screen(&model, 500, Seed::new(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), c.values());
        assert_eq!(a.theta().len(), a.values().len());
    }

    #[test]
    fn stage2_inherits_theta() {
        let model2 = StageModel::new(params(0.5, 1.0, 2.0), 3).unwrap();
        let out = simulate_stage2_from_selection(&[false, false, false], &model2, Seed::new(1)).unwrap();
        assert_eq!(out.theta(), &[false, false, false]);
        assert!(simulate_stage2_from_selection(&[], &model2, Seed::new(1)).is_err());
    }

    #[test]
    fn stage2_zero_signal_is_null_distributed() {
        let model2 = StageModel::new(params(0.5, 1.0, 0.0), 4).unwrap();
        let theta = vec![true; 100_000];
        let out = simulate_stage2_from_selection(&theta, &model2, Seed::new(8)).unwrap();
        let var = sample_var(out.values());
        assert!((var / 0.25 - 1.0).abs() < 0.02);
    }

    #[test]
    fn stage2_non_null_variance() {
        let model2 = StageModel::new(params(0.3, 1.0 / 3.0, 6.25), 5).unwrap();
        let theta: Vec<bool> = (0..100_000).map(|i| i % 10 < 3).collect();
        let out = simulate_stage2_from_selection(&theta, &model2, Seed::new(9)).unwrap();
        let alt: Vec<f64> = out
            .values()
            .iter()
            .zip(out.theta())
            .filter(|(_, &t)| t)
            .map(|(&v, _)| v)
            .collect();
        let expected = effective_alt_sd(model2.params(), 5).unwrap().powi(2);
        assert!((sample_var(&alt) / expected - 1.0).abs() < 0.02);
    }

    #[test]
    fn carried_stage2_keeps_signal() {
        let model1 = StageModel::new(params(0.5, 1.0, 4.0), 1).unwrap();
        let parent = simulate_screen(&model1, 50, Seed::new(2)).unwrap();
        let model2 = StageModel::new(params(0.5, 1e-12, 4.0), 1).unwrap();
        let sel = [3usize, 10, 7];
        let out = simulate_stage2_carried(&parent, &sel, &model2, Seed::new(6)).unwrap();
        for (j, &i) in sel.iter().enumerate() {
            assert_eq!(out.theta()[j], parent.theta()[i]);
            assert!((out.values()[j] - parent.signal()[i]).abs() < 1e-4);
        }
        assert!(simulate_stage2_carried(&parent, &[50], &model2, Seed::new(6)).is_err());
    }

    #[test]
    fn density_collapses_without_signal() {
        let model = StageModel::new(params(0.0, 1.0, 6.25), 1).unwrap();
        let (null, marginal) = mixture_density(0.0, &model).unwrap();
        let expected = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((null - expected).abs() < 1e-15);
        assert_eq!(null, marginal);
        assert!(mixture_density(f64::NAN, &model).is_err());
        assert!(mixture_density(f64::INFINITY, &model).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        let model = StageModel::new(params(0.1, 1.0, 6.25), 2).unwrap();
        let (a, b, n) = (-40.0, 40.0, 80_000);
        let h = (b - a) / n as f64;
        // Composite Simpson.
        let mut sum = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            sum += w * mixture_density(x, &model).unwrap().1;
        }
        assert!((sum * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn density_matches_independent_evaluation() {
        // Frozen from a 30-digit mpmath evaluation of the normal density formula.
        let model = StageModel::new(params(0.1, 1.0, 6.25), 1).unwrap();
        let (null, marginal) = mixture_density(2.0, &model).unwrap();
        assert!((null - 0.048_591_869_861_869_25).abs() < 1e-15);
        assert!((marginal - 0.059_836_254_372_094_24).abs() < 1e-15);
    }

    #[test]
    fn sd_orderings_hold_over_replicates() {
        let p = params(0.1, 0.8, 1.5);
        let flat = params(0.1, 0.8, 0.0);
        let mut prev_null = f64::INFINITY;
        let mut prev_alt = f64::INFINITY;
        for r in 1..50 {
            let null = effective_null_sd(p.sigma0_sq, r).unwrap();
            let alt = effective_alt_sd(&p, r).unwrap();
            assert!(alt > null);
            assert!(null < prev_null && alt < prev_alt);
            assert!(alt > p.sigma_mu_sq.sqrt());
            assert_eq!(effective_alt_sd(&flat, r).unwrap(), effective_null_sd(0.8, r).unwrap());
            prev_null = null;
            prev_alt = alt;
        }
    }
}
