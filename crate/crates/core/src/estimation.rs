//! Estimating `(p, sigma0_sq, sigma_mu_sq)` from single-replicate screens.
//!
//! Two routes are provided. [`estimate_mc`] computes posterior means by
//! self-normalized importance sampling under the priors
//! `pi(sigma0_sq, sigma_mu_sq) ∝ (sigma0_sq + sigma_mu_sq)^-2` and
//! `pi(p) ∝ p^alpha`. [`estimate_em`] is the maximum-likelihood alternative.
//! Both expect centered data; see [`demean`].

use nalgebra::{Cholesky, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixture::{normal_ln_pdf, normal_pdf, MixtureParams};
use crate::seed::Seed;

const P_FLOOR: f64 = 1e-6;
const MIN_ESS: f64 = 50.0;
const MIN_POINTS: usize = 10;
const T_DOF: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Exponent of the `p^alpha` prior on the non-null proportion.
    pub prior_exponent_alpha: f64,
    /// Stored for reporting; the sampler here does not consume it.
    pub scott_berger_a: f64,
    pub importance_samples: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            prior_exponent_alpha: 5.58,
            scott_berger_a: 5.0,
            importance_samples: 10_000,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.importance_samples < 1000 {
            return Err(invalid(format!(
                "importance_samples must be at least 1000, got {}",
                self.importance_samples
            )));
        }
        if !(self.prior_exponent_alpha > -1.0) {
            return Err(invalid(format!(
                "prior exponent must exceed -1, got {}",
                self.prior_exponent_alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimationMethod {
    ImportanceSampling,
    Em,
}

/// One number per model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamTriple {
    pub p: f64,
    pub sigma0_sq: f64,
    pub sigma_mu_sq: f64,
}

impl ParamTriple {
    fn from_vec(v: Vector3<f64>) -> Self {
        ParamTriple {
            p: v[0],
            sigma0_sq: v[1],
            sigma_mu_sq: v[2],
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p, self.sigma0_sq, self.sigma_mu_sq]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub params: MixtureParams,
    /// Posterior standard deviations (importance sampling) or asymptotic
    /// standard errors (EM).
    pub posterior_sd: ParamTriple,
    /// Monte Carlo error of the reported means; zero for EM.
    pub mc_se: ParamTriple,
    /// Kish effective sample size of the final importance weights.
    pub effective_sample_size: Option<f64>,
    pub method: EstimationMethod,
    pub log_likelihood: f64,
    /// Set when EM collapsed onto a boundary of the parameter space.
    pub degenerate: bool,
    pub iterations: usize,
    /// Log-likelihood after each EM iteration.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

/// Subtracts the sample mean; returns the centered values and the shift.
pub fn demean(values: &[f64]) -> Result<(Vec<f64>, f64)> {
    if values.is_empty() {
        return Err(invalid("cannot center an empty vector"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("values must be finite"));
    }
    let n = values.len() as f64;
    let first = values.iter().sum::<f64>() / n;
    // Second pass removes the rounding left by the first.
    let shift = first + values.iter().map(|v| v - first).sum::<f64>() / n;
    Ok((values.iter().map(|v| v - shift).collect(), shift))
}

/// Neumaier-compensated sum.
fn compensated_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for t in terms {
        let s = sum + t;
        comp += if sum.abs() >= t.abs() {
            (sum - s) + t
        } else {
            (t - s) + sum
        };
        sum = s;
    }
    sum + comp
}

fn ln_mixture_term(x: f64, ln_null_w: f64, ln_alt_w: f64, v0: f64, v1: f64) -> f64 {
    let a = ln_null_w + normal_ln_pdf(x, v0);
    let b = ln_alt_w + normal_ln_pdf(x, v1);
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// Log-likelihood of centered single-replicate data under the two-group model.
pub fn log_likelihood(values: &[f64], params: &MixtureParams) -> Result<f64> {
    params.validate()?;
    Ok(log_likelihood_unchecked(values, params))
}

fn log_likelihood_unchecked(values: &[f64], params: &MixtureParams) -> f64 {
    let v0 = params.sigma0_sq;
    let v1 = params.sigma0_sq + params.sigma_mu_sq;
    let ln_null_w = (1.0 - params.p).ln();
    let ln_alt_w = params.p.ln();
    compensated_sum(
        values
            .iter()
            .map(|&x| ln_mixture_term(x, ln_null_w, ln_alt_w, v0, v1)),
    )
}

fn check_data(values: &[f64]) -> Result<()> {
    if values.len() < MIN_POINTS {
        return Err(invalid(format!(
            "need at least {MIN_POINTS} observations, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("values must be finite"));
    }
    if values.len() < 100 {
        log::warn!(
            "only {} observations; mixture estimates will be unstable",
            values.len()
        );
    }
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    let n = xs.len();
    xs.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Robust starting values: the null variance from the MAD about zero, the
/// total variance from the raw second moment.
fn moment_start(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let second = values.iter().map(|x| x * x).sum::<f64>() / n;
    let mad = 1.482_602_218_505_602 * median(values.iter().map(|x| x.abs()).collect());
    let null = if mad > 0.0 { mad * mad } else { second };
    (null, second.max(null))
}

/// Outer-product-of-gradients information for `(p, sigma0_sq, sigma_mu_sq)`.
fn opg_information(values: &[f64], params: &MixtureParams) -> Matrix3<f64> {
    let (p, s0, smu) = (params.p, params.sigma0_sq, params.sigma_mu_sq);
    let v1 = s0 + smu;
    let mut info = Matrix3::zeros();
    for &x in values {
        let f0 = normal_pdf(x, s0);
        let f1 = normal_pdf(x, v1);
        let f = (1.0 - p) * f0 + p * f1;
        if f <= 0.0 {
            continue;
        }
        let d0 = f0 * (x * x / (2.0 * s0 * s0) - 0.5 / s0);
        let d1 = f1 * (x * x / (2.0 * v1 * v1) - 0.5 / v1);
        let g = Vector3::new((f1 - f0) / f, ((1.0 - p) * d0 + p * d1) / f, p * d1 / f);
        info += g * g.transpose();
    }
    info
}

fn standard_errors(values: &[f64], params: &MixtureParams) -> Option<Matrix3<f64>> {
    opg_information(values, params)
        .try_inverse()
        .filter(|c| (0..3).all(|i| c[(i, i)].is_finite() && c[(i, i)] > 0.0))
}

/// EM for the zero-mean two-component scale mixture.
///
/// Iterates until the log-likelihood gain drops below `tolerance` or
/// `max_iters` is reached. The result is flagged `degenerate` when the signal
/// component collapses: `p` at a bound, vanishing signal variance, or a
/// likelihood-ratio gain over the single-normal fit below 13.8 (the 0.999
/// quantile of chi-square with 2 degrees of freedom).
pub fn estimate_em(values: &[f64], tolerance: f64, max_iters: usize) -> Result<EstimationResult> {
    check_data(values)?;
    if !(tolerance > 0.0) || max_iters == 0 {
        return Err(invalid("EM needs a positive tolerance and at least one iteration"));
    }
    let n = values.len() as f64;
    let sq: Vec<f64> = values.iter().map(|x| x * x).collect();
    let (start_null, second) = moment_start(values);
    let mut p = 0.1;
    let mut v0 = start_null;
    let mut v1 = (4.0 * start_null).max(second * 2.0);
    let current = |p: f64, v0: f64, v1: f64| MixtureParams {
        p,
        sigma0_sq: v0,
        sigma_mu_sq: (v1 - v0).max(0.0),
        mean_shift: 0.0,
    };
    let ll_of = |p: f64, v0: f64, v1: f64| {
        let (ln0, ln1) = ((1.0 - p).ln(), p.ln());
        compensated_sum(values.iter().map(|&x| ln_mixture_term(x, ln0, ln1, v0, v1)))
    };
    let mut ll = ll_of(p, v0, v1);
    let mut trace = vec![ll];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let odds = p / (1.0 - p) * (v0 / v1).sqrt();
        let c = 0.5 * (1.0 / v0 - 1.0 / v1);
        let (mut w_sum, mut w_sq, mut u_sq) = (0.0, 0.0, 0.0);
        for &s in &sq {
            // Posterior non-null probability.
            let e = odds * (c * s).exp();
            let w = if e.is_infinite() { 1.0 } else { e / (1.0 + e) };
            w_sum += w;
            w_sq += w * s;
            u_sq += (1.0 - w) * s;
        }
        let next_p = (w_sum / n).clamp(P_FLOOR, 1.0 - P_FLOOR);
        let next_v0 = (u_sq / (n - w_sum)).max(f64::MIN_POSITIVE);
        let next_v1 = (w_sq / w_sum).max(f64::MIN_POSITIVE);
        let next_ll = ll_of(next_p, next_v0, next_v1);
        debug_assert!(
            next_ll >= ll - 1e-9 * ll.abs().max(1.0),
            "EM decreased log-likelihood: {ll} -> {next_ll}"
        );
        let gain = next_ll - ll;
        p = next_p;
        v0 = next_v0;
        v1 = next_v1;
        ll = next_ll;
        trace.push(ll);
        if gain < tolerance {
            break;
        }
    }
    // Label the wider component as the signal.
    if v1 < v0 {
        std::mem::swap(&mut v0, &mut v1);
        p = 1.0 - p;
    }
    let params = current(p, v0, v1);
    let null_only = ll_of(P_FLOOR, second, second);
    let degenerate = p <= 1e-4
        || p >= 1.0 - 1e-4
        || params.sigma_mu_sq < 1e-3 * params.sigma0_sq
        || 2.0 * (ll - null_only) < 13.8;
    let posterior_sd = if degenerate {
        None
    } else {
        standard_errors(values, &params)
    }
    .map(|c| ParamTriple::from_vec(c.diagonal().map(f64::sqrt)))
    .unwrap_or(ParamTriple {
        p: 0.0,
        sigma0_sq: 0.0,
        sigma_mu_sq: 0.0,
    });
    Ok(EstimationResult {
        params,
        posterior_sd,
        mc_se: ParamTriple {
            p: 0.0,
            sigma0_sq: 0.0,
            sigma_mu_sq: 0.0,
        },
        effective_sample_size: None,
        method: EstimationMethod::Em,
        log_likelihood: ll,
        degenerate,
        iterations,
        trace,
    })
}

/// Multivariate Student-t proposal on `(logit p, ln sigma0_sq, ln sigma_mu_sq)`.
struct Proposal {
    mean: Vector3<f64>,
    chol: Matrix3<f64>,
}

impl Proposal {
    fn new(mean: Vector3<f64>, cov: Matrix3<f64>) -> Self {
        let cov = (cov + cov.transpose()) * 0.5 + Matrix3::identity() * 1e-10;
        let chol = Cholesky::new(cov)
            .map(|c| c.l())
            .unwrap_or_else(|| Matrix3::from_diagonal(&cov.diagonal().map(|d| d.abs().sqrt())));
        Proposal { mean, chol }
    }

    /// Draws a point and its log density up to a constant shared by all draws.
    fn draw<R: Rng>(&self, rng: &mut R, chi: &ChiSquared<f64>) -> (Vector3<f64>, f64) {
        let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let scale = (chi.sample(rng) / T_DOF).sqrt();
        let u = self.mean + self.chol * z / scale;
        let delta = z.norm_squared() / (scale * scale);
        (u, -0.5 * (T_DOF + 3.0) * (delta / T_DOF).ln_1p())
    }
}

fn to_natural(u: &Vector3<f64>) -> Option<MixtureParams> {
    let p = 1.0 / (1.0 + (-u[0]).exp());
    let params = MixtureParams {
        p,
        sigma0_sq: u[1].exp(),
        sigma_mu_sq: u[2].exp(),
        mean_shift: 0.0,
    };
    let ok = (P_FLOOR..=1.0 - P_FLOOR).contains(&p)
        && params.sigma0_sq.is_finite()
        && params.sigma0_sq > 0.0
        && params.sigma_mu_sq.is_finite()
        && params.sigma_mu_sq > 0.0;
    ok.then_some(params)
}

/// Log posterior density in the transformed coordinates, Jacobian included.
fn ln_target(values: &[f64], u: &Vector3<f64>, alpha: f64) -> f64 {
    let Some(params) = to_natural(u) else {
        return f64::NEG_INFINITY;
    };
    let (p, s0, smu) = (params.p, params.sigma0_sq, params.sigma_mu_sq);
    let ln_prior = alpha * p.ln() - 2.0 * (s0 + smu).ln();
    let ln_jacobian = p.ln() + (1.0 - p).ln() + s0.ln() + smu.ln();
    log_likelihood_unchecked(values, &params) + ln_prior + ln_jacobian
}

struct WeightedDraws {
    points: Vec<Vector3<f64>>,
    weights: Vec<f64>,
}

impl WeightedDraws {
    fn ess(&self) -> f64 {
        let s: f64 = self.weights.iter().sum();
        let s2: f64 = self.weights.iter().map(|w| w * w).sum();
        if s2 > 0.0 {
            s * s / s2
        } else {
            0.0
        }
    }

    fn moments<F: Fn(&Vector3<f64>) -> Vector3<f64>>(&self, f: F) -> (Vector3<f64>, Matrix3<f64>) {
        let total: f64 = self.weights.iter().sum();
        let mut mean = Vector3::zeros();
        for (u, w) in self.points.iter().zip(&self.weights) {
            mean += f(u) * (*w / total);
        }
        let mut cov = Matrix3::zeros();
        for (u, w) in self.points.iter().zip(&self.weights) {
            let d = f(u) - mean;
            cov += d * d.transpose() * (*w / total);
        }
        (mean, cov)
    }
}

fn sample_round(
    values: &[f64],
    proposal: &Proposal,
    count: usize,
    alpha: f64,
    seed: Seed,
) -> WeightedDraws {
    let mut rng = seed.rng();
    let chi = ChiSquared::new(T_DOF).expect("positive degrees of freedom");
    let draws: Vec<(Vector3<f64>, f64)> = (0..count).map(|_| proposal.draw(&mut rng, &chi)).collect();
    // Evaluation order does not affect the reduction, which runs sequentially.
    let ln_w: Vec<f64> = draws
        .par_iter()
        .map(|(u, ln_q)| ln_target(values, u, alpha) - ln_q)
        .collect();
    let max = ln_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = ln_w
        .iter()
        .map(|&l| if max.is_finite() { (l - max).exp() } else { 0.0 })
        .collect();
    WeightedDraws {
        points: draws.into_iter().map(|(u, _)| u).collect(),
        weights,
    }
}

/// Initial proposal: located at the EM fit (pulled off the boundary) with
/// spread from its information matrix, mapped to the transformed scale and
/// widened.
fn initial_proposal(values: &[f64]) -> Result<Proposal> {
    let em = estimate_em(values, 1e-8, 500)?;
    let s0 = em.params.sigma0_sq;
    let p = em.params.p.clamp(1e-3, 0.999);
    let smu = em.params.sigma_mu_sq.max(0.05 * s0);
    let start = MixtureParams {
        p,
        sigma0_sq: s0,
        sigma_mu_sq: smu,
        mean_shift: 0.0,
    };
    let mean = Vector3::new((p / (1.0 - p)).ln(), s0.ln(), smu.ln());
    let fallback = Matrix3::from_diagonal(&Vector3::new(1.0, 0.01, 1.0));
    let cov = match standard_errors(values, &start) {
        Some(c) => {
            let jac = Matrix3::from_diagonal(&Vector3::new(1.0 / (p * (1.0 - p)), 1.0 / s0, 1.0 / smu));
            let mapped = jac * c * jac;
            if (0..3).all(|i| mapped[(i, i)].is_finite()) {
                mapped
            } else {
                fallback
            }
        }
        None => fallback,
    };
    Ok(Proposal::new(mean, cov * 4.0))
}

/// Posterior means of `(p, sigma0_sq, sigma_mu_sq)` by adaptive importance
/// sampling.
///
/// Three short adaptation rounds refit a Student-t proposal to the weighted
/// draws; the reported estimates come from a final round of
/// `config.importance_samples` draws. Deterministic for a fixed seed
/// regardless of the rayon pool size.
pub fn estimate_mc(values: &[f64], config: &PriorConfig, seed: Seed) -> Result<EstimationResult> {
    config.validate()?;
    check_data(values)?;
    let alpha = config.prior_exponent_alpha;
    let mut proposal = initial_proposal(values)?;
    let adapt_count = (config.importance_samples / 4).max(1000);
    for round in 0..3u64 {
        let draws = sample_round(values, &proposal, adapt_count, alpha, seed.substream(&[round]));
        if draws.ess() < 10.0 {
            // Too few effective points to fit a covariance; widen instead.
            proposal = Proposal::new(proposal.mean, proposal.chol * proposal.chol.transpose() * 2.0);
            continue;
        }
        let (mean, cov) = draws.moments(|u| *u);
        proposal = Proposal::new(mean, cov * 1.44);
    }
    let samples = config.importance_samples;
    let draws = sample_round(values, &proposal, samples, alpha, seed.substream(&[99]));
    let ess = draws.ess();
    if ess < MIN_ESS {
        return Err(Error::DegenerateWeights { ess, samples });
    }
    // Draws outside the support carry zero weight.
    let (mean, cov) = draws.moments(|u| {
        to_natural(u).map_or_else(Vector3::zeros, |q| Vector3::new(q.p, q.sigma0_sq, q.sigma_mu_sq))
    });
    let sd = cov.diagonal().map(|v| v.max(0.0).sqrt());
    let params = MixtureParams {
        p: mean[0],
        sigma0_sq: mean[1],
        sigma_mu_sq: mean[2],
        mean_shift: 0.0,
    };
    Ok(EstimationResult {
        params,
        posterior_sd: ParamTriple::from_vec(sd),
        mc_se: ParamTriple::from_vec(sd / ess.sqrt()),
        effective_sample_size: Some(ess),
        method: EstimationMethod::ImportanceSampling,
        log_likelihood: log_likelihood_unchecked(values, &params),
        degenerate: false,
        iterations: 4,
        trace: Vec::new(),
    })
}
