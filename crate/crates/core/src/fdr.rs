//! Local false discovery rates, step-up procedures and realized error metrics.

use serde::Serialize;
use libm::erfc;

use crate::error::{invalid, Result};
use crate::mixture::StageModel;

/// Positions rejected by a step-up procedure.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct RejectionSet {
    indices: Vec<usize>,
    threshold_rank: usize,
}

impl RejectionSet {
    pub fn empty() -> Self {
        RejectionSet::default()
    }

    /// Builds a set from the `k` most significant positions.
    pub(crate) fn from_ranked(mut indices: Vec<usize>) -> Self {
        let threshold_rank = indices.len();
        indices.sort_unstable();
        RejectionSet {
            indices,
            threshold_rank,
        }
    }

    /// Rejected positions in ascending order.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn threshold_rank(&self) -> usize {
        self.threshold_rank
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }
}

/// Lfdr as a function of a replicate mean, precomputed for one stage model.
///
/// Uses `1 / (1 + odds * exp(c x^2))`, which is algebraically
/// `(1-p) f0(x) / f(x)` and stays finite where both densities underflow.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LfdrCurve {
    odds: f64,
    curvature: f64,
    constant: Option<f64>,
}

impl LfdrCurve {
    pub(crate) fn new(model: &StageModel) -> Self {
        let p = model.params().p;
        let v0 = model.null_variance();
        let v1 = model.alt_variance();
        let constant = if p <= 0.0 {
            Some(1.0)
        } else if p >= 1.0 {
            Some(0.0)
        } else {
            None
        };
        LfdrCurve {
            odds: p / (1.0 - p) * (v0 / v1).sqrt(),
            curvature: 0.5 * (1.0 / v0 - 1.0 / v1),
            constant,
        }
    }

    #[inline]
    pub(crate) fn eval(&self, x: f64) -> f64 {
        match self.constant {
            Some(c) => c,
            None => 1.0 / (1.0 + self.odds * (self.curvature * x * x).exp()),
        }
    }
}

/// Posterior probability that a compound with replicate mean `x` is null.
pub fn lfdr_statistic(x: f64, model: &StageModel) -> Result<f64> {
    if !x.is_finite() {
        return Err(invalid(format!("observation must be finite, got {x}")));
    }
    Ok(LfdrCurve::new(model).eval(x))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("FDR level must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_probabilities(values: &[f64], what: &str) -> Result<()> {
    if let Some((i, v)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(invalid(format!("{what}[{i}] = {v} outside [0, 1]")));
    }
    Ok(())
}

/// Indices sorted ascending by value, ties broken by position.
fn ascending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order
}

/// Rejects the `k` smallest Lfdr values, where `k` is the largest rank whose
/// running mean of sorted Lfdr values stays at or below `alpha`.
pub fn lfdr_step_up(lfdr_values: &[f64], alpha: f64) -> Result<RejectionSet> {
    check_alpha(alpha)?;
    check_probabilities(lfdr_values, "lfdr")?;
    let order = ascending_order(lfdr_values);
    let mut sum = 0.0;
    let mut k = 0;
    for (j, &i) in order.iter().enumerate() {
        sum += lfdr_values[i];
        if sum <= alpha * (j + 1) as f64 {
            k = j + 1;
        }
    }
    Ok(RejectionSet::from_ranked(order[..k].to_vec()))
}

/// Benjamini-Hochberg step-up: rejects the `k` smallest p-values where
/// `k = max{j : p_(j) <= j alpha / m}`.
pub fn bh_step_up(p_values: &[f64], alpha: f64) -> Result<RejectionSet> {
    check_alpha(alpha)?;
    check_probabilities(p_values, "p-value")?;
    let m = p_values.len() as f64;
    let order = ascending_order(p_values);
    let k = order
        .iter()
        .enumerate()
        .rev()
        .find(|(j, &i)| p_values[i] <= (*j + 1) as f64 * alpha / m)
        .map_or(0, |(j, _)| j + 1);
    Ok(RejectionSet::from_ranked(order[..k].to_vec()))
}

/// Two-sided p-value of a replicate mean under the null `N(0, sigma0_sq / r)`.
pub fn two_sided_p_value(xbar: f64, sigma0_sq: f64, r: u32) -> Result<f64> {
    if !xbar.is_finite() {
        return Err(invalid(format!("observation must be finite, got {xbar}")));
    }
    let sd = crate::mixture::effective_null_sd(sigma0_sq, r)?;
    let z = xbar.abs() / sd;
    Ok(erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0))
}

fn check_bounds(rejected: &RejectionSet, theta: &[bool]) -> Result<()> {
    match rejected.indices.last() {
        Some(&i) if i >= theta.len() => Err(invalid(format!(
            "rejected index {i} out of bounds for {} compounds",
            theta.len()
        ))),
        _ => Ok(()),
    }
}

/// False discovery proportion; zero when nothing is rejected.
pub fn realized_fdp(rejected: &RejectionSet, theta: &[bool]) -> Result<f64> {
    check_bounds(rejected, theta)?;
    let false_pos = rejected.indices.iter().filter(|&&i| !theta[i]).count();
    Ok(false_pos as f64 / rejected.len().max(1) as f64)
}

pub fn true_positive_count(rejected: &RejectionSet, theta: &[bool]) -> Result<usize> {
    check_bounds(rejected, theta)?;
    Ok(rejected.indices.iter().filter(|&&i| theta[i]).count())
}

/// Lfdr step-up on raw replicate means, ranking by descending `|x|`.
///
/// Under the symmetric zero-mean model Lfdr is non-increasing in `|x|`, so the
/// magnitude order is the Lfdr order. Only a growing prefix of the ranking is
/// sorted, since the running mean of sorted Lfdr values is non-decreasing and
/// the procedure stops at the first rank where it exceeds `alpha`.
///
/// Returns the rejected positions, most significant first.
pub(crate) fn lfdr_step_up_by_magnitude(
    values: &[f64],
    model: &StageModel,
    alpha: f64,
    order: &mut Vec<u32>,
) -> Vec<u32> {
    let n = values.len();
    let curve = LfdrCurve::new(model);
    order.clear();
    order.extend(0..n as u32);
    let cmp = |a: &u32, b: &u32| {
        values[*b as usize]
            .abs()
            .total_cmp(&values[*a as usize].abs())
            .then(a.cmp(b))
    };
    let mut prefix = n.min(512);
    loop {
        if prefix < n {
            order.select_nth_unstable_by(prefix - 1, cmp);
        }
        order[..prefix].sort_unstable_by(cmp);
        let mut sum = 0.0;
        let mut k = 0;
        let mut exceeded = false;
        for (j, &i) in order[..prefix].iter().enumerate() {
            sum += curve.eval(values[i as usize]);
            if sum <= alpha * (j + 1) as f64 {
                k = j + 1;
            } else {
                exceeded = true;
                break;
            }
        }
        if exceeded || prefix == n {
            order.truncate(k);
            return std::mem::take(order);
        }
        prefix = n.min(prefix * 4);
    }
}

/// Top-`k` positions by descending `|x|`, ties by position.
pub(crate) fn top_by_magnitude(values: &[f64], k: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..values.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        values[*b as usize]
            .abs()
            .total_cmp(&values[*a as usize].abs())
            .then(a.cmp(b))
    };
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    if k < values.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{mixture_density, simulate_screen, MixtureParams};
    use crate::seed::Seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn model(p: f64, s0: f64, smu: f64, r: u32) -> StageModel {
        StageModel::new(MixtureParams::new(p, s0, smu).unwrap(), r).unwrap()
    }

    fn brute_lfdr_k(v: &[f64], alpha: f64) -> usize {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        (1..=s.len())
            .filter(|&j| s[..j].iter().sum::<f64>() / j as f64 <= alpha)
            .max()
            .unwrap_or(0)
    }

    fn brute_bh_k(v: &[f64], alpha: f64) -> usize {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let m = s.len() as f64;
        (1..=s.len())
            .filter(|&j| s[j - 1] <= j as f64 * alpha / m)
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn lfdr_degenerate_proportions() {
        for x in [-5.0, 0.0, 0.3, 7.0, 40.0] {
            assert_eq!(lfdr_statistic(x, &model(0.0, 1.0, 6.25, 1)).unwrap(), 1.0);
            assert_eq!(lfdr_statistic(x, &model(1.0, 1.0, 6.25, 1)).unwrap(), 0.0);
        }
        assert!(lfdr_statistic(f64::NAN, &model(0.1, 1.0, 6.25, 1)).is_err());
    }

    #[test]
    fn lfdr_agrees_with_density_ratio() {
        let m = model(0.1, 1.0, 6.25, 3);
        for x in [-3.0, -1.0, 0.0, 0.5, 2.0, 4.0] {
            let (null, marginal) = mixture_density(x, &m).unwrap();
            let l = lfdr_statistic(x, &m).unwrap();
            assert!((l - null / marginal).abs() < 1e-14);
        }
        // 30-digit mpmath value of 0.9 phi(2;1) / (0.9 phi(2;1) + 0.1 phi(2;7.25)).
        let l = lfdr_statistic(2.0, &model(0.1, 1.0, 6.25, 1)).unwrap();
        assert!((l - 0.812_080_742_215_224_3).abs() < 1e-14);
        // Extreme tails stay defined.
        assert_eq!(lfdr_statistic(1e3, &m).unwrap(), 0.0);
    }

    #[test]
    fn lfdr_matches_rejection_sampling_oracle() {
        // Bayes rule by simulation: fraction of nulls among draws landing in
        // a narrow bin around x = 2.
        let m = model(0.1, 1.0, 6.25, 1);
        let screen = simulate_screen(&m, 10_000_000, Seed::new(2024)).unwrap();
        let (mut hits, mut nulls) = (0usize, 0usize);
        for (&x, &t) in screen.values().iter().zip(screen.theta()) {
            if (x - 2.0).abs() < 0.01 {
                hits += 1;
                nulls += usize::from(!t);
            }
        }
        let frac = nulls as f64 / hits as f64;
        let se = (frac * (1.0 - frac) / hits as f64).sqrt();
        let exact = lfdr_statistic(2.0, &m).unwrap();
        assert!((frac - exact).abs() < 3.0 * se, "oracle {frac} vs {exact} (se {se})");
    }

    #[test]
    fn lfdr_step_up_examples() {
        assert!(lfdr_step_up(&[], 0.05).unwrap().is_empty());
        let r = lfdr_step_up(&[0.01, 0.03, 0.10], 0.05).unwrap();
        assert_eq!(r.threshold_rank(), 3);
        assert_eq!(r.indices(), &[0, 1, 2]);
        assert!(lfdr_step_up(&[0.10, 0.20], 0.05).unwrap().is_empty());
        assert!(lfdr_step_up(&[0.1], 0.0).is_err());
        assert!(lfdr_step_up(&[0.1], 1.0).is_err());
        assert!(lfdr_step_up(&[1.1], 0.5).is_err());
    }

    #[test]
    fn bh_examples() {
        assert!(bh_step_up(&[1.0; 10], 0.05).unwrap().is_empty());
        let r = bh_step_up(&[0.001, 0.02, 0.9], 0.05).unwrap();
        assert_eq!(r.threshold_rank(), 2);
        assert_eq!(r.indices(), &[0, 1]);
        assert!(bh_step_up(&[0.5], 1.5).is_err());
    }

    #[test]
    fn p_value_examples() {
        assert_eq!(two_sided_p_value(0.0, 2.0, 3).unwrap(), 1.0);
        assert_eq!(two_sided_p_value(60.0, 1.0, 1).unwrap(), 0.0);
        // Frozen from a 40-digit mpmath erfc(1.96 / sqrt 2).
        let p = two_sided_p_value(1.96, 1.0, 1).unwrap();
        assert!((p / 0.049_995_790_296_440_87 - 1.0).abs() < 1e-13, "{p}");
        // Replication rescales the null SD.
        let a = two_sided_p_value(0.5, 1.0, 4).unwrap();
        let b = two_sided_p_value(1.0, 1.0, 1).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(two_sided_p_value(f64::NAN, 1.0, 1).is_err());
    }

    #[test]
    fn realized_metrics() {
        let theta = [false, true, true];
        assert_eq!(realized_fdp(&RejectionSet::empty(), &theta).unwrap(), 0.0);
        assert_eq!(true_positive_count(&RejectionSet::empty(), &theta).unwrap(), 0);
        let all = RejectionSet::from_ranked(vec![0, 1, 2]);
        assert!((realized_fdp(&all, &theta).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let nulls = RejectionSet::from_ranked(vec![0]);
        assert_eq!(realized_fdp(&nulls, &theta).unwrap(), 1.0);
        let two = RejectionSet::from_ranked(vec![0, 1]);
        assert_eq!(true_positive_count(&two, &[true, true, false]).unwrap(), 2);
        let oob = RejectionSet::from_ranked(vec![5]);
        assert!(realized_fdp(&oob, &theta).is_err());
        assert!(true_positive_count(&oob, &theta).is_err());
    }

    #[test]
    fn ranking_by_magnitude_equals_ranking_by_lfdr() {
        let m = model(0.2, 1.0, 4.0, 2);
        let screen = simulate_screen(&m, 2000, Seed::new(17)).unwrap();
        let lfdr: Vec<f64> = screen
            .values()
            .iter()
            .map(|&x| lfdr_statistic(x, &m).unwrap())
            .collect();
        let by_lfdr = ascending_order(&lfdr);
        let by_mag = top_by_magnitude(screen.values(), 300);
        let mut a: Vec<usize> = by_lfdr[..300].to_vec();
        let mut b: Vec<usize> = by_mag.iter().map(|&i| i as usize).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_fdr_control() {
        let m = model(0.1, 1.0, 6.25, 1);
        let alpha = 0.05;
        let fdps: Vec<f64> = (0..200)
            .map(|rep| {
                let s = simulate_screen(&m, 5000, Seed::new(7).substream(&[rep])).unwrap();
                let l: Vec<f64> = s.values().iter().map(|&x| lfdr_statistic(x, &m).unwrap()).collect();
                let rej = lfdr_step_up(&l, alpha).unwrap();
                realized_fdp(&rej, s.theta()).unwrap()
            })
            .collect();
        let n = fdps.len() as f64;
        let mean = fdps.iter().sum::<f64>() / n;
        let sd = (fdps.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean <= alpha + 2.0 * sd / n.sqrt(), "mean FDP {mean}");
    }

    #[test]
    fn random_vectors_match_brute_force() {
        let mut rng = Seed::new(31).rng();
        for _ in 0..1000 {
            let n = rng.random_range(0..=12);
            let alpha = rng.random_range(0.01..0.5);
            // Coarse grid values so ties occur.
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 40.0).collect();
            assert_eq!(lfdr_step_up(&v, alpha).unwrap().threshold_rank(), brute_lfdr_k(&v, alpha));
            assert_eq!(bh_step_up(&v, alpha).unwrap().threshold_rank(), brute_bh_k(&v, alpha));
        }
    }

    proptest! {
        #[test]
        fn lfdr_is_even_bounded_and_decreasing(x in 0.0f64..6.0, dx in 1e-3f64..2.0,
                                               p in 0.001f64..0.999, smu in 0.01f64..10.0, r in 1u32..20) {
            let m = model(p, 1.0, smu, r);
            let a = lfdr_statistic(x, &m).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, lfdr_statistic(-x, &m).unwrap());
            let b = lfdr_statistic(x + dx, &m).unwrap();
            prop_assert!(b <= a);
        }

        #[test]
        fn step_ups_monotone_in_alpha(v in prop::collection::vec(0.0f64..=1.0, 0..40),
                                      a in 0.01f64..0.5, extra in 0.0f64..0.4) {
            let b = (a + extra).min(0.99);
            for f in [lfdr_step_up, bh_step_up] {
                let small = f(&v, a).unwrap();
                let large = f(&v, b).unwrap();
                prop_assert!(small.indices().iter().all(|&i| large.contains(i)));
            }
        }

        #[test]
        fn step_ups_permutation_equivariant(v in prop::collection::vec(0.0f64..=1.0, 1..40),
                                            alpha in 0.01f64..0.5, shift in 0usize..40) {
            // Distinct values so tie-breaking is not involved.
            let mut v = v;
            for (i, x) in v.iter_mut().enumerate() {
                *x = (*x * 0.9 + i as f64 * 1e-9).min(1.0);
            }
            let n = v.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let permuted: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
            for f in [lfdr_step_up, bh_step_up] {
                let base = f(&v, alpha).unwrap();
                let moved = f(&permuted, alpha).unwrap();
                let mut mapped: Vec<usize> = moved.indices().iter().map(|&j| perm[j]).collect();
                mapped.sort_unstable();
                prop_assert_eq!(mapped, base.indices().to_vec());
            }
        }

        #[test]
        fn magnitude_path_matches_reference(seed in 0u64..5000, n in 1usize..3000,
                                            p in 0.0f64..=1.0, alpha in 0.01f64..0.5) {
            let m = model(p, 0.3, 3.0, 4);
            let s = simulate_screen(&m, n, Seed::new(seed)).unwrap();
            let l: Vec<f64> = s.values().iter().map(|&x| lfdr_statistic(x, &m).unwrap()).collect();
            let reference = lfdr_step_up(&l, alpha).unwrap();
            let mut scratch = Vec::new();
            let fast = lfdr_step_up_by_magnitude(s.values(), &m, alpha, &mut scratch);
            prop_assert_eq!(fast.len(), reference.threshold_rank());
            if p > 0.0 && p < 1.0 {
                let fast_set = RejectionSet::from_ranked(fast.iter().map(|&i| i as usize).collect());
                prop_assert_eq!(fast_set.indices(), reference.indices());
            }
        }
    }
}
