//! Budget-constrained two-stage design search.
//!
//! Every feasible `(r1, |A1|)` pair is scored by Monte Carlo: simulate a
//! stage-I screen with `r1` replicates, carry the `|A1|` compounds with the
//! smallest Lfdr, re-measure them with the `r2` replicates the remaining budget
//! buys, and count the confirmations of the Lfdr step-up at the target FDR.
//! The design with the largest mean confirmation count wins.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fdr::{lfdr_step_up_by_magnitude, top_by_magnitude, LfdrCurve, RejectionSet};
use crate::mixture::{fill_remeasured, simulate_screen, MixtureParams, SimulatedScreen, StageModel};
use crate::seed::{tag, Seed};

/// Currency held in integral minor units (hundredths).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(u64);

impl Money {
    pub const fn from_minor(units: u64) -> Self {
        Money(units)
    }

    pub const fn from_major(units: u64) -> Self {
        Money(units * 100)
    }

    pub const fn minor(self) -> u64 {
        self.0
    }

    pub fn as_major(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (major, minor) = (self.0 / 100, self.0 % 100);
        if minor == 0 {
            write!(f, "{major}")
        } else {
            write!(f, "{major}.{minor:02}")
        }
    }
}

impl FromStr for Money {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches('$');
        let bad = || invalid(format!("invalid currency amount {s:?}"));
        let (major, minor) = match s.split_once('.') {
            Some((a, b)) if !b.is_empty() && b.len() <= 2 && b.bytes().all(|c| c.is_ascii_digit()) => {
                let m: u64 = b.parse().map_err(|_| bad())?;
                (a, if b.len() == 1 { m * 10 } else { m })
            }
            Some(_) => return Err(bad()),
            None => (s, 0),
        };
        if major.is_empty() || !major.bytes().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let major: u64 = major.parse().map_err(|_| bad())?;
        major
            .checked_mul(100)
            .and_then(|v| v.checked_add(minor))
            .map(Money)
            .ok_or_else(bad)
    }
}

impl Serialize for Money {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Non-null proportion used by the stage-II Lfdr after selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Proportion {
    /// The fraction of non-nulls among the carried compounds.
    #[default]
    Realized,
    /// The stage-I proportion, unchanged.
    Inherit,
}

/// How carried compounds are re-measured at stage II.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Signal {
    /// Each compound keeps its stage-I signal; only the noise is redrawn.
    #[default]
    Carried,
    /// Non-null compounds draw a new signal from the signal distribution.
    Fresh,
}

macro_rules! keyword_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($name => Ok($variant),)+
                    other => Err(invalid(format!(
                        "unknown value {other:?}; expected one of: {}",
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(Stage2Proportion { "realized" => Stage2Proportion::Realized, "inherit" => Stage2Proportion::Inherit });
keyword_enum!(Stage2Signal { "carried" => Stage2Signal::Carried, "fresh" => Stage2Signal::Fresh });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignInputs {
    /// Library size at stage I.
    pub m1: usize,
    pub budget: Money,
    /// Cost of one stage-I replicate.
    pub cost_c1: Money,
    /// Cost of one stage-II replicate.
    pub cost_c2: Money,
    /// Stage-II noise variance is the stage-I variance divided by this.
    pub precision_ratio: f64,
    pub fdr_alpha: f64,
    /// Monte Carlo replicates per candidate.
    pub mc_reps: usize,
    pub stage1_params: MixtureParams,
    /// Step of the `|A1|` grid, starting from 1.
    pub a1_stride: usize,
    pub r1_max_override: Option<u32>,
    pub stage2_proportion: Stage2Proportion,
    pub stage2_signal: Stage2Signal,
}

impl DesignInputs {
    /// Inputs with the default Monte Carlo count (100), stride 1 and stage-II
    /// rules.
    pub fn new(
        m1: usize,
        budget: Money,
        cost_c1: Money,
        cost_c2: Money,
        precision_ratio: f64,
        fdr_alpha: f64,
        stage1_params: MixtureParams,
    ) -> Self {
        DesignInputs {
            m1,
            budget,
            cost_c1,
            cost_c2,
            precision_ratio,
            fdr_alpha,
            mc_reps: 100,
            stage1_params,
            a1_stride: 1,
            r1_max_override: None,
            stage2_proportion: Stage2Proportion::default(),
            stage2_signal: Stage2Signal::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1_params.validate()?;
        if self.m1 == 0 {
            return Err(invalid("library size m1 must be positive"));
        }
        if self.cost_c1.minor() == 0 || self.cost_c2.minor() == 0 {
            return Err(invalid("replicate costs must be positive"));
        }
        if !(self.precision_ratio.is_finite() && self.precision_ratio >= 1.0) {
            return Err(invalid(format!(
                "precision ratio must be at least 1, got {}",
                self.precision_ratio
            )));
        }
        if !(self.fdr_alpha > 0.0 && self.fdr_alpha < 1.0) {
            return Err(invalid(format!("FDR level must lie in (0, 1), got {}", self.fdr_alpha)));
        }
        if self.mc_reps == 0 {
            return Err(invalid("mc_reps must be at least 1"));
        }
        if self.a1_stride == 0 {
            return Err(invalid("a1_stride must be at least 1"));
        }
        if self.r1_max_override == Some(0) {
            return Err(invalid("r1_max must be at least 1"));
        }
        let minimum = self.stage1_cost(1) + u128::from(self.cost_c2.minor());
        if u128::from(self.budget.minor()) < minimum {
            return Err(Error::InfeasibleBudget(format!(
                "budget {} cannot cover one stage-I pass over {} compounds plus one stage-II replicate",
                self.budget, self.m1
            )));
        }
        Ok(())
    }

    /// Stage-I spend in minor units.
    pub(crate) fn stage1_cost(&self, r1: u32) -> u128 {
        u128::from(self.cost_c1.minor()) * u128::from(r1) * self.m1 as u128
    }

    pub fn stage2_params(&self) -> Result<MixtureParams> {
        self.stage1_params.with_precision_ratio(self.precision_ratio)
    }

    /// Largest stage-I replicate count the enumeration considers.
    pub fn r1_max(&self) -> u32 {
        self.r1_max_override.unwrap_or_else(|| {
            let per_pass = u128::from(self.cost_c1.minor()) * self.m1 as u128;
            (u128::from(self.budget.minor()) / per_pass).min(u128::from(u32::MAX)) as u32
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DesignCandidate {
    pub r1: u32,
    pub a1_size: usize,
    pub r2: u32,
}

impl DesignCandidate {
    pub fn spend(&self, inputs: &DesignInputs) -> Money {
        let total = inputs.stage1_cost(self.r1)
            + u128::from(inputs.cost_c2.minor()) * u128::from(self.r2) * self.a1_size as u128;
        Money(total.min(u128::from(u64::MAX)) as u64)
    }
}

/// `floor((B - c1 r1 m1) / (c2 |A1|))`; zero when stage II is unaffordable.
pub fn stage2_replicates(inputs: &DesignInputs, r1: u32, a1_size: usize) -> u32 {
    let stage1 = inputs.stage1_cost(r1);
    let budget = u128::from(inputs.budget.minor());
    if a1_size == 0 || stage1 >= budget {
        return 0;
    }
    let per_round = u128::from(inputs.cost_c2.minor()) * a1_size as u128;
    ((budget - stage1) / per_round).min(u128::from(u32::MAX)) as u32
}

/// Largest affordable `|A1|` for a given `r1`.
fn a1_limit(inputs: &DesignInputs, r1: u32) -> usize {
    let stage1 = inputs.stage1_cost(r1);
    let budget = u128::from(inputs.budget.minor());
    if stage1 >= budget {
        return 0;
    }
    let affordable = (budget - stage1) / u128::from(inputs.cost_c2.minor());
    affordable.min(inputs.m1 as u128) as usize
}

/// All feasible candidates, ordered by `(r1, |A1|)`.
pub fn enumerate_candidates(inputs: &DesignInputs) -> Result<Vec<DesignCandidate>> {
    inputs.validate()?;
    let mut out = Vec::new();
    for r1 in 1..=inputs.r1_max() {
        let limit = a1_limit(inputs, r1);
        for a1_size in (1..=limit).step_by(inputs.a1_stride) {
            let r2 = stage2_replicates(inputs, r1, a1_size);
            if r2 >= 1 {
                out.push(DesignCandidate { r1, a1_size, r2 });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InfeasibleBudget(format!(
            "no feasible (r1, |A1|) pair within budget {}",
            inputs.budget
        )));
    }
    Ok(out)
}

/// Standard errors of the Monte Carlo means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McErrors {
    pub hits: f64,
    pub true_positives: f64,
    pub fdp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvaluation {
    pub candidate: DesignCandidate,
    /// Mean number of confirmed hits `E|A2|`.
    pub expected_hits: f64,
    /// Mean number of confirmed true non-nulls.
    pub expected_true_positives: f64,
    pub mean_realized_fdp: f64,
    pub mc_se: McErrors,
    pub mc_reps: usize,
}

/// Outcome of one simulated two-stage run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub(crate) struct RunOutcome {
    pub hits: usize,
    pub true_positives: usize,
}

impl RunOutcome {
    pub fn fdp(&self) -> f64 {
        (self.hits - self.true_positives) as f64 / self.hits.max(1) as f64
    }
}

/// Substream of the stage-I screen for Monte Carlo replicate `rep`.
pub fn stage1_seed(seed: Seed, r1: u32, rep: usize) -> Seed {
    seed.substream(&[tag::STAGE1, u64::from(r1), rep as u64])
}

/// Substream of the stage-II re-measurement for a candidate and replicate.
pub fn stage2_seed(seed: Seed, r1: u32, a1_size: usize, rep: usize) -> Seed {
    seed.substream(&[tag::STAGE2, u64::from(r1), a1_size as u64, rep as u64])
}

/// Reusable buffers for the stage-II inner loop.
#[derive(Default)]
struct Scratch {
    signal: Vec<f64>,
    values: Vec<f64>,
    order: Vec<u32>,
}

/// Stage-II model for a carried set with `non_null` of `carried` active.
fn stage2_model(
    inputs: &DesignInputs,
    stage2: &MixtureParams,
    proportion: f64,
    r2: u32,
) -> Result<StageModel> {
    let p = match inputs.stage2_proportion {
        Stage2Proportion::Realized => proportion,
        Stage2Proportion::Inherit => inputs.stage1_params.p,
    };
    StageModel::new(stage2.with_proportion(p.clamp(0.0, 1.0))?, r2)
}

/// Draws stage-II values for `selected` positions of `screen` into
/// `scratch.values`, matching the draw order of the public stage-II
/// simulators.
fn remeasure(
    inputs: &DesignInputs,
    screen: &SimulatedScreen,
    selected: &[u32],
    model2: &StageModel,
    seed: Seed,
    scratch: &mut Scratch,
) {
    let mut rng = seed.rng();
    scratch.signal.clear();
    match inputs.stage2_signal {
        Stage2Signal::Carried => {
            let signal = screen.signal();
            scratch.signal.extend(selected.iter().map(|&i| signal[i as usize]));
        }
        Stage2Signal::Fresh => {
            let sd = model2.params().sigma_mu_sq.sqrt();
            let theta = screen.theta();
            for &i in selected {
                let mu = if theta[i as usize] {
                    sd * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                scratch.signal.push(mu);
            }
        }
    }
    scratch.values.clear();
    fill_remeasured(&scratch.signal, model2.null_sd(), &mut rng, &mut scratch.values);
}

fn stage2_outcome(
    inputs: &DesignInputs,
    stage2: &MixtureParams,
    screen: &SimulatedScreen,
    ranked: &[u32],
    candidate: &DesignCandidate,
    seed: Seed,
    scratch: &mut Scratch,
) -> Result<RunOutcome> {
    let selected = &ranked[..candidate.a1_size];
    let theta = screen.theta();
    let active = selected.iter().filter(|&&i| theta[i as usize]).count();
    let model2 = stage2_model(inputs, stage2, active as f64 / selected.len() as f64, candidate.r2)?;
    remeasure(inputs, screen, selected, &model2, seed, scratch);
    let rejected = lfdr_step_up_by_magnitude(&scratch.values, &model2, inputs.fdr_alpha, &mut scratch.order);
    let true_positives = rejected
        .iter()
        .filter(|&&j| theta[selected[j as usize] as usize])
        .count();
    let outcome = RunOutcome {
        hits: rejected.len(),
        true_positives,
    };
    scratch.order = rejected;
    Ok(outcome)
}

#[derive(Default)]
struct Moments {
    n: usize,
    hits: (f64, f64),
    tp: (f64, f64),
    fdp: (f64, f64),
}

impl Moments {
    fn push(&mut self, o: &RunOutcome) {
        let add = |acc: &mut (f64, f64), v: f64| {
            acc.0 += v;
            acc.1 += v * v;
        };
        self.n += 1;
        add(&mut self.hits, o.hits as f64);
        add(&mut self.tp, o.true_positives as f64);
        add(&mut self.fdp, o.fdp());
    }

    fn finish(&self, candidate: DesignCandidate) -> CandidateEvaluation {
        let n = self.n as f64;
        let mean = |acc: (f64, f64)| acc.0 / n;
        let se = |acc: (f64, f64)| {
            if self.n < 2 {
                0.0
            } else {
                let m = acc.0 / n;
                ((acc.1 - n * m * m).max(0.0) / (n - 1.0) / n).sqrt()
            }
        };
        CandidateEvaluation {
            candidate,
            expected_hits: mean(self.hits),
            expected_true_positives: mean(self.tp),
            mean_realized_fdp: mean(self.fdp),
            mc_se: McErrors {
                hits: se(self.hits),
                true_positives: se(self.tp),
                fdp: se(self.fdp),
            },
            mc_reps: self.n,
        }
    }
}

fn check_candidate(inputs: &DesignInputs, candidate: &DesignCandidate) -> Result<()> {
    let expected = stage2_replicates(inputs, candidate.r1, candidate.a1_size);
    if candidate.r1 == 0
        || candidate.a1_size == 0
        || candidate.a1_size > inputs.m1
        || candidate.r2 == 0
        || candidate.r2 != expected
    {
        return Err(invalid(format!(
            "candidate {candidate:?} is not feasible (expected r2 = {expected})"
        )));
    }
    Ok(())
}

/// Evaluates every candidate sharing `r1`. Each Monte Carlo replicate draws
/// one stage-I screen that all `|A1|` values of this `r1` select from.
fn evaluate_r1_group(
    inputs: &DesignInputs,
    r1: u32,
    group: &[DesignCandidate],
    seed: Seed,
) -> Result<Vec<CandidateEvaluation>> {
    let stage2 = inputs.stage2_params()?;
    let model1 = StageModel::new(inputs.stage1_params, r1)?;
    let widest = group.iter().map(|c| c.a1_size).max().unwrap_or(0);
    let per_rep: Vec<Vec<RunOutcome>> = (0..inputs.mc_reps)
        .into_par_iter()
        .map_init(Scratch::default, |scratch, rep| {
            let screen = simulate_screen(&model1, inputs.m1, stage1_seed(seed, r1, rep))?;
            let ranked = top_by_magnitude(screen.values(), widest);
            group
                .iter()
                .map(|c| {
                    let s2 = stage2_seed(seed, r1, c.a1_size, rep);
                    stage2_outcome(inputs, &stage2, &screen, &ranked, c, s2, scratch)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(group
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let mut m = Moments::default();
            for outcomes in &per_rep {
                m.push(&outcomes[j]);
            }
            m.finish(*c)
        })
        .collect())
}

/// Monte Carlo score of a single design.
pub fn evaluate_candidate(
    candidate: &DesignCandidate,
    inputs: &DesignInputs,
    seed: Seed,
) -> Result<CandidateEvaluation> {
    inputs.validate()?;
    check_candidate(inputs, candidate)?;
    Ok(evaluate_r1_group(inputs, candidate.r1, std::slice::from_ref(candidate), seed)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub best: CandidateEvaluation,
    pub frontier: Vec<CandidateEvaluation>,
}

/// Scores every feasible candidate and returns the one with the most expected
/// confirmed hits. Ties go to the smaller `r1`, then the smaller `|A1|`.
pub fn optimize(inputs: &DesignInputs, seed: Seed) -> Result<Optimum> {
    let candidates = enumerate_candidates(inputs)?;
    let mut groups: BTreeMap<u32, Vec<DesignCandidate>> = BTreeMap::new();
    for c in candidates {
        debug_assert!(c.spend(inputs) <= inputs.budget);
        groups.entry(c.r1).or_default().push(c);
    }
    let mut frontier = Vec::new();
    for (r1, group) in &groups {
        log::debug!("evaluating r1 = {r1}: {} candidates", group.len());
        frontier.extend(evaluate_r1_group(inputs, *r1, group, seed)?);
    }
    let best = best_of(&frontier).expect("enumeration is non-empty");
    Ok(Optimum { best, frontier })
}

/// Argmax of expected hits over an `(r1, |A1|)`-ordered frontier.
pub fn best_of(frontier: &[CandidateEvaluation]) -> Option<CandidateEvaluation> {
    frontier.iter().copied().reduce(|best, e| {
        let better = e.expected_hits > best.expected_hits
            || (e.expected_hits == best.expected_hits
                && (e.candidate.r1, e.candidate.a1_size) < (best.candidate.r1, best.candidate.a1_size));
        if better {
            e
        } else {
            best
        }
    })
}

/// One realized two-stage experiment run with a fixed design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignRun {
    pub candidate: DesignCandidate,
    /// Positions in the stage-I library confirmed at stage II.
    pub confirmed: RejectionSet,
    pub carried: Vec<usize>,
    pub realized_fdp: f64,
    pub true_positives: usize,
    pub spend: Money,
}

/// Runs the design once against a simulated library, analysing it as a
/// practitioner would: the stage-II proportion under
/// [`Stage2Proportion::Realized`] is the posterior expected fraction of
/// non-nulls among the carried compounds, `1 - mean(stage-I Lfdr)`, since
/// the true states are not observable.
pub fn run_design(inputs: &DesignInputs, candidate: &DesignCandidate, seed: Seed) -> Result<DesignRun> {
    inputs.validate()?;
    check_candidate(inputs, candidate)?;
    let model1 = StageModel::new(inputs.stage1_params, candidate.r1)?;
    let screen = simulate_screen(&model1, inputs.m1, seed.substream(&[tag::STAGE1]))?;
    let ranked = top_by_magnitude(screen.values(), candidate.a1_size);
    let curve = LfdrCurve::new(&model1);
    let expected_active = ranked
        .iter()
        .map(|&i| 1.0 - curve.eval(screen.values()[i as usize]))
        .sum::<f64>()
        / ranked.len() as f64;
    let model2 = stage2_model(inputs, &inputs.stage2_params()?, expected_active, candidate.r2)?;
    let mut scratch = Scratch::default();
    remeasure(inputs, &screen, &ranked, &model2, seed.substream(&[tag::STAGE2]), &mut scratch);
    let rejected = lfdr_step_up_by_magnitude(&scratch.values, &model2, inputs.fdr_alpha, &mut scratch.order);
    let theta = screen.theta();
    let confirmed: Vec<usize> = rejected.iter().map(|&j| ranked[j as usize] as usize).collect();
    let true_positives = confirmed.iter().filter(|&&i| theta[i]).count();
    let outcome = RunOutcome {
        hits: confirmed.len(),
        true_positives,
    };
    Ok(DesignRun {
        candidate: *candidate,
        confirmed: RejectionSet::from_ranked(confirmed),
        carried: ranked.iter().map(|&i| i as usize).collect(),
        realized_fdp: outcome.fdp(),
        true_positives,
        spend: candidate.spend(inputs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdr::{lfdr_statistic, lfdr_step_up, realized_fdp, true_positive_count};
    use crate::mixture::{simulate_stage2_carried, simulate_stage2_from_selection};
    use proptest::prelude::*;

    fn sim1_inputs(p: f64) -> DesignInputs {
        DesignInputs::new(
            500,
            Money::from_major(250_000),
            Money::from_major(20),
            Money::from_major(50),
            3.0,
            0.05,
            MixtureParams::new(p, 1.0, 6.25).unwrap(),
        )
    }

    fn tiny_inputs() -> DesignInputs {
        DesignInputs::new(
            10,
            Money::from_major(100),
            Money::from_major(1),
            Money::from_major(2),
            3.0,
            0.05,
            MixtureParams::new(0.2, 1.0, 4.0).unwrap(),
        )
    }

    #[test]
    fn money_parsing_and_display() {
        assert_eq!("250000".parse::<Money>().unwrap(), Money::from_major(250_000));
        assert_eq!("$1.5".parse::<Money>().unwrap(), Money::from_minor(150));
        assert_eq!("0.05".parse::<Money>().unwrap(), Money::from_minor(5));
        assert_eq!(Money::from_minor(150).to_string(), "1.50");
        assert_eq!(Money::from_major(7).to_string(), "7");
        for bad in ["", "-1", "1.234", "abc", "1.", "1e3"] {
            assert!(bad.parse::<Money>().is_err(), "{bad}");
        }
    }

    #[test]
    fn stage2_replicate_formula() {
        let mut inputs = sim1_inputs(0.1);
        assert_eq!(stage2_replicates(&inputs, 10, 100), 30);
        assert_eq!(stage2_replicates(&inputs, 25, 10), 0);
        inputs.budget = Money::from_major(100_000);
        assert_eq!(stage2_replicates(&inputs, 10, 1), 0);
    }

    #[test]
    fn stage2_replicates_exhaust_budget_exactly() {
        // Exhaustive small-range check of the floor bracket.
        for b in [100u64, 137, 250, 1000] {
            for c1 in 1..4u64 {
                for c2 in 1..6u64 {
                    let mut inputs = tiny_inputs();
                    inputs.budget = Money::from_major(b);
                    inputs.cost_c1 = Money::from_major(c1);
                    inputs.cost_c2 = Money::from_major(c2);
                    for r1 in 1..=(b / (c1 * 10)) as u32 {
                        for a1 in 1..=10usize {
                            let r2 = stage2_replicates(&inputs, r1, a1) as u64;
                            let stage1 = c1 * r1 as u64 * 10;
                            if r2 == 0 {
                                assert!(stage1 + c2 * a1 as u64 > b);
                                continue;
                            }
                            assert!(stage1 + c2 * r2 * a1 as u64 <= b);
                            assert!(b < stage1 + c2 * (r2 + 1) * a1 as u64);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn enumeration_ranges() {
        let inputs = sim1_inputs(0.1);
        let cands = enumerate_candidates(&inputs).unwrap();
        let r1s: std::collections::BTreeSet<u32> = cands.iter().map(|c| c.r1).collect();
        // r1 = 25 spends the whole budget at stage I.
        assert_eq!(r1s, (1..=24).collect());
        assert_eq!(inputs.r1_max(), 25);
        for c in &cands {
            assert!(c.r1 >= 1 && c.a1_size >= 1 && c.r2 >= 1);
            assert!(c.a1_size <= inputs.m1);
            assert!(c.spend(&inputs) <= inputs.budget);
            assert_eq!(c.r2, stage2_replicates(&inputs, c.r1, c.a1_size));
        }
        let unique: std::collections::BTreeSet<_> = cands.iter().collect();
        assert_eq!(unique.len(), cands.len());
    }

    #[test]
    fn enumeration_matches_hand_count() {
        // B = 100, c1 = 1, m1 = 10, c2 = 2: r1 ranges 1..=10 and |A1| up to
        // min((100 - 10 r1) / 2, 10), giving 7*10 + 10 + 5 + 0.
        let brute: usize = (1..=10u64)
            .map(|r1| {
                (1..=10u64)
                    .filter(|&a1| 10 * r1 + 2 * a1 <= 100)
                    .count()
            })
            .sum();
        assert_eq!(brute, 85);
        assert_eq!(enumerate_candidates(&tiny_inputs()).unwrap().len(), brute);
    }

    #[test]
    fn stride_and_override() {
        let mut inputs = sim1_inputs(0.1);
        inputs.a1_stride = 100;
        inputs.r1_max_override = Some(3);
        let cands = enumerate_candidates(&inputs).unwrap();
        assert!(cands.iter().all(|c| c.r1 <= 3 && (c.a1_size - 1) % 100 == 0));
        assert_eq!(cands.iter().filter(|c| c.r1 == 1).count(), 5);
    }

    #[test]
    fn infeasible_budget_is_reported() {
        let mut inputs = sim1_inputs(0.1);
        inputs.budget = Money::from_major(10_000);
        assert!(matches!(enumerate_candidates(&inputs), Err(Error::InfeasibleBudget(_))));
        assert!(matches!(optimize(&inputs, Seed::new(1)), Err(Error::InfeasibleBudget(_))));
    }

    #[test]
    fn no_signal_means_no_true_positives() {
        let mut inputs = sim1_inputs(0.0);
        inputs.mc_reps = 20;
        let c = DesignCandidate { r1: 5, a1_size: 50, r2: stage2_replicates(&inputs, 5, 50) };
        let e = evaluate_candidate(&c, &inputs, Seed::new(3)).unwrap();
        assert_eq!(e.expected_true_positives, 0.0);
        assert!(e.mean_realized_fdp <= 0.05);
    }

    #[test]
    fn loose_alpha_confirms_nearly_everything() {
        let mut inputs = sim1_inputs(0.5);
        inputs.fdr_alpha = 0.999;
        inputs.mc_reps = 10;
        let c = DesignCandidate { r1: 5, a1_size: 40, r2: stage2_replicates(&inputs, 5, 40) };
        let e = evaluate_candidate(&c, &inputs, Seed::new(4)).unwrap();
        assert!(e.expected_hits >= 39.0, "{}", e.expected_hits);
    }

    #[test]
    fn miniature_matches_hand_trace() {
        let mut inputs = DesignInputs::new(
            3,
            Money::from_major(30),
            Money::from_major(1),
            Money::from_major(2),
            3.0,
            0.2,
            MixtureParams::new(0.5, 1.0, 9.0).unwrap(),
        );
        inputs.mc_reps = 2;
        let seed = Seed::new(77);
        let candidate = DesignCandidate { r1: 2, a1_size: 2, r2: 6 };
        assert_eq!(stage2_replicates(&inputs, 2, 2), 6);
        let eval = evaluate_candidate(&candidate, &inputs, seed).unwrap();

        // Trace the pipeline with the public building blocks.
        let model1 = StageModel::new(inputs.stage1_params, 2).unwrap();
        let mut hits = Vec::new();
        let mut tps = Vec::new();
        for rep in 0..2 {
            let s1 = simulate_screen(&model1, 3, stage1_seed(seed, 2, rep)).unwrap();
            let l1: Vec<f64> = s1.values().iter().map(|&x| lfdr_statistic(x, &model1).unwrap()).collect();
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| l1[a].total_cmp(&l1[b]).then(a.cmp(&b)));
            let carried = &order[..2];
            let active = carried.iter().filter(|&&i| s1.theta()[i]).count() as f64 / 2.0;
            let params2 = MixtureParams::new(active, 1.0 / 3.0, 9.0).unwrap();
            let model2 = StageModel::new(params2, 6).unwrap();
            let s2 = simulate_stage2_carried(&s1, carried, &model2, stage2_seed(seed, 2, 2, rep)).unwrap();
            let l2: Vec<f64> = s2.values().iter().map(|&x| lfdr_statistic(x, &model2).unwrap()).collect();
            let rej = lfdr_step_up(&l2, 0.2).unwrap();
            hits.push(rej.len() as f64);
            tps.push(true_positive_count(&rej, s2.theta()).unwrap() as f64);
            let _ = realized_fdp(&rej, s2.theta()).unwrap();
        }
        assert_eq!(eval.expected_hits, (hits[0] + hits[1]) / 2.0);
        assert_eq!(eval.expected_true_positives, (tps[0] + tps[1]) / 2.0);
    }

    #[test]
    fn fresh_signal_path_matches_public_simulator() {
        let mut inputs = sim1_inputs(0.3);
        inputs.stage2_signal = Stage2Signal::Fresh;
        let model1 = StageModel::new(inputs.stage1_params, 4).unwrap();
        let screen = simulate_screen(&model1, 500, Seed::new(5)).unwrap();
        let ranked = top_by_magnitude(screen.values(), 60);
        let theta: Vec<bool> = ranked.iter().map(|&i| screen.theta()[i as usize]).collect();
        let model2 = StageModel::new(inputs.stage2_params().unwrap(), 7).unwrap();
        let reference = simulate_stage2_from_selection(&theta, &model2, Seed::new(6)).unwrap();
        let mut scratch = Scratch::default();
        remeasure(&inputs, &screen, &ranked, &model2, Seed::new(6), &mut scratch);
        assert_eq!(scratch.values, reference.values());
    }

    #[test]
    fn single_candidate_optimum() {
        let mut inputs = tiny_inputs();
        inputs.budget = Money::from_major(12);
        inputs.mc_reps = 5;
        let opt = optimize(&inputs, Seed::new(1)).unwrap();
        assert_eq!(opt.frontier.len(), 1);
        assert_eq!(opt.best.candidate, DesignCandidate { r1: 1, a1_size: 1, r2: 1 });
    }

    #[test]
    fn optimum_is_frontier_argmax_and_matches_standalone() {
        let mut inputs = sim1_inputs(0.15);
        inputs.mc_reps = 8;
        inputs.a1_stride = 25;
        inputs.r1_max_override = Some(12);
        let seed = Seed::new(2718);
        let opt = optimize(&inputs, seed).unwrap();
        let max = opt.frontier.iter().map(|e| e.expected_hits).fold(f64::MIN, f64::max);
        assert_eq!(opt.best.expected_hits, max);
        assert_eq!(best_of(&opt.frontier), Some(opt.best));
        for e in &opt.frontier {
            assert!(e.expected_true_positives <= e.expected_hits);
            assert!(e.candidate.spend(&inputs) <= inputs.budget);
        }
        let again = evaluate_candidate(&opt.best.candidate, &inputs, seed).unwrap();
        assert_eq!(again, opt.best);
        assert_eq!(optimize(&inputs, seed).unwrap(), opt);
        assert!(opt.best.mean_realized_fdp <= inputs.fdr_alpha + 3.0 * opt.best.mc_se.fdp.max(0.01));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut inputs = sim1_inputs(0.1);
        inputs.mc_reps = 6;
        inputs.a1_stride = 50;
        inputs.r1_max_override = Some(6);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| optimize(&inputs, Seed::new(9)).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn design_run_respects_budget() {
        let inputs = sim1_inputs(0.1);
        let c = DesignCandidate { r1: 10, a1_size: 100, r2: 30 };
        let run = run_design(&inputs, &c, Seed::new(8)).unwrap();
        assert_eq!(run.spend, Money::from_major(250_000));
        assert_eq!(run.carried.len(), 100);
        assert!(run.confirmed.indices().iter().all(|i| run.carried.contains(i)));
        assert!(run_design(&inputs, &DesignCandidate { r1: 10, a1_size: 100, r2: 31 }, Seed::new(8)).is_err());
    }

    proptest! {
        #[test]
        fn candidates_respect_budget(b in 20u64..2000, c1 in 1u64..5, c2 in 1u64..9, m1 in 1usize..30,
                                     stride in 1usize..7) {
            let mut inputs = tiny_inputs();
            inputs.m1 = m1;
            inputs.budget = Money::from_major(b);
            inputs.cost_c1 = Money::from_major(c1);
            inputs.cost_c2 = Money::from_major(c2);
            inputs.a1_stride = stride;
            match enumerate_candidates(&inputs) {
                Ok(cands) => {
                    for c in cands {
                        prop_assert!(c.spend(&inputs) <= inputs.budget);
                        prop_assert!(c.a1_size <= m1 && c.r2 >= 1);
                    }
                }
                Err(e) => prop_assert!(matches!(e, Error::InfeasibleBudget(_))),
            }
        }
    }
}
