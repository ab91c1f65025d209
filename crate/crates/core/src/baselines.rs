//! Replicated Benjamini-Hochberg comparators spending the same budget.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::design::{DesignInputs, Money, Stage2Signal};
use crate::error::{invalid, Error, Result};
use crate::fdr::{bh_step_up, realized_fdp, true_positive_count, two_sided_p_value, RejectionSet};
use crate::mixture::{
    simulate_screen, simulate_stage2_carried, simulate_stage2_from_selection, SimulatedScreen, StageModel,
};
use crate::seed::{tag, Seed};

/// Stage-I replicates used by the two-stage comparator.
pub const TWO_STAGE_R1: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    OneStageBh,
    TwoStageBh,
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMethod::OneStageBh => "one-stage-bh",
            BaselineMethod::TwoStageBh => "two-stage-bh",
        })
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "one-stage-bh" => Ok(BaselineMethod::OneStageBh),
            "two-stage-bh" => Ok(BaselineMethod::TwoStageBh),
            other => Err(invalid(format!(
                "unknown baseline {other:?}; expected one-stage-bh or two-stage-bh"
            ))),
        }
    }
}

/// Scale against which the two-stage comparator's `|z| > 2` screen is judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScreenScale {
    /// The null SD of a 10-replicate mean, `sigma0 / sqrt(10)`.
    #[default]
    Theoretical,
    /// The sample SD of the stage-I means across compounds.
    Empirical,
}

impl FromStr for ScreenScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "theoretical" => Ok(ScreenScale::Theoretical),
            "empirical" => Ok(ScreenScale::Empirical),
            other => Err(invalid(format!(
                "unknown screen scale {other:?}; expected theoretical or empirical"
            ))),
        }
    }
}

impl fmt::Display for ScreenScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScreenScale::Theoretical => "theoretical",
            ScreenScale::Empirical => "empirical",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineResult {
    pub method: BaselineMethod,
    /// Library positions declared hits.
    pub rejection: RejectionSet,
    pub realized_fdp: f64,
    pub true_positives: usize,
    pub spend: Money,
    pub r1: u32,
    /// Stage-II replicates; zero for the one-stage method or an empty carry.
    pub r2: u32,
    pub carried: usize,
}

/// `ceil(B / (c1 m1))`, the replicate count of the one-stage comparator.
pub fn one_stage_replicates(inputs: &DesignInputs) -> u32 {
    let per_pass = u128::from(inputs.cost_c1.minor()) * inputs.m1 as u128;
    u128::from(inputs.budget.minor())
        .div_ceil(per_pass)
        .min(u128::from(u32::MAX)) as u32
}

fn money(minor: u128) -> Money {
    Money::from_minor(minor.min(u128::from(u64::MAX)) as u64)
}

/// A single screen with `ceil(B / (c1 m1))` replicates, tested by BH on
/// two-sided p-values.
pub fn one_stage_bh(inputs: &DesignInputs, seed: Seed) -> Result<BaselineResult> {
    inputs.validate()?;
    let r1 = one_stage_replicates(inputs);
    let model = StageModel::new(inputs.stage1_params, r1)?;
    let screen = simulate_screen(&model, inputs.m1, seed.substream(&[tag::STAGE1]))?;
    let s0 = inputs.stage1_params.sigma0_sq;
    let p_values = screen
        .values()
        .iter()
        .map(|&x| two_sided_p_value(x, s0, r1))
        .collect::<Result<Vec<_>>>()?;
    let rejection = bh_step_up(&p_values, inputs.fdr_alpha)?;
    Ok(BaselineResult {
        method: BaselineMethod::OneStageBh,
        realized_fdp: realized_fdp(&rejection, screen.theta())?,
        true_positives: true_positive_count(&rejection, screen.theta())?,
        rejection,
        spend: money(u128::from(inputs.cost_c1.minor()) * u128::from(r1) * inputs.m1 as u128),
        r1,
        r2: 0,
        carried: 0,
    })
}

/// Positions passing the `|z| > 2` screen.
fn screen_pass(screen: &SimulatedScreen, inputs: &DesignInputs, scale: ScreenScale) -> Vec<usize> {
    let xs = screen.values();
    let sd = match scale {
        ScreenScale::Theoretical => (inputs.stage1_params.sigma0_sq / f64::from(TWO_STAGE_R1)).sqrt(),
        ScreenScale::Empirical => {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
        }
    };
    (0..xs.len()).filter(|&i| xs[i].abs() > 2.0 * sd).collect()
}

/// Ten stage-I replicates, a `|z| > 2` screen, and BH on stage-II p-values
/// for the carried compounds with as many replicates as the rest of the
/// budget buys.
///
/// When the screen passes more compounds than the stage-II budget can
/// measure once, only the `floor(B2 / c2)` most extreme are carried, each
/// with one replicate.
pub fn two_stage_bh(inputs: &DesignInputs, scale: ScreenScale, seed: Seed) -> Result<BaselineResult> {
    inputs.validate()?;
    let stage1_cost = u128::from(inputs.cost_c1.minor()) * u128::from(TWO_STAGE_R1) * inputs.m1 as u128;
    let budget = u128::from(inputs.budget.minor());
    if budget <= stage1_cost {
        return Err(Error::InfeasibleBudget(format!(
            "budget {} does not exceed the {}-replicate stage-I cost {}",
            inputs.budget,
            TWO_STAGE_R1,
            money(stage1_cost)
        )));
    }
    let model1 = StageModel::new(inputs.stage1_params, TWO_STAGE_R1)?;
    let screen = simulate_screen(&model1, inputs.m1, seed.substream(&[tag::STAGE1]))?;
    let mut carried = screen_pass(&screen, inputs, scale);
    let remaining = budget - stage1_cost;
    let c2 = u128::from(inputs.cost_c2.minor());
    let empty = |carried| BaselineResult {
        method: BaselineMethod::TwoStageBh,
        rejection: RejectionSet::empty(),
        realized_fdp: 0.0,
        true_positives: 0,
        spend: money(stage1_cost),
        r1: TWO_STAGE_R1,
        r2: 0,
        carried,
    };
    let affordable = (remaining / c2).min(inputs.m1 as u128) as usize;
    if carried.is_empty() || affordable == 0 {
        return Ok(empty(0));
    }
    if carried.len() > affordable {
        let xs = screen.values();
        carried.sort_by(|&a, &b| xs[b].abs().total_cmp(&xs[a].abs()).then(a.cmp(&b)));
        carried.truncate(affordable);
        carried.sort_unstable();
    }
    let r2 = (remaining / (c2 * carried.len() as u128)).min(u128::from(u32::MAX)) as u32;
    let params2 = inputs.stage2_params()?;
    let model2 = StageModel::new(params2, r2)?;
    let stage2_seed = seed.substream(&[tag::STAGE2]);
    let stage2 = match inputs.stage2_signal {
        Stage2Signal::Carried => simulate_stage2_carried(&screen, &carried, &model2, stage2_seed)?,
        Stage2Signal::Fresh => {
            let theta: Vec<bool> = carried.iter().map(|&i| screen.theta()[i]).collect();
            simulate_stage2_from_selection(&theta, &model2, stage2_seed)?
        }
    };
    let p_values = stage2
        .values()
        .iter()
        .map(|&x| two_sided_p_value(x, params2.sigma0_sq, r2))
        .collect::<Result<Vec<_>>>()?;
    let local = bh_step_up(&p_values, inputs.fdr_alpha)?;
    let rejection = RejectionSet::from_ranked(local.indices().iter().map(|&j| carried[j]).collect());
    Ok(BaselineResult {
        method: BaselineMethod::TwoStageBh,
        realized_fdp: realized_fdp(&rejection, screen.theta())?,
        true_positives: true_positive_count(&rejection, screen.theta())?,
        rejection,
        spend: money(stage1_cost + c2 * u128::from(r2) * carried.len() as u128),
        r1: TWO_STAGE_R1,
        r2,
        carried: carried.len(),
    })
}

/// Runs either comparator.
pub fn run_baseline(
    method: BaselineMethod,
    inputs: &DesignInputs,
    scale: ScreenScale,
    seed: Seed,
) -> Result<BaselineResult> {
    match method {
        BaselineMethod::OneStageBh => one_stage_bh(inputs, seed),
        BaselineMethod::TwoStageBh => two_stage_bh(inputs, scale, seed),
    }
}
