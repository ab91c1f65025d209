//! Seeded study runners: the proportion sweep, the FDR-level sweep and the
//! stage-II cost sweep.
//!
//! For the two method comparisons, each grid point first optimizes the
//! design with the true parameters, then runs `repetitions` independent
//! experiments with that design alongside both BH comparators.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{one_stage_bh, two_stage_bh, ScreenScale};
use crate::design::{optimize, run_design, CandidateEvaluation, DesignInputs, Money, Optimum};
use crate::error::{invalid, Error, Result};
use crate::mixture::MixtureParams;
use crate::seed::{tag, Seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyId {
    Sim1,
    Sim2,
    DataSweep,
}

impl StudyId {
    /// Name of the swept quantity.
    pub fn grid_variable(self) -> &'static str {
        match self {
            StudyId::Sim1 => "p1",
            StudyId::Sim2 => "fdr_alpha",
            StudyId::DataSweep => "cost_c2",
        }
    }
}

impl fmt::Display for StudyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudyId::Sim1 => "sim1",
            StudyId::Sim2 => "sim2",
            StudyId::DataSweep => "data-sweep",
        })
    }
}

impl FromStr for StudyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sim1" => Ok(StudyId::Sim1),
            "sim2" => Ok(StudyId::Sim2),
            "data-sweep" | "sweep" => Ok(StudyId::DataSweep),
            other => Err(invalid(format!("unknown study {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub study_id: StudyId,
    /// Values of the swept quantity; `cost_c2` values are in major units.
    pub grid: Vec<f64>,
    pub repetitions: usize,
    pub base_inputs: DesignInputs,
    pub seed: Seed,
    pub screen_scale: ScreenScale,
}

/// Library, budget and model of the simulation studies.
pub fn simulation_inputs() -> DesignInputs {
    DesignInputs::new(
        500,
        Money::from_major(250_000),
        Money::from_major(20),
        Money::from_major(50),
        3.0,
        0.05,
        MixtureParams {
            p: 0.1,
            sigma0_sq: 1.0,
            sigma_mu_sq: 6.25,
            mean_shift: 0.0,
        },
    )
}

/// Library, budget and fitted model of the 51,840-compound screen.
pub fn data_study_inputs() -> DesignInputs {
    let mut inputs = DesignInputs::new(
        51_840,
        Money::from_major(500_000),
        Money::from_major(1),
        Money::from_major(2),
        3.0,
        0.05,
        MixtureParams {
            p: 0.0132,
            sigma0_sq: 0.5677,
            sigma_mu_sq: 3.0735,
            mean_shift: 0.0,
        },
    );
    inputs.a1_stride = 100;
    inputs
}

impl StudyConfig {
    /// Default configuration; `quick` trims the grid and Monte Carlo sizes.
    pub fn preset(study_id: StudyId, quick: bool, seed: Seed) -> Self {
        let (grid, base_inputs, repetitions) = match study_id {
            StudyId::Sim1 => {
                let grid = if quick {
                    vec![0.10, 0.15, 0.20]
                } else {
                    (10..=20).map(|k| f64::from(k) / 100.0).collect()
                };
                (grid, simulation_inputs(), 200)
            }
            StudyId::Sim2 => {
                let grid = if quick {
                    vec![0.02, 0.05, 0.1, 0.2, 0.3]
                } else {
                    vec![0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
                };
                (grid, simulation_inputs(), 200)
            }
            StudyId::DataSweep => {
                let grid = if quick { vec![50.0] } else { vec![2.0, 5.0, 10.0, 50.0] };
                (grid, data_study_inputs(), 1)
            }
        };
        let mut config = StudyConfig {
            study_id,
            grid,
            repetitions,
            base_inputs,
            seed,
            screen_scale: ScreenScale::default(),
        };
        if quick {
            config.repetitions = config.repetitions.min(50);
            config.base_inputs.mc_reps = 25;
            if study_id == StudyId::DataSweep {
                config.base_inputs.a1_stride = 400;
            }
        }
        config
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(invalid("study grid must not be empty"));
        }
        if self.repetitions == 0 {
            return Err(invalid("repetitions must be at least 1"));
        }
        for &g in &self.grid {
            self.inputs_at(g)?.validate()?;
        }
        Ok(())
    }

    /// Design inputs at one grid value.
    pub fn inputs_at(&self, value: f64) -> Result<DesignInputs> {
        let mut inputs = self.base_inputs.clone();
        match self.study_id {
            StudyId::Sim1 => inputs.stage1_params = inputs.stage1_params.with_proportion(value)?,
            StudyId::Sim2 => inputs.fdr_alpha = value,
            StudyId::DataSweep => inputs.cost_c2 = major_to_money(value)?,
        }
        Ok(inputs)
    }
}

/// Converts a non-negative amount in major units to minor units.
pub fn major_to_money(value: f64) -> Result<Money> {
    let minor = (value * 100.0).round();
    if !(minor.is_finite() && (0.0..1.8e19).contains(&minor)) || (minor - value * 100.0).abs() > 1e-6 {
        return Err(invalid(format!("{value} is not a whole number of cents")));
    }
    Ok(Money::from_minor(minor as u64))
}

pub const PROPOSED: &str = "proposed";
pub const TWO_STAGE_BH: &str = "two-stage-bh";
pub const ONE_STAGE_BH: &str = "one-stage-bh";

/// Method-level summary at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub grid_point: f64,
    pub method: String,
    pub mean_realized_fdr: f64,
    pub fdr_mc_se: f64,
    /// Mean true-positive count.
    pub etp: f64,
    pub etp_mc_se: f64,
    /// `ln(etp)`; absent when no true positive was found in any run.
    pub ln_etp: Option<f64>,
    pub mean_rejections: f64,
    pub repetitions: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct RunMetrics {
    fdp: f64,
    true_positives: usize,
    rejections: usize,
}

fn summarize(grid_point: f64, method: &str, runs: &[RunMetrics]) -> MetricRecord {
    let n = runs.len() as f64;
    let mean_se = |f: &dyn Fn(&RunMetrics) -> f64| {
        let mean = runs.iter().map(f).sum::<f64>() / n;
        let se = if runs.len() < 2 {
            0.0
        } else {
            (runs.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        };
        (mean, se)
    };
    let (fdr, fdr_se) = mean_se(&|r| r.fdp);
    let (etp, etp_se) = mean_se(&|r| r.true_positives as f64);
    let (rejections, _) = mean_se(&|r| r.rejections as f64);
    MetricRecord {
        grid_point,
        method: method.to_string(),
        mean_realized_fdr: fdr,
        fdr_mc_se: fdr_se,
        etp,
        etp_mc_se: etp_se,
        ln_etp: (etp > 0.0).then(|| etp.ln()),
        mean_rejections: rejections,
        repetitions: runs.len(),
    }
}

/// Result of a method-comparison study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStudy {
    /// Three records per grid point, in grid order.
    pub records: Vec<MetricRecord>,
    /// The optimized design used by the proposed method at each grid point.
    pub designs: Vec<(f64, CandidateEvaluation)>,
}

impl MethodStudy {
    pub fn record(&self, grid_point: f64, method: &str) -> Option<&MetricRecord> {
        self.records
            .iter()
            .find(|r| r.grid_point == grid_point && r.method == method)
    }
}

fn run_method_study(config: &StudyConfig) -> Result<MethodStudy> {
    config.validate()?;
    let mut records = Vec::with_capacity(3 * config.grid.len());
    let mut designs = Vec::with_capacity(config.grid.len());
    for (g, &value) in config.grid.iter().enumerate() {
        let inputs = config.inputs_at(value)?;
        let g = g as u64;
        log::info!("{} grid point {value}: optimizing design", config.study_id);
        let best = optimize(&inputs, config.seed.substream(&[g, tag::OPTIMIZE]))?.best;
        log::info!("chose {:?}", best.candidate);
        let runs: Vec<[RunMetrics; 3]> = (0..config.repetitions as u64)
            .into_par_iter()
            .map(|rep| {
                let proposed = run_design(&inputs, &best.candidate, config.seed.substream(&[g, tag::PROPOSED, rep]))?;
                let two = two_stage_bh(
                    &inputs,
                    config.screen_scale,
                    config.seed.substream(&[g, tag::TWO_STAGE_BH, rep]),
                )?;
                let one = one_stage_bh(&inputs, config.seed.substream(&[g, tag::ONE_STAGE_BH, rep]))?;
                Ok([
                    RunMetrics {
                        fdp: proposed.realized_fdp,
                        true_positives: proposed.true_positives,
                        rejections: proposed.confirmed.len(),
                    },
                    RunMetrics {
                        fdp: two.realized_fdp,
                        true_positives: two.true_positives,
                        rejections: two.rejection.len(),
                    },
                    RunMetrics {
                        fdp: one.realized_fdp,
                        true_positives: one.true_positives,
                        rejections: one.rejection.len(),
                    },
                ])
            })
            .collect::<Result<_>>()?;
        for (k, method) in [PROPOSED, TWO_STAGE_BH, ONE_STAGE_BH].into_iter().enumerate() {
            let column: Vec<RunMetrics> = runs.iter().map(|r| r[k]).collect();
            records.push(summarize(value, method, &column));
        }
        designs.push((value, best));
    }
    Ok(MethodStudy { records, designs })
}

fn expect_study(config: &StudyConfig, id: StudyId) -> Result<()> {
    if config.study_id != id {
        return Err(invalid(format!("expected a {id} configuration, got {}", config.study_id)));
    }
    Ok(())
}

/// Method comparison over a grid of non-null proportions.
pub fn run_sim1(config: &StudyConfig) -> Result<MethodStudy> {
    expect_study(config, StudyId::Sim1)?;
    run_method_study(config)
}

/// Method comparison over a grid of FDR levels.
pub fn run_sim2(config: &StudyConfig) -> Result<MethodStudy> {
    expect_study(config, StudyId::Sim2)?;
    run_method_study(config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub cost_c2: Money,
    pub optimum: Optimum,
}

/// One design optimization per stage-II cost.
pub fn run_data_sweep(config: &StudyConfig) -> Result<Vec<SweepPoint>> {
    expect_study(config, StudyId::DataSweep)?;
    config.validate()?;
    config
        .grid
        .iter()
        .enumerate()
        .map(|(g, &value)| {
            let inputs = config.inputs_at(value)?;
            log::info!("sweep: optimizing at c2 = {}", inputs.cost_c2);
            let optimum = optimize(&inputs, config.seed.substream(&[g as u64, tag::OPTIMIZE]))?;
            Ok(SweepPoint {
                cost_c2: inputs.cost_c2,
                optimum,
            })
        })
        .collect()
}

/// Least-squares slope of `y` on `x`.
pub fn regression_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
