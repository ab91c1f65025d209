//! CSV and JSON writers with a reproducibility header.
//!
//! CSV files open with `# key = value` comment lines holding the tool
//! version, command, seed and every parameter of the run; JSON files carry
//! the same block under `"metadata"`. No timestamps or host details are
//! written, so identical runs give identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::design::CandidateEvaluation;
use crate::error::Result;
use crate::experiments::MetricRecord;
use crate::io::config::KeyValues;
use crate::seed::Seed;

pub const TOOL: &str = "twostage";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Seed,
    pub params: KeyValues,
}

impl Metadata {
    pub fn new(command: &str, seed: Seed, params: KeyValues) -> Self {
        Metadata {
            tool: TOOL,
            version: VERSION,
            command: command.to_string(),
            seed,
            params,
        }
    }

    /// The header as `# key = value` lines.
    pub fn comment_block(&self) -> String {
        let mut out = format!(
            "# tool = {}\n# version = {}\n# command = {}\n# seed = {}\n",
            self.tool, self.version, self.command, self.seed
        );
        for (k, v) in self.params.iter() {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out
    }
}

/// Writes rows under the metadata comment block.
pub fn write_csv<T: Serialize>(path: &Path, meta: &Metadata, rows: &[T]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(meta.comment_block().as_bytes())?;
    let mut writer = csv::Writer::from_writer(file);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    metadata: &'a Metadata,
    result: &'a T,
}

/// Writes `{"metadata": ..., "result": ...}` as indented JSON.
pub fn write_json<T: Serialize>(path: &Path, meta: &Metadata, result: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&Envelope { metadata: meta, result })?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Flat CSV form of a [`MetricRecord`]; an absent `ln_etp` is written `NA`.
#[derive(Debug, Serialize)]
pub struct MetricRow<'a> {
    pub grid_point: f64,
    pub method: &'a str,
    pub mean_realized_fdr: f64,
    pub fdr_mc_se: f64,
    pub etp: f64,
    pub etp_mc_se: f64,
    pub ln_etp: String,
    pub mean_rejections: f64,
    pub repetitions: usize,
}

impl<'a> From<&'a MetricRecord> for MetricRow<'a> {
    fn from(r: &'a MetricRecord) -> Self {
        MetricRow {
            grid_point: r.grid_point,
            method: &r.method,
            mean_realized_fdr: r.mean_realized_fdr,
            fdr_mc_se: r.fdr_mc_se,
            etp: r.etp,
            etp_mc_se: r.etp_mc_se,
            ln_etp: r.ln_etp.map_or_else(|| "NA".to_string(), |v| v.to_string()),
            mean_rejections: r.mean_rejections,
            repetitions: r.repetitions,
        }
    }
}

/// Flat CSV form of a [`CandidateEvaluation`], optionally keyed by a grid
/// value.
#[derive(Debug, Serialize)]
pub struct FrontierRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_point: Option<f64>,
    pub r1: u32,
    pub a1_size: usize,
    pub r2: u32,
    pub expected_hits: f64,
    pub expected_hits_mc_se: f64,
    pub expected_true_positives: f64,
    pub expected_true_positives_mc_se: f64,
    pub mean_realized_fdp: f64,
    pub mean_realized_fdp_mc_se: f64,
    pub mc_reps: usize,
}

impl FrontierRow {
    pub fn new(grid_point: Option<f64>, e: &CandidateEvaluation) -> Self {
        FrontierRow {
            grid_point,
            r1: e.candidate.r1,
            a1_size: e.candidate.a1_size,
            r2: e.candidate.r2,
            expected_hits: e.expected_hits,
            expected_hits_mc_se: e.mc_se.hits,
            expected_true_positives: e.expected_true_positives,
            expected_true_positives_mc_se: e.mc_se.true_positives,
            mean_realized_fdp: e.mean_realized_fdp,
            mean_realized_fdp_mc_se: e.mc_se.fdp,
            mc_reps: e.mc_reps,
        }
    }
}
