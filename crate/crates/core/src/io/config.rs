//! Flat `key = value` configuration files.
//!
//! ```text
//! # stage-II costs more
//! cost_c2 = 50
//! stage2_p = realized
//! ```
//!
//! Blank lines and anything after `#` are ignored. Keys may appear once.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::ser::{Serialize, SerializeMap, Serializer};

use crate::design::DesignInputs;
use crate::error::{Error, Result};
use crate::estimation::PriorConfig;
use crate::experiments::StudyConfig;
use crate::mixture::MixtureParams;

pub const DESIGN_KEYS: &[&str] = &[
    "m1",
    "budget",
    "cost_c1",
    "cost_c2",
    "precision_ratio",
    "fdr_alpha",
    "mc_reps",
    "p",
    "sigma0_sq",
    "sigma_mu_sq",
    "mean_shift",
    "a1_stride",
    "r1_max",
    "stage2_p",
    "stage2_signal",
];

pub const PRIOR_KEYS: &[&str] = &["prior_exponent_alpha", "scott_berger_a", "importance_samples"];

pub const STUDY_KEYS: &[&str] = &["study", "grid", "repetitions", "screen_scale"];

/// Ordered key-value pairs, remembering the source line of each key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String, usize)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    message: format!("expected `key = value`, found {content:?}"),
                });
            };
            let key = key.trim();
            if key.is_empty() || !key.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
                return Err(Error::Config {
                    line,
                    message: format!("invalid key {key:?}"),
                });
            }
            if kv.get(key).is_some() {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key {key:?}"),
                });
            }
            kv.entries.push((key.to_string(), value.trim().to_string(), line));
        }
        Ok(kv)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
    }

    /// Sets a key, replacing any previous value in place.
    pub fn insert(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value, 0)),
        }
    }

    pub fn extend(&mut self, other: &KeyValues) {
        for (k, v) in other.iter() {
            self.insert(k, v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v, _)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.iter() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses the value under `key`, if present.
    pub fn parsed<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let Some((_, value, line)) = self.entries.iter().find(|(k, _, _)| k == key) else {
            return Ok(None);
        };
        value.parse().map(Some).map_err(|e| Error::Config {
            line: *line,
            message: format!("{key}: {e}"),
        })
    }

    /// Fails on the first key outside `known`.
    pub fn check_known(&self, known: &[&[&str]]) -> Result<()> {
        for (k, _, line) in &self.entries {
            if !known.iter().any(|set| set.contains(&k.as_str())) {
                return Err(Error::Config {
                    line: *line,
                    message: format!("unknown key {k:?}"),
                });
            }
        }
        Ok(())
    }
}

impl Serialize for KeyValues {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.entries.len()))?;
        for (k, v) in self.iter() {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

pub fn design_to_config(inputs: &DesignInputs) -> KeyValues {
    let mut kv = KeyValues::new();
    let params = &inputs.stage1_params;
    kv.insert("m1", inputs.m1);
    kv.insert("budget", inputs.budget);
    kv.insert("cost_c1", inputs.cost_c1);
    kv.insert("cost_c2", inputs.cost_c2);
    kv.insert("precision_ratio", inputs.precision_ratio);
    kv.insert("fdr_alpha", inputs.fdr_alpha);
    kv.insert("mc_reps", inputs.mc_reps);
    kv.insert("p", params.p);
    kv.insert("sigma0_sq", params.sigma0_sq);
    kv.insert("sigma_mu_sq", params.sigma_mu_sq);
    kv.insert("mean_shift", params.mean_shift);
    kv.insert("a1_stride", inputs.a1_stride);
    kv.insert(
        "r1_max",
        inputs
            .r1_max_override
            .map_or_else(|| "none".to_string(), |r| r.to_string()),
    );
    kv.insert("stage2_p", inputs.stage2_proportion);
    kv.insert("stage2_signal", inputs.stage2_signal);
    kv
}

fn set<T>(kv: &KeyValues, key: &str, slot: &mut T) -> Result<()>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    if let Some(v) = kv.parsed(key)? {
        *slot = v;
    }
    Ok(())
}

/// Overrides fields of `inputs` with any design keys present in `kv`.
pub fn apply_design(inputs: &mut DesignInputs, kv: &KeyValues) -> Result<()> {
    set(kv, "m1", &mut inputs.m1)?;
    set(kv, "budget", &mut inputs.budget)?;
    set(kv, "cost_c1", &mut inputs.cost_c1)?;
    set(kv, "cost_c2", &mut inputs.cost_c2)?;
    set(kv, "precision_ratio", &mut inputs.precision_ratio)?;
    set(kv, "fdr_alpha", &mut inputs.fdr_alpha)?;
    set(kv, "mc_reps", &mut inputs.mc_reps)?;
    apply_params(&mut inputs.stage1_params, kv)?;
    set(kv, "a1_stride", &mut inputs.a1_stride)?;
    if let Some(v) = kv.parsed::<String>("r1_max")? {
        inputs.r1_max_override = if v == "none" {
            None
        } else {
            Some(kv.parsed("r1_max")?.expect("present"))
        };
    }
    set(kv, "stage2_p", &mut inputs.stage2_proportion)?;
    set(kv, "stage2_signal", &mut inputs.stage2_signal)?;
    Ok(())
}

pub fn apply_params(params: &mut MixtureParams, kv: &KeyValues) -> Result<()> {
    set(kv, "p", &mut params.p)?;
    set(kv, "sigma0_sq", &mut params.sigma0_sq)?;
    set(kv, "sigma_mu_sq", &mut params.sigma_mu_sq)?;
    set(kv, "mean_shift", &mut params.mean_shift)?;
    Ok(())
}

/// Parses a complete design; every design key must be present.
pub fn design_from_config(kv: &KeyValues) -> Result<DesignInputs> {
    if let Some(missing) = DESIGN_KEYS.iter().find(|k| kv.get(k).is_none()) {
        return Err(Error::Config {
            line: 0,
            message: format!("missing key {missing:?}"),
        });
    }
    let mut inputs = crate::experiments::simulation_inputs();
    apply_design(&mut inputs, kv)?;
    Ok(inputs)
}

pub fn prior_to_config(prior: &PriorConfig) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.insert("prior_exponent_alpha", prior.prior_exponent_alpha);
    kv.insert("scott_berger_a", prior.scott_berger_a);
    kv.insert("importance_samples", prior.importance_samples);
    kv
}

pub fn apply_prior(prior: &mut PriorConfig, kv: &KeyValues) -> Result<()> {
    set(kv, "prior_exponent_alpha", &mut prior.prior_exponent_alpha)?;
    set(kv, "scott_berger_a", &mut prior.scott_berger_a)?;
    set(kv, "importance_samples", &mut prior.importance_samples)?;
    Ok(())
}

pub fn study_to_config(study: &StudyConfig) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.insert("study", study.study_id);
    let grid: Vec<String> = study.grid.iter().map(f64::to_string).collect();
    kv.insert("grid", grid.join(", "));
    kv.insert("repetitions", study.repetitions);
    kv.insert("screen_scale", study.screen_scale);
    kv.extend(&design_to_config(&study.base_inputs));
    kv
}

/// Overrides study and design fields with any keys present in `kv`.
pub fn apply_study(study: &mut StudyConfig, kv: &KeyValues) -> Result<()> {
    if let Some(id) = kv.parsed::<crate::experiments::StudyId>("study")? {
        if id != study.study_id {
            return Err(Error::Config {
                line: 0,
                message: format!("configuration is for {id}, not {}", study.study_id),
            });
        }
    }
    if let Some(grid) = kv.parsed::<String>("grid")? {
        let values = grid
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config {
                line: 0,
                message: format!("grid: {e}"),
            })?;
        study.grid = values;
    }
    set(kv, "repetitions", &mut study.repetitions)?;
    set(kv, "screen_scale", &mut study.screen_scale)?;
    apply_design(&mut study.base_inputs, kv)
}
