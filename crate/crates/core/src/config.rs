//! Engine configuration in a flat `key = value` format.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.
//! Every key is optional; missing keys take the defaults shown by
//! `EngineConfig::default().to_string()`.

use std::fmt;

use crate::dendritic::{DcConfig, WeightMatrix};
use crate::error::{Error, Result};
use crate::lymph::LymphConfig;
use crate::response::RetirementConfig;
use crate::signals::SignalConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub rng_seed: u64,
    pub dc_population_size: usize,
    pub signals: SignalConfig,
    pub dc: DcConfig,
    pub lymph: LymphConfig,
    pub retirement: RetirementConfig,
    pub tissue_capacity: usize,
    /// Records per tick; `0` groups all records sharing a timestamp.
    pub records_per_tick: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let lymph = LymphConfig::default();
        EngineConfig {
            rng_seed: 0,
            dc_population_size: 100,
            signals: SignalConfig::default(),
            dc: DcConfig::default(),
            retirement: RetirementConfig {
                memory_extension: 10 * lymph.effector_lifespan,
            },
            lymph,
            tissue_capacity: crate::tissue::DEFAULT_TISSUE_CAPACITY,
            records_per_tick: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::parse(line, 1, format!("invalid value `{value}` for `{key}`")))
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dc_population_size == 0 {
            return Err(Error::config("dc_population_size must be >= 1"));
        }
        if self.tissue_capacity == 0 {
            return Err(Error::config("tissue_capacity must be >= 1"));
        }
        self.signals.validate()?;
        self.dc.validate()?;
        self.lymph.validate()
    }

    pub fn parse(text: &str) -> Result<EngineConfig> {
        let mut cfg = EngineConfig::default();
        let mut evidence_scale = None;
        let mut memory_extension = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(line_no, 1, "expected `key = value`"));
            };
            let key = key.trim();
            // Trailing comments are allowed after the value.
            let value = value.split('#').next().unwrap_or("").trim();
            let n = line_no;
            match key {
                "rng_seed" => cfg.rng_seed = parse_num(key, value, n)?,
                "dc_population_size" => cfg.dc_population_size = parse_num(key, value, n)?,
                "cpu_scale" => cfg.signals.cpu_scale = parse_num(key, value, n)?,
                "mem_scale" => cfg.signals.mem_scale = parse_num(key, value, n)?,
                "pamp_saturation" => cfg.signals.pamp_saturation = parse_num(key, value, n)?,
                "signal_window" => cfg.signals.window = parse_num(key, value, n)?,
                "w_csm_pamp" => cfg.dc.weights.csm.pamp = parse_num(key, value, n)?,
                "w_csm_danger" => cfg.dc.weights.csm.danger = parse_num(key, value, n)?,
                "w_csm_safe" => cfg.dc.weights.csm.safe = parse_num(key, value, n)?,
                "w_mat_pamp" => cfg.dc.weights.mat.pamp = parse_num(key, value, n)?,
                "w_mat_danger" => cfg.dc.weights.mat.danger = parse_num(key, value, n)?,
                "w_mat_safe_suppression" => cfg.dc.weights.mat.safe_suppression = parse_num(key, value, n)?,
                "w_semi_safe" => cfg.dc.weights.semi.safe = parse_num(key, value, n)?,
                "migration_threshold_min" => cfg.dc.threshold_min = parse_num(key, value, n)?,
                "migration_threshold_max" => cfg.dc.threshold_max = parse_num(key, value, n)?,
                "peptide_capacity" => cfg.dc.peptide_capacity = parse_num(key, value, n)?,
                "peptides_per_collection" => cfg.dc.peptides_per_collection = parse_num(key, value, n)?,
                "antigens_per_sample" => cfg.dc.antigens_per_sample = parse_num(key, value, n)?,
                "ngram_lengths" => {
                    cfg.dc.ngram_lengths = value
                        .split(',')
                        .map(|v| parse_num(key, v.trim(), n))
                        .collect::<Result<Vec<usize>>>()?;
                }
                "activation_threshold" => cfg.lymph.activation_threshold = parse_num(key, value, n)?,
                "tolerance_threshold" => cfg.lymph.tolerance_threshold = parse_num(key, value, n)?,
                "naive_lifespan" => cfg.lymph.naive_lifespan = parse_num(key, value, n)?,
                "naive_per_presentation" => cfg.lymph.naive_per_presentation = parse_num(key, value, n)?,
                "wildcard_prob" => cfg.lymph.wildcard_prob = parse_num(key, value, n)?,
                "effector_lifespan" => cfg.lymph.effector_lifespan = parse_num(key, value, n)?,
                "evidence_scale" => evidence_scale = Some(parse_num(key, value, n)?),
                "memory_extension" => memory_extension = Some(parse_num(key, value, n)?),
                "tissue_capacity" => cfg.tissue_capacity = parse_num(key, value, n)?,
                "records_per_tick" => cfg.records_per_tick = parse_num(key, value, n)?,
                other => return Err(Error::parse(line_no, 1, format!("unknown key `{other}`"))),
            }
        }
        cfg.lymph.evidence_scale = evidence_scale.unwrap_or_else(|| cfg.dc.threshold_midpoint());
        cfg.retirement.memory_extension = memory_extension.unwrap_or(10 * cfg.lymph.effector_lifespan);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn weights(&self) -> &WeightMatrix {
        &self.dc.weights
    }
}

impl fmt::Display for EngineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = &self.dc.weights;
        let lengths: Vec<String> = self.dc.ngram_lengths.iter().map(usize::to_string).collect();
        writeln!(f, "rng_seed = {}", self.rng_seed)?;
        writeln!(f, "dc_population_size = {}", self.dc_population_size)?;
        writeln!(f, "cpu_scale = {}", self.signals.cpu_scale)?;
        writeln!(f, "mem_scale = {}", self.signals.mem_scale)?;
        writeln!(f, "pamp_saturation = {}", self.signals.pamp_saturation)?;
        writeln!(f, "signal_window = {}", self.signals.window)?;
        writeln!(f, "w_csm_pamp = {}", w.csm.pamp)?;
        writeln!(f, "w_csm_danger = {}", w.csm.danger)?;
        writeln!(f, "w_csm_safe = {}", w.csm.safe)?;
        writeln!(f, "w_mat_pamp = {}", w.mat.pamp)?;
        writeln!(f, "w_mat_danger = {}", w.mat.danger)?;
        writeln!(f, "w_mat_safe_suppression = {}", w.mat.safe_suppression)?;
        writeln!(f, "w_semi_safe = {}", w.semi.safe)?;
        writeln!(f, "migration_threshold_min = {}", self.dc.threshold_min)?;
        writeln!(f, "migration_threshold_max = {}", self.dc.threshold_max)?;
        writeln!(f, "peptide_capacity = {}", self.dc.peptide_capacity)?;
        writeln!(f, "peptides_per_collection = {}", self.dc.peptides_per_collection)?;
        writeln!(f, "antigens_per_sample = {}", self.dc.antigens_per_sample)?;
        writeln!(f, "ngram_lengths = {}", lengths.join(","))?;
        writeln!(f, "activation_threshold = {}", self.lymph.activation_threshold)?;
        writeln!(f, "tolerance_threshold = {}", self.lymph.tolerance_threshold)?;
        writeln!(f, "naive_lifespan = {}", self.lymph.naive_lifespan)?;
        writeln!(f, "naive_per_presentation = {}", self.lymph.naive_per_presentation)?;
        writeln!(f, "wildcard_prob = {}", self.lymph.wildcard_prob)?;
        writeln!(f, "effector_lifespan = {}", self.lymph.effector_lifespan)?;
        writeln!(f, "evidence_scale = {}", self.lymph.evidence_scale)?;
        writeln!(f, "memory_extension = {}", self.retirement.memory_extension)?;
        writeln!(f, "tissue_capacity = {}", self.tissue_capacity)?;
        writeln!(f, "records_per_tick = {}", self.records_per_tick)
    }
}
