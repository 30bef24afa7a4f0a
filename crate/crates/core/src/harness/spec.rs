use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::IndexDistribution;
use super::presets::preset;
use crate::comms::TransportKind;
use crate::costmodel::ScalingMode;
use crate::embedding::UpdateStrategy;
use crate::error::{Error, Result};
use crate::model::{CommVariant, DlrmConfig};
use crate::optim::PrecisionMode;

/// Everything needed to reproduce a benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSpec {
    /// Preset name or path to a TOML config file.
    pub config: String,
    pub ranks: usize,
    pub scaling: ScalingMode,
    pub transport: TransportKind,
    pub comm_variant: CommVariant,
    pub update_strategy: UpdateStrategy,
    pub dtype: PrecisionMode,
    pub blocking: bool,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Compute threads per rank.
    pub threads: usize,
    pub comm_workers: usize,
    pub lr: f32,
    pub distribution: IndexDistribution,
    /// Distinct batches generated up front and cycled through.
    pub data_pool: usize,
    /// Address rank 0 listens on in TCP mode.
    pub rendezvous: String,
    /// Upper bound on bytes the run may allocate; 0 means detect.
    pub mem_limit_bytes: u64,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            config: "mini-small".into(),
            ranks: 1,
            scaling: ScalingMode::Strong,
            transport: TransportKind::InProcess,
            comm_variant: CommVariant::Alltoall,
            update_strategy: UpdateStrategy::RaceFreePartitioned,
            dtype: PrecisionMode::Fp32,
            blocking: false,
            iters: 10,
            warmup: 2,
            seed: 1,
            threads: 1,
            comm_workers: 1,
            lr: 0.1,
            distribution: IndexDistribution::Uniform,
            data_pool: 8,
            rendezvous: "127.0.0.1:29500".into(),
            mem_limit_bytes: 0,
        }
    }
}

/// Keys of a config file that belong to the run, not the model.
const RUN_KEYS: [&str; 17] = [
    "ranks",
    "scaling",
    "transport",
    "comm_variant",
    "update_strategy",
    "dtype",
    "blocking",
    "iters",
    "warmup",
    "seed",
    "threads",
    "comm_workers",
    "lr",
    "distribution",
    "data_pool",
    "rendezvous",
    "mem_limit_bytes",
];

/// A config file: model keys (`N`, `GN`, `S`, `bottom_mlp`, ...) plus
/// optional run keys, all at the top level. A `preset` key starts from a
/// named configuration and lets the file override individual values.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigFile {
    pub model: DlrmConfig,
    pub run: toml::Table,
}

pub fn parse_config_file(text: &str) -> Result<ConfigFile> {
    let mut table: toml::Table = text.parse().map_err(|e| Error::config(format!("config file: {e}")))?;
    let mut run = toml::Table::new();
    for key in RUN_KEYS {
        if let Some(v) = table.remove(key) {
            run.insert(key.to_string(), v);
        }
    }
    let model = match table.remove("preset") {
        Some(toml::Value::String(name)) => {
            let base = toml::Table::try_from(preset(&name)?).map_err(|e| Error::config(e.to_string()))?;
            let mut merged = base;
            merged.extend(table);
            merged
        }
        Some(_) => return Err(Error::config("'preset' must be a string")),
        None => table,
    };
    let model: DlrmConfig = model
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(format!("config file: {e}")))?;
    model.validate()?;
    Ok(ConfigFile { model, run })
}

impl RunSpec {
    /// Resolves `config` to a model, either a preset or a file.
    pub fn model_config(&self) -> Result<DlrmConfig> {
        if let Ok(c) = preset(&self.config) {
            return Ok(c);
        }
        let path = Path::new(&self.config);
        if !path.exists() {
            return Err(Error::config(format!(
                "'{}' is neither a preset nor a file",
                self.config
            )));
        }
        Ok(parse_config_file(&std::fs::read_to_string(path)?)?.model)
    }

    /// Applies the run keys of a config file on top of `self`.
    pub fn apply_file_keys(&mut self, run: &toml::Table) -> Result<()> {
        let mut me = toml::Table::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        me.extend(run.clone());
        *self = me
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config file: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranks == 0 {
            return Err(Error::config("ranks must be positive"));
        }
        if self.iters == 0 {
            return Err(Error::config("iters must be positive"));
        }
        if self.threads == 0 || self.comm_workers == 0 {
            return Err(Error::config("threads and comm_workers must be positive"));
        }
        if self.data_pool == 0 {
            return Err(Error::config("data_pool must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("lr must be a non-negative number"));
        }
        if self.dtype == PrecisionMode::SplitBf16Lo8 {
            return Err(Error::config(
                "the 8-bit split variant is a numerical experiment, not a benchmark dtype",
            ));
        }
        Ok(())
    }
}
