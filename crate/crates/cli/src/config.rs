//! Run configuration: one JSON document with `scenario`, `data`, `model`,
//! `train` and `sweep` sections.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use leocsi::channel::ScenarioConfig;
use leocsi::dataset::{DatasetSpec, SnrPolicy, SpeedPolicy};
use leocsi::evaluation::SweepKind;
use leocsi::models::ModelConfig;
use leocsi::training::TrainConfig;

use crate::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Dataset sizes, window lengths and sampling policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub t_p: usize,
    pub t_f: usize,
    pub train_speed: SpeedPolicy,
    pub train_snr: SnrPolicy,
    pub test_speed: SpeedPolicy,
    pub test_snr: SnrPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_count: 9000,
            test_count: 1000,
            t_p: 16,
            t_f: 4,
            train_speed: SpeedPolicy::train_default(),
            train_snr: SnrPolicy::train_default(),
            test_speed: SpeedPolicy::test_default(),
            test_snr: SnrPolicy::test_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: SweepKind,
    /// Sweep values; ignored for `lora_rank`, where the models define the points.
    pub values: Vec<f64>,
    /// Any of `persistence`, `ar`, `mrt_outdated`, `wmmse_perfect`.
    pub baselines: Vec<String>,
    pub ar_order: usize,
    /// Test samples generated per sweep point.
    pub count: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kind: SweepKind::Velocity,
            values: (1..=10).map(|i| 10.0 * i as f64).collect(),
            baselines: vec!["persistence".into(), "ar".into()],
            ar_order: 2,
            count: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            scenario: ScenarioConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Reference parameters and model widths.
    Reference,
    /// Two devices, 2×2 array, small model, step-budgeted training.
    Desk,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Reference => RunConfig::default(),
            Preset::Desk => RunConfig {
                scenario: ScenarioConfig {
                    num_devices: 2,
                    n_x: 2,
                    n_y: 2,
                    compensate_sat_doppler: true,
                    ..Default::default()
                },
                data: DataConfig {
                    train_count: 8000,
                    test_count: 1000,
                    t_p: 8,
                    t_f: 2,
                    ..Default::default()
                },
                model: ModelConfig::desk(),
                train: TrainConfig {
                    batch_size: 64,
                    ..TrainConfig::desk(2000, 0)
                },
                sweep: SweepConfig::default(),
                ..Default::default()
            },
        }
    }

    /// Parses a config document, or the `config` field of a run manifest.
    pub fn from_json(text: &str) -> Result<Value, CliError> {
        let v: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
        Ok(match v.get("manifest_version") {
            Some(_) => v
                .get("config")
                .cloned()
                .ok_or_else(|| CliError::Config("manifest has no `config` field".into()))?,
            None => v,
        })
    }

    /// Layers `overlay` (a partial document) and then `--set` overrides on
    /// top of `base`, and validates the result.
    pub fn resolve(base: RunConfig, overlay: Option<Value>, sets: &[String]) -> Result<RunConfig, CliError> {
        let mut doc = serde_json::to_value(&base).expect("config serializes");
        if let Some(o) = overlay {
            // unknown keys in the file must be reported, not dropped
            let _: RunConfig = serde_json::from_value(o.clone()).map_err(|e| CliError::Config(e.to_string()))?;
            merge(&mut doc, o);
        }
        for s in sets {
            apply_set(&mut doc, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the shape fields the model shares with the scenario and data
    /// sections.
    fn sync(&mut self) {
        self.model.num_devices = self.scenario.num_devices;
        self.model.num_antennas = self.scenario.num_antennas();
        self.model.t_p = self.data.t_p;
        self.model.t_f = self.data.t_f;
        self.model.total_power = self.scenario.total_power;
        self.train.noise_power = self.scenario.noise_power;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {}, expected {CONFIG_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.scenario.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.data.t_p == 0 || self.data.t_f == 0 {
            return Err(CliError::Config("data.t_p and data.t_f must be positive".into()));
        }
        Ok(())
    }

    pub fn train_spec(&self) -> DatasetSpec {
        DatasetSpec {
            speed_policy: self.data.train_speed.clone(),
            snr_policy: self.data.train_snr.clone(),
            ..DatasetSpec::train(self.scenario.clone(), self.data.train_count, self.data.t_p, self.data.t_f, self.seed)
        }
    }

    pub fn test_spec(&self) -> DatasetSpec {
        DatasetSpec {
            speed_policy: self.data.test_speed.clone(),
            snr_policy: self.data.test_snr.clone(),
            // distinct stream from the training split
            ..DatasetSpec::test(
                self.scenario.clone(),
                self.data.test_count,
                self.data.t_p,
                self.data.t_f,
                self.seed ^ 0x7465_7374,
            )
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // tagged enums are replaced whole
                    Some(slot) if slot.is_object() && v.is_object() && v.get("kind").is_none() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise. The path must already exist.
pub fn apply_set(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("`--set {assignment}`: expected key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let next = match node {
            Value::Object(map) => map.get_mut(*key),
            Value::Array(items) => key.parse::<usize>().ok().and_then(|j| items.get_mut(j)),
            _ => None,
        };
        node = next.ok_or_else(|| CliError::Config(format!("unknown config key `{}`", keys[..=i].join("."))))?;
    }
    *node = value;
    Ok(())
}
