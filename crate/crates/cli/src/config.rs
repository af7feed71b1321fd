//! Run configuration: JSON with flat dotted keys, layered as
//! defaults < config file < `--set` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use attfd::detector::DetectorConfig;
use attfd::fewshot::{Hyperparams, TrainConfig};
use attfd::saliency::SaliencyConfig;
use attfd::synthdata::{BenchmarkSizes, SceneConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Environment variable naming the root that relative output directories
/// resolve against.
pub const OUT_ROOT_ENV: &str = "ATTFD_OUT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub sizes: BenchmarkSizes,
    pub scene: SceneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub gamma: Vec<f64>,
    pub split: Vec<u8>,
    pub k_shot: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let h = Hyperparams::default();
        SweepConfig {
            beta: vec![h.beta],
            eta: vec![h.eta],
            epsilon: vec![h.epsilon],
            gamma: vec![h.gamma],
            split: vec![1],
            k_shot: vec![h.k_shot],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Drives data generation, initialization, support sampling and the
    /// shuffle order of both stages (`base.seed` and `novel.seed` are
    /// replaced by it).
    pub seed: u64,
    pub split: u8,
    pub out_dir: String,
    /// Input checkpoint for train-novel, eval and render-attention.
    pub checkpoint: String,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub saliency: SaliencyConfig,
    pub base: TrainConfig,
    pub novel: TrainConfig,
    pub loss: Hyperparams,
    pub render_scene_seed: u64,
    /// Name of a primitive whose backward rule gradcheck sign-flips.
    pub gradcheck_fault: Option<String>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            split: 1,
            out_dir: "runs".into(),
            checkpoint: String::new(),
            data: DataConfig::default(),
            detector: DetectorConfig::default(),
            saliency: SaliencyConfig::default(),
            base: TrainConfig::default(),
            novel: TrainConfig::novel(),
            loss: Hyperparams::default(),
            render_scene_seed: 0,
            gradcheck_fault: None,
            sweep: SweepConfig::default(),
        }
    }
}

pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl RunConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Defaults, then `file`, then `overrides` (`key=value`, value parsed as
    /// JSON and taken as a string otherwise).
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
        let mut flat = RunConfig::default().to_flat();
        let known: Vec<String> = flat.keys().cloned().collect();
        let mut set = |key: &str, v: Value| -> Result<(), CliError> {
            if !known.iter().any(|k| k == key) {
                return Err(CliError::Usage(format!("unknown config key `{key}`")));
            }
            flat.insert(key.to_string(), v);
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {} is not JSON: {e}", path.display())))?;
            for (k, v) in flatten(&v) {
                set(&k, v)?;
            }
        }
        for o in overrides {
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not key=value")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set(k.trim(), v)?;
        }
        let cfg: RunConfig = serde_json::from_value(unflatten(&flat))
            .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.detector.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.loss.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.novel.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn out_path(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) => Path::new(&root).join(&self.out_dir),
            None => PathBuf::from(&self.out_dir),
        }
    }

    /// Writes the flat resolved config as `config.json` in `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.to_flat()).expect("config serializes");
        std::fs::write(dir.join("config.json"), text + "\n")?;
        Ok(())
    }

    pub fn base_schedule(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.base.clone() }
    }

    pub fn novel_schedule(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.novel.clone() }
    }
}
