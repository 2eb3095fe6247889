//! Run configuration: one JSON document merged over defaults, with
//! `key=value` overrides and the `DISAC_SEED` environment variable.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::ChannelConfig;
use crate::dataset::{DatasetSpec, NormSpec};
use crate::error::{Error, Result};
use crate::eval::Mode;
use crate::model::ModelConfig;
use crate::radar::RadarConfig;
use crate::scene::SceneConfig;
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "DISAC_SEED";

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Frames per (device, target) stream.
    pub samples: usize,
    pub frame_stride: usize,
    pub split_ratio: f64,
    /// Centre used for the distances stored in record contexts.
    pub center_position: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples: 667,
            frame_stride: 6,
            split_ratio: 0.8,
            center_position: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub modes: Vec<Mode>,
    pub snrs: Vec<f64>,
    /// Centre positions to evaluate; empty means every position with checkpoints.
    pub centers: Vec<usize>,
    /// Worker threads for the (mode, SNR) cells.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            modes: Mode::ALL.to_vec(),
            snrs: vec![0.0, 10.0, 15.0, 20.0, 25.0],
            centers: Vec::new(),
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub radar: RadarConfig,
    pub channel: ChannelConfig,
    pub norm: NormSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults, then `file`, then `DISAC_SEED`, then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env_seed = std::env::var(SEED_ENV).ok();
        Self::load_with_env(file, overrides, env_seed.as_deref())
    }

    pub fn load_with_env(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let base = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        let mut v = serde_json::to_value(&base)?;
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            v["seed"] = Value::from(seed);
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let mut scene = self.scene.clone();
        scene.seed = self.seed;
        DatasetSpec {
            scene,
            radar: self.radar.clone(),
            channel: self.channel.clone(),
            norm: self.norm.clone(),
            samples: self.data.samples,
            frame_stride: self.data.frame_stride,
            split_ratio: self.data.split_ratio,
            seed: self.seed,
            center_position: self.data.center_position,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let r = &self.model.rvfn;
        if r.antennas != self.radar.num_antennas() || r.samples != self.radar.num_samples() {
            return Err(Error::Config(format!(
                "model.rvfn expects {}x{} echoes, radar produces {}x{}",
                r.antennas,
                r.samples,
                self.radar.num_antennas(),
                self.radar.num_samples()
            )));
        }
        if r.image_size != self.scene.image_width || r.image_size != self.scene.image_height {
            return Err(Error::Config(format!(
                "model.rvfn.image_size {} differs from the rendered {}x{} images",
                r.image_size, self.scene.image_width, self.scene.image_height
            )));
        }
        if self.model.tram.classes != 3 {
            return Err(Error::Config("model.tram.classes must be 3 (car, robot dog, drone)".into()));
        }
        if self.eval.snrs.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("eval.snrs must be finite".into()));
        }
        if self.eval.threads == 0 {
            return Err(Error::Config("eval.threads must be at least 1".into()));
        }
        if let Some(&c) = self.eval.centers.iter().find(|&&c| c >= self.scene.num_devices) {
            return Err(Error::Config(format!("eval.centers: {c} is not a device index")));
        }
        Ok(())
    }
}

/// Sets the dotted `key` inside `v`; the value is read as JSON, falling back to a string.
pub fn apply_override(v: &mut Value, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{kv}` is not of the form key=value")))?;
    let key = key.trim();
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = v;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::Config("empty config key".into()))
}
