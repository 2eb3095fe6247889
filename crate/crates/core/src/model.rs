//! Composite models: a sensing device (RVFN, LSTN, local head) and the
//! aggregation centre (TRAM, head).

use serde::{Deserialize, Serialize};

use crate::channel::Link;
use crate::error::{Error, Result};
use crate::lstn::{Lstn, LstnConfig, TextBatch};
use crate::numerics::{Float, Graph, ParamStore, Var};
use crate::rng::{self, tag};
use crate::rvfn::{Modality, Rvfn, RvfnConfig, RvfnInput};
use crate::tram::{Head, HeadOutput, Tram, TramConfig};

/// Architecture of every learned component.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub rvfn: RvfnConfig,
    pub lstn: LstnConfig,
    pub tram: TramConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.rvfn.validate()?;
        self.lstn.validate(self.rvfn.feature_len())?;
        self.tram.validate()?;
        if self.lstn.d_sd != self.tram.d_sd {
            return Err(Error::Config(format!(
                "decoder width {} differs from aggregation width {}",
                self.lstn.d_sd, self.tram.d_sd
            )));
        }
        Ok(())
    }
}

pub fn head_local_prefix(device: usize) -> String {
    format!("head_local.{device}")
}

/// Everything one device trains in the first stage.
#[derive(Debug, Clone)]
pub struct DeviceModel {
    pub cfg: ModelConfig,
    pub device: usize,
    pub modality: Modality,
    pub rvfn: Rvfn,
    pub lstn: Lstn,
    pub head: Head,
}

impl DeviceModel {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, device: usize, modality: Modality, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &[tag::INIT, device as u64, modality as u64]);
        let rvfn = Rvfn::new(store, &cfg.rvfn, modality, &mut r)?;
        let lstn = Lstn::new(store, &cfg.lstn, cfg.rvfn.feature_len(), &mut r)?;
        let head = Head::new(store, &head_local_prefix(device), cfg.lstn.d_sd, cfg.tram.classes, &mut r)?;
        Ok(DeviceModel {
            cfg: cfg.clone(),
            device,
            modality,
            rvfn,
            lstn,
            head,
        })
    }

    /// Parameter namespaces owned by this model.
    pub fn prefixes(&self) -> Vec<String> {
        vec!["rvfn.".into(), "lstn.".into(), format!("{}.", head_local_prefix(self.device))]
    }

    /// Semantic code `[B, L_se, d_se]`.
    pub fn encode<T: Float>(&self, g: &mut Graph<'_, T>, input: &RvfnInput<T>) -> Result<Var> {
        let s = self.rvfn.forward(g, input)?;
        self.lstn.encoder.forward(g, s)
    }

    /// Recovered feature `[B, L_fusion, d_sd]` from a received code.
    pub fn decode<T: Float>(&self, g: &mut Graph<'_, T>, code: Var, text: &TextBatch) -> Result<Var> {
        self.lstn.decoder.forward(g, code, text)
    }

    /// Full local path: extract, encode, channel, decode, predict.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        input: &RvfnInput<T>,
        links: &[Link],
        text: &TextBatch,
        noise_seed: u64,
    ) -> Result<HeadOutput> {
        let code = self.encode(g, input)?;
        let mut r = rng::stream(noise_seed, &[tag::CHANNEL]);
        let rx = Lstn::transmit(g, code, links, &mut r)?;
        let s = self.decode(g, rx, text)?;
        self.head.forward(g, s)
    }
}

/// Aggregation network and centre head.
#[derive(Debug, Clone)]
pub struct CenterModel {
    pub tram: Tram,
    pub head: Head,
}

impl CenterModel {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &[tag::INIT, u64::MAX]);
        Ok(CenterModel {
            tram: Tram::new(store, &cfg.tram, &mut r)?,
            head: Head::new(store, "head", cfg.tram.d_sd, cfg.tram.classes, &mut r)?,
        })
    }

    pub fn prefixes() -> [&'static str; 2] {
        ["tram.", "head."]
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, center: Var, devices: &[Var]) -> Result<HeadOutput> {
        let s = self.tram.aggregate(g, center, devices)?;
        self.head.forward(g, s)
    }
}
