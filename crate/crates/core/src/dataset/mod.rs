//! Per-device sensing datasets: label normalisation, chunked record files,
//! deterministic build from the simulator and batched loading.

mod build;
mod format;
mod load;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelContext;
use crate::error::{Error, Result};

pub use build::{build, frame_schedule, split_frames, DatasetSpec, MANIFEST};
pub use format::{read_chunk, write_chunk, ChunkHeader, RECORDS_PER_CHUNK};
pub use load::{batch_indices, AccessAudit, AggIndex, Batch, ChunkEntry, Dataset, DeviceManifest, JoinEntry, Locator, RootManifest};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormSpec {
    pub d_max: f64,
    pub v_max: f64,
}

impl Default for NormSpec {
    fn default() -> Self {
        NormSpec {
            d_max: 200.0,
            v_max: 15.0,
        }
    }
}

impl NormSpec {
    pub fn validate(&self, arena: [f64; 3], max_speed: f64) -> Result<()> {
        let diag = (arena[0] * arena[0] + arena[1] * arena[1]).sqrt();
        if self.d_max < diag {
            return Err(Error::Config(format!("norm: d_max {} is below the arena diagonal {diag:.1}", self.d_max)));
        }
        if self.v_max < max_speed {
            return Err(Error::Config(format!("norm: v_max {} is below the top target speed {max_speed}", self.v_max)));
        }
        Ok(())
    }
}

/// Distance, azimuth, pitch and radial velocity in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawLabels {
    pub distance: f64,
    pub azimuth: f64,
    pub pitch: f64,
    pub radial_velocity: f64,
}

pub fn normalize(raw: &RawLabels, spec: &NormSpec) -> Result<[f64; 4]> {
    let n = [
        raw.distance / spec.d_max,
        (raw.azimuth + PI) / (2.0 * PI),
        (raw.pitch + PI / 2.0) / PI,
        (raw.radial_velocity + spec.v_max) / (2.0 * spec.v_max),
    ];
    const NAMES: [&str; 4] = ["distance", "azimuth", "pitch", "radial velocity"];
    for (i, v) in n.iter().enumerate() {
        if !(*v > 0.0 && *v < 1.0) {
            return Err(Error::Domain(format!(
                "{} label {:?} normalises to {v}, outside (0, 1)",
                NAMES[i],
                [raw.distance, raw.azimuth, raw.pitch, raw.radial_velocity][i]
            )));
        }
    }
    Ok(n)
}

pub fn denormalize(n: &[f64; 4], spec: &NormSpec) -> RawLabels {
    RawLabels {
        distance: n[0] * spec.d_max,
        azimuth: n[1] * 2.0 * PI - PI,
        pitch: n[2] * PI - PI / 2.0,
        radial_velocity: n[3] * 2.0 * spec.v_max - spec.v_max,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub device: usize,
    pub target: usize,
    /// Global frame index within the dataset.
    pub frame: usize,
    pub sequence: usize,
    pub sequence_frame: usize,
    pub occluded: bool,
    pub raw: RawLabels,
    pub echo_snr_db: f64,
    pub context: ChannelContext,
}

/// One (device, target, frame) sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// `H x W x 3` BGR.
    pub image: Vec<u8>,
    /// `antennas x samples x 2`, interleaved real/imag.
    pub echo: Vec<f32>,
    pub labels: [f32; 4],
    pub class: usize,
    pub meta: RecordMeta,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_examples() {
        let spec = NormSpec::default();
        let raw = RawLabels {
            distance: 50.0,
            azimuth: 0.0,
            pitch: 0.0,
            radial_velocity: -7.5,
        };
        let n = normalize(&raw, &spec).unwrap();
        assert_eq!(n[1], 0.5);
        assert_eq!(n[3], 0.25);
        let back = denormalize(&n, &spec);
        assert!((back.distance - 50.0).abs() < 1e-12);
        let bad = RawLabels {
            azimuth: PI,
            ..raw
        };
        assert!(normalize(&bad, &spec).is_err());
    }
}
