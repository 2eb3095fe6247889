use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::format::{sha256_hex, write_chunk, RECORDS_PER_CHUNK};
use super::load::{AggIndex, ChunkEntry, DeviceManifest, JoinEntry, Locator, RootManifest};
use super::{normalize, NormSpec, RawLabels, Record, RecordMeta, Split, FORMAT_VERSION};
use crate::channel::{render_context, ChannelConfig};
use crate::error::{Error, Result};
use crate::radar::{self, EchoParams, RadarConfig};
use crate::rng::{self, tag};
use crate::scene::{self, SceneConfig, TargetClass};

pub const MANIFEST: &str = "manifest.json";

/// Everything needed to build the per-device datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scene: SceneConfig,
    pub radar: RadarConfig,
    pub channel: ChannelConfig,
    pub norm: NormSpec,
    /// Frames per (device, target) stream.
    pub samples: usize,
    /// Stride between sampled frames inside one simulated sequence.
    pub frame_stride: usize,
    pub split_ratio: f64,
    pub seed: u64,
    /// Device whose position serves as the aggregation centre for stored contexts.
    pub center_position: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.radar.validate()?;
        self.channel.validate()?;
        let top_speed = TargetClass::ALL.iter().map(|c| c.speed() * 1.2).fold(0.0, f64::max);
        self.norm.validate(self.scene.arena, top_speed)?;
        if self.scene.n_y != self.radar.n_y || self.scene.n_z != self.radar.n_z {
            return Err(Error::Config("scene and radar antenna grids differ".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if self.frame_stride == 0 {
            return Err(Error::Config("frame_stride must be at least 1".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config("split_ratio must lie in (0, 1)".into()));
        }
        if self.center_position >= self.scene.num_devices {
            return Err(Error::Config(format!(
                "center_position {} is not a device index (K = {})",
                self.center_position, self.scene.num_devices
            )));
        }
        let diag = (self.scene.arena[0].powi(2) + self.scene.arena[1].powi(2)).sqrt();
        if radar::delay(diag) >= self.radar.t_r {
            return Err(Error::Config("arena diagonal exceeds the radar window".into()));
        }
        Ok(())
    }

    pub fn device_dir(k: usize) -> String {
        format!("device_{k}")
    }

    pub fn agg_dir() -> &'static str {
        "agg"
    }
}

/// `(sequence, frame within sequence)` for every dataset frame.
pub fn frame_schedule(samples: usize, frames_per_sequence: usize, stride: usize) -> Vec<(usize, usize)> {
    let per_seq = frames_per_sequence.div_ceil(stride).max(1);
    (0..samples).map(|f| (f / per_seq, (f % per_seq) * stride)).collect()
}

/// Sorts frames by a seeded hash and assigns the first `round(ratio * F)` to train.
pub fn split_frames(samples: usize, ratio: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<(u64, usize)> = (0..samples).map(|f| (rng::derive(seed, &[tag::SPLIT, f as u64]), f)).collect();
    order.sort_unstable();
    let n_train = (ratio * samples as f64).round() as usize;
    let mut out = vec![Split::Val; samples];
    for &(_, f) in &order[..n_train.min(samples)] {
        out[f] = Split::Train;
    }
    out
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Generates `D_1..D_K` and the aggregation join index under `out`.
pub fn build(spec: &DatasetSpec, out: &Path) -> Result<RootManifest> {
    spec.validate()?;
    let devices = spec.scene.devices();
    let k_count = devices.len();
    let schedule = frame_schedule(spec.samples, spec.scene.num_frames(), spec.frame_stride);
    let splits = split_frames(spec.samples, spec.split_ratio, spec.seed);
    let image_shape = [spec.scene.image_height, spec.scene.image_width, 3];
    let echo_shape = [spec.radar.num_antennas(), spec.radar.num_samples(), 2];
    let center = devices[spec.center_position].position;

    // per device, per split
    let mut records: Vec<BTreeMap<Split, Vec<Record>>> = vec![BTreeMap::new(); k_count];
    let mut rejected = Vec::new();
    let mut current: Option<(usize, Vec<scene::Trajectory>)> = None;
    for (f, &(seq, seq_frame)) in schedule.iter().enumerate() {
        if current.as_ref().map(|c| c.0) != Some(seq) {
            let seed = rng::derive(spec.seed, &[tag::TRAJECTORY, seq as u64]);
            current = Some((seq, scene::trajectories(&spec.scene, seed)?));
        }
        let trajs = &current.as_ref().expect("set above").1;
        let t = seq_frame as f64 / spec.scene.frame_rate;
        let targets: Vec<scene::TargetState> = trajs.iter().map(|tr| tr.state_at(t)).collect();
        for dev in &devices {
            let img = scene::render(dev, &targets, &spec.scene.obstacles);
            let link = dist3(dev.position, center);
            for tgt in &targets {
                let gt = scene::ground_truth(dev, tgt, &spec.scene.obstacles)?;
                let raw = RawLabels {
                    distance: gt.distance,
                    azimuth: gt.azimuth,
                    pitch: gt.pitch,
                    radial_velocity: gt.radial_velocity,
                };
                let labels = match normalize(&raw, &spec.norm) {
                    Ok(l) => l,
                    Err(e) => {
                        rejected.push(format!("device {} target {} frame {f}: {e}", dev.index, tgt.index));
                        continue;
                    }
                };
                let mut nrng = rng::stream(spec.seed, &[tag::ECHO_NOISE, f as u64, dev.index as u64, tgt.index as u64]);
                let [lo, hi] = spec.radar.snr_db_range;
                let echo_snr = if hi > lo { nrng.random_range(lo..hi) } else { lo };
                let [clo, chi] = spec.channel.snr_db_range;
                let ctx_snr = if chi > clo { nrng.random_range(clo..chi) } else { clo };
                let params = EchoParams {
                    distance: gt.distance,
                    radial_velocity: gt.radial_velocity,
                    pitch: gt.pitch,
                    azimuth: gt.azimuth,
                    rcs: tgt.rcs,
                    occluded: gt.occluded,
                };
                let e = radar::echo(&spec.radar, &params, Some(echo_snr), &mut nrng)?;
                let mut echo = Vec::with_capacity(e.re.numel() * 2);
                for (&r, &i) in e.re.data().iter().zip(e.im.data()) {
                    echo.push(r as f32);
                    echo.push(i as f32);
                }
                let record = Record {
                    image: img.data.clone(),
                    echo,
                    labels: labels.map(|v| v as f32),
                    class: gt.class.index(),
                    meta: RecordMeta {
                        device: dev.index,
                        target: tgt.index,
                        frame: f,
                        sequence: seq,
                        sequence_frame: seq_frame,
                        occluded: gt.occluded,
                        raw,
                        echo_snr_db: echo_snr,
                        context: render_context((ctx_snr * 10.0).round() / 10.0, (link * 10.0).round() / 10.0),
                    },
                };
                records[dev.index].entry(splits[f]).or_default().push(record);
            }
        }
    }

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut device_dirs = Vec::with_capacity(k_count);
    let mut file_hashes = BTreeMap::new();
    for (k, per_split) in records.iter().enumerate() {
        let dir_name = DatasetSpec::device_dir(k);
        let dir = out.join(&dir_name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut chunks = Vec::new();
        let mut counts = BTreeMap::new();
        for split in [Split::Train, Split::Val] {
            let recs = per_split.get(&split).map(Vec::as_slice).unwrap_or(&[]);
            counts.insert(split, recs.len());
            for (ci, chunk) in recs.chunks(RECORDS_PER_CHUNK).enumerate() {
                let file = format!("{}_{ci:03}.bin", split.name());
                let sha = write_chunk(&dir.join(&file), split, image_shape, echo_shape, chunk)?;
                file_hashes.insert(format!("{dir_name}/{file}"), sha.clone());
                chunks.push(ChunkEntry {
                    file,
                    split,
                    count: chunk.len(),
                    sha256: sha,
                });
            }
        }
        let manifest = DeviceManifest {
            version: FORMAT_VERSION,
            device: k,
            position: devices[k].position,
            image_shape,
            echo_shape,
            counts,
            chunks,
            norm: spec.norm.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&manifest)?;
        fs::write(dir.join(MANIFEST), &bytes).map_err(|e| Error::io(dir.join(MANIFEST), e))?;
        file_hashes.insert(format!("{dir_name}/{MANIFEST}"), sha256_hex(&bytes));
        device_dirs.push(dir_name);
    }

    // join index: (frame, target) present on every device
    let mut positions: BTreeMap<(usize, usize), Vec<Option<Locator>>> = BTreeMap::new();
    for (k, per_split) in records.iter().enumerate() {
        for (&split, recs) in per_split {
            for (i, r) in recs.iter().enumerate() {
                positions.entry((r.meta.frame, r.meta.target)).or_insert_with(|| vec![None; k_count])[k] =
                    Some(Locator { device: k, split, index: i });
            }
        }
    }
    let entries = positions
        .into_iter()
        .filter_map(|((frame, target), locs)| {
            let locators: Option<Vec<Locator>> = locs.into_iter().collect();
            locators.map(|locators| JoinEntry {
                frame,
                target,
                split: splits[frame],
                locators,
            })
        })
        .collect();
    let agg = AggIndex {
        version: FORMAT_VERSION,
        devices: device_dirs.clone(),
        entries,
    };
    let agg_dir = out.join(DatasetSpec::agg_dir());
    fs::create_dir_all(&agg_dir).map_err(|e| Error::io(&agg_dir, e))?;
    let bytes = serde_json::to_vec_pretty(&agg)?;
    fs::write(agg_dir.join(MANIFEST), &bytes).map_err(|e| Error::io(agg_dir.join(MANIFEST), e))?;
    file_hashes.insert(format!("{}/{MANIFEST}", DatasetSpec::agg_dir()), sha256_hex(&bytes));

    let root = RootManifest {
        version: FORMAT_VERSION,
        spec: spec.clone(),
        devices: device_dirs,
        agg: DatasetSpec::agg_dir().to_string(),
        device_positions: devices.iter().map(|d| d.position).collect(),
        records_per_device: records.iter().map(|m| m.values().map(Vec::len).sum()).collect(),
        rejected,
        files: file_hashes,
    };
    let bytes = serde_json::to_vec_pretty(&root)?;
    fs::write(out.join(MANIFEST), bytes).map_err(|e| Error::io(out.join(MANIFEST), e))?;
    Ok(root)
}
