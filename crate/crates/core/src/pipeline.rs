//! Artifact-level commands: generate data, train devices, train the
//! centre, evaluate, and the end-to-end experiment used for trend runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataset::{AccessAudit, AggIndex, Dataset, DatasetSpec, RootManifest};
use crate::error::{Error, Result};
use crate::eval::{ablation_matrix, raw_record_bytes, report_csv, svg_plot, EvalData, MetricReport, Mode, ModelZoo, PLOT_METRICS};
use crate::rng;
use crate::rvfn::Modality;
use crate::training::{
    load_center, load_device, log_csv, read_meta, save_center, save_device, train_stage1, train_stage2, AggContext, CheckpointMeta, CodeBank,
    EpochLog, FrozenDevice, Stage1Result,
};

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<RootManifest> {
    crate::dataset::build(&cfg.dataset_spec(), out)
}

/// Dataset root for a path naming either the root or one of its subdirectories.
pub fn dataset_root(path: &Path) -> Result<PathBuf> {
    if path.join(crate::dataset::MANIFEST).is_file() && RootManifest::open(path).is_ok() {
        return Ok(path.to_path_buf());
    }
    if let Some(parent) = path.parent() {
        if RootManifest::open(parent).is_ok() {
            return Ok(parent.to_path_buf());
        }
    }
    Err(Error::MissingArtifact(format!("no dataset manifest at or above {}", path.display())))
}

fn log_path(out: &Path) -> PathBuf {
    out.with_extension("log.csv")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_log(out: &Path, history: &[EpochLog]) -> Result<()> {
    write(&log_path(out), log_csv(history).as_bytes())
}

/// Stage one for a device directory; writes the checkpoint and `<out>.log.csv`.
pub fn train_local(
    cfg: &RunConfig,
    data_dir: &Path,
    device: usize,
    modality: Modality,
    out: &Path,
    audit: Option<&AccessAudit>,
) -> Result<Stage1Result> {
    if !data_dir.join(crate::dataset::MANIFEST).is_file() {
        return Err(Error::MissingArtifact(format!("device dataset {}", data_dir.display())));
    }
    let data = Dataset::open(data_dir, audit)?;
    let res = train_stage1(&data, device, modality, &cfg.model, &cfg.train, cfg.seed)?;
    save_device(&res, cfg.seed, cfg.train.lora_only, out)?;
    write_log(out, &res.history)?;
    Ok(res)
}

/// Device and aggregation datasets under a dataset root.
pub struct Corpus {
    pub root: RootManifest,
    pub datasets: Vec<Dataset>,
    pub agg: AggIndex,
}

impl Corpus {
    pub fn open(path: &Path) -> Result<Self> {
        let dir = dataset_root(path)?;
        let root = RootManifest::open(&dir)?;
        let datasets = root.devices.iter().map(|d| Dataset::open(&dir.join(d), None)).collect::<Result<Vec<_>>>()?;
        let agg = AggIndex::open(&dir.join(&root.agg))?;
        Ok(Corpus { root, datasets, agg })
    }

    pub fn raw_bytes(&self) -> usize {
        let s = &self.root.spec;
        raw_record_bytes(
            [s.scene.image_height, s.scene.image_width, 3],
            s.radar.num_antennas(),
            s.radar.num_samples(),
        )
    }
}

/// Loads one complete family of device checkpoints, ordered by device.
pub fn load_family(paths: &[PathBuf], k_count: usize) -> Result<Vec<FrozenDevice>> {
    let mut by_dev: BTreeMap<usize, FrozenDevice> = BTreeMap::new();
    let mut modality = None;
    for p in paths {
        if !p.is_file() {
            return Err(Error::MissingArtifact(format!("checkpoint {}", p.display())));
        }
        let (m, store, _) = load_device(p)?;
        if *modality.get_or_insert(m.modality) != m.modality {
            return Err(Error::Config("device checkpoints mix modalities".into()));
        }
        if by_dev.insert(m.device, FrozenDevice::new(m, store)).is_some() {
            return Err(Error::Config(format!("two checkpoints for one device in {}", p.display())));
        }
    }
    let fam: Vec<FrozenDevice> = (0..k_count)
        .map(|k| by_dev.remove(&k).ok_or_else(|| Error::MissingArtifact(format!("device {k} checkpoint"))))
        .collect::<Result<_>>()?;
    if !by_dev.is_empty() {
        return Err(Error::Config(format!("checkpoints name devices outside 0..{k_count}")));
    }
    Ok(fam)
}

/// Stage two for one centre position; writes the checkpoint and `<out>.log.csv`.
pub fn train_agg(cfg: &RunConfig, corpus: &Corpus, family: &[FrozenDevice], center: usize, out: &Path) -> Result<crate::training::Stage2Result> {
    let bank = CodeBank::build(family, &corpus.datasets, cfg.train.eval_batch_size)?;
    let ctx = AggContext {
        devices: family,
        datasets: &corpus.datasets,
        bank: &bank,
        positions: &corpus.root.device_positions,
        center,
        channel: &corpus.root.spec.channel,
    };
    let res = train_stage2(&corpus.agg, &ctx, &cfg.model, &cfg.train, cfg.seed)?;
    save_center(&res, &ctx, &cfg.model, cfg.seed, out)?;
    write_log(out, &res.history)?;
    Ok(res)
}

/// Files named directly plus `*.ckpt` inside named directories, sorted.
pub fn expand_checkpoints(items: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = BTreeSet::new();
    for it in items {
        if it.is_dir() {
            for e in fs::read_dir(it).map_err(|e| Error::io(it, e))? {
                let p = e.map_err(|e| Error::io(it, e))?.path();
                if p.extension().is_some_and(|x| x == "ckpt") {
                    out.insert(p);
                }
            }
        } else if it.is_file() {
            out.insert(it.clone());
        } else {
            return Err(Error::MissingArtifact(format!("checkpoint {}", it.display())));
        }
    }
    Ok(out.into_iter().collect())
}

/// Sorts checkpoints into device families and centre models, checking that every
/// centre model was trained on the decoders it is paired with.
pub fn load_zoo(paths: &[PathBuf]) -> Result<ModelZoo> {
    let mut zoo = ModelZoo::default();
    let mut pending = Vec::new();
    for p in paths {
        let (meta, _) = read_meta(p)?;
        match meta {
            CheckpointMeta::Local { .. } => {
                let (m, store, _) = load_device(p)?;
                zoo.devices.insert((m.modality, m.device), FrozenDevice::new(m, store));
            }
            CheckpointMeta::Agg { .. } => pending.push(p),
        }
    }
    for p in pending {
        let (m, store, meta) = load_center(p)?;
        let CheckpointMeta::Agg {
            center, modality, decoders, ..
        } = meta
        else {
            unreachable!("filtered above");
        };
        for (k, h) in decoders.iter().enumerate() {
            match zoo.devices.get(&(modality, k)) {
                Some(d) if &d.decoder_hash() == h => {}
                Some(_) => {
                    return Err(Error::Config(format!(
                        "{} was trained against a different {} device {k}",
                        p.display(),
                        modality.name()
                    )))
                }
                None => return Err(Error::MissingArtifact(format!("{} checkpoint for device {k}", modality.name()))),
            }
        }
        zoo.centers.insert((modality, center), (m, store));
    }
    Ok(zoo)
}

/// Centre positions with an aggregation checkpoint for every multi-device mode requested.
pub fn default_centers(zoo: &ModelZoo, modes: &[Mode], k_count: usize) -> Vec<usize> {
    let md: BTreeSet<Modality> = modes.iter().filter(|m| !m.single_device()).map(|m| m.modality()).collect();
    if md.is_empty() {
        return (0..k_count).collect();
    }
    (0..k_count).filter(|&c| md.iter().all(|&m| zoo.centers.contains_key(&(m, c)))).collect()
}

pub fn evaluate(cfg: &RunConfig, corpus: &Corpus, zoo: &ModelZoo, modes: &[Mode], snrs: &[f64], centers: &[usize]) -> Result<Vec<MetricReport>> {
    let data = EvalData {
        datasets: &corpus.datasets,
        agg: &corpus.agg,
        positions: &corpus.root.device_positions,
        channel: &corpus.root.spec.channel,
        norm: &corpus.root.spec.norm,
        raw_bytes: corpus.raw_bytes(),
    };
    ablation_matrix(&data, zoo, modes, snrs, centers, &cfg.train, cfg.eval.threads, rng::derive(cfg.seed, &[rng::tag::EVAL]))
}

/// Writes the CSV report and, when asked, one SVG per metric.
pub fn write_report(rows: &[MetricReport], report: &Path, plots: Option<&Path>) -> Result<()> {
    write(report, report_csv(rows).as_bytes())?;
    if let Some(dir) = plots {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for m in PLOT_METRICS {
            write(&dir.join(format!("{m}.svg")), svg_plot(rows, m)?.as_bytes())?;
        }
    }
    Ok(())
}

pub fn device_ckpt_name(modality: Modality, device: usize) -> String {
    format!("local_{}_{device}.ckpt", modality.name())
}

pub fn center_ckpt_name(modality: Modality, center: usize) -> String {
    format!("agg_{}_{center}.ckpt", modality.name())
}

/// Outputs of [`run_experiment`].
pub struct Experiment {
    /// Validation loss per epoch (epoch 0 first) for each (family, device).
    pub stage1: BTreeMap<(Modality, usize), Vec<f64>>,
    pub rows: Vec<MetricReport>,
}

/// Generates data, trains every family needed by `cfg.eval.modes`, trains the
/// centres in `cfg.eval.centers` and evaluates, all under `work`.
pub fn run_experiment(cfg: &RunConfig, work: &Path) -> Result<Experiment> {
    let data_dir = work.join("data");
    let ckpt_dir = work.join("ckpt");
    generate(cfg, &data_dir)?;
    let corpus = Corpus::open(&data_dir)?;
    let k_count = corpus.datasets.len();
    let centers: Vec<usize> = if cfg.eval.centers.is_empty() {
        (0..k_count).collect()
    } else {
        cfg.eval.centers.clone()
    };
    let families: BTreeSet<Modality> = cfg.eval.modes.iter().map(|m| m.modality()).collect();
    let mut stage1 = BTreeMap::new();
    let mut paths = Vec::new();
    for &m in &families {
        let mut family = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let out = ckpt_dir.join(device_ckpt_name(m, k));
            let res = train_local(cfg, &data_dir.join(DatasetSpec::device_dir(k)), k, m, &out, None)?;
            stage1.insert((m, k), res.val_losses());
            paths.push(out);
            family.push(FrozenDevice::new(res.model, res.store));
        }
        if cfg.eval.modes.iter().any(|md| !md.single_device() && md.modality() == m) {
            for &c in &centers {
                let out = ckpt_dir.join(center_ckpt_name(m, c));
                train_agg(cfg, &corpus, &family, c, &out)?;
                paths.push(out);
            }
        }
    }
    let zoo = load_zoo(&paths)?;
    let rows = evaluate(cfg, &corpus, &zoo, &cfg.eval.modes, &cfg.eval.snrs, &centers)?;
    write_report(&rows, &work.join("report.csv"), None)?;
    Ok(Experiment { stage1, rows })
}
