//! Metrics, compression accounting and the ablation matrix over modes,
//! SNRs and centre positions, with CSV and SVG output.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::dataset::{denormalize, AggIndex, Dataset, JoinEntry, NormSpec, Record, Split};
use crate::error::{Error, Result};
use crate::lstn::TextBatch;
use crate::model::CenterModel;
use crate::numerics::{Graph, ParamStore};
use crate::rng::{self, tag};
use crate::rvfn::{Modality, RvfnInput};
use crate::training::{
    communication_time, lossless_context, measure_device, AggContext, CodeBank, DeviceTiming, ExecutionReport, FrozenDevice, LinkPolicy, TrainConfig,
};
use crate::tram::HeadOutput;

/// `10 log10(Σ(x̂−x)² / Σx²)`; `-inf` when the error is exactly zero.
pub fn nmse_db(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("nmse_db", &[pred.len()], &[truth.len()]));
    }
    let den: f64 = truth.iter().map(|x| x * x).sum();
    if den == 0.0 {
        return Err(Error::Domain("nmse_db needs non-zero ground truth".into()));
    }
    let num: f64 = pred.iter().zip(truth).map(|(p, x)| (p - x) * (p - x)).sum();
    Ok(if num == 0.0 { f64::NEG_INFINITY } else { 10.0 * (num / den).log10() })
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("rmse", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Domain("rmse of an empty set".into()));
    }
    let s: f64 = pred.iter().zip(truth).map(|(p, x)| (p - x) * (p - x)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::shape("accuracy", &[logits.len()], &[labels.len()]));
    }
    if logits.is_empty() {
        return Err(Error::Domain("accuracy of an empty set".into()));
    }
    let hits = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compression {
    pub code_bytes: usize,
    pub raw_bytes: usize,
    pub ratio: f64,
    pub reduction: f64,
}

/// Channel payload relative to the raw sensing data it replaces.
pub fn compression(raw_bytes: usize, code_bytes: usize) -> Compression {
    let ratio = if raw_bytes == 0 { 0.0 } else { code_bytes as f64 / raw_bytes as f64 };
    Compression {
        code_bytes,
        raw_bytes,
        ratio,
        reduction: 1.0 - ratio,
    }
}

/// Raw bytes of one record: `uint8` image plus complex64 echo.
pub fn raw_record_bytes(image_shape: [usize; 3], antennas: usize, samples: usize) -> usize {
    image_shape.iter().product::<usize>() + antennas * samples * 8
}

/// Bytes of one float32 semantic code.
pub fn code_bytes(l_se: usize, d_se: usize) -> usize {
    l_se * d_se * 4
}

/// Predictions and labels gathered over a whole evaluation set.
#[derive(Debug, Clone, Default)]
pub struct Predictions {
    pub regression: Vec<[f64; 4]>,
    pub logits: Vec<Vec<f64>>,
    pub labels: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

impl Predictions {
    fn push(&mut self, g: &Graph<'_, f32>, out: &HeadOutput, records: &[&Record]) {
        let reg = g.value(out.regression).to_f64_vec();
        let lg = g.value(out.logits);
        let m = lg.shape()[1];
        let lv = lg.to_f64_vec();
        for (i, r) in records.iter().enumerate() {
            self.regression.push([reg[4 * i], reg[4 * i + 1], reg[4 * i + 2], reg[4 * i + 3]]);
            self.logits.push(lv[i * m..(i + 1) * m].to_vec());
            self.labels.push(r.labels.map(|v| v as f64));
            self.classes.push(r.class);
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// NMSE per task on normalised labels, RMSE per task in physical units, and accuracy.
    pub fn metrics(&self, norm: &NormSpec) -> Result<([f64; 4], [f64; 4], f64)> {
        let mut nmse = [0.0; 4];
        let mut rm = [0.0; 4];
        let phys = |v: &[f64; 4]| {
            let r = denormalize(v, norm);
            [r.distance, r.azimuth, r.pitch, r.radial_velocity]
        };
        let pp: Vec<[f64; 4]> = self.regression.iter().map(phys).collect();
        let tp: Vec<[f64; 4]> = self.labels.iter().map(phys).collect();
        for t in 0..4 {
            let p: Vec<f64> = self.regression.iter().map(|r| r[t]).collect();
            let x: Vec<f64> = self.labels.iter().map(|r| r[t]).collect();
            nmse[t] = nmse_db(&p, &x)?;
            let p: Vec<f64> = pp.iter().map(|r| r[t]).collect();
            let x: Vec<f64> = tp.iter().map(|r| r[t]).collect();
            rm[t] = rmse(&p, &x)?;
        }
        Ok((nmse, rm, accuracy(&self.logits, &self.classes)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "sm-sd-rf")]
    SmSdRf,
    #[serde(rename = "sm-sd-cv")]
    SmSdCv,
    #[serde(rename = "mm-sd")]
    MmSd,
    #[serde(rename = "sm-md-rf")]
    SmMdRf,
    #[serde(rename = "sm-md-cv")]
    SmMdCv,
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-sc-loss")]
    NoScLoss,
}

impl Mode {
    pub const ALL: [Mode; 7] = [Mode::SmSdRf, Mode::SmSdCv, Mode::MmSd, Mode::SmMdRf, Mode::SmMdCv, Mode::Full, Mode::NoScLoss];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SmSdRf => "sm-sd-rf",
            Mode::SmSdCv => "sm-sd-cv",
            Mode::MmSd => "mm-sd",
            Mode::SmMdRf => "sm-md-rf",
            Mode::SmMdCv => "sm-md-cv",
            Mode::Full => "full",
            Mode::NoScLoss => "no-sc-loss",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            Mode::SmSdRf | Mode::SmMdRf => Modality::Rf,
            Mode::SmSdCv | Mode::SmMdCv => Modality::Cv,
            Mode::MmSd | Mode::Full | Mode::NoScLoss => Modality::Mm,
        }
    }

    pub fn single_device(self) -> bool {
        matches!(self, Mode::SmSdRf | Mode::SmSdCv | Mode::MmSd)
    }

    pub fn parse_list(s: &str) -> Result<Vec<Mode>> {
        s.split(',').filter(|t| !t.trim().is_empty()).map(|t| t.trim().parse()).collect()
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown mode `{s}` (valid: {})", valid.join(", ")))
        })
    }
}

/// One row of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: Mode,
    pub center_position: usize,
    pub snr_db: f64,
    pub nmse: [f64; 4],
    pub rmse: [f64; 4],
    pub accuracy: f64,
    pub compression_ratio: f64,
    pub t_exe_s: f64,
}

pub const REPORT_COLUMNS: [&str; 14] = [
    "mode",
    "center_position",
    "snr_db",
    "nmse_d",
    "nmse_a",
    "nmse_p",
    "nmse_v",
    "rmse_d",
    "rmse_a",
    "rmse_p",
    "rmse_v",
    "accuracy",
    "compression_ratio",
    "t_exe_s",
];

fn fmt_num(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn report_csv(rows: &[MetricReport]) -> String {
    let mut s = REPORT_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{}", r.mode.name(), r.center_position, fmt_num(r.snr_db));
        for v in r.nmse.iter().chain(&r.rmse).chain([&r.accuracy, &r.compression_ratio, &r.t_exe_s]) {
            let _ = write!(s, ",{}", fmt_num(*v));
        }
        s.push('\n');
    }
    s
}

/// Parses a report written by [`report_csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<MetricReport>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != REPORT_COLUMNS.join(",") {
        return Err(Error::Config(format!("unexpected report header `{header}`")));
    }
    let num = |s: &str| -> Result<f64> {
        if s == "-inf" {
            return Ok(f64::NEG_INFINITY);
        }
        s.parse().map_err(|_| Error::Config(format!("bad number `{s}` in report")))
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != REPORT_COLUMNS.len() {
                return Err(Error::Config(format!("report row has {} fields", f.len())));
            }
            let v: Vec<f64> = f[3..].iter().map(|s| num(s)).collect::<Result<_>>()?;
            Ok(MetricReport {
                mode: f[0].parse()?,
                center_position: f[1].parse().map_err(|_| Error::Config(format!("bad centre `{}`", f[1])))?,
                snr_db: num(f[2])?,
                nmse: [v[0], v[1], v[2], v[3]],
                rmse: [v[4], v[5], v[6], v[7]],
                accuracy: v[8],
                compression_ratio: v[9],
                t_exe_s: v[10],
            })
        })
        .collect()
}

/// Trained artefacts available to the ablation matrix.
#[derive(Default)]
pub struct ModelZoo {
    pub devices: BTreeMap<(Modality, usize), FrozenDevice>,
    pub centers: BTreeMap<(Modality, usize), (CenterModel, ParamStore<f32>)>,
}

impl ModelZoo {
    fn family(&self, m: Modality, k_count: usize) -> Result<Vec<FrozenDevice>> {
        (0..k_count)
            .map(|k| {
                self.devices
                    .get(&(m, k))
                    .cloned()
                    .ok_or_else(|| Error::MissingArtifact(format!("{} checkpoint for device {k}", m.name())))
            })
            .collect()
    }
}

/// Fixed evaluation data.
pub struct EvalData<'a> {
    pub datasets: &'a [Dataset],
    pub agg: &'a AggIndex,
    pub positions: &'a [[f64; 3]],
    pub channel: &'a ChannelConfig,
    pub norm: &'a NormSpec,
    pub raw_bytes: usize,
}

fn predict_local(dev: &FrozenDevice, records: &[&Record], channel: &ChannelConfig, batch: usize) -> Result<Predictions> {
    let mut p = Predictions::default();
    let ctx = lossless_context(channel);
    for chunk in records.chunks(batch.max(1)) {
        let input = RvfnInput::from_records(chunk, &dev.model.rvfn.cfg, dev.model.modality)?;
        let text = TextBatch::new(&vec![&ctx; chunk.len()], dev.model.lstn.cfg.l_text)?;
        let links = vec![crate::channel::Link::Lossless; chunk.len()];
        let mut g = Graph::new(&dev.store, false, 0);
        let out = dev.model.forward(&mut g, &input, &links, &text, 0)?;
        p.push(&g, &out, chunk);
    }
    Ok(p)
}

fn predict_agg(
    model: &CenterModel,
    store: &ParamStore<f32>,
    ctx: &AggContext<'_>,
    entries: &[&JoinEntry],
    policy: LinkPolicy,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Predictions> {
    let mut p = Predictions::default();
    let mut r = rng::stream(seed, &[tag::EVAL, ctx.center as u64, 1]);
    for (bi, chunk) in entries.chunks(cfg.eval_batch_size).enumerate() {
        let mut g = Graph::new(store, false, 0);
        let (c, d) = ctx.features(&mut g, chunk, policy, cfg, rng::derive(seed, &[tag::EVAL, bi as u64, 1]), &mut r)?;
        let out = model.forward(&mut g, c, &d)?;
        let recs: Vec<&Record> = chunk.iter().map(|e| ctx.record(e, ctx.center)).collect();
        p.push(&g, &out, &recs);
    }
    Ok(p)
}

/// Per-sample wall-clock of the centre model on a small batch.
fn measure_center(model: &CenterModel, store: &ParamStore<f32>, ctx: &AggContext<'_>, entries: &[&JoinEntry], cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new(store, false, 0);
    let mut r = rng::stream(0, &[tag::EVAL]);
    let (c, d) = ctx.features(&mut g, entries, LinkPolicy::Lossless, cfg, 0, &mut r)?;
    let t0 = Instant::now();
    model.forward(&mut g, c, &d)?;
    Ok(t0.elapsed().as_secs_f64() / entries.len().max(1) as f64)
}

const TIMING_SAMPLES: usize = 8;

/// One unit of evaluation work.
enum Job {
    Single { mode: Mode, center: usize },
    Multi { mode: Mode, center: usize, snr: f64 },
}

/// Evaluates every requested (mode, centre, SNR) cell on the validation join,
/// spreading cells over `threads` workers; row order does not depend on `threads`.
#[allow(clippy::too_many_arguments)]
pub fn ablation_matrix(
    data: &EvalData<'_>,
    zoo: &ModelZoo,
    modes: &[Mode],
    snrs: &[f64],
    centers: &[usize],
    cfg: &TrainConfig,
    threads: usize,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let k_count = data.datasets.len();
    let val: Vec<&JoinEntry> = data.agg.split(Split::Val);
    if val.is_empty() {
        return Err(Error::Config("no validation entries to evaluate".into()));
    }
    let code_len = zoo.devices.values().next().map(|d| d.model.lstn.cfg.code_len()).unwrap_or(0);
    let ratio = compression(data.raw_bytes, code_len * 4).ratio;
    let mut banks: BTreeMap<Modality, (Vec<FrozenDevice>, CodeBank)> = BTreeMap::new();
    for m in modes.iter().filter(|m| !m.single_device()).map(|m| m.modality()) {
        if banks.contains_key(&m) {
            continue;
        }
        let fam = zoo.family(m, k_count)?;
        let mut codes = Vec::with_capacity(k_count);
        for (d, ds) in fam.iter().zip(data.datasets) {
            codes.push([Vec::new(), d.encode_all(&ds.val, cfg.eval_batch_size)?]);
        }
        banks.insert(m, (fam, CodeBank { codes }));
    }

    let mut jobs = Vec::new();
    // per (family, centre): device timings without t_com, and t_fa
    let mut timings: BTreeMap<(Modality, usize), (Vec<DeviceTiming>, f64)> = BTreeMap::new();
    let mut local_timings: BTreeMap<(Modality, usize), DeviceTiming> = BTreeMap::new();
    for &center in centers {
        if center >= k_count {
            return Err(Error::Config(format!("center position {center} is not a device index (K = {k_count})")));
        }
        for &mode in modes {
            let m = mode.modality();
            if mode.single_device() {
                let dev = zoo
                    .devices
                    .get(&(m, center))
                    .ok_or_else(|| Error::MissingArtifact(format!("{} checkpoint for device {center}", m.name())))?;
                if let Entry::Vacant(e) = local_timings.entry((m, center)) {
                    let recs: Vec<&Record> = val[..val.len().min(TIMING_SAMPLES)].iter().map(|j| record_of(data, j, center)).collect();
                    e.insert(measure_device(dev, &recs, data.channel, None)?);
                }
                jobs.push(Job::Single { mode, center });
                continue;
            }
            let (cm, cs) = zoo
                .centers
                .get(&(m, center))
                .ok_or_else(|| Error::MissingArtifact(format!("{} aggregation checkpoint for center {center}", m.name())))?;
            let (fam, bank) = &banks[&m];
            let ctx = agg_context(data, fam, bank, center);
            ctx.validate()?;
            if let Entry::Vacant(e) = timings.entry((m, center)) {
                let sample = &val[..val.len().min(TIMING_SAMPLES)];
                let t_fa = measure_center(cm, cs, &ctx, sample, cfg)?;
                let mut base = Vec::with_capacity(k_count);
                for (k, dev) in fam.iter().enumerate() {
                    let recs: Vec<&Record> = sample.iter().map(|j| ctx.record(j, k)).collect();
                    base.push(measure_device(dev, &recs, data.channel, None)?);
                }
                e.insert((base, t_fa));
            }
            for &snr in snrs {
                jobs.push(Job::Multi { mode, center, snr });
            }
        }
    }

    let run = |job: &Job| -> Result<Vec<MetricReport>> {
        match *job {
            Job::Single { mode, center } => {
                let m = mode.modality();
                let dev = &zoo.devices[&(m, center)];
                let recs: Vec<&Record> = val.iter().map(|j| record_of(data, j, center)).collect();
                let p = predict_local(dev, &recs, data.channel, cfg.eval_batch_size)?;
                let (nmse, rm, acc) = p.metrics(data.norm)?;
                let t_exe = ExecutionReport::from_devices(vec![local_timings[&(m, center)]]).t_exe;
                Ok(snrs
                    .iter()
                    .map(|&snr| MetricReport {
                        mode,
                        center_position: center,
                        snr_db: snr,
                        nmse,
                        rmse: rm,
                        accuracy: acc,
                        compression_ratio: ratio,
                        t_exe_s: t_exe,
                    })
                    .collect())
            }
            Job::Multi { mode, center, snr } => {
                let m = mode.modality();
                let (cm, cs) = &zoo.centers[&(m, center)];
                let (fam, bank) = &banks[&m];
                let ctx = agg_context(data, fam, bank, center);
                let policy = if mode == Mode::NoScLoss { LinkPolicy::Lossless } else { LinkPolicy::Fixed(snr) };
                let cell_seed = rng::derive(seed, &[tag::EVAL, center as u64, snr.to_bits()]);
                let p = predict_agg(cm, cs, &ctx, &val, policy, cfg, cell_seed)?;
                let (nmse, rm, acc) = p.metrics(data.norm)?;
                let (base, t_fa) = &timings[&(m, center)];
                let mut t = base.clone();
                for (k, d) in t.iter_mut().enumerate() {
                    d.t_fa = *t_fa;
                    if k != center {
                        d.t_com = communication_time(data.channel, code_len, Some(snr))?;
                    }
                }
                Ok(vec![MetricReport {
                    mode,
                    center_position: center,
                    snr_db: snr,
                    nmse,
                    rmse: rm,
                    accuracy: acc,
                    compression_ratio: ratio,
                    t_exe_s: ExecutionReport::from_devices(t).t_exe,
                }])
            }
        }
    };

    let results: Vec<Result<Vec<MetricReport>>> = if threads <= 1 || jobs.len() <= 1 {
        jobs.iter().map(run).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Vec<MetricReport>>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..threads.min(jobs.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = run(&jobs[i]);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots.into_iter().map(|s| s.into_inner().expect("slot lock").expect("every job ran")).collect()
    };
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

fn record_of<'a>(data: &EvalData<'a>, e: &JoinEntry, k: usize) -> &'a Record {
    let loc = e.locators[k];
    &data.datasets[k].records(loc.split)[loc.index]
}

fn agg_context<'a>(data: &EvalData<'a>, fam: &'a [FrozenDevice], bank: &'a CodeBank, center: usize) -> AggContext<'a> {
    AggContext {
        devices: fam,
        datasets: data.datasets,
        bank,
        positions: data.positions,
        center,
        channel: data.channel,
    }
}

pub const PLOT_METRICS: [&str; 11] = [
    "nmse_d", "nmse_a", "nmse_p", "nmse_v", "rmse_d", "rmse_a", "rmse_p", "rmse_v", "accuracy", "compression_ratio", "t_exe_s",
];

fn metric_value(r: &MetricReport, metric: &str) -> Option<f64> {
    let v = match metric {
        "nmse_d" => r.nmse[0],
        "nmse_a" => r.nmse[1],
        "nmse_p" => r.nmse[2],
        "nmse_v" => r.nmse[3],
        "rmse_d" => r.rmse[0],
        "rmse_a" => r.rmse[1],
        "rmse_p" => r.rmse[2],
        "rmse_v" => r.rmse[3],
        "accuracy" => r.accuracy,
        "compression_ratio" => r.compression_ratio,
        "t_exe_s" => r.t_exe_s,
        _ => return None,
    };
    v.is_finite().then_some(v)
}

const PALETTE: [&str; 7] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"];

/// Line plot of `metric` against SNR, one line per mode, averaged over centre positions.
pub fn svg_plot(rows: &[MetricReport], metric: &str) -> Result<String> {
    if !PLOT_METRICS.contains(&metric) {
        return Err(Error::Config(format!("unknown metric `{metric}`")));
    }
    let mut series: BTreeMap<Mode, BTreeMap<i64, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = metric_value(r, metric) {
            let e = series.entry(r.mode).or_default().entry((r.snr_db * 1000.0).round() as i64).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let pts: Vec<(f64, f64)> = series
        .values()
        .flat_map(|s| s.iter().map(|(k, (v, n))| (*k as f64 / 1000.0, v / *n as f64)))
        .collect();
    let (w, h, m) = (640.0, 400.0, 60.0);
    let (mut x0, mut x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<path d="M{m} {} H{} M{m} {} V{m}" stroke="#333" fill="none"/>"##,
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">SNR (dB)</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" font-size="14" transform="rotate(-90 15 {})" text-anchor="middle">{metric}</text>"#, h / 2.0, h / 2.0);
    for (i, v) in [(x0, y0), (x1, y1)].iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{:.1}</text>"#, sx(v.0), h - m + 16.0, v.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{:.3}</text>"#, m - 4.0, sy(v.1) + 4.0 * (1 - i) as f64, v.1);
    }
    for (i, (mode, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(j, (k, (v, n)))| format!("{}{:.1} {:.1}", if j == 0 { "M" } else { "L" }, sx(*k as f64 / 1000.0), sy(v / *n as f64)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, path.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            w - m + 4.0 - 60.0,
            m + 14.0 * i as f64,
            mode.name()
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
