//! Losses and the two-stage procedure: per-device local training, then
//! aggregation training on transmitted semantic codes.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, render_context, ChannelConfig, ChannelContext, Link};
use crate::dataset::{AggIndex, Dataset, JoinEntry, Record, Split};
use crate::error::{Error, Result};
use crate::lstn::{Lstn, TextBatch};
use crate::model::{CenterModel, DeviceModel, ModelConfig};
use crate::numerics::{Adam, Checkpoint, Float, Graph, ParamStore, Tensor, Var};
use crate::rng::{self, tag};
use crate::rvfn::{Modality, RvfnInput};
use crate::tram::HeadOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Distance, azimuth, pitch, radial velocity.
    pub regression: [f64; 4],
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            regression: [50.0; 4],
            class: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lora_only: bool,
    pub weights: LossWeights,
    pub snr_db_range: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            eval_batch_size: 64,
            epochs_stage1: 10,
            epochs_stage2: 10,
            lora_only: false,
            weights: LossWeights::default(),
            snr_db_range: [0.0, 25.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return bad("epochs must be at least 1");
        }
        if self.weights.regression.iter().chain([&self.weights.class]).any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if !(self.snr_db_range[0] <= self.snr_db_range[1]) {
            return bad("snr_db_range must be ordered");
        }
        Ok(())
    }

    fn sample_snr(&self, r: &mut impl Rng) -> f64 {
        let [lo, hi] = self.snr_db_range;
        if hi > lo {
            r.random_range(lo..hi)
        } else {
            lo
        }
    }
}

pub const TERM_NAMES: [&str; 5] = ["loss_d", "loss_a", "loss_p", "loss_v", "loss_class"];

/// Normalised labels `[B, 4]`.
pub fn labels_tensor<T: Float>(records: &[&Record]) -> Tensor<T> {
    Tensor::from_fn(&[records.len(), 4], |i| T::from_f64_lossy(records[i / 4].labels[i % 4] as f64))
}

/// `Σ l_i · MSE_i + l_5 · CE`; returns the total and the five unweighted terms.
pub fn sensing_loss<T: Float>(
    g: &mut Graph<'_, T>,
    out: &HeadOutput,
    labels: &Tensor<T>,
    classes: &[usize],
    w: &LossWeights,
) -> Result<(Var, [Var; 5])> {
    if !labels.all_finite() {
        return Err(Error::NonFinite("labels".into()));
    }
    let y = g.input(labels.clone());
    let mut terms = Vec::with_capacity(5);
    for i in 0..4 {
        let p = g.select(out.regression, 1, i)?;
        let t = g.select(y, 1, i)?;
        terms.push(g.mse(p, t)?);
    }
    terms.push(g.cross_entropy(out.logits, classes)?);
    let mut total: Option<Var> = None;
    for (t, wt) in terms.iter().zip(w.regression.iter().chain([&w.class])) {
        let s = g.scale(*t, *wt);
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let terms: [Var; 5] = terms.try_into().expect("five terms");
    Ok((total.expect("five terms"), terms))
}

/// Loss terms averaged over samples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub terms: [f64; 5],
    pub total: f64,
}

#[derive(Debug, Default)]
struct LossAccumulator {
    sums: [f64; 6],
    count: usize,
}

impl LossAccumulator {
    fn add<T: Float>(&mut self, g: &Graph<'_, T>, total: Var, terms: &[Var; 5], n: usize) {
        for (s, v) in self.sums.iter_mut().zip(terms.iter().chain([&total])) {
            *s += g.value(*v).item().to_f64_lossy() * n as f64;
        }
        self.count += n;
    }

    fn finish(&self) -> LossValues {
        let n = self.count.max(1) as f64;
        let mut terms = [0.0; 5];
        for (t, s) in terms.iter_mut().zip(&self.sums) {
            *t = s / n;
        }
        LossValues {
            terms,
            total: self.sums[5] / n,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: Split,
    pub loss: LossValues,
    pub accuracy: f64,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = format!("epoch,split,{},total\n", TERM_NAMES.join(","));
    for r in rows {
        let _ = write!(s, "{},{}", r.epoch, r.split.name());
        for t in r.loss.terms {
            let _ = write!(s, ",{t:.6}");
        }
        let _ = writeln!(s, ",{:.6}", r.loss.total);
    }
    s
}

/// Context the centre attaches to a lossless transfer.
pub fn lossless_context(channel: &ChannelConfig) -> ChannelContext {
    render_context(channel.snr_db_range[1], 0.0)
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

fn correct<T: Float>(g: &Graph<'_, T>, logits: Var, classes: &[usize]) -> usize {
    let l = g.value(logits);
    let m = l.shape()[1];
    let v = l.to_f64_vec();
    classes.iter().enumerate().filter(|(i, &c)| crate::eval::argmax(&v[i * m..(i + 1) * m]) == c).count()
}

/// Trained first-stage state of one device.
#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub model: DeviceModel,
    pub store: ParamStore<f32>,
    pub history: Vec<EpochLog>,
}

impl Stage1Result {
    /// Epoch-0 validation loss followed by the validation loss after every epoch.
    pub fn val_losses(&self) -> Vec<f64> {
        self.history.iter().filter(|r| r.split == Split::Val).map(|r| r.loss.total).collect()
    }
}

/// Marks the parameters the first stage may update.
pub fn stage1_trainable(store: &mut ParamStore<f32>, lora_only: bool) {
    store.set_all_trainable(true);
    if lora_only {
        store.set_trainable_prefix("lstn.decoder.", false);
    }
}

fn local_links_and_text(
    records: &[&Record],
    cfg: &TrainConfig,
    l_text: usize,
    r: &mut impl Rng,
) -> Result<(Vec<Link>, TextBatch)> {
    let mut links = Vec::with_capacity(records.len());
    let mut ctx = Vec::with_capacity(records.len());
    for rec in records {
        let snr = round1(cfg.sample_snr(r));
        links.push(Link::Awgn { snr_db: snr });
        ctx.push(render_context(snr, rec.meta.context.distance_m));
    }
    let refs: Vec<&ChannelContext> = ctx.iter().collect();
    Ok((links, TextBatch::new(&refs, l_text)?))
}

/// Validation loss and accuracy of a device model with seeded per-record channel draws.
pub fn evaluate_local(
    model: &DeviceModel,
    store: &ParamStore<f32>,
    records: &[Record],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LossValues, f64)> {
    let mut acc = LossAccumulator::default();
    let mut hits = 0;
    let mut r = rng::stream(seed, &[tag::EVAL, model.device as u64]);
    for (bi, chunk) in records.chunks(cfg.eval_batch_size).enumerate() {
        let recs: Vec<&Record> = chunk.iter().collect();
        let (links, text) = local_links_and_text(&recs, cfg, model.lstn.cfg.l_text, &mut r)?;
        let input = RvfnInput::from_records(&recs, &model.rvfn.cfg, model.modality)?;
        let mut g = Graph::new(store, false, 0);
        let out = model.forward(&mut g, &input, &links, &text, rng::derive(seed, &[tag::EVAL, bi as u64]))?;
        let classes: Vec<usize> = recs.iter().map(|r| r.class).collect();
        let (total, terms) = sensing_loss(&mut g, &out, &labels_tensor(&recs), &classes, &cfg.weights)?;
        acc.add(&g, total, &terms, recs.len());
        hits += correct(&g, out.logits, &classes);
    }
    Ok((acc.finish(), hits as f64 / records.len().max(1) as f64))
}

/// First stage for device `device`: trains RVFN, LSTN and the local head on `D_k` only.
pub fn train_stage1(
    data: &Dataset,
    device: usize,
    modality: Modality,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Stage1Result> {
    cfg.validate()?;
    if data.manifest.device != device {
        return Err(Error::Config(format!(
            "dataset holds device {} records, asked to train device {device}",
            data.manifest.device
        )));
    }
    if data.train.is_empty() {
        return Err(Error::Config(format!("device {device} has no training records")));
    }
    let mut store = ParamStore::<f32>::new();
    let model = DeviceModel::new(&mut store, model_cfg, device, modality, seed)?;
    stage1_trainable(&mut store, cfg.lora_only);
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::new();
    let (l0, a0) = evaluate_local(&model, &store, &data.val, cfg, seed)?;
    history.push(EpochLog {
        epoch: 0,
        split: Split::Val,
        loss: l0,
        accuracy: a0,
    });
    let dev = device as u64;
    for epoch in 1..=cfg.epochs_stage1 {
        let e = epoch as u64;
        let batches = data.batches(Split::Train, cfg.batch_size, Some(rng::derive(seed, &[tag::SHUFFLE, dev, e])));
        let mut acc = LossAccumulator::default();
        let mut hits = 0;
        for (step, batch) in batches.iter().enumerate() {
            let s = step as u64;
            let recs: Vec<&Record> = batch.iter().map(|&i| &data.train[i]).collect();
            let mut r = rng::stream(seed, &[tag::CHANNEL, dev, e, s]);
            let (links, text) = local_links_and_text(&recs, cfg, model.lstn.cfg.l_text, &mut r)?;
            let input = RvfnInput::from_records(&recs, &model.rvfn.cfg, modality)?;
            let classes: Vec<usize> = recs.iter().map(|r| r.class).collect();
            let grads = {
                let mut g = Graph::new(&store, true, rng::derive(seed, &[tag::DROPOUT, dev, e, s]));
                let out = model.forward(&mut g, &input, &links, &text, rng::derive(seed, &[tag::CHANNEL, dev, e, s, 1]))?;
                let (total, terms) = sensing_loss(&mut g, &out, &labels_tensor(&recs), &classes, &cfg.weights)?;
                let lv = g.value(total).item().to_f64_lossy();
                if !lv.is_finite() {
                    return Err(Error::Divergence { epoch, step, loss: lv });
                }
                acc.add(&g, total, &terms, recs.len());
                hits += correct(&g, out.logits, &classes);
                g.backward(total)?
            };
            adam.step(&mut store, &grads);
        }
        history.push(EpochLog {
            epoch,
            split: Split::Train,
            loss: acc.finish(),
            accuracy: hits as f64 / data.train.len() as f64,
        });
        let (lv, av) = evaluate_local(&model, &store, &data.val, cfg, seed)?;
        if !lv.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: batches.len(),
                loss: lv.total,
            });
        }
        history.push(EpochLog {
            epoch,
            split: Split::Val,
            loss: lv,
            accuracy: av,
        });
    }
    Ok(Stage1Result { model, store, history })
}

/// Metadata stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CheckpointMeta {
    Local {
        device: usize,
        modality: Modality,
        seed: u64,
        model: ModelConfig,
        lora_only: bool,
    },
    Agg {
        center: usize,
        modality: Modality,
        seed: u64,
        model: ModelConfig,
        /// SHA-256 of each device's decoder, in device order.
        decoders: Vec<String>,
    },
}

pub fn save_device(result: &Stage1Result, seed: u64, lora_only: bool, path: &Path) -> Result<()> {
    let meta = CheckpointMeta::Local {
        device: result.model.device,
        modality: result.model.modality,
        seed,
        model: result.model.cfg.clone(),
        lora_only,
    };
    let prefixes = result.model.prefixes();
    let refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
    Checkpoint::from_store(&result.store, &refs, serde_json::to_value(&meta)?).save(path)
}

pub fn read_meta(path: &Path) -> Result<(CheckpointMeta, Checkpoint<f32>)> {
    let ck = Checkpoint::<f32>::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: format!("checkpoint metadata: {e}"),
    })?;
    Ok((meta, ck))
}

/// Rebuilds a device model from its checkpoint; every parameter must be present.
pub fn load_device(path: &Path) -> Result<(DeviceModel, ParamStore<f32>, u64)> {
    let (meta, ck) = read_meta(path)?;
    let CheckpointMeta::Local {
        device,
        modality,
        seed,
        model,
        ..
    } = meta
    else {
        return Err(Error::Config(format!("{} is not a device checkpoint", path.display())));
    };
    let mut store = ParamStore::new();
    let m = DeviceModel::new(&mut store, &model, device, modality, seed)?;
    let n = ck.apply(&mut store)?;
    if n != store.len() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("checkpoint holds {n} of {} parameters", store.len()),
        });
    }
    Ok((m, store, seed))
}

/// A frozen first-stage device as seen by the centre.
#[derive(Debug, Clone)]
pub struct FrozenDevice {
    pub model: DeviceModel,
    pub store: ParamStore<f32>,
}

impl FrozenDevice {
    pub fn new(model: DeviceModel, mut store: ParamStore<f32>) -> Self {
        store.set_all_trainable(false);
        FrozenDevice { model, store }
    }

    pub fn decoder_hash(&self) -> String {
        self.store.hash_prefix("lstn.")
    }

    /// Semantic codes of `records` (inference mode), one flat vector per record.
    pub fn encode_all(&self, records: &[Record], batch: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(batch.max(1)) {
            let recs: Vec<&Record> = chunk.iter().collect();
            let input = RvfnInput::from_records(&recs, &self.model.rvfn.cfg, self.model.modality)?;
            let mut g = Graph::new(&self.store, false, 0);
            let code = self.model.encode(&mut g, &input)?;
            let per = self.model.lstn.cfg.code_len();
            out.extend(g.value(code).data().chunks(per).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Centre-side reception: channel on the codes, then this device's decoder.
    pub fn receive(&self, codes: &[&[f32]], links: &[Link], contexts: &[&ChannelContext], noise_seed: u64) -> Result<Tensor<f32>> {
        let cfg = &self.model.lstn.cfg;
        let mut data = Vec::with_capacity(codes.len() * cfg.code_len());
        for c in codes {
            data.extend_from_slice(c);
        }
        let t = Tensor::new(vec![codes.len(), cfg.l_se, cfg.d_se], data)?;
        let text = TextBatch::new(contexts, cfg.l_text)?;
        let mut g = Graph::new(&self.store, false, 0);
        let x = g.input(t);
        let mut r = rng::stream(noise_seed, &[tag::CHANNEL]);
        let rx = Lstn::transmit(&mut g, x, links, &mut r)?;
        let s = self.model.decode(&mut g, rx, &text)?;
        Ok(g.value(s).clone())
    }
}

/// Codes of every device for both splits, indexed `[device][split][record]`.
#[derive(Debug, Clone)]
pub struct CodeBank {
    pub codes: Vec<[Vec<Vec<f32>>; 2]>,
}

fn split_slot(s: Split) -> usize {
    match s {
        Split::Train => 0,
        Split::Val => 1,
    }
}

impl CodeBank {
    pub fn build(devices: &[FrozenDevice], datasets: &[Dataset], batch: usize) -> Result<Self> {
        if devices.len() != datasets.len() {
            return Err(Error::Config(format!("{} device models for {} datasets", devices.len(), datasets.len())));
        }
        let mut codes = Vec::with_capacity(devices.len());
        for (d, ds) in devices.iter().zip(datasets) {
            codes.push([d.encode_all(&ds.train, batch)?, d.encode_all(&ds.val, batch)?]);
        }
        Ok(CodeBank { codes })
    }

    pub fn code(&self, device: usize, split: Split, index: usize) -> &[f32] {
        &self.codes[device][split_slot(split)][index]
    }
}

/// Fixed inputs of the aggregation stage for one centre position.
pub struct AggContext<'a> {
    pub devices: &'a [FrozenDevice],
    pub datasets: &'a [Dataset],
    pub bank: &'a CodeBank,
    pub positions: &'a [[f64; 3]],
    pub center: usize,
    pub channel: &'a ChannelConfig,
}

/// How each non-centre device reaches the centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinkPolicy {
    /// One SNR per device per batch, drawn from the training range.
    Sampled,
    Fixed(f64),
    Lossless,
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl AggContext<'_> {
    pub fn validate(&self) -> Result<()> {
        let k = self.devices.len();
        if k == 0 {
            return Err(Error::Config("aggregation needs at least one device".into()));
        }
        if self.center >= k {
            return Err(Error::Config(format!("center position {} is not a device index (K = {k})", self.center)));
        }
        if self.datasets.len() != k || self.positions.len() != k || self.bank.codes.len() != k {
            return Err(Error::Config("device models, datasets and positions disagree in count".into()));
        }
        Ok(())
    }

    /// Record of device `k` for a join entry.
    pub fn record(&self, e: &JoinEntry, k: usize) -> &Record {
        let loc = e.locators[k];
        &self.datasets[k].records(loc.split)[loc.index]
    }

    /// Decoded features of the centre (lossless) and the other devices (`links`), as graph inputs.
    pub fn features(
        &self,
        g: &mut Graph<'_, f32>,
        entries: &[&JoinEntry],
        policy: LinkPolicy,
        cfg: &TrainConfig,
        seed: u64,
        r: &mut impl Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let lossless = lossless_context(self.channel);
        let mut center = None;
        let mut others = Vec::new();
        for (k, dev) in self.devices.iter().enumerate() {
            let codes: Vec<&[f32]> = entries
                .iter()
                .map(|e| {
                    let loc = e.locators[k];
                    self.bank.code(k, loc.split, loc.index)
                })
                .collect();
            let (link, ctx) = if k == self.center {
                (Link::Lossless, lossless.clone())
            } else {
                let d = round1(dist3(self.positions[k], self.positions[self.center]));
                match policy {
                    LinkPolicy::Lossless => (Link::Lossless, render_context(round1(self.channel.snr_db_range[1]), d)),
                    LinkPolicy::Fixed(snr) => (Link::Awgn { snr_db: snr }, render_context(round1(snr), d)),
                    LinkPolicy::Sampled => {
                        let snr = round1(cfg.sample_snr(r));
                        (Link::Awgn { snr_db: snr }, render_context(snr, d))
                    }
                }
            };
            let links = vec![link; entries.len()];
            let ctxs = vec![&ctx; entries.len()];
            let feat = dev.receive(&codes, &links, &ctxs, rng::derive(seed, &[k as u64]))?;
            let v = g.input(feat);
            if k == self.center {
                center = Some(v);
            } else {
                others.push(v);
            }
        }
        Ok((center.expect("centre validated"), others))
    }

    pub fn labels(&self, entries: &[&JoinEntry]) -> (Tensor<f32>, Vec<usize>) {
        let recs: Vec<&Record> = entries.iter().map(|e| self.record(e, self.center)).collect();
        (labels_tensor(&recs), recs.iter().map(|r| r.class).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Result {
    pub model: CenterModel,
    pub store: ParamStore<f32>,
    pub history: Vec<EpochLog>,
}

/// Validation loss and accuracy of the centre model.
pub fn evaluate_agg(
    model: &CenterModel,
    store: &ParamStore<f32>,
    ctx: &AggContext<'_>,
    entries: &[&JoinEntry],
    policy: LinkPolicy,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LossValues, f64)> {
    let mut acc = LossAccumulator::default();
    let mut hits = 0;
    let mut r = rng::stream(seed, &[tag::EVAL, ctx.center as u64]);
    for (bi, chunk) in entries.chunks(cfg.eval_batch_size).enumerate() {
        let mut g = Graph::new(store, false, 0);
        let (c, d) = ctx.features(&mut g, chunk, policy, cfg, rng::derive(seed, &[tag::EVAL, bi as u64]), &mut r)?;
        let out = model.forward(&mut g, c, &d)?;
        let (labels, classes) = ctx.labels(chunk);
        let (total, terms) = sensing_loss(&mut g, &out, &labels, &classes, &cfg.weights)?;
        acc.add(&g, total, &terms, chunk.len());
        hits += correct(&g, out.logits, &classes);
    }
    Ok((acc.finish(), hits as f64 / entries.len().max(1) as f64))
}

/// Second stage: trains TRAM and the centre head on received codes only.
pub fn train_stage2(agg: &AggIndex, ctx: &AggContext<'_>, model_cfg: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<Stage2Result> {
    cfg.validate()?;
    ctx.validate()?;
    let train: Vec<&JoinEntry> = agg.split(Split::Train);
    let val: Vec<&JoinEntry> = agg.split(Split::Val);
    if train.is_empty() {
        return Err(Error::Config("aggregation index has no training entries".into()));
    }
    let mut store = ParamStore::<f32>::new();
    let model = CenterModel::new(&mut store, model_cfg, rng::derive(seed, &[ctx.center as u64]))?;
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::new();
    let center = ctx.center as u64;
    let (l0, a0) = evaluate_agg(&model, &store, ctx, &val, LinkPolicy::Sampled, cfg, seed)?;
    history.push(EpochLog {
        epoch: 0,
        split: Split::Val,
        loss: l0,
        accuracy: a0,
    });
    for epoch in 1..=cfg.epochs_stage2 {
        let e = epoch as u64;
        let order = crate::dataset::batch_indices(train.len(), cfg.batch_size, Some(rng::derive(seed, &[tag::SHUFFLE, center, e, 2])));
        let mut acc = LossAccumulator::default();
        let mut hits = 0;
        for (step, batch) in order.iter().enumerate() {
            let s = step as u64;
            let entries: Vec<&JoinEntry> = batch.iter().map(|&i| train[i]).collect();
            let mut r = rng::stream(seed, &[tag::CHANNEL, center, e, s, 2]);
            let grads = {
                let mut g = Graph::new(&store, true, rng::derive(seed, &[tag::DROPOUT, center, e, s, 2]));
                let (c, d) = ctx.features(&mut g, &entries, LinkPolicy::Sampled, cfg, rng::derive(seed, &[tag::CHANNEL, center, e, s, 3]), &mut r)?;
                let out = model.forward(&mut g, c, &d)?;
                let (labels, classes) = ctx.labels(&entries);
                let (total, terms) = sensing_loss(&mut g, &out, &labels, &classes, &cfg.weights)?;
                let lv = g.value(total).item().to_f64_lossy();
                if !lv.is_finite() {
                    return Err(Error::Divergence { epoch, step, loss: lv });
                }
                acc.add(&g, total, &terms, entries.len());
                hits += correct(&g, out.logits, &classes);
                g.backward(total)?
            };
            adam.step(&mut store, &grads);
        }
        history.push(EpochLog {
            epoch,
            split: Split::Train,
            loss: acc.finish(),
            accuracy: hits as f64 / train.len() as f64,
        });
        let (lv, av) = evaluate_agg(&model, &store, ctx, &val, LinkPolicy::Sampled, cfg, seed)?;
        history.push(EpochLog {
            epoch,
            split: Split::Val,
            loss: lv,
            accuracy: av,
        });
    }
    Ok(Stage2Result { model, store, history })
}

pub fn save_center(result: &Stage2Result, ctx: &AggContext<'_>, model_cfg: &ModelConfig, seed: u64, path: &Path) -> Result<()> {
    let modality = ctx.devices[0].model.modality;
    let meta = CheckpointMeta::Agg {
        center: ctx.center,
        modality,
        seed,
        model: model_cfg.clone(),
        decoders: ctx.devices.iter().map(FrozenDevice::decoder_hash).collect(),
    };
    Checkpoint::from_store(&result.store, &CenterModel::prefixes(), serde_json::to_value(&meta)?).save(path)
}

pub fn load_center(path: &Path) -> Result<(CenterModel, ParamStore<f32>, CheckpointMeta)> {
    let (meta, ck) = read_meta(path)?;
    let CheckpointMeta::Agg { center, seed, model, .. } = &meta else {
        return Err(Error::Config(format!("{} is not an aggregation checkpoint", path.display())));
    };
    let mut store = ParamStore::new();
    let m = CenterModel::new(&mut store, model, rng::derive(*seed, &[*center as u64]))?;
    let n = ck.apply(&mut store)?;
    if n != store.len() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("checkpoint holds {n} of {} parameters", store.len()),
        });
    }
    Ok((m, store, meta))
}

/// Per-device latency breakdown in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviceTiming {
    pub t_ft: f64,
    pub t_se: f64,
    pub t_com: f64,
    pub t_sd: f64,
    pub t_fa: f64,
}

impl DeviceTiming {
    pub fn total(&self) -> f64 {
        self.t_ft + self.t_se + self.t_com + self.t_sd + self.t_fa
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub devices: Vec<DeviceTiming>,
    pub t_exe: f64,
}

impl ExecutionReport {
    pub fn from_devices(devices: Vec<DeviceTiming>) -> Self {
        let t_exe = devices.iter().map(DeviceTiming::total).fold(0.0, f64::max);
        ExecutionReport { devices, t_exe }
    }
}

/// Analytic transfer time of `code_values` float32 values at `snr_db` (`None` for a local, lossless hop).
pub fn communication_time(channel: &ChannelConfig, code_values: usize, snr_db: Option<f64>) -> Result<f64> {
    let Some(snr) = snr_db else {
        return Ok(0.0);
    };
    let bits = channel::payload_bits(code_values.div_ceil(2)) as f64;
    let rate = channel::rate(channel, channel.gain, channel.noise_power(snr) / channel.power_w);
    channel::delay(bits, rate)
}

/// Wall-clock per-sample stage times of a device model on `records`, with analytic `t_com`.
pub fn measure_device(dev: &FrozenDevice, records: &[&Record], channel: &ChannelConfig, snr_db: Option<f64>) -> Result<DeviceTiming> {
    let n = records.len().max(1) as f64;
    let input = RvfnInput::from_records(records, &dev.model.rvfn.cfg, dev.model.modality)?;
    let mut g = Graph::new(&dev.store, false, 0);
    let t0 = Instant::now();
    let s = dev.model.rvfn.forward(&mut g, &input)?;
    let t1 = Instant::now();
    let code = dev.model.lstn.encoder.forward(&mut g, s)?;
    let t2 = Instant::now();
    let ctx = lossless_context(channel);
    let text = TextBatch::new(&vec![&ctx; records.len()], dev.model.lstn.cfg.l_text)?;
    let t3 = Instant::now();
    dev.model.decode(&mut g, code, &text)?;
    let t4 = Instant::now();
    Ok(DeviceTiming {
        t_ft: (t1 - t0).as_secs_f64() / n,
        t_se: (t2 - t1).as_secs_f64() / n,
        t_com: communication_time(channel, dev.model.lstn.cfg.code_len(), snr_db)?,
        t_sd: (t4 - t3).as_secs_f64() / n,
        t_fa: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kilobyte_at_one_kbps_takes_8192_ms() {
        assert!((channel::delay(8.0 * 1024.0, 1000.0).unwrap() - 8.192).abs() < 1e-12);
        let ch = ChannelConfig::default();
        // 0 dB: log2(1 + 1) = 1 bit/s/Hz
        let t = communication_time(&ch, 256, Some(0.0)).unwrap();
        assert!((t - 8.192).abs() < 1e-9, "{t}");
        assert_eq!(communication_time(&ch, 256, None).unwrap(), 0.0);
    }

    #[test]
    fn execution_time_is_max_over_devices() {
        let a = DeviceTiming {
            t_ft: 1.0,
            ..Default::default()
        };
        let b = DeviceTiming {
            t_com: 2.0,
            t_fa: 0.5,
            ..Default::default()
        };
        assert_eq!(ExecutionReport::from_devices(vec![a]).t_exe, 1.0);
        assert_eq!(ExecutionReport::from_devices(vec![a, b]).t_exe, 2.5);
    }
}
