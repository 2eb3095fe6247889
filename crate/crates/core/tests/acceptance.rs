//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p disac-core --test acceptance`; pass criterion numbers
//! (e.g. `-- 1 5 9`) to run a subset. Trend runs (10–15) are cached under the
//! cargo target directory, keyed by the configuration and the test binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use disac_core::channel::{self, Link};
use disac_core::config::RunConfig;
use disac_core::dataset::{AccessAudit, Dataset};
use disac_core::eval::{self, MetricReport, Mode};
use disac_core::lstn::{DecoderKind, Lstn, LstnConfig, TextBatch};
use disac_core::model::{CenterModel, DeviceModel, ModelConfig};
use disac_core::numerics::{cast, grad_check, Float, GradCheckOptions, Graph, ParamStore, Tensor, Var};
use disac_core::pipeline::{self, Corpus};
use disac_core::radar;
use disac_core::rvfn::{complex_conv, Modality, Rvfn, RvfnConfig, RvfnInput};
use disac_core::scene::{self, ObstacleBox, SceneConfig};
use disac_core::training::{self, AggContext, CodeBank, FrozenDevice, LossWeights};
use disac_core::tram::{Head, Tram, TramConfig};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng, sd: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| sd * gauss(r))
}

/// Scalar `Σ w ⊙ v` with fixed random weights, so every output element matters.
fn probe(g: &mut Graph<'_, f64>, v: Var, seed: u64) -> disac_core::Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = randn(&shape, &mut ChaCha8Rng::seed_from_u64(seed), 1.0);
    let w = g.input(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn perturb(store: &mut ParamStore<f64>, prefix: &str, r: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get_mut(id);
        for v in p.value.data_mut() {
            *v += 0.1 * gauss(r);
        }
    }
}

fn tiny_rvfn() -> RvfnConfig {
    RvfnConfig {
        l_sf: 2,
        d_sf: 8,
        rf_widths: [2, 2, 2],
        rf_kernel: 3,
        cv_widths: [2, 2, 4, 4],
        cv_depths: [1, 1, 1, 1],
        heads: 2,
        antennas: 2,
        samples: 8,
        image_size: 32,
        ..RvfnConfig::default()
    }
}

fn tiny_lstn(kind: DecoderKind) -> LstnConfig {
    LstnConfig {
        l_se: 2,
        d_se: 4,
        d_sd: 8,
        heads: 2,
        ff: 16,
        lora_rank: 2,
        decoder: kind,
        ..LstnConfig::default()
    }
}

// 1
fn gradient_integrity() -> Check {
    let t0 = Instant::now();
    let opts = GradCheckOptions {
        max_per_param: Some(12),
        ..GradCheckOptions::default()
    };
    let mut worst = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let rcfg = tiny_rvfn();
    let b = 2;
    let input = RvfnInput {
        echo: Some(randn(&[b, 2 * rcfg.antennas, 1, rcfg.samples], &mut r, 0.5)),
        image: Some(randn(&[b, 3, rcfg.image_size, rcfg.image_size], &mut r, 1.0)),
    };
    for m in [Modality::Rf, Modality::Cv, Modality::Mm] {
        let mut store = ParamStore::<f64>::new();
        let rv = Rvfn::new(&mut store, &rcfg, m, &mut r).map_err(|e| e.to_string())?;
        let rep = grad_check(&mut store, |g| {
            let s = rv.forward(g, &input)?;
            probe(g, s, 7)
        }, opts)
        .map_err(|e| e.to_string())?;
        worst.push((format!("rvfn-{}", m.name()), rep.max_rel_err, rep.worst));
    }
    for kind in [DecoderKind::Transformer, DecoderKind::Recurrent] {
        let lcfg = tiny_lstn(kind);
        let mut store = ParamStore::<f64>::new();
        let l = Lstn::new(&mut store, &lcfg, rcfg.feature_len(), &mut r).map_err(|e| e.to_string())?;
        perturb(&mut store, "lstn.lora.", &mut r);
        let feat = randn(&[b, rcfg.l_sf, rcfg.d_sf], &mut r, 1.0);
        let text = TextBatch::from_texts(&["the snr is 12.5 db and the distance is 70.7 m", "the snr is 3.0 db"], lcfg.l_text)
            .map_err(|e| e.to_string())?;
        // the channel enters the tape as an additive constant
        let noise = randn(&[b, lcfg.l_se, lcfg.d_se], &mut r, 0.1);
        let rep = grad_check(&mut store, |g| {
            let s = g.input(feat.clone());
            let e = l.encoder.forward(g, s)?;
            let rx = g.add_const(e, noise.clone())?;
            let d = l.decoder.forward(g, rx, &text)?;
            probe(g, d, 8)
        }, opts)
        .map_err(|e| e.to_string())?;
        worst.push((format!("lstn-{kind:?}"), rep.max_rel_err, rep.worst));
    }
    let tcfg = TramConfig {
        d_sd: 8,
        heads: 2,
        ..TramConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let tram = Tram::new(&mut store, &tcfg, &mut r).map_err(|e| e.to_string())?;
    let head = Head::new(&mut store, "head", 8, 3, &mut r).map_err(|e| e.to_string())?;
    let center = randn(&[b, 5, 8], &mut r, 1.0);
    let devs: Vec<Tensor<f64>> = (0..3).map(|_| randn(&[b, 5, 8], &mut r, 1.0)).collect();
    let labels = Tensor::from_fn(&[b, 4], |_| r.random_range(0.05..0.95));
    let classes = vec![0, 2];
    let w = LossWeights::default();
    let rep = grad_check(&mut store, |g| {
        let c = g.input(center.clone());
        let d: Vec<Var> = devs.iter().map(|t| g.input(t.clone())).collect();
        let s = tram.aggregate(g, c, &d)?;
        let out = head.forward(g, s)?;
        Ok(training::sensing_loss(g, &out, &labels, &classes, &w)?.0)
    }, opts)
    .map_err(|e| e.to_string())?;
    worst.push(("tram+head".into(), rep.max_rel_err, rep.worst));
    let secs = t0.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let mut d = String::new();
    for (n, e, at) in &worst {
        let _ = write!(d, "{n} {e:.2e} ({at}); ");
    }
    let _ = write!(d, "{secs:.1}s");
    ensure(max <= 1e-4 && secs < 120.0, format!("max rel err {max:.2e} ≤ 1e-4: {d}"))
}

// 2
fn complex_conv_oracle() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut max_err = 0.0f64;
    for _ in 0..200 {
        let (b, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=4));
        let (h, w) = (r.random_range(kh..=5), r.random_range(kw..=7));
        let stride = (r.random_range(1..=2), r.random_range(1..=2));
        let pad = (r.random_range(0..=kh / 2), r.random_range(0..=kw / 2));
        let x = randn(&[b, 2 * c, h, w], &mut r, 1.0);
        let wr = randn(&[o, c, kh, kw], &mut r, 1.0);
        let wi = randn(&[o, c, kh, kw], &mut r, 1.0);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false, 0);
        let (xv, wrv, wiv) = (g.input(x.clone()), g.input(wr.clone()), g.input(wi.clone()));
        let y = complex_conv(&mut g, xv, wrv, wiv, stride, pad).map_err(|e| e.to_string())?;
        let yv = g.value(y);
        let (oh, ow) = ((h + 2 * pad.0 - kh) / stride.0 + 1, (w + 2 * pad.1 - kw) / stride.1 + 1);
        if yv.shape() != [b, 2 * o, oh, ow] {
            return Err(format!("shape {:?}", yv.shape()));
        }
        let xi = |bi: usize, ch: usize, i: usize, j: usize| x.data()[((bi * 2 * c + ch) * h + i) * w + j];
        let wix = |t: &Tensor<f64>, oi: usize, ci: usize, i: usize, j: usize| t.data()[((oi * c + ci) * kh + i) * kw + j];
        for bi in 0..b {
            for oi in 0..o {
                for yi in 0..oh {
                    for yj in 0..ow {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for ci in 0..c {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let (ii, jj) = ((yi * stride.0 + u) as isize - pad.0 as isize, (yj * stride.1 + v) as isize - pad.1 as isize);
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                        continue;
                                    }
                                    let (ii, jj) = (ii as usize, jj as usize);
                                    let xz = Complex64::new(xi(bi, ci, ii, jj), xi(bi, c + ci, ii, jj));
                                    let wz = Complex64::new(wix(&wr, oi, ci, u, v), wix(&wi, oi, ci, u, v));
                                    acc += wz * xz;
                                }
                            }
                        }
                        let re = yv.data()[((bi * 2 * o + oi) * oh + yi) * ow + yj];
                        let im = yv.data()[((bi * 2 * o + o + oi) * oh + yi) * ow + yj];
                        max_err = max_err.max((re - acc.re).abs()).max((im - acc.im).abs());
                    }
                }
            }
        }
    }
    ensure(max_err < 1e-6, format!("200 cases, max abs err {max_err:.2e} < 1e-6"))
}

// 3
fn steering_vector() -> Check {
    let (nz, ny) = (4, 4);
    let zero = radar::steering_vector(0.0, 0.0, nz, ny);
    let ones = zero.iter().all(|z| *z == Complex64::new(1.0, 0.0));
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (mut modulus, mut kron) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let theta = r.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
        let phi = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let a = radar::steering_vector(theta, phi, nz, ny);
        let az: Vec<Complex64> = (0..nz).map(|p| Complex64::from_polar(1.0, -std::f64::consts::PI * p as f64 * theta.sin())).collect();
        let ay: Vec<Complex64> =
            (0..ny).map(|q| Complex64::from_polar(1.0, -std::f64::consts::PI * q as f64 * phi.sin() * theta.cos())).collect();
        for p in 0..nz {
            for q in 0..ny {
                let v = a[p * ny + q];
                modulus = modulus.max((v.norm() - 1.0).abs());
                kron = kron.max((v - az[p] * ay[q]).norm());
            }
        }
    }
    ensure(
        ones && modulus < 1e-12 && kron < 1e-12,
        format!("θ=φ=0 all ones: {ones}; max ||a|−1| {modulus:.1e}; Kronecker err {kron:.1e}"),
    )
}

// 4
fn geometry_oracle() -> Check {
    let cfg = SceneConfig::default();
    let devices = cfg.devices();
    let trajs = scene::trajectories(&cfg, 4).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut max_err = 0.0f64;
    let mut n = 0;
    for i in 0..cfg.num_frames() {
        let t = i as f64 / cfg.frame_rate;
        for tr in &trajs {
            let s = tr.state_at(t);
            for d in &devices {
                let range = |st: &scene::TargetState| {
                    let c = st.center;
                    let p = d.position;
                    ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2) + (c[2] - p[2]).powi(2)).sqrt()
                };
                let fd = (range(&tr.state_at(t + h)) - range(&tr.state_at(t - h))) / (2.0 * h);
                let v = scene::radial_velocity(d, &s).map_err(|e| e.to_string())?;
                max_err = max_err.max((v - fd).abs());
                n += 1;
            }
        }
    }
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut disagree = 0;
    let mut hits = 0;
    for _ in 0..1000 {
        let lo = [r.random_range(10.0..70.0), r.random_range(10.0..70.0), 0.0];
        let b = ObstacleBox {
            min: lo,
            max: [lo[0] + r.random_range(2.0..20.0), lo[1] + r.random_range(2.0..20.0), r.random_range(2.0..15.0)],
        };
        let a = [r.random_range(0.0..100.0), r.random_range(0.0..100.0), r.random_range(0.0..20.0)];
        let c = [r.random_range(0.0..100.0), r.random_range(0.0..100.0), r.random_range(0.0..20.0)];
        let steps = 20_000;
        let dense = (0..=steps).any(|k| {
            let u = k as f64 / steps as f64;
            b.contains([a[0] + u * (c[0] - a[0]), a[1] + u * (c[1] - a[1]), a[2] + u * (c[2] - a[2])])
        });
        let fast = b.intersects_segment(a, c);
        hits += fast as usize;
        disagree += (dense != fast) as usize;
    }
    ensure(
        max_err < 1e-3 && disagree == 0,
        format!("radial velocity vs finite difference: {n} samples, max err {max_err:.2e} m/s; occlusion: 0/1000 disagreements required, got {disagree} ({hits} occluded)"),
    )
}

// 5
fn channel_calibration() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let e: Vec<f32> = (0..2_000_000).map(|_| gauss(&mut r)).collect::<Vec<f64>>().iter().map(|&v| v as f32).collect();
    let (c, scale) = channel::modulate(&e).map_err(|er| er.to_string())?;
    let exact = channel::demodulate(&c, scale) == e;
    let mut d = format!("round trip exact: {exact}; ");
    let mut ok = exact;
    for snr in [0.0, 10.0, 25.0] {
        let y = channel::transmit(&c, Link::Awgn { snr_db: snr }, &mut r).map_err(|er| er.to_string())?;
        let ps: f64 = c.iter().map(|z| z.norm_sqr()).sum();
        let pn: f64 = c.iter().zip(&y).map(|(a, b)| (b - a).norm_sqr()).sum();
        let emp = 10.0 * (ps / pn).log10();
        ok &= (emp - snr).abs() <= 0.1;
        let _ = write!(d, "{snr} dB → {emp:.3} dB; ");
    }
    ensure(ok, format!("{d}1e6 symbols each"))
}

/// Small dataset shared by the training-based property checks.
fn tiny_data() -> &'static (tempfile::TempDir, RunConfig) {
    static D: OnceLock<(tempfile::TempDir, RunConfig)> = OnceLock::new();
    D.get_or_init(|| {
        let cfg = RunConfig::load_with_env(
            None,
            &["data.samples=10".into(), "train.epochs_stage1=1".into(), "train.epochs_stage2=1".into(), "seed=11".into()],
            None,
        )
        .expect("tiny config");
        let dir = tempfile::tempdir().expect("tempdir");
        pipeline::generate(&cfg, &dir.path().join("data")).expect("generate");
        (dir, cfg)
    })
}

/// Adapter forward checks at precision `T`: (A=0 output bit-identical to the
/// adapter-free decoder, max |merged − adapter| output difference).
fn adapter_forward<T: Float>() -> disac_core::Result<(bool, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let lcfg = LstnConfig::default();
    let feat = 1024;
    let mut with = ParamStore::<T>::new();
    let l = Lstn::new(&mut with, &lcfg, feat, &mut r)?;
    let mut plain_cfg = lcfg.clone();
    plain_cfg.lora_layers = 0;
    let mut without = ParamStore::<T>::new();
    let lp = Lstn::new(&mut without, &plain_cfg, feat, &mut r)?;
    without.load_from(&with)?;
    // random B, zero A
    let ids: Vec<_> = with.iter().filter(|(_, p)| p.name.starts_with("lstn.lora.")).map(|(id, p)| (id, p.name.ends_with(".a"))).collect();
    for &(id, is_a) in &ids {
        let p = with.get_mut(id);
        p.value = if is_a {
            Tensor::zeros(p.value.shape())
        } else {
            Tensor::from_fn(p.value.shape(), |_| cast(0.3 * gauss(&mut r)))
        };
    }
    let code = Tensor::from_fn(&[3, lcfg.l_se, lcfg.d_se], |_| cast(gauss(&mut r)));
    let text = TextBatch::from_texts(&["the snr is 5.0 db and the distance is 50.0 m"; 3], lcfg.l_text)?;
    let run = |store: &ParamStore<T>, m: &Lstn| -> disac_core::Result<Tensor<T>> {
        let mut g = Graph::new(store, false, 0);
        let c = g.input(code.clone());
        let y = m.decoder.forward(&mut g, c, &text)?;
        Ok(g.value(y).clone())
    };
    let y_ad = run(&with, &l)?.to_f64_vec();
    let y_plain = run(&without, &lp)?.to_f64_vec();
    let bit_identical = y_ad.iter().zip(&y_plain).all(|(a, b)| a.to_bits() == b.to_bits());
    for &(id, is_a) in &ids {
        if is_a {
            let p = with.get_mut(id);
            p.value = Tensor::from_fn(p.value.shape(), |_| cast(0.3 * gauss(&mut r)));
        }
    }
    let before = run(&with, &l)?;
    l.decoder.merge_lora(&mut with)?;
    let after = run(&with, &l)?;
    Ok((bit_identical, before.max_abs_diff(&after)))
}

// 6
fn lora_contract() -> Check {
    let (bits32, merged32) = adapter_forward::<f32>().map_err(|e| e.to_string())?;
    let (bits64, merged) = adapter_forward::<f64>().map_err(|e| e.to_string())?;
    let bit_identical = bits32 && bits64;

    let (dir, cfg) = tiny_data();
    let mut cfg = cfg.clone();
    cfg.train.lora_only = true;
    let data = Dataset::open(&dir.path().join("data/device_0"), None).map_err(|e| e.to_string())?;
    let mut init = ParamStore::<f32>::new();
    DeviceModel::new(&mut init, &cfg.model, 0, Modality::Rf, cfg.seed).map_err(|e| e.to_string())?;
    let res = training::train_stage1(&data, 0, Modality::Rf, &cfg.model, &cfg.train, cfg.seed).map_err(|e| e.to_string())?;
    let base_same = init.hash_prefix("lstn.decoder.") == res.store.hash_prefix("lstn.decoder.");
    let adapters_moved = init.hash_prefix("lstn.lora.") != res.store.hash_prefix("lstn.lora.");
    ensure(
        bit_identical && merged < 1e-6 && base_same && adapters_moved,
        format!("A=0 bit-identical (f32 and f64): {bit_identical}; merged vs adapter {merged:.2e} < 1e-6 at f64 ({merged32:.2e} at f32); lora_only base unchanged: {base_same} (adapters updated: {adapters_moved})"),
    )
}

// 7
fn stage_separation() -> Check {
    let (dir, cfg) = tiny_data();
    let root = dir.path().join("data");
    let ck = dir.path().join("sep");
    let mut family = Vec::new();
    let mut leaks = Vec::new();
    for k in 0..4 {
        let dk = root.join(format!("device_{k}"));
        let audit = AccessAudit::new();
        let res = pipeline::train_local(cfg, &dk, k, Modality::Rf, &ck.join(format!("d{k}.ckpt")), Some(&audit)).map_err(|e| e.to_string())?;
        let outside = audit.outside(&dk);
        if audit.paths().is_empty() || !outside.is_empty() {
            leaks.push(format!("device {k}: {} reads, outside {outside:?}", audit.paths().len()));
        }
        if res.store.iter().any(|(_, p)| p.name.starts_with("tram.") || p.name.starts_with("head.")) {
            leaks.push(format!("device {k} store holds centre parameters"));
        }
        family.push(FrozenDevice::new(res.model, res.store));
    }
    let before: Vec<String> = family.iter().map(|d| d.store.hash_prefix("")).collect();
    let corpus = Corpus::open(&root).map_err(|e| e.to_string())?;
    let bank = CodeBank::build(&family, &corpus.datasets, 64).map_err(|e| e.to_string())?;
    let ctx = AggContext {
        devices: &family,
        datasets: &corpus.datasets,
        bank: &bank,
        positions: &corpus.root.device_positions,
        center: 1,
        channel: &corpus.root.spec.channel,
    };
    let mut init = ParamStore::<f32>::new();
    CenterModel::new(&mut init, &cfg.model, disac_core::rng::derive(cfg.seed, &[1])).map_err(|e| e.to_string())?;
    let res = training::train_stage2(&corpus.agg, &ctx, &cfg.model, &cfg.train, cfg.seed).map_err(|e| e.to_string())?;
    let after: Vec<String> = family.iter().map(|d| d.store.hash_prefix("")).collect();
    let frozen = before == after;
    let only_centre = res.store.iter().all(|(_, p)| p.name.starts_with("tram.") || p.name.starts_with("head."));
    let centre_moved = init.hash_prefix("tram.") != res.store.hash_prefix("tram.");
    ensure(
        frozen && only_centre && centre_moved && leaks.is_empty(),
        format!(
            "device hashes unchanged by stage 2: {frozen}; stage-2 store only tram./head.: {only_centre} (trained: {centre_moved}); audit: {}",
            if leaks.is_empty() { "each device read only its own directory".to_string() } else { leaks.join("; ") }
        ),
    )
}

// 8
fn tram_invariance() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let cfg = TramConfig::default();
    let mut store = ParamStore::<f32>::new();
    let tram = Tram::new(&mut store, &cfg, &mut r).map_err(|e| e.to_string())?;
    let rnd = |r: &mut ChaCha8Rng| Tensor::<f32>::from_fn(&[4, 32, cfg.d_sd], |_| gauss(&mut *r) as f32);
    let center = rnd(&mut r);
    let devs: Vec<Tensor<f32>> = (0..3).map(|_| rnd(&mut r)).collect();
    let run = |order: &[usize]| -> disac_core::Result<Tensor<f32>> {
        let mut g = Graph::new(&store, false, 0);
        let c = g.input(center.clone());
        let d: Vec<Var> = order.iter().map(|&i| g.input(devs[i].clone())).collect();
        let y = tram.aggregate(&mut g, c, &d)?;
        Ok(g.value(y).clone())
    };
    let base = run(&[0, 1, 2]).map_err(|e| e.to_string())?;
    let mut perm = 0.0f64;
    for order in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        perm = perm.max(base.max_abs_diff(&run(&order).map_err(|e| e.to_string())?));
    }

    let id_cfg = TramConfig {
        layers: 1,
        heads: 1,
        d_sd: 4,
        center_as_device: false,
        ..TramConfig::default()
    };
    let mut s2 = ParamStore::<f32>::new();
    let t2 = Tram::new(&mut s2, &id_cfg, &mut r).map_err(|e| e.to_string())?;
    for w in ["w_q", "w_k", "w_v"] {
        let id = s2.id(&format!("tram.layer0.{w}.w")).ok_or("missing projection")?;
        s2.get_mut(id).value = Tensor::eye(4);
    }
    let f = [0.5f32, -1.25, 2.0, 0.75];
    let k = 3;
    let mut g = Graph::new(&s2, false, 0);
    let q = g.input(Tensor::new(vec![1, 1, 4], vec![0.1, 0.2, -0.3, 0.4]).map_err(|e| e.to_string())?);
    let d: Vec<Var> = (0..k).map(|_| g.input(Tensor::new(vec![1, 1, 4], f.to_vec()).unwrap())).collect();
    let y = t2.layer(&mut g, &t2.layers[0], q, &d).map_err(|e| e.to_string())?;
    let got = g.value(y).data().to_vec();
    let expect: Vec<f32> = f.iter().map(|v| k as f32 * v).collect();
    let kf = got.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    ensure(
        perm <= 1e-6 && kf <= 1e-6,
        format!("max diff over 5 device permutations {perm:.2e} ≤ 1e-6; single-token identity case |out − K·F| = {kf:.1e} (got {got:?})"),
    )
}

// 9
fn metric_oracles() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    for _ in 0..200 {
        let n = r.random_range(1..500);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = x.iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
        let (mut num, mut den, mut sq) = (0.0, 0.0, 0.0);
        for i in (0..n).rev() {
            num += (p[i] - x[i]) * (p[i] - x[i]);
            den += x[i] * x[i];
            sq += (p[i] - x[i]).powi(2);
        }
        let nm = eval::nmse_db(&p, &x).map_err(|e| e.to_string())?;
        worst = worst.max(rel(nm, 10.0 * (num / den).log10()));
        worst = worst.max(rel(eval::rmse(&p, &x).map_err(|e| e.to_string())?, (sq / n as f64).sqrt()));
        let m = r.random_range(2..5);
        let logits: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
        let mut hits = 0usize;
        for (row, &y) in logits.iter().zip(&labels) {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            hits += (best == y) as usize;
        }
        let acc = eval::accuracy(&logits, &labels).map_err(|e| e.to_string())?;
        if hits == 0 {
            worst = worst.max(acc);
        } else {
            worst = worst.max(rel(acc, hits as f64 / n as f64));
        }
    }
    let ones = vec![1.0; 16];
    let off: Vec<f64> = ones.iter().map(|v| v + 0.1).collect();
    let minus20 = eval::nmse_db(&off, &ones).map_err(|e| e.to_string())?;
    let twice: Vec<f64> = ones.iter().map(|v| 2.0 * v).collect();
    let zero = eval::nmse_db(&twice, &ones).map_err(|e| e.to_string())?;
    let inf = eval::nmse_db(&ones, &ones).map_err(|e| e.to_string())?;
    let trivial = (minus20 + 20.0).abs() < 1e-12 && zero == 0.0 && inf == f64::NEG_INFINITY;
    ensure(
        worst < 1e-10 && trivial,
        format!("max rel err vs scalar loops {worst:.1e} < 1e-10; trivial cases {minus20:.12} / {zero} / {inf}"),
    )
}

// ---- trend runs ----

const SEEDS: [u64; 3] = [1, 2, 3];
const TREND_CENTER: usize = 1;
const BUDGET_MIN: f64 = 60.0;

struct Trend {
    rows: BTreeMap<u64, Vec<MetricReport>>,
    stage1: BTreeMap<u64, BTreeMap<String, Vec<f64>>>,
    records_per_device: Vec<usize>,
    minutes: f64,
    cached: bool,
}

fn trend_config(seed: u64) -> RunConfig {
    let sets = vec![
        format!("seed={seed}"),
        format!("eval.centers=[{TREND_CENTER}]"),
    ];
    RunConfig::load_with_env(None, &sets, None).expect("trend config")
}

fn cache_key() -> String {
    let mut h = Sha256::new();
    for s in SEEDS {
        h.update(serde_json::to_vec(&trend_config(s)).unwrap());
    }
    if let Ok(exe) = std::env::current_exe().and_then(std::fs::read) {
        h.update(exe);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn trend_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(format!("trend-{}", cache_key()))
}

fn load_cached(dir: &Path) -> Option<Trend> {
    let text = std::fs::read_to_string(dir.join("summary.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    let mut rows = BTreeMap::new();
    for s in SEEDS {
        let csv = std::fs::read_to_string(dir.join(format!("seed{s}/report.csv"))).ok()?;
        rows.insert(s, eval::parse_report_csv(&csv).ok()?);
    }
    Some(Trend {
        rows,
        stage1: serde_json::from_value(v["stage1"].clone()).ok()?,
        records_per_device: serde_json::from_value(v["records_per_device"].clone()).ok()?,
        minutes: v["minutes"].as_f64()?,
        cached: true,
    })
}

fn trend() -> &'static std::result::Result<Trend, String> {
    static T: OnceLock<std::result::Result<Trend, String>> = OnceLock::new();
    T.get_or_init(|| {
        let dir = trend_dir();
        if let Some(t) = load_cached(&dir) {
            return Ok(t);
        }
        let t0 = Instant::now();
        let mut rows = BTreeMap::new();
        let mut stage1 = BTreeMap::new();
        let mut records = Vec::new();
        for s in SEEDS {
            let work = dir.join(format!("seed{s}"));
            let _ = std::fs::remove_dir_all(&work);
            let exp = pipeline::run_experiment(&trend_config(s), &work).map_err(|e| format!("seed {s}: {e}"))?;
            let manifest = disac_core::dataset::RootManifest::open(&work.join("data")).map_err(|e| e.to_string())?;
            records = manifest.records_per_device.clone();
            let _ = std::fs::remove_dir_all(work.join("data"));
            rows.insert(s, exp.rows);
            stage1.insert(s, exp.stage1.into_iter().map(|((m, k), v)| (format!("{}-{k}", m.name()), v)).collect::<BTreeMap<_, _>>());
        }
        let minutes = t0.elapsed().as_secs_f64() / 60.0;
        let summary = serde_json::json!({ "stage1": stage1, "records_per_device": records, "minutes": minutes });
        std::fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary).unwrap()).map_err(|e| e.to_string())?;
        Ok(Trend {
            rows,
            stage1,
            records_per_device: records,
            minutes,
            cached: false,
        })
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn accs(t: &Trend, mode: Mode, snr: Option<f64>) -> Vec<f64> {
    t.rows
        .values()
        .flatten()
        .filter(|r| r.mode == mode && snr.is_none_or(|s| r.snr_db == s))
        .map(|r| r.accuracy)
        .collect()
}

fn with_trend(f: impl FnOnce(&Trend) -> Check) -> Check {
    match trend() {
        Ok(t) => f(t),
        Err(e) => Err(format!("trend run failed: {e}")),
    }
}

// 10
fn compression() -> Check {
    let m = ModelConfig::default();
    let raw = eval::raw_record_bytes([64, 64, 3], 16, 60);
    let c = eval::compression(raw, eval::code_bytes(m.lstn.l_se, m.lstn.d_se));
    let mut d = format!("{} / {} B = {:.4} ≤ 0.10 (reduction {:.2}%)", c.code_bytes, c.raw_bytes, c.ratio, 100.0 * c.reduction);
    let mut ok = c.ratio <= 0.10;
    if let Ok(t) = trend() {
        let reported: Vec<f64> = t.rows.values().flatten().map(|r| r.compression_ratio).collect();
        ok &= reported.iter().all(|&r| (r - c.ratio).abs() < 1e-6);
        let _ = write!(d, "; report column agrees on {} rows", reported.len());
    }
    ensure(ok, d)
}

// 11
fn multimodal_gain() -> Check {
    with_trend(|t| {
        let mm = median(accs(t, Mode::MmSd, None));
        let cv = median(accs(t, Mode::SmSdCv, None));
        let rf = median(accs(t, Mode::SmSdRf, None));
        ensure(
            mm >= cv + 0.10 && mm >= rf,
            format!("median accuracy mm-sd {mm:.4} vs sm-sd-cv {cv:.4} (+0.10 needed) and sm-sd-rf {rf:.4}"),
        )
    })
}

// 12
fn multi_device_gain() -> Check {
    with_trend(|t| {
        let full = median(accs(t, Mode::Full, None));
        let mm = median(accs(t, Mode::MmSd, None));
        let mdrf = median(accs(t, Mode::SmMdRf, None));
        let sdrf = median(accs(t, Mode::SmSdRf, None));
        ensure(
            full >= mm && mdrf >= sdrf,
            format!("median accuracy full {full:.4} ≥ mm-sd {mm:.4}; sm-md-rf {mdrf:.4} ≥ sm-sd-rf {sdrf:.4}"),
        )
    })
}

fn snrs(t: &Trend) -> Vec<f64> {
    let mut s: Vec<f64> = t.rows.values().flatten().filter(|r| r.mode == Mode::Full).map(|r| r.snr_db).collect();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s.dedup();
    s
}

// 13
fn upper_bound() -> Check {
    with_trend(|t| {
        let mut ok = true;
        let mut d = String::new();
        for snr in snrs(t) {
            let full = median(accs(t, Mode::Full, Some(snr)));
            let ub = median(accs(t, Mode::NoScLoss, Some(snr)));
            ok &= ub >= full;
            let _ = write!(d, "{snr} dB: {ub:.4} vs {full:.4}; ");
        }
        ensure(ok, format!("median no-sc-loss ≥ full at every SNR: {d}"))
    })
}

// 14
fn snr_monotonicity() -> Check {
    with_trend(|t| {
        let lo = median(accs(t, Mode::Full, Some(0.0)));
        let hi = median(accs(t, Mode::Full, Some(25.0)));
        ensure(hi >= lo - 0.01, format!("median full accuracy 25 dB {hi:.4} ≥ 0 dB {lo:.4} − 0.01"))
    })
}

// 15
fn training_sanity() -> Check {
    with_trend(|t| {
        let mut ok = true;
        let mut d = String::new();
        let mut others = String::new();
        let names: Vec<String> = t.stage1.values().next().map(|m| m.keys().cloned().collect()).unwrap_or_default();
        for name in names {
            let e0 = median(t.stage1.values().map(|m| m[&name][0]).collect());
            let e3 = median(t.stage1.values().map(|m| m[&name][3]).collect());
            let line = format!("{name} {:.3}/{:.3}={:.2}; ", e3, e0, e3 / e0);
            if name.starts_with("mm-") {
                ok &= e3 < 0.5 * e0;
                d.push_str(&line);
            } else {
                others.push_str(&line);
            }
        }
        ensure(ok, format!("median val loss epoch 3 / epoch 0 < 0.5 on every device: {d}(baseline families: {others})"))
    })
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Check); 15] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "complex-conv oracle", complex_conv_oracle),
        (3, "steering vector", steering_vector),
        (4, "geometry oracle", geometry_oracle),
        (5, "channel calibration", channel_calibration),
        (6, "LoRA contract", lora_contract),
        (7, "two-stage separation", stage_separation),
        (8, "TRAM permutation invariance", tram_invariance),
        (9, "metric oracles", metric_oracles),
        (10, "compression", compression),
        (11, "multimodal > unimodal", multimodal_gain),
        (12, "multi-device > single-device", multi_device_gain),
        (13, "lossless upper bound", upper_bound),
        (14, "SNR monotonicity", snr_monotonicity),
        (15, "training sanity", training_sanity),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("criterion {id:>2} PASS  {name} [{secs:.1}s]: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name} [{secs:.1}s]: {d}");
            }
        }
    }
    if let Some(Ok(t)) = (wanted.is_empty() || wanted.iter().any(|&w| w >= 10)).then(trend) {
        let train = &trend_config(SEEDS[0]).train;
        println!(
            "trend runs: {} seeds, records/device {:?}, centre position {TREND_CENTER}, {}+{} epochs, {:.1} min{} (budget {BUDGET_MIN} min)",
            SEEDS.len(),
            t.records_per_device,
            train.epochs_stage1,
            train.epochs_stage2,
            t.minutes,
            if t.cached { ", cached" } else { "" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
