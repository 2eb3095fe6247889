//! Shared fixtures for the criterion benches.

use disac_core::channel::{render_context, Link};
use disac_core::lstn::TextBatch;
use disac_core::model::ModelConfig;
use disac_core::numerics::Tensor;
use disac_core::rng;
use disac_core::rvfn::{Modality, RvfnInput};
use rand_distr::{Distribution, StandardNormal};

/// Random device-model inputs for a batch of `b` records.
pub struct Batch {
    pub input: RvfnInput<f32>,
    pub text: TextBatch,
    pub links: Vec<Link>,
    pub labels: Tensor<f32>,
    pub classes: Vec<usize>,
}

pub fn batch(cfg: &ModelConfig, modality: Modality, b: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, &[]);
    let r_cfg = &cfg.rvfn;
    let mut normal = |shape: &[usize], sd: f32| Tensor::from_fn(shape, |_| sd * Distribution::<f64>::sample(&StandardNormal, &mut r) as f32);
    let echo = modality.uses_rf().then(|| normal(&[b, 2 * r_cfg.antennas, 1, r_cfg.samples], 0.3));
    let image = modality.uses_cv().then(|| normal(&[b, 3, r_cfg.image_size, r_cfg.image_size], 1.0));
    let ctx = render_context(12.5, 70.7);
    let contexts = vec![&ctx; b];
    Batch {
        input: RvfnInput { echo, image },
        text: TextBatch::new(&contexts, cfg.lstn.l_text).expect("context fits"),
        links: vec![Link::Awgn { snr_db: 12.5 }; b],
        labels: Tensor::from_fn(&[b, 4], |i| 0.1 + 0.8 * ((i * 37 % 11) as f32 / 11.0)),
        classes: (0..b).map(|i| i % cfg.tram.classes).collect(),
    }
}
