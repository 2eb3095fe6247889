use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use disac_bench::batch;
use disac_core::model::{CenterModel, DeviceModel, ModelConfig};
use disac_core::numerics::{Adam, Graph, ParamStore, Tensor};
use disac_core::rvfn::Modality;
use disac_core::training::{sensing_loss, LossWeights};

fn device_forward(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let mut group = c.benchmark_group("device_forward");
    group.sample_size(10);
    for m in [Modality::Rf, Modality::Cv, Modality::Mm] {
        let mut store = ParamStore::<f32>::new();
        let model = DeviceModel::new(&mut store, &cfg, 0, m, 1).unwrap();
        let b = batch(&cfg, m, 32, 2);
        group.bench_with_input(BenchmarkId::from_parameter(m.name()), &b, |bench, b| {
            bench.iter(|| {
                let mut g = Graph::new(&store, false, 0);
                model.forward(&mut g, &b.input, &b.links, &b.text, 3).unwrap().logits
            })
        });
    }
    group.finish();
}

fn device_train_step(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let w = LossWeights::default();
    let mut group = c.benchmark_group("device_train_step");
    group.sample_size(10);
    for m in [Modality::Rf, Modality::Mm] {
        let mut store = ParamStore::<f32>::new();
        let model = DeviceModel::new(&mut store, &cfg, 0, m, 1).unwrap();
        let b = batch(&cfg, m, 32, 2);
        let mut adam = Adam::new(1e-3);
        group.bench_function(m.name(), |bench| {
            bench.iter(|| {
                let grads = {
                    let mut g = Graph::new(&store, true, 4);
                    let out = model.forward(&mut g, &b.input, &b.links, &b.text, 3).unwrap();
                    let (loss, _) = sensing_loss(&mut g, &out, &b.labels, &b.classes, &w).unwrap();
                    g.backward(loss).unwrap()
                };
                adam.step(&mut store, &grads);
            })
        });
    }
    group.finish();
}

fn center_forward(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::<f32>::new();
    let model = CenterModel::new(&mut store, &cfg, 1).unwrap();
    let shape = [32, cfg.lstn.l_fusion(), cfg.tram.d_sd];
    let feats: Vec<Tensor<f32>> = (0..4).map(|k| Tensor::from_fn(&shape, |i| ((i + k) % 13) as f32 / 13.0 - 0.5)).collect();
    c.bench_function("center_forward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(&store, false, 0);
            let vars: Vec<_> = feats.iter().map(|t| g.input(t.clone())).collect();
            model.forward(&mut g, vars[0], &vars[1..]).unwrap().logits
        })
    });
}

criterion_group!(benches, device_forward, device_train_step, center_forward);
criterion_main!(benches);
