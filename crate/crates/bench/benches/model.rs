use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gmrl_core::model::{total_loss, DataDims, GmrlModel, ModelConfig};
use gmrl_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn configs() -> Vec<(&'static str, ModelConfig, DataDims, usize)> {
    let tiny = ModelConfig {
        input_len: 8,
        horizon: 2,
        layers: 2,
        components: 3,
        embed_dim: 4,
        hidden_dim: 8,
        memory_slots: 2,
        memory_dim: 6,
        ..ModelConfig::default()
    };
    vec![
        ("tiny", tiny, DataDims { locations: 3, sources: 2 }, 2),
        ("default", ModelConfig::default(), DataDims { locations: 8, sources: 2 }, 8),
    ]
}

fn passes(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for (name, cfg, dims, batch) in configs() {
        let mut model = GmrlModel::new(cfg.clone(), dims, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[batch, cfg.input_len, dims.locations, dims.sources]);
        let y = random(&mut rng, &[batch, cfg.horizon, dims.locations, dims.sources]);

        group.bench_with_input(BenchmarkId::new("forward", name), &x, |b, x| {
            b.iter(|| {
                let mut g = Graph::new();
                model.forward(&mut g, x).unwrap().y_hat
            })
        });

        group.bench_with_input(BenchmarkId::new("forward_backward", name), &x, |b, x| {
            b.iter(|| {
                let mut g = Graph::new();
                let out = model.forward(&mut g, x).unwrap();
                let loss = total_loss(&mut g, out.y_hat, &y, out.cluster, 0.5).unwrap();
                g.backward(loss.total, &mut model.params).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, passes);
criterion_main!(benches);
