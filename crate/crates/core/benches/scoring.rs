//! Window scoring throughput: the `par` fan-out against a plain loop over
//! the same chunks.
//!
//! Built without default features, the `par` path is itself sequential, so
//! `cargo bench --no-default-features` shows the fallback's overhead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use canids::model::{signalwise_losses, signalwise_mse, Autoencoder, LayerFamily, ModelConfig, SCORING_CHUNK};
use canids::par;

const W: usize = 32;
const X: usize = 24;

fn windows(n: usize) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    (0..n)
        .map(|_| Array2::from_shape_fn((W, X), |_| rng.random()))
        .collect()
}

fn scoring(c: &mut Criterion) {
    let pool = if par::is_parallel() { "rayon" } else { "fallback" };
    for family in [LayerFamily::Dense, LayerFamily::Lstm] {
        let model = Autoencoder::new(ModelConfig::for_family(family, X), W, X).unwrap();
        let mut group = c.benchmark_group(format!("score_{family:?}").to_lowercase());
        group.sample_size(10);
        for n in [64, 512] {
            let data = windows(n);
            let refs: Vec<&Array2<f64>> = data.iter().collect();
            group.throughput(Throughput::Elements(n as u64));
            group.bench_with_input(BenchmarkId::new(pool, n), &refs, |b, refs| {
                b.iter(|| signalwise_losses(&model, refs).unwrap())
            });
            group.bench_with_input(BenchmarkId::new("sequential", n), &refs, |b, refs| {
                b.iter(|| {
                    refs.chunks(SCORING_CHUNK)
                        .flat_map(|chunk| {
                            let outs = model.reconstruct_batch(chunk).unwrap();
                            chunk
                                .iter()
                                .zip(&outs)
                                .map(|(s, o)| signalwise_mse(s, o))
                                .collect::<Vec<_>>()
                        })
                        .collect::<Vec<_>>()
                })
            });
        }
        group.finish();
    }
}

criterion_group!(benches, scoring);
criterion_main!(benches);
