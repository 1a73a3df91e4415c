use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jointlens::soxai::{tsne, TsneParams};
use jointlens_bench::clusters;

fn bench_tsne(c: &mut Criterion) {
    let mut g = c.benchmark_group("tsne");
    g.sample_size(10);
    for per in [20, 50] {
        let x = clusters(per, 10);
        let params = TsneParams {
            perplexity: 10.0,
            ..TsneParams::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(3 * per), &x, |b, x| b.iter(|| tsne(x, &params).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_tsne);
criterion_main!(benches);
