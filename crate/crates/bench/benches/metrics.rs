use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kag_core::metrics::{aupr, auroc, pro, ScoredSet};
use kag_core::rng::stream;
use kag_core::Tensor;
use rand::Rng;

fn maps_and_masks(n: usize, side: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut rng = stream(1, 0, 0);
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..n {
        let mut m = Tensor::zeros(&[side, side]);
        let (y0, x0) = (rng.random_range(0..side / 2), rng.random_range(0..side / 2));
        for y in y0..y0 + side / 4 {
            for x in x0..x0 + side / 4 {
                m.set(&[y, x], 1.0);
            }
        }
        let noise = Tensor::randn(&[side, side], 0.5, &mut rng);
        maps.push(m.zip_map(&noise, |a, b| a + b).unwrap());
        masks.push(m);
    }
    (maps, masks)
}

fn bench_metrics(c: &mut Criterion) {
    let mut group = c.benchmark_group("metrics");
    for n in [16usize, 64] {
        let (maps, masks) = maps_and_masks(n, 64);
        let set = ScoredSet::from_maps(&maps, &masks).unwrap();
        group.bench_with_input(BenchmarkId::new("pixel_auroc", n), &set, |b, s| b.iter(|| auroc(s).unwrap()));
        group.bench_with_input(BenchmarkId::new("pixel_aupr", n), &set, |b, s| b.iter(|| aupr(s).unwrap()));
        group.bench_with_input(BenchmarkId::new("pro", n), &n, |b, _| b.iter(|| pro(&maps, &masks, 0.3).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_metrics);
criterion_main!(benches);
