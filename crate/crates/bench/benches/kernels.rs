use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ppanns_core::common::{sq_dist_slice, SeededRng};
use ppanns_core::dataset::SyntheticConfig;
use ppanns_core::dce::{self, distance_comp};
use ppanns_core::dcpe::{sap_encrypt, sap_keygen, SapStore};
use ppanns_core::hnsw::{HnswGraph, HnswParams, SearchParams};

fn gaussian(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gaussian()).collect()
}

fn comparison(c: &mut Criterion) {
    let mut group = c.benchmark_group("comparison");
    for d in [32usize, 128, 960] {
        let mut rng = SeededRng::new(1);
        let sk = dce::keygen(d, 2).unwrap();
        let (o, p, q) = (gaussian(&mut rng, d), gaussian(&mut rng, d), gaussian(&mut rng, d));
        let co = dce::encrypt_db(&o, &sk, &mut rng).unwrap();
        let cp = dce::encrypt_db(&p, &sk, &mut rng).unwrap();
        let t = dce::trapgen(&q, &sk, &mut rng).unwrap();
        group.bench_with_input(BenchmarkId::new("distance_comp", d), &d, |b, _| {
            b.iter(|| distance_comp(black_box(&co), black_box(&cp), black_box(&t)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sq_dist", d), &d, |b, _| {
            b.iter(|| sq_dist_slice(black_box(&o), black_box(&q)))
        });
    }
    group.finish();
}

fn encryption(c: &mut Criterion) {
    let mut group = c.benchmark_group("encrypt");
    group.throughput(Throughput::Elements(1));
    for d in [128usize, 960] {
        let mut rng = SeededRng::new(3);
        let p = gaussian(&mut rng, d);
        let key = sap_keygen(1024.0, 1.0, 4.0, d).unwrap();
        let sk = dce::keygen(d, 4).unwrap();
        group.bench_with_input(BenchmarkId::new("sap", d), &d, |b, _| {
            b.iter(|| sap_encrypt(black_box(&p), &key, &mut rng).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("dce_db", d), &d, |b, _| {
            b.iter(|| dce::encrypt_db(black_box(&p), &sk, &mut rng).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("dce_trapgen", d), &d, |b, _| {
            b.iter(|| dce::trapgen(black_box(&p), &sk, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn hnsw_search(c: &mut Criterion) {
    let ds = SyntheticConfig {
        n: 20_000,
        queries: 64,
        d: 128,
        ..Default::default()
    }
    .generate(5)
    .unwrap();
    let key = sap_keygen(1024.0, 2.0, 4.0, 128).unwrap();
    let store = SapStore::encrypt_all(&ds.base, &key, 6).unwrap();
    let graph = HnswGraph::build(&store, store.len(), HnswParams::default(), 7).unwrap();
    let mut rng = SeededRng::new(8);
    let queries: Vec<Vec<f64>> = ds
        .queries
        .iter()
        .map(|q| sap_encrypt(q, &key, &mut rng).unwrap().0)
        .collect();
    let mut group = c.benchmark_group("hnsw_search");
    group.throughput(Throughput::Elements(queries.len() as u64));
    for ef in [40usize, 80, 160] {
        let params = SearchParams::new(40, ef).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(ef), &ef, |b, _| {
            b.iter(|| {
                for q in &queries {
                    black_box(graph.knn_search(|id| store.sq_dist_to(q, id), params));
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, comparison, encryption, hnsw_search);
criterion_main!(benches);
