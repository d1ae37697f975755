use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mace_bench::{descriptors, image, pnp_problem, splats};
use mace_core::experts::{ExpertConfig, ExpertHead, PositionDecoder};
use mace_core::features::{Encoder, EncoderConfig};
use mace_core::geometry::{CameraIntrinsics, RigidPose};
use mace_core::localize::{solve_pnp_ransac, PnpConfig};
use mace_core::splat::{photometric_loss_grad, rasterize, rasterize_backward, rasterize_cached, RasterConfig};
use nalgebra::Vector3;

fn raster(c: &mut Criterion) {
    let k = CameraIntrinsics::centered(110.0, 128, 128).unwrap();
    let pose = RigidPose::identity();
    let cfg = RasterConfig::default();
    let s = splats(128 * 128, 1);
    let target = image(128, 128, 2);
    c.bench_function("rasterize 16k splats 128x128", |b| b.iter(|| rasterize(black_box(&s), &pose, &k, &cfg)));
    c.bench_function("rasterize+backward 16k splats 128x128", |b| {
        b.iter(|| {
            let (img, cache) = rasterize_cached(black_box(&s), &pose, &k, &cfg);
            let (_, d) = photometric_loss_grad(&img.view(), &target.view(), 0.2).unwrap();
            rasterize_backward(&s, &cache, &d.view(), &cfg)
        })
    });
}

fn networks(c: &mut Criterion) {
    let enc = Encoder::new(&EncoderConfig::default(), 0);
    let img = image(128, 128, 3);
    c.bench_function("encode 128x128", |b| b.iter(|| enc.encode(&black_box(&img).view()).unwrap()));

    let centers: Vec<Vector3<f64>> = (0..50).map(|i| Vector3::new(i as f64 * 0.1, (i % 7) as f64, (i % 3) as f64)).collect();
    let dec = PositionDecoder::new(&centers).unwrap();
    let expert = ExpertHead::new(&ExpertConfig::default(), 64, 50, 0);
    let x = descriptors(256, 64, 4);
    c.bench_function("expert forward 256 cells", |b| b.iter(|| expert.forward(&dec, &black_box(&x).view()).unwrap()));
}

fn pnp(c: &mut Criterion) {
    let cfg = PnpConfig::default();
    let (k, clean) = pnp_problem(256, 0.0, 5);
    let (_, noisy) = pnp_problem(256, 0.5, 6);
    c.bench_function("pnp ransac 256 clean", |b| b.iter(|| solve_pnp_ransac(black_box(&clean), &k, &cfg, 0)));
    c.bench_function("pnp ransac 256 half outliers", |b| b.iter(|| solve_pnp_ransac(black_box(&noisy), &k, &cfg, 0)));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = raster, networks, pnp
}
criterion_main!(benches);
