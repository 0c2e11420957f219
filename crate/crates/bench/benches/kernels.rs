use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use damd_core::imaging::RgbImage;
use damd_core::morphable::{generate_synthetic_model, EulerPose, ParamVector, NUM_EXP, NUM_ID};
use damd_core::network::{build_network, init_params, BuildOptions, Forward, RunMode, Variant};
use damd_core::render::{rasterize, Background};
use damd_core::rng::SeedStreams;
use damd_core::{Graph, ParamStore, Tensor};

/// Deterministic pseudo-random values in [-1, 1).
fn filled(shape: Vec<usize>, seed: u32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n as u32).map(|i| ((i.wrapping_mul(2_654_435_761) ^ seed) % 2000) as f32 / 1000.0 - 1.0).collect();
    Tensor::new(shape, data).unwrap()
}

fn convolutions(c: &mut Criterion) {
    let x = filled(vec![8, 32, 30, 30], 1);
    let w = filled(vec![64, 32, 3, 3], 2);
    let dw = filled(vec![32, 1, 3, 3], 3);
    c.bench_function("conv2d_3x3_32to64_30px_b8_fwd_bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.parameter(x.clone());
            let wv = g.parameter(w.clone());
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(wv).is_some())
        })
    });
    c.bench_function("depthwise_3x3_32ch_30px_b8_fwd_bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.parameter(x.clone());
            let wv = g.parameter(dw.clone());
            let y = g.depthwise_conv2d(xv, wv, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(wv).is_some())
        })
    });
}

fn network(c: &mut Criterion) {
    let spec = build_network(Variant::Damd, &BuildOptions::toy().with_input(120)).unwrap();
    let mut params: ParamStore<f32> = init_params(&spec, &mut SeedStreams::new(0).stream("init")).unwrap();
    let images = filled(vec![16, 3, 120, 120], 4);
    c.bench_function("toy_damdnet_120px_b16_train_step_graph", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(images.clone());
            let y =
                Forward::new(&mut g, &mut params, RunMode::Train { update_stats: false }).network(&spec, x).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.len())
        })
    });
}

fn render(c: &mut Criterion) {
    let model = generate_synthetic_model(1, 1200).unwrap();
    let mut pose = EulerPose { f: 48.0, yaw: 0.4, ..EulerPose::identity() };
    let r = pose.rotation();
    let shift = 60.0 / pose.f;
    pose.t3d = [0, 1, 2].map(|i| (r[(0, i)] + r[(1, i)]) * shift);
    let p = ParamVector::from_parts(&pose, &[0.0; NUM_ID], &[0.0; NUM_EXP]).unwrap();
    let bg = RgbImage::new(120, 120, [0.1; 3]);
    c.bench_function("rasterize_1200_vertices_120px", |b| {
        b.iter(|| black_box(rasterize(&model, &p, 120, 120, Background::Image(&bg)).unwrap().degenerate))
    });
}

criterion_group!(benches, convolutions, network, render);
criterion_main!(benches);
