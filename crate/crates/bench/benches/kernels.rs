use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use ctn_bench::blob;
use ctn_core::autodiff::{Graph, Tensor};
use ctn_core::geometry::{hausdorff, iou, rasterize};
use ctn_core::losses::{PerceptualExtractor, TpsSystem};
use ctn_core::model::{initial_contour, Model, ModelConfig};

fn geometry(c: &mut Criterion) {
    let (_, a) = blob(0);
    let (_, b) = blob(1);
    c.bench_function("hausdorff_64", |bench| bench.iter(|| hausdorff(black_box(&a), black_box(&b))));
    c.bench_function("rasterize_iou_64x64", |bench| {
        bench.iter(|| iou(&rasterize(black_box(&a), 64, 64).unwrap(), &rasterize(black_box(&b), 64, 64).unwrap()).unwrap())
    });
}

fn tps(c: &mut Criterion) {
    let (_, ex) = blob(0);
    let (_, target) = blob(1);
    c.bench_function("tps_build_64", |bench| bench.iter(|| TpsSystem::build(black_box(&ex)).unwrap()));
    let sys = TpsSystem::build(&ex).unwrap();
    c.bench_function("tps_energy_64", |bench| bench.iter(|| sys.energy(black_box(&target)).unwrap()));
}

fn conv(c: &mut Criterion) {
    let x = Tensor::<f32>::full(&[16, 32, 32], 0.5);
    let w = Tensor::<f32>::full(&[32, 16, 3, 3], 0.01);
    c.bench_function("conv2d_16x32x32_to_32_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let xv = g.input(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap()
        })
    });
}

fn model(c: &mut Criterion) {
    let (image, ex) = blob(0);
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let init = initial_contour(&ex, (64, 64), 64, 64);
    let extractor = PerceptualExtractor::default_bank();
    c.bench_function("perceptual_extract_64x64", |bench| bench.iter(|| extractor.extract(black_box(&image)).unwrap()));
    c.bench_function("model_forward_f32", |bench| bench.iter(|| model.forward::<f32>(black_box(&image), &init).unwrap()));
    c.bench_function("model_forward_backward_f32", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let rec = model.record(&mut g, &image, &init).unwrap();
            let last = *rec.blocks.last().unwrap();
            let s = g.sum(last).unwrap();
            g.backward(s).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = geometry, tps, conv, model
}
criterion_main!(benches);
