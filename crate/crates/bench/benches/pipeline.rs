use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use rfp_bench::{batch, frames, network, preprocessor, scene, window};
use rfp_core::detector::{run_detection, DetectorConfig};
use rfp_core::preprocess::PipelineVariant;
use rfp_core::Label;

fn preprocess(c: &mut Criterion) {
    let pre = preprocessor();
    let w = window(1);
    let mut g = c.benchmark_group("preprocess");
    for v in [PipelineVariant::WithDft, PipelineVariant::NoDft, PipelineVariant::SingleCnn] {
        g.bench_function(v.name(), |b| b.iter(|| pre.make_input(&w, v).unwrap()));
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    g.throughput(Throughput::Elements(64));
    for v in [PipelineVariant::WithDft, PipelineVariant::NoDft, PipelineVariant::SingleCnn] {
        let net = network(v);
        let inputs = batch(v, 64);
        g.bench_function(v.name(), |b| b.iter(|| net.predict(&inputs).unwrap()));
    }
    g.finish();
}

fn synth(c: &mut Criterion) {
    let s = scene(2);
    let mut g = c.benchmark_group("synth");
    g.throughput(Throughput::Elements(1000));
    g.bench_function("motion_1000_frames", |b| {
        b.iter(|| s.stream(Label::Motion, 1000, 1).unwrap().count())
    });
    g.finish();
}

fn detect(c: &mut Criterion) {
    let net = network(PipelineVariant::WithDft);
    let stream = frames(400, 4);
    let mut g = c.benchmark_group("detect");
    g.sample_size(10);
    g.throughput(Throughput::Elements((stream.len() - 127) as u64));
    g.bench_function("stride1_400_frames", |b| {
        b.iter_batched(
            || stream.clone(),
            |f| run_detection(&net, f, &DetectorConfig::default()).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, preprocess, forward, synth, detect);
criterion_main!(benches);
