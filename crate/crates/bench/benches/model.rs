use criterion::{criterion_group, criterion_main, Criterion};
use roofseg::backbone::Hierarchy;
use roofseg::model::{LossOptions, ModelConfig, RoofSegModel, TrainingTarget};
use roofseg::nn::Ctx;
use roofseg::params::ParamStore;
use roofseg::roofgen::{generate_roof, RoofFamily, RoofSpec};

fn model(c: &mut Criterion) {
    let sample = generate_roof(&RoofSpec::random(RoofFamily::Hip, 2048, 0.005, 2)).unwrap();
    let coords = sample.cloud.coords();
    let mut store = ParamStore::<f32>::new();
    let model = RoofSegModel::new(&mut store, ModelConfig::default()).unwrap();

    let mut g = c.benchmark_group("model 2048 points");
    g.sample_size(10);
    g.bench_function("predict", |b| b.iter(|| model.predict(&mut Ctx::eval(&store), coords, true).unwrap()));
    g.bench_function("predict without refinement", |b| {
        b.iter(|| model.predict(&mut Ctx::eval(&store), coords, false).unwrap())
    });
    let hierarchy = Hierarchy::build(coords, &model.backbone.config).unwrap();
    let target = TrainingTarget::new(coords, sample.labels(), &sample.edge.flags, 30).unwrap();
    g.bench_function("objective and backward", |b| {
        b.iter(|| {
            let mut ctx = Ctx::train(&store, 7);
            let (loss, _) = model.objective(&mut ctx, coords, &hierarchy, &target, &LossOptions::default()).unwrap();
            ctx.tape.backward(loss)
        })
    });
    g.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
