use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use magicmix_core::io::shapes::shapes_vocabulary;
use magicmix_core::magicmix::{sweep, LayoutSource, MixConfig, SweepGrid};
use magicmix_core::model::unet::perturbed_params;
use magicmix_core::model::{UNet, UNetConfig};
use magicmix_core::oracle::{MixtureWorld, OracleDenoiser};
use magicmix_core::par::{map_indexed, rng_for, streams, Execution};
use magicmix_core::sampler::{sample, StepPlan};
use magicmix_core::trainer::{unet_loss_and_grad, TrainItem};
use magicmix_core::{Denoiser, NoiseSchedule, Prompt, Sample, ScheduleFamily};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Auto), ("sequential", Execution::Sequential)];

fn tiny_model(image_size: usize) -> UNet {
    let vocab = shapes_vocabulary();
    let config = UNetConfig::tiny(vocab.len(), image_size);
    let sched = NoiseSchedule::new(100, ScheduleFamily::Cosine).unwrap();
    let mut model = UNet::new(&config, sched, vocab, 0).unwrap();
    let params = perturbed_params(model.layout(), 1, 0.2);
    model.params_mut().copy_from_slice(&params);
    model
}

fn bench_sweep(c: &mut Criterion) {
    let model = tiny_model(16);
    let vocab = model.vocabulary().clone();
    let layout = Sample::randn(&[1, 16, 16], &mut rng_for(0, streams::DATASET)).map(|v| v.clamp(-1.0, 1.0));
    let content = Prompt::parse("circle striped", &vocab).unwrap();
    let grid = SweepGrid {
        nu: Some(vec![0.2, 0.5, 0.8]),
        scale: Some(vec![1.0, -1.0]),
        ..SweepGrid::default()
    };
    let base = MixConfig {
        steps: 20,
        ..MixConfig::default()
    };
    let source = LayoutSource::Image(layout);
    let mut g = c.benchmark_group("sweep_3x2");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sweep(&model, &source, &content, &grid, &base, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_batch_loss(c: &mut Criterion) {
    let model = tiny_model(16);
    let vocab = model.vocabulary().clone();
    let params: Vec<f32> = model.params().to_vec();
    let mut rng = rng_for(1, streams::EVAL);
    let batch: Vec<TrainItem> = (0..16)
        .map(|i| TrainItem {
            x0: Sample::randn(&[1, 16, 16], &mut rng),
            t: 1 + i * 6,
            eps: Sample::randn(&[1, 16, 16], &mut rng),
            prompt: Prompt::parse("square dotted", &vocab).unwrap(),
        })
        .collect();
    let mut g = c.benchmark_group("batch_loss_and_grad_16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| unet_loss_and_grad(model.layout(), &params, model.schedule(), &batch, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_monte_carlo(c: &mut Criterion) {
    let sched = NoiseSchedule::new(1000, ScheduleFamily::Cosine).unwrap();
    let world = MixtureWorld::random(8, 3, 2, &mut rng_for(2, streams::DATASET));
    let prompt = Prompt::from_concepts(&[world.vocabulary().id("class0").unwrap()]);
    let oracle = OracleDenoiser::new(world, sched.clone()).unwrap();
    let plan = StepPlan::new(&sched, 50, 0.0).unwrap();
    let mut g = c.benchmark_group("oracle_sampling_1024");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                map_indexed(exec, 1024, |i| {
                    sample(&oracle, &prompt, &plan, 3.0, &mut rng_for(i as u64, streams::SAMPLER), false)
                        .unwrap()
                        .0
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_sweep, bench_batch_loss, bench_monte_carlo);
criterion_main!(benches);
