//! DDIM with an exact noise predictor on Gaussian data is an affine map of
//! the starting noise, so its output moments follow in closed form.

use magicmix_core::oracle::{Component, MixtureWorld, OracleDenoiser};
use magicmix_core::par::{rng_for, streams};
use magicmix_core::sampler::{sample_from, StepPlan};
use magicmix_core::{NoiseSchedule, Prompt, Sample, ScheduleFamily};

/// Per-step gain on the state and on `mu`, composed over the plan.
fn affine_map(sched: &NoiseSchedule, plan: &StepPlan, v: f64) -> (f64, f64) {
    let mut idx = plan.indices().to_vec();
    idx.push(0);
    let (mut gain, mut offset) = (1.0, 0.0);
    for w in idx.windows(2) {
        let (t, s) = (w[0], w[1]);
        let (at, st) = (sched.alpha(t), sched.sigma(t));
        let (a_s, s_s) = (sched.alpha(s), sched.sigma(s));
        let g = at * v / (at * at * v + st * st);
        let cx = a_s * g + s_s / st * (1.0 - at * g);
        let c0 = (1.0 - g * at) * (a_s - s_s * at / st);
        gain *= cx;
        offset = cx * offset + c0;
    }
    (gain, offset)
}

fn gaussian(mean: Vec<f64>, variance: f64) -> (OracleDenoiser, Prompt, NoiseSchedule) {
    let world = MixtureWorld::new(
        mean.len(),
        vec!["g".into()],
        vec![Component {
            mean,
            variance,
            class: 0,
            weight: 1.0,
        }],
    )
    .unwrap();
    let prompt = Prompt::from_concepts(&[world.vocabulary().id("g").unwrap()]);
    let sched = NoiseSchedule::new(1000, ScheduleFamily::Cosine).unwrap();
    (OracleDenoiser::new(world, sched.clone()).unwrap(), prompt, sched)
}

#[test]
fn sampler_matches_the_closed_form_affine_map() {
    let mu = vec![0.7, -1.2, 0.3];
    let v = 0.25;
    let (oracle, prompt, sched) = gaussian(mu.clone(), v);
    for n in [10, 50, 200] {
        let plan = StepPlan::new(&sched, n, 0.0).unwrap();
        let (gain, offset) = affine_map(&sched, &plan, v);
        let start = Sample::randn(&[3], &mut rng_for(n as u64, streams::EVAL));
        let mut rng = rng_for(0, streams::SAMPLER);
        let (out, _) = sample_from(&oracle, start.clone(), plan.start(), &prompt, &plan, 1.0, &mut rng, false).unwrap();
        for ((o, x), m) in out.data().iter().zip(start.data()).zip(&mu) {
            let want = gain * x + offset * m;
            assert!((o - want).abs() < 1e-9, "n={n}: {o} vs {want}");
        }
    }
}

#[test]
fn variance_bias_shrinks_with_more_steps() {
    let sched = NoiseSchedule::new(1000, ScheduleFamily::Cosine).unwrap();
    let v = 0.25;
    let bias = |n: usize| {
        let plan = StepPlan::new(&sched, n, 0.0).unwrap();
        let (gain, _) = affine_map(&sched, &plan, v);
        (gain * gain - v) / v
    };
    let (b50, b200, b1000) = (bias(50), bias(200), bias(1000));
    assert!(b50 < -0.02, "{b50}");
    assert!(b200.abs() < b50.abs() && b1000.abs() < b200.abs());
    assert!(b1000.abs() < 0.005, "{b1000}");
}
