//! Denoiser training with the unweighted epsilon-MSE objective.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{ModelCheckpoint, OptimizerState, TrainingMeta};
use crate::model::unet::{UNet, UNetLayout};
use crate::model::{Denoiser, ForwardOptions};
use crate::nn::{Feat, Scalar};
use crate::par::{map_indexed, rng_for, streams, Execution};
use crate::prompt::{Prompt, Vocabulary};
use crate::sample::Sample;
use crate::schedule::{NoiseSchedule, ScheduleDescriptor, ScheduleFamily};

/// Samples per gradient chunk. Chunks are reduced in index order, so the
/// summed gradient does not depend on the worker count.
const CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: ScheduleDescriptor,
    /// Probability of replacing the whole prompt with NULL.
    pub null_prob: f64,
    /// Independent per-concept drop probability applied to non-NULL prompts.
    pub attribute_drop_prob: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub ema_decay: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 32,
            learning_rate: 2e-4,
            schedule: ScheduleDescriptor {
                family: ScheduleFamily::Cosine,
                steps: 1000,
            },
            null_prob: 0.1,
            attribute_drop_prob: 0.2,
            seed: 0,
            checkpoint_every: 500,
            log_every: 10,
            ema_decay: Some(0.999),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..1.0).contains(&p);
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::config("steps, batch_size and log_every must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !prob(self.null_prob) || !prob(self.attribute_drop_prob) {
            return Err(Error::config("dropout probabilities must lie in [0, 1)"));
        }
        if let Some(d) = self.ema_decay {
            if !prob(d) {
                return Err(Error::config("ema_decay must lie in [0, 1)"));
            }
        }
        if !prob(self.adam_beta1) || !prob(self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::config("invalid Adam hyper-parameters"));
        }
        if self.schedule.steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        Ok(())
    }
}

/// Images with their conditioning prompts.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub vocabulary: Vocabulary,
    pub images: Vec<Sample>,
    pub prompts: Vec<Prompt>,
}

impl TrainingSet {
    pub fn new(vocabulary: Vocabulary, images: Vec<Sample>, prompts: Vec<Prompt>) -> Result<Self> {
        if images.is_empty() || images.len() != prompts.len() {
            return Err(Error::config(format!(
                "training set needs matching non-empty image/prompt lists (got {} and {})",
                images.len(),
                prompts.len()
            )));
        }
        for p in &prompts {
            if let Some(t) = p.tokens().iter().find(|t| !vocabulary.contains(**t)) {
                return Err(Error::InvalidPrompt(format!("token id {t} not in vocabulary")));
            }
        }
        let shape = images[0].shape();
        if let Some(bad) = images.iter().find(|s| s.shape() != shape) {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: bad.shape().to_vec(),
            });
        }
        Ok(Self {
            vocabulary,
            images,
            prompts,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One `(x0, t, eps, prompt)` training example.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub x0: Sample,
    pub t: usize,
    pub eps: Sample,
    pub prompt: Prompt,
}

impl TrainItem {
    pub fn noisy(&self, sched: &NoiseSchedule) -> Result<Sample> {
        sched.forward_diffuse(&self.x0, self.t, &self.eps)
    }
}

/// Applies NULL replacement and per-concept dropout.
pub fn drop_prompt<R: Rng + ?Sized>(prompt: &Prompt, cfg: &TrainConfig, rng: &mut R) -> Prompt {
    if prompt.is_null() || rng.gen::<f64>() < cfg.null_prob {
        return Prompt::null();
    }
    let kept: Vec<u32> = prompt
        .concepts()
        .map(|(_, tok)| tok)
        .filter(|_| rng.gen::<f64>() >= cfg.attribute_drop_prob)
        .collect();
    Prompt::from_concepts(&kept)
}

/// The minibatch for optimizer step `step`, drawn from its own rng stream.
pub fn draw_batch(data: &TrainingSet, sched: &NoiseSchedule, cfg: &TrainConfig, step: u64) -> Vec<TrainItem> {
    let mut rng = rng_for(cfg.seed, streams::TRAIN_BASE + step);
    (0..cfg.batch_size)
        .map(|_| {
            let i = rng.gen_range(0..data.len());
            let t = rng.gen_range(1..=sched.steps());
            let x0 = data.images[i].clone();
            let eps = Sample::randn(x0.shape(), &mut rng);
            let prompt = drop_prompt(&data.prompts[i], cfg, &mut rng);
            TrainItem { x0, t, eps, prompt }
        })
        .collect()
}

/// Mean over the batch of `||eps - eps_theta(x_t, t, y)||^2` and its gradient.
pub fn unet_loss_and_grad<T: Scalar>(
    layout: &UNetLayout,
    params: &[T],
    sched: &NoiseSchedule,
    batch: &[TrainItem],
    exec: Execution,
) -> Result<(f64, Vec<T>)> {
    let n = layout.num_params();
    let inv_b = 1.0 / batch.len() as f64;
    let chunks = batch.len().div_ceil(CHUNK);
    let parts = map_indexed(exec, chunks, |c| -> Result<(f64, Vec<T>)> {
        let mut g = vec![T::zero(); n];
        let mut loss = 0.0;
        for item in &batch[c * CHUNK..((c + 1) * CHUNK).min(batch.len())] {
            let x_t = item.noisy(sched)?;
            let x = layout.input_feat::<T>(&x_t);
            let scales: Vec<T> = item.prompt.scales().iter().map(|&s| T::from_f64(s)).collect();
            let (out, cache) =
                layout.forward(params, &x, item.t, item.prompt.tokens(), &scales, &ForwardOptions::default());
            let mut dout = Feat::zeros(out.c, out.h, out.w);
            let mut l = 0.0;
            for ((d, &o), &e) in dout.data.iter_mut().zip(&out.data).zip(item.eps.data()) {
                let r = o.to_f64() - e;
                l += r * r;
                *d = T::from_f64(2.0 * r * inv_b);
            }
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("loss at t={} for prompt {:?}", item.t, item.prompt.tokens())));
            }
            loss += l * inv_b;
            layout.backward(params, &mut g, cache, &dout);
        }
        Ok((loss, g))
    });
    let mut total = vec![T::zero(); n];
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in total.iter_mut().zip(g) {
            *a = *a + b;
        }
    }
    Ok((loss, total))
}

/// Anything with an f64 loss and analytic gradient over a flat parameter vector.
pub trait GradModel {
    fn num_params(&self) -> usize;
    fn loss_and_grad(&self, params: &[f64], batch: &[TrainItem]) -> Result<(f64, Vec<f64>)>;
}

/// U-Net under the training loss, evaluated in f64.
pub struct UNetProbe<'a> {
    pub layout: &'a UNetLayout,
    pub schedule: &'a NoiseSchedule,
}

impl GradModel for UNetProbe<'_> {
    fn num_params(&self) -> usize {
        self.layout.num_params()
    }

    fn loss_and_grad(&self, params: &[f64], batch: &[TrainItem]) -> Result<(f64, Vec<f64>)> {
        unet_loss_and_grad(self.layout, params, self.schedule, batch, Execution::Sequential)
    }
}

/// `eps_hat = W x_t + b + sum_j u[token_j]`, an affine predictor whose
/// training loss is exactly quadratic in its parameters.
pub struct LinearHead {
    pub dim: usize,
    pub vocab_size: usize,
    pub schedule: NoiseSchedule,
}

impl LinearHead {
    fn predict(&self, p: &[f64], x: &[f64], tokens: &[u32]) -> Vec<f64> {
        let d = self.dim;
        let (w, rest) = p.split_at(d * d);
        let (b, u) = rest.split_at(d);
        (0..d)
            .map(|i| {
                let mut v = b[i] + (0..d).map(|j| w[i * d + j] * x[j]).sum::<f64>();
                for &tok in tokens {
                    v += u[tok as usize * d + i];
                }
                v
            })
            .collect()
    }
}

impl GradModel for LinearHead {
    fn num_params(&self) -> usize {
        self.dim * self.dim + self.dim + self.vocab_size * self.dim
    }

    fn loss_and_grad(&self, params: &[f64], batch: &[TrainItem]) -> Result<(f64, Vec<f64>)> {
        let d = self.dim;
        let inv_b = 1.0 / batch.len() as f64;
        let mut g = vec![0.0; self.num_params()];
        let mut loss = 0.0;
        for item in batch {
            let x = item.noisy(&self.schedule)?;
            let out = self.predict(params, x.data(), item.prompt.tokens());
            for i in 0..d {
                let r = out[i] - item.eps.data()[i];
                loss += r * r * inv_b;
                let dr = 2.0 * r * inv_b;
                for j in 0..d {
                    g[i * d + j] += dr * x.data()[j];
                }
                g[d * d + i] += dr;
                for &tok in item.prompt.tokens() {
                    g[d * d + d + tok as usize * d + i] += dr;
                }
            }
        }
        Ok((loss, g))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Fraction of checked coordinates with relative error at most `tolerance`.
    pub fraction_within: f64,
    pub tolerance: f64,
    pub gradient_finite: bool,
}

/// Compares analytic gradients with central differences on `coords` randomly
/// chosen parameters. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_diff_gradcheck(
    model: &dyn GradModel,
    params: &[f64],
    batch: &[TrainItem],
    coords: usize,
    h: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheck> {
    const FLOOR: f64 = 1e-7;
    let (_, grad) = model.loss_and_grad(params, batch)?;
    let gradient_finite = grad.iter().all(|g| g.is_finite());
    let mut rng = rng_for(seed, streams::EVAL);
    let mut p = params.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut within = 0;
    let n = coords.min(params.len());
    let mut chosen: Vec<usize> = if n == params.len() {
        (0..n).collect()
    } else {
        rand::seq::index::sample(&mut rng, params.len(), n).into_vec()
    };
    chosen.sort_unstable();
    for &i in &chosen {
        let orig = p[i];
        p[i] = orig + h;
        let (lp, _) = model.loss_and_grad(&p, batch)?;
        p[i] = orig - h;
        let (lm, _) = model.loss_and_grad(&p, batch)?;
        p[i] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(FLOOR);
        max_rel = max_rel.max(rel);
        if rel <= tolerance {
            within += 1;
        }
    }
    Ok(GradCheck {
        checked: n,
        max_rel_error: max_rel,
        fraction_within: within as f64 / n.max(1) as f64,
        tolerance,
        gradient_finite,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self::with_state(
            cfg,
            OptimizerState {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        )
    }

    pub fn with_state(cfg: &TrainConfig, state: OptimizerState) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            state,
        }
    }

    pub fn update(&mut self, params: &mut [f32], grad: &[f32]) {
        let s = &mut self.state;
        s.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(s.step as i32);
        let c2 = 1.0 - self.beta2.powi(s.step as i32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut s.m).zip(&mut s.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

impl LogRecord {
    pub const HEADER: &'static str = "step\tloss\tlr\twall_time_s";

    pub fn to_line(&self) -> String {
        format!("{}\t{:.9e}\t{:e}\t{:.3}", self.step, self.loss, self.lr, self.wall_time_s)
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let mut it = line.split('\t');
        let rec = Self {
            step: it.next()?.parse().ok()?,
            loss: it.next()?.parse().ok()?,
            lr: it.next()?.parse().ok()?,
            wall_time_s: it.next()?.parse().ok()?,
        };
        it.next().is_none().then_some(rec)
    }
}

/// Reads a training log written by [`Trainer::run`].
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.is_empty() && *l != LogRecord::HEADER)
        .map(|l| LogRecord::parse_line(l).ok_or_else(|| Error::malformed(path, format!("bad log line `{l}`"))))
        .collect()
}

/// Mutable training state: weights, optimizer moments and the EMA copy.
pub struct Trainer {
    cfg: TrainConfig,
    layout: UNetLayout,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
    params: Vec<f32>,
    ema: Option<Vec<f32>>,
    adam: Adam,
    last_loss: f64,
}

impl Trainer {
    pub fn new(model: UNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.schedule().descriptor() != cfg.schedule {
            return Err(Error::config("model schedule differs from the training schedule"));
        }
        let n = model.params().len();
        let ema = cfg.ema_decay.map(|_| model.params().to_vec());
        Ok(Self {
            adam: Adam::new(n, &cfg),
            layout: model.layout().clone(),
            schedule: model.schedule().clone(),
            vocab: model.vocabulary().clone(),
            params: model.params().to_vec(),
            ema,
            cfg,
            last_loss: f64::NAN,
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: &ModelCheckpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::config("checkpoint has no optimizer state to resume from"))?;
        if ckpt.schedule != cfg.schedule {
            return Err(Error::config("checkpoint schedule differs from the training schedule"));
        }
        if cfg.ema_decay.is_some() != ckpt.ema.is_some() {
            return Err(Error::config("EMA setting differs from the checkpoint"));
        }
        Ok(Self {
            layout: UNetLayout::new(&ckpt.config)?,
            schedule: NoiseSchedule::from_descriptor(ckpt.schedule)?,
            vocab: ckpt.vocabulary.clone(),
            params: ckpt.weights.clone(),
            ema: ckpt.ema.clone(),
            adam: Adam::with_state(&cfg, opt),
            cfg,
            last_loss: ckpt.training.loss,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.state.step
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimizer update; returns the batch loss before the update.
    pub fn step(&mut self, data: &TrainingSet, exec: Execution) -> Result<f64> {
        if data.vocabulary != self.vocab {
            return Err(Error::config("training set vocabulary differs from the model vocabulary"));
        }
        let step = self.step_count();
        let batch = draw_batch(data, &self.schedule, &self.cfg, step);
        let (loss, grad) = unet_loss_and_grad(&self.layout, &self.params, &self.schedule, &batch, exec)
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("step {step}: {what}")),
                other => other,
            })?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("step {step}: loss {loss} or its gradient is not finite")));
        }
        self.adam.update(&mut self.params, &grad);
        if let (Some(ema), Some(decay)) = (&mut self.ema, self.cfg.ema_decay) {
            let n = self.adam.state.step as f64;
            let d = decay.min((1.0 + n) / (10.0 + n)) as f32;
            for (e, &p) in ema.iter_mut().zip(&self.params) {
                *e = d * *e + (1.0 - d) * p;
            }
        }
        self.last_loss = loss;
        Ok(loss)
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            config: self.layout.config().clone(),
            schedule: self.schedule.descriptor(),
            vocabulary: self.vocab.clone(),
            training: TrainingMeta {
                steps: self.step_count(),
                loss: self.last_loss,
                config: serde_json::to_value(&self.cfg).ok(),
            },
            weights: self.params.clone(),
            ema: self.ema.clone(),
            optimizer: Some(self.adam.state.clone()),
        }
    }

    /// Trains until `cfg.steps`, appending to `out/train_log.tsv` and writing
    /// periodic `out/step-NNNNNN.ckpt` files plus a final `out/model.ckpt`.
    pub fn run(&mut self, data: &TrainingSet, exec: Execution, out: Option<&Path>) -> Result<Vec<LogRecord>> {
        let start = Instant::now();
        let mut log_file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.tsv");
                let fresh = !path.exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                if fresh {
                    writeln!(f, "{}", LogRecord::HEADER).map_err(|e| Error::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.step_count() < self.cfg.steps {
            let loss = self.step(data, exec)?;
            let step = self.step_count();
            if step % self.cfg.log_every == 0 || step == self.cfg.steps || step == 1 {
                let rec = LogRecord {
                    step,
                    loss,
                    lr: self.cfg.learning_rate,
                    wall_time_s: start.elapsed().as_secs_f64(),
                };
                log::info!("step {step} loss {loss:.5}");
                if let Some((f, path)) = &mut log_file {
                    writeln!(f, "{}", rec.to_line()).map_err(|e| Error::io(path.as_path(), e))?;
                }
                records.push(rec);
            }
            if let Some(dir) = out {
                if self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every == 0 {
                    self.checkpoint().save(&checkpoint_path(dir, step))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("model.ckpt"))?;
        }
        Ok(records)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

/// Fresh model plus a full training run.
pub fn train(
    data: &TrainingSet,
    model: UNet,
    cfg: TrainConfig,
    exec: Execution,
    out: Option<&Path>,
) -> Result<(ModelCheckpoint, Vec<LogRecord>)> {
    if data.vocabulary != *model.vocabulary() {
        return Err(Error::config("training set vocabulary differs from the model vocabulary"));
    }
    let mut trainer = Trainer::new(model, cfg)?;
    let log = trainer.run(data, exec, out)?;
    Ok((trainer.checkpoint(), log))
}

/// Mean loss over `batches` fresh batches drawn from the evaluation stream.
pub fn evaluate_loss(model: &UNet, data: &TrainingSet, batch_size: usize, seed: u64, exec: Execution) -> Result<f64> {
    let cfg = TrainConfig {
        batch_size,
        seed,
        null_prob: 0.0,
        attribute_drop_prob: 0.0,
        ..TrainConfig::default()
    };
    let batch = draw_batch(data, model.schedule(), &cfg, streams::EVAL);
    let losses = map_indexed(exec, batch.len(), |i| -> Result<f64> {
        let item = &batch[i];
        let eps = model.predict_eps(&item.noisy(model.schedule())?, item.t, &item.prompt)?;
        Ok(eps.squared_distance(&item.eps))
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / batch.len() as f64)
}
