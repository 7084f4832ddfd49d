//! Exact-score world: class-conditional isotropic Gaussian mixtures.
//!
//! Diffusing a mixture component `N(mu, v I)` to step `t` gives
//! `N(alpha_t mu, (alpha_t^2 v + sigma_t^2) I)`, so the noisy density, its
//! score and the clean-sample posterior mean are all available in closed form.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_eps_inputs, Denoiser};
use crate::prompt::{Prompt, Vocabulary};
use crate::sample::Sample;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub variance: f64,
    pub class: usize,
    pub weight: f64,
}

/// World description document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureWorld {
    pub dimension: usize,
    /// Class id -> prompt word.
    pub classes: Vec<String>,
    pub components: Vec<Component>,
}

impl MixtureWorld {
    pub fn new(dimension: usize, classes: Vec<String>, components: Vec<Component>) -> Result<Self> {
        let w = Self {
            dimension,
            classes,
            components,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::config("world dimension must be positive"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("world has no classes"));
        }
        Vocabulary::new(&self.classes)?;
        let mut totals = vec![0.0; self.classes.len()];
        for (i, c) in self.components.iter().enumerate() {
            if c.mean.len() != self.dimension {
                return Err(Error::config(format!(
                    "component {i} mean has {} entries, world dimension is {}",
                    c.mean.len(),
                    self.dimension
                )));
            }
            if !(c.variance > 0.0) || !c.variance.is_finite() {
                return Err(Error::config(format!("component {i} variance must be > 0")));
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::config(format!("component {i} weight must be > 0")));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::config(format!("component {i} mean is not finite")));
            }
            *totals
                .get_mut(c.class)
                .ok_or_else(|| Error::config(format!("component {i} has unknown class {}", c.class)))? +=
                c.weight;
        }
        for (k, total) in totals.iter().enumerate() {
            if *total == 0.0 {
                return Err(Error::config(format!("class {k} has no components")));
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "weights of class {k} sum to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w: Self =
            serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
        w.validate()?;
        Ok(w)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(&self.classes).expect("validated class names")
    }

    /// Random world with `per_class` unit-weight-normalized components per class.
    pub fn random<R: Rng + ?Sized>(
        dimension: usize,
        n_classes: usize,
        per_class: usize,
        rng: &mut R,
    ) -> Self {
        let classes = (0..n_classes).map(|i| format!("class{i}")).collect();
        let mut components = Vec::new();
        for class in 0..n_classes {
            let raw: Vec<f64> = (0..per_class).map(|_| rng.gen_range(0.5..1.5)).collect();
            let total: f64 = raw.iter().sum();
            for w in raw {
                components.push(Component {
                    mean: (0..dimension).map(|_| rng.gen_range(-1.5..1.5)).collect(),
                    variance: rng.gen_range(0.02..0.3),
                    class,
                    weight: w / total,
                });
            }
        }
        Self {
            dimension,
            classes,
            components,
        }
    }

    /// Two classes, one Gaussian each, at `+-separation/2` along the first axis.
    pub fn two_class(dimension: usize, separation: f64, variance: f64) -> Self {
        let mut a = vec![0.0; dimension];
        let mut b = vec![0.0; dimension];
        a[0] = -separation / 2.0;
        b[0] = separation / 2.0;
        Self {
            dimension,
            classes: vec!["a".into(), "b".into()],
            components: vec![
                Component {
                    mean: a,
                    variance,
                    class: 0,
                    weight: 1.0,
                },
                Component {
                    mean: b,
                    variance,
                    class: 1,
                    weight: 1.0,
                },
            ],
        }
    }

    /// Class designated by a prompt: `None` for the null prompt.
    pub fn class_of(&self, prompt: &Prompt) -> Result<Option<usize>> {
        if prompt.is_null() {
            return Ok(None);
        }
        let vocab = self.vocabulary();
        let mut concepts = prompt.concepts();
        let (_, token) = concepts
            .next()
            .ok_or_else(|| Error::InvalidPrompt("prompt names no class".into()))?;
        if concepts.next().is_some() {
            return Err(Error::InvalidPrompt(
                "oracle prompts must name exactly one class".into(),
            ));
        }
        let word = vocab
            .word(token)
            .ok_or_else(|| Error::UnknownWord(format!("#{token}")))?;
        let class = self
            .classes
            .iter()
            .position(|c| c == word)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))?;
        Ok(Some(class))
    }

    /// `(log prior weight, component)` pairs of the (class-)conditional mixture.
    fn active(&self, class: Option<usize>) -> Vec<(f64, &Component)> {
        let n_classes = self.classes.len() as f64;
        self.components
            .iter()
            .filter(|c| class.map_or(true, |k| c.class == k))
            .map(|c| {
                let w = if class.is_some() { c.weight } else { c.weight / n_classes };
                (w.ln(), c)
            })
            .collect()
    }

    /// Per-component log joint `log w_i + log N(x; alpha mu_i, s_i I)` and `s_i`.
    fn component_terms(
        &self,
        sched: &NoiseSchedule,
        x: &[f64],
        t: usize,
        class: Option<usize>,
    ) -> Vec<(f64, f64, &Component)> {
        let a = sched.alpha(t);
        let s2 = sched.sigma2(t);
        let d = self.dimension as f64;
        self.active(class)
            .into_iter()
            .map(|(log_w, c)| {
                let s = a * a * c.variance + s2;
                let dist2: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(xi, mi)| (xi - a * mi).powi(2))
                    .sum();
                let log_n = -0.5 * d * (2.0 * std::f64::consts::PI * s).ln() - 0.5 * dist2 / s;
                (log_w + log_n, s, c)
            })
            .collect()
    }

    fn check_point(&self, x: &Sample) -> Result<()> {
        if x.len() != self.dimension {
            return Err(Error::ShapeMismatch {
                expected: vec![self.dimension],
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `log q_t(x | class)`.
    pub fn log_density(
        &self,
        sched: &NoiseSchedule,
        x: &Sample,
        t: usize,
        prompt: &Prompt,
    ) -> Result<f64> {
        self.check_point(x)?;
        let class = self.class_of(prompt)?;
        let terms = self.component_terms(sched, x.data(), t, class);
        Ok(log_sum_exp(terms.iter().map(|(l, _, _)| *l)))
    }

    /// `-sigma_t * grad log q_t(x_t | class)`.
    pub fn oracle_eps(
        &self,
        sched: &NoiseSchedule,
        x_t: &Sample,
        t: usize,
        prompt: &Prompt,
    ) -> Result<Sample> {
        self.check_point(x_t)?;
        let class = self.class_of(prompt)?;
        let a = sched.alpha(t);
        let sigma = sched.sigma(t);
        let terms = self.component_terms(sched, x_t.data(), t, class);
        let resp = responsibilities(&terms);
        let mut eps = Sample::zeros(x_t.shape());
        for ((_, s, c), r) in terms.iter().zip(&resp) {
            for ((e, xi), mi) in eps.data_mut().iter_mut().zip(x_t.data()).zip(&c.mean) {
                *e += r * (xi - a * mi) / s;
            }
        }
        Ok(eps.map(|v| sigma * v))
    }

    /// `E[x_0 | x_t, class]` by component-wise Gaussian conditioning.
    pub fn posterior_mean_x0(
        &self,
        sched: &NoiseSchedule,
        x_t: &Sample,
        t: usize,
        prompt: &Prompt,
    ) -> Result<Sample> {
        self.check_point(x_t)?;
        let class = self.class_of(prompt)?;
        let a = sched.alpha(t);
        let terms = self.component_terms(sched, x_t.data(), t, class);
        let resp = responsibilities(&terms);
        let mut out = Sample::zeros(x_t.shape());
        for ((_, s, c), r) in terms.iter().zip(&resp) {
            let gain = a * c.variance / s;
            for ((o, xi), mi) in out.data_mut().iter_mut().zip(x_t.data()).zip(&c.mean) {
                *o += r * (mi + gain * (xi - a * mi));
            }
        }
        Ok(out)
    }

    /// Exact draw from the clean (class-)conditional distribution.
    pub fn sample_x0<R: Rng + ?Sized>(&self, class: Option<usize>, rng: &mut R) -> Sample {
        let active = self.active(class);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = active[active.len() - 1].1;
        for (log_w, c) in &active {
            acc += log_w.exp();
            if u < acc {
                chosen = c;
                break;
            }
        }
        let sd = chosen.variance.sqrt();
        Sample::from_vec(
            chosen
                .mean
                .iter()
                .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }

    /// Most likely class of a clean point.
    pub fn classify(&self, sched: &NoiseSchedule, x: &Sample) -> usize {
        (0..self.classes.len())
            .map(|k| {
                let terms = self.component_terms(sched, x.data(), 0, Some(k));
                (k, log_sum_exp(terms.iter().map(|(l, _, _)| *l)))
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0
    }

    /// Mixture mean of a class (or of the null marginal).
    pub fn class_mean(&self, class: Option<usize>) -> Vec<f64> {
        let mut m = vec![0.0; self.dimension];
        for (log_w, c) in self.active(class) {
            let w = log_w.exp();
            for (mi, ci) in m.iter_mut().zip(&c.mean) {
                *mi += w * ci;
            }
        }
        m
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn responsibilities(terms: &[(f64, f64, &Component)]) -> Vec<f64> {
    let lse = log_sum_exp(terms.iter().map(|(l, _, _)| *l));
    terms.iter().map(|(l, _, _)| (l - lse).exp()).collect()
}

/// A mixture world paired with a schedule, usable anywhere a trained model is.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    world: MixtureWorld,
    schedule: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(world: MixtureWorld, schedule: NoiseSchedule) -> Result<Self> {
        world.validate()?;
        Ok(Self { world, schedule })
    }

    pub fn world(&self) -> &MixtureWorld {
        &self.world
    }

    pub fn posterior_mean_x0(&self, x_t: &Sample, t: usize, prompt: &Prompt) -> Result<Sample> {
        self.world.posterior_mean_x0(&self.schedule, x_t, t, prompt)
    }
}

impl Denoiser for OracleDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![self.world.dimension]
    }

    fn predict_eps(&self, x_t: &Sample, t: usize, prompt: &Prompt) -> Result<Sample> {
        check_eps_inputs(self, x_t, t)?;
        self.world.oracle_eps(&self.schedule, x_t, t, prompt)
    }
}

/// Worst disagreement between the closed-form score and a finite-difference
/// gradient of the log density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCheck {
    pub dimension: usize,
    pub probes: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

/// Compares `-oracle_eps / sigma_t` with a five-point central difference of
/// `log q_t` at `probes` points drawn from the diffused world, at random
/// steps and prompts (null included). The relative error of a probe is
/// `|score - fd| / max(|score|, 1)` in the Euclidean norm.
pub fn score_fd_check(
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<ScoreCheck> {
    let mut rng = crate::par::rng_for(seed, crate::par::streams::EVAL);
    let vocab = world.vocabulary();
    let mut max_rel: f64 = 0.0;
    let mut total = 0.0;
    for _ in 0..probes {
        let t = rng.gen_range(1..=sched.steps());
        let class = rng.gen_range(0..=world.classes.len());
        let (prompt, class) = if class == world.classes.len() {
            (Prompt::null(), None)
        } else {
            (Prompt::from_concepts(&[vocab.id(&world.classes[class]).expect("class word")]), Some(class))
        };
        let x0 = world.sample_x0(class, &mut rng);
        let eps = Sample::randn(&[world.dimension], &mut rng);
        let x = sched.forward_diffuse(&x0, t, &eps)?;
        let sigma = sched.sigma(t);
        let score: Vec<f64> = world.oracle_eps(sched, &x, t, &prompt)?.data().iter().map(|e| -e / sigma).collect();
        let mut err2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..world.dimension {
            let at = |d: f64| -> Result<f64> {
                let mut y = x.clone();
                y.data_mut()[i] += d;
                world.log_density(sched, &y, t, &prompt)
            };
            let fd = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            err2 += (score[i] - fd).powi(2);
            norm2 += score[i] * score[i];
        }
        let rel = err2.sqrt() / norm2.sqrt().max(1.0);
        if !rel.is_finite() {
            return Err(Error::NonFinite(format!("score check at step {t}")));
        }
        max_rel = max_rel.max(rel);
        total += rel;
    }
    Ok(ScoreCheck {
        dimension: world.dimension,
        probes,
        max_rel_error: max_rel,
        mean_rel_error: total / probes.max(1) as f64,
    })
}
