//! Attribute classifiers and silhouette metrics for judging shapes outputs.
//!
//! Shape is predicted from rotation-invariant harmonics of the silhouette's
//! radial profile, texture from interior intensity statistics. Both heads are
//! softmax regressions fitted to the generated dataset.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::shapes::{ShapeKind, ShapesDataset, Texture, SILHOUETTE_THRESHOLD};
use crate::io::write_atomic;
use crate::par::{map_indexed, rng_for, streams, Execution};
use crate::sample::Sample;

const ANGLE_BINS: usize = 32;
const HARMONICS: usize = 9;
/// Interior pixels darker than this count as texture marks.
const DARK_LEVEL: f64 = 0.6;

fn side(s: &Sample) -> usize {
    let n = s.len();
    (n as f64).sqrt() as usize
}

/// Foreground mask of a single-channel square image.
pub fn silhouette(s: &Sample) -> Vec<bool> {
    s.data().iter().map(|&v| v > SILHOUETTE_THRESHOLD).collect()
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "mask sizes differ");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn silhouette_iou(a: &Sample, b: &Sample) -> f64 {
    iou(&silhouette(a), &silhouette(b))
}

/// Features describing the outline.
pub fn shape_features(s: &Sample) -> Vec<f64> {
    let n = side(s);
    let mask = silhouette(s);
    let area = mask.iter().filter(|&&m| m).count() as f64;
    let mut out = vec![0.0; HARMONICS + 4];
    if area < 3.0 {
        return out;
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for (k, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        cx += (k % n) as f64 + 0.5;
        cy += (k / n) as f64 + 0.5;
    }
    cx /= area;
    cy /= area;
    let r_eq = (area / PI).sqrt();
    let mut profile = [0.0f64; ANGLE_BINS];
    for (k, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let dx = (k % n) as f64 + 0.5 - cx;
        let dy = cy - ((k / n) as f64 + 0.5);
        let r = (dx * dx + dy * dy).sqrt() + 0.5;
        let bin = (((dy.atan2(dx) + PI) / (2.0 * PI)) * ANGLE_BINS as f64) as usize % ANGLE_BINS;
        profile[bin] = profile[bin].max(r / r_eq);
    }
    for (h, slot) in out.iter_mut().take(HARMONICS).enumerate() {
        let (mut re, mut im) = (0.0, 0.0);
        for (b, &r) in profile.iter().enumerate() {
            let a = 2.0 * PI * (h * b) as f64 / ANGLE_BINS as f64;
            re += r * a.cos();
            im += r * a.sin();
        }
        *slot = (re * re + im * im).sqrt() / ANGLE_BINS as f64;
    }
    let mean = profile.iter().sum::<f64>() / ANGLE_BINS as f64;
    let min = profile.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = profile.iter().cloned().fold(0.0, f64::max);
    let mut perimeter = 0.0;
    for i in 0..n {
        for j in 0..n {
            if mask[i * n + j] {
                let nb = [(i > 0).then(|| (i - 1) * n + j), (i + 1 < n).then(|| (i + 1) * n + j)];
                let nb2 = [(j > 0).then(|| i * n + j - 1), (j + 1 < n).then(|| i * n + j + 1)];
                for o in nb.iter().chain(&nb2) {
                    perimeter += o.map_or(1.0, |o| (!mask[o]) as u8 as f64);
                }
            }
        }
    }
    out[HARMONICS] = min / mean.max(1e-9);
    out[HARMONICS + 1] = max / mean.max(1e-9);
    out[HARMONICS + 2] = perimeter * perimeter / (4.0 * PI * area);
    out[HARMONICS + 3] = area / (n * n) as f64;
    out
}

/// Features describing the interior texture.
pub fn texture_features(s: &Sample) -> Vec<f64> {
    let n = side(s);
    let v = s.data();
    let mask = silhouette(s);
    // Erode by one pixel so anti-aliased edges do not read as texture.
    let interior: Vec<bool> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            mask[k]
                && i > 0
                && j > 0
                && i + 1 < n
                && j + 1 < n
                && mask[k - 1]
                && mask[k + 1]
                && mask[k - n]
                && mask[k + n]
        })
        .collect();
    let cnt = interior.iter().filter(|&&m| m).count() as f64;
    let mut out = vec![0.0; 11];
    if cnt < 4.0 {
        return out;
    }
    let vals: Vec<f64> = (0..n * n).filter(|&k| interior[k]).map(|k| v[k]).collect();
    let mean = vals.iter().sum::<f64>() / cnt;
    let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cnt;
    let dark = vals.iter().filter(|&&x| x < DARK_LEVEL).count() as f64 / cnt;
    // Mean absolute difference and normalized autocorrelation at a lag.
    let stat = |di: usize, dj: usize| -> (f64, f64) {
        let (mut d, mut c, mut m) = (0.0, 0.0, 0.0);
        for i in 0..n.saturating_sub(di) {
            for j in 0..n.saturating_sub(dj) {
                let (a, b) = (i * n + j, (i + di) * n + j + dj);
                if interior[a] && interior[b] {
                    d += (v[a] - v[b]).abs();
                    c += (v[a] - mean) * (v[b] - mean);
                    m += 1.0;
                }
            }
        }
        if m == 0.0 {
            (0.0, 0.0)
        } else {
            (d / m, c / m / var.max(1e-4))
        }
    };
    let (dy, _) = stat(1, 0);
    let (dx, _) = stat(0, 1);
    let (_, cy2) = stat(2, 0);
    let (_, cy4) = stat(4, 0);
    let (_, cx2) = stat(0, 2);
    let (_, cy5) = stat(5, 0);
    let (_, cx5) = stat(0, 5);
    out.copy_from_slice(&[mean, var.sqrt(), dark, dx, dy, dy - dx, cy2, cy4, cx2, cy5, cx5]);
    out
}

/// Standardized multinomial logistic regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Softmax {
    pub classes: Vec<String>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `classes x (features + 1)`, bias last.
    pub weights: Vec<f64>,
}

impl Softmax {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let z: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let logits: Vec<f64> = (0..self.classes.len())
            .map(|c| {
                let w = &self.weights[c * (d + 1)..(c + 1) * (d + 1)];
                w[d] + w[..d].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.probabilities(x);
        (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best })
    }

    /// Full-batch gradient descent on the L2-regularized cross-entropy.
    pub fn fit(classes: Vec<String>, xs: &[Vec<f64>], ys: &[usize], iters: usize, l2: f64) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() || ys.iter().any(|&y| y >= classes.len()) {
            return Err(Error::config("classifier needs labelled feature vectors"));
        }
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
                v.sqrt().max(1e-6)
            })
            .collect();
        let k = classes.len();
        let mut model = Self {
            classes,
            mean,
            scale,
            weights: vec![0.0; k * (d + 1)],
        };
        let lr = 0.5;
        for _ in 0..iters {
            let mut g = vec![0.0; k * (d + 1)];
            for (x, &y) in xs.iter().zip(ys) {
                let p = model.probabilities(x);
                for c in 0..k {
                    let r = p[c] - (c == y) as u8 as f64;
                    let row = &mut g[c * (d + 1)..(c + 1) * (d + 1)];
                    for j in 0..d {
                        row[j] += r * (x[j] - model.mean[j]) / model.scale[j];
                    }
                    row[d] += r;
                }
            }
            for (w, gi) in model.weights.iter_mut().zip(&g) {
                *w -= lr * (gi / n + l2 * *w);
            }
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub shape: ShapeKind,
    pub texture: Texture,
    pub shape_probs: Vec<f64>,
    pub texture_probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeClassifier {
    pub shape: Softmax,
    pub texture: Softmax,
}

/// Additive noise plus an optional light blur, so the heads tolerate the
/// imperfections of generated images.
fn augment<R: Rng + ?Sized>(s: &Sample, rng: &mut R) -> Sample {
    let n = side(s);
    let mut v = s.data().to_vec();
    if rng.gen_bool(0.5) {
        let src = v.clone();
        let w = rng.gen_range(0.05..0.2);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for (di, dj) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    if a >= 0 && b >= 0 && (a as usize) < n && (b as usize) < n {
                        acc += src[a as usize * n + b as usize];
                        cnt += 1.0;
                    }
                }
                v[i * n + j] = (1.0 - w) * src[i * n + j] + w * acc / cnt;
            }
        }
    }
    let sd = rng.gen_range(0.0..0.15);
    let noise = Sample::randn(s.shape(), rng);
    for (x, e) in v.iter_mut().zip(noise.data()) {
        *x = (*x + sd * e).clamp(-1.0, 1.0);
    }
    Sample::new(s.shape().to_vec(), v).expect("same shape")
}

impl AttributeClassifier {
    /// Fits both heads on `data` (each image once clean and once augmented).
    pub fn train(data: &ShapesDataset, seed: u64, exec: Execution) -> Result<Self> {
        let n = data.len();
        let feats = map_indexed(exec, 2 * n, |k| {
            let img = &data.images[k % n];
            let s = if k < n {
                img.clone()
            } else {
                augment(img, &mut rng_for(seed, (streams::EVAL << 40) | k as u64))
            };
            (shape_features(&s), texture_features(&s))
        });
        let shape_y: Vec<usize> = (0..2 * n)
            .map(|k| ShapeKind::ALL.iter().position(|&s| s == data.params[k % n].shape).unwrap())
            .collect();
        let tex_y: Vec<usize> = (0..2 * n)
            .map(|k| Texture::ALL.iter().position(|&t| t == data.params[k % n].texture).unwrap())
            .collect();
        let (sx, tx): (Vec<_>, Vec<_>) = feats.into_iter().unzip();
        Ok(Self {
            shape: Softmax::fit(
                ShapeKind::ALL.iter().map(|s| s.name().to_string()).collect(),
                &sx,
                &shape_y,
                400,
                1e-4,
            )?,
            texture: Softmax::fit(
                Texture::ALL.iter().map(|t| t.name().to_string()).collect(),
                &tx,
                &tex_y,
                400,
                1e-4,
            )?,
        })
    }

    pub fn predict(&self, s: &Sample) -> Prediction {
        let shape_probs = self.shape.probabilities(&shape_features(s));
        let texture_probs = self.texture.probabilities(&texture_features(s));
        let arg = |p: &[f64]| (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        Prediction {
            shape: ShapeKind::ALL[arg(&shape_probs)],
            texture: Texture::ALL[arg(&texture_probs)],
            shape_probs,
            texture_probs,
        }
    }

    /// `(shape accuracy, texture accuracy)` on a dataset.
    pub fn accuracy(&self, data: &ShapesDataset, exec: Execution) -> (f64, f64) {
        let hits = map_indexed(exec, data.len(), |i| {
            let p = self.predict(&data.images[i]);
            (p.shape == data.params[i].shape, p.texture == data.params[i].texture)
        });
        let n = data.len() as f64;
        (
            hits.iter().filter(|h| h.0).count() as f64 / n,
            hits.iter().filter(|h| h.1).count() as f64 / n,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::malformed(path, e.to_string()))
    }
}
