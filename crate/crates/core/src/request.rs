//! The mixing request document shared by the command line and the job
//! service: a [`MixConfig`], a layout source and a content prompt.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::image::{decode_png, import_png};
use crate::io::shapes::ShapesDataset;
use crate::magicmix::{mix_image_text, mix_text_text, remove_concept, sweep, LayoutSource, MixConfig, MixResult, SweepGrid, SweepResult};
use crate::model::Denoiser;
use crate::par::Execution;
use crate::prompt::{Prompt, Vocabulary};
use crate::sample::Sample;

/// Where the layout semantics come from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LayoutInput {
    /// A grayscale PNG on the local filesystem.
    ImagePath(String),
    /// An inline grayscale PNG.
    PngBase64(String),
    /// An image of the selected dataset.
    DatasetIndex(usize),
    /// A PNG previously uploaded to the job service, by its sha256.
    Upload(String),
    /// A layout prompt (text-text mixing).
    Prompt(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMode {
    #[default]
    Mix,
    /// Requires a negative attention scale in the content prompt.
    Remove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixRequest {
    /// Model name; the only or default model when absent.
    #[serde(default)]
    pub model: Option<String>,
    /// Dataset name for `dataset_index` layouts.
    #[serde(default)]
    pub dataset: Option<String>,
    pub layout: LayoutInput,
    pub content: String,
    #[serde(default)]
    pub mode: MixMode,
    #[serde(default)]
    pub config: MixConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRequest {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub dataset: Option<String>,
    pub layout: LayoutInput,
    pub content: String,
    #[serde(default)]
    pub config: MixConfig,
    #[serde(default)]
    pub grid: SweepGrid,
}

/// A validation failure tied to one request field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn field(field: &str, message: impl ToString) -> FieldError {
    FieldError {
        field: field.to_string(),
        message: message.to_string(),
    }
}

fn check_config(cfg: &MixConfig, out: &mut Vec<FieldError>) {
    if !(cfg.k_max_frac > 0.0 && cfg.k_max_frac <= 1.0) {
        out.push(field("config.k_max_frac", "must lie in (0, 1]"));
    }
    if !(cfg.k_min_frac >= 0.0 && cfg.k_min_frac < cfg.k_max_frac) {
        out.push(field("config.k_min_frac", "must lie in [0, k_max_frac)"));
    }
    if !(0.0..=1.0).contains(&cfg.nu) {
        out.push(field("config.nu", "must lie in [0, 1]"));
    }
    if !(cfg.guidance_weight >= 0.0 && cfg.guidance_weight.is_finite()) {
        out.push(field("config.guidance_weight", "must be finite and non-negative"));
    }
    if cfg.steps == 0 {
        out.push(field("config.steps", "must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.eta) {
        out.push(field("config.eta", "must lie in [0, 1]"));
    }
}

fn check_prompts(layout: &LayoutInput, content: &str, vocab: &Vocabulary, out: &mut Vec<FieldError>) {
    if let Err(e) = Prompt::parse(content, vocab) {
        out.push(field("content", e));
    }
    if let LayoutInput::Prompt(p) = layout {
        if let Err(e) = Prompt::parse(p, vocab) {
            out.push(field("layout.prompt", e));
        }
    }
}

impl MixRequest {
    /// Every field-level problem, checked without touching the filesystem.
    pub fn field_errors(&self, vocab: &Vocabulary) -> Vec<FieldError> {
        let mut out = Vec::new();
        check_config(&self.config, &mut out);
        check_prompts(&self.layout, &self.content, vocab, &mut out);
        if self.mode == MixMode::Remove {
            match Prompt::parse(&self.content, vocab) {
                Ok(p) if !p.has_negative_scale() => {
                    out.push(field("content", "concept removal needs a negative scale, e.g. `striped:-1`"))
                }
                _ => {}
            }
            if matches!(self.layout, LayoutInput::Prompt(_)) {
                out.push(field("layout", "concept removal needs an image layout"));
            }
        }
        out
    }
}

impl SweepRequest {
    pub fn field_errors(&self, vocab: &Vocabulary) -> Vec<FieldError> {
        let mut out = Vec::new();
        check_config(&self.config, &mut out);
        check_prompts(&self.layout, &self.content, vocab, &mut out);
        let axes = [
            ("grid.nu", &self.grid.nu),
            ("grid.k_min_frac", &self.grid.k_min_frac),
            ("grid.k_max_frac", &self.grid.k_max_frac),
            ("grid.scale", &self.grid.scale),
        ];
        for (name, axis) in axes {
            if let Some(v) = axis {
                if v.is_empty() {
                    out.push(field(name, "axis is empty"));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    out.push(field(name, "values must be finite"));
                }
            }
        }
        if let Some(s) = &self.grid.scale {
            if s.iter().any(|x| !(-2.0..=2.0).contains(x)) {
                out.push(field("grid.scale", "scales must lie in [-2, 2]"));
            }
        }
        if let Some(nu) = &self.grid.nu {
            if nu.iter().any(|x| !(0.0..=1.0).contains(x)) {
                out.push(field("grid.nu", "values must lie in [0, 1]"));
            }
        }
        out
    }
}

/// Turns a layout input into an image or a layout prompt. Relative image
/// paths and uploads (`<sha256>.png`) resolve against `base_dir`.
pub fn resolve_layout(
    layout: &LayoutInput,
    vocab: &Vocabulary,
    dataset: Option<&ShapesDataset>,
    base_dir: &Path,
) -> Result<LayoutSource> {
    match layout {
        LayoutInput::ImagePath(p) => Ok(LayoutSource::Image(import_png(&base_dir.join(p))?)),
        LayoutInput::PngBase64(b) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b.trim())
                .map_err(|e| Error::malformed("layout.png_base64", e.to_string()))?;
            Ok(LayoutSource::Image(decode_png(&bytes, Path::new("layout.png_base64"))?))
        }
        LayoutInput::Upload(id) => {
            if id.len() != 64 || !id.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(Error::config(format!("upload id `{id}` is not a sha256 hex digest")));
            }
            Ok(LayoutSource::Image(import_png(&base_dir.join(format!("{}.png", id.to_ascii_lowercase())))?))
        }
        LayoutInput::DatasetIndex(i) => {
            let d = dataset.ok_or_else(|| Error::config("dataset_index layout needs a dataset"))?;
            d.images
                .get(*i)
                .cloned()
                .map(LayoutSource::Image)
                .ok_or_else(|| Error::config(format!("dataset index {i} out of range (size {})", d.len())))
        }
        LayoutInput::Prompt(p) => Ok(LayoutSource::Prompt(Prompt::parse(p, vocab)?)),
    }
}

fn check_image(model: &dyn Denoiser, x: &Sample) -> Result<()> {
    let want = model.sample_shape();
    if x.shape() != want.as_slice() {
        return Err(Error::ShapeMismatch {
            expected: want,
            actual: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// Executes a mixing request against a loaded model.
pub fn run_mix(
    model: &dyn Denoiser,
    vocab: &Vocabulary,
    req: &MixRequest,
    dataset: Option<&ShapesDataset>,
    base_dir: &Path,
    record: bool,
) -> Result<MixResult> {
    if let Some(e) = req.field_errors(vocab).into_iter().next() {
        return Err(Error::config(format!("{}: {}", e.field, e.message)));
    }
    let content = Prompt::parse(&req.content, vocab)?;
    match (resolve_layout(&req.layout, vocab, dataset, base_dir)?, req.mode) {
        (LayoutSource::Image(x0), MixMode::Mix) => {
            check_image(model, &x0)?;
            mix_image_text(model, &x0, &content, &req.config, record)
        }
        (LayoutSource::Image(x0), MixMode::Remove) => {
            check_image(model, &x0)?;
            remove_concept(model, &x0, &content, &req.config, record)
        }
        (LayoutSource::Prompt(y), MixMode::Mix) => mix_text_text(model, &y, &content, &req.config, record),
        (LayoutSource::Prompt(_), MixMode::Remove) => Err(Error::config("concept removal needs an image layout")),
    }
}

pub fn run_sweep(
    model: &dyn Denoiser,
    vocab: &Vocabulary,
    req: &SweepRequest,
    dataset: Option<&ShapesDataset>,
    base_dir: &Path,
    exec: Execution,
) -> Result<SweepResult> {
    if let Some(e) = req.field_errors(vocab).into_iter().next() {
        return Err(Error::config(format!("{}: {}", e.field, e.message)));
    }
    let content = Prompt::parse(&req.content, vocab)?;
    let source = resolve_layout(&req.layout, vocab, dataset, base_dir)?;
    if let LayoutSource::Image(x) = &source {
        check_image(model, x)?;
    }
    sweep(model, &source, &content, &req.grid, &req.config, exec)
}

/// Parses `start:stop:step` (inclusive, tolerant to rounding) or a
/// comma-separated list.
pub fn parse_axis(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::config(format!("cannot parse axis `{text}`"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (a, b, h) = (num(start)?, num(stop)?, num(step)?);
            if !(h > 0.0) || b < a {
                return Err(bad());
            }
            let n = ((b - a) / h + 1e-9).floor() as usize;
            // Round to 12 decimals so 0.1:0.9:0.1 yields 0.3, not 0.30000000000000004.
            Ok((0..=n).map(|i| ((a + i as f64 * h) * 1e12).round() / 1e12).collect())
        }
        [_] => text.split(',').map(num).collect(),
        _ => Err(bad()),
    }
}
