//! Procedural shapes dataset: anti-aliased parametric silhouettes with
//! interior textures, values in [-1, 1] (background -1).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{read_array, sha256_hex, write_array, write_atomic};
use crate::error::{Error, Result};
use crate::par::{map_indexed, rng_for, streams, Execution};
use crate::prompt::{Prompt, Vocabulary};
use crate::sample::Sample;

pub const BACKGROUND: f64 = -1.0;
pub const BRIGHT: f64 = 1.0;
pub const DARK: f64 = 0.25;
/// Pixels above this value count as foreground.
pub const SILHOUETTE_THRESHOLD: f64 = 0.0;

pub const STRIPE_PERIOD: f64 = 4.0;
pub const DOT_PERIOD: f64 = 5.0;
pub const DOT_RADIUS: f64 = 1.4;

/// Position jitter, radius range and rotation range (degrees) used by the generator.
pub const CENTER_JITTER: f64 = 3.0;
pub const RADIUS_RANGE: (f64, f64) = (9.0, 12.0);
pub const ANGLE_RANGE_DEG: f64 = 15.0;

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Star,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Striped,
    Dotted,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Star,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Star => "star",
        }
    }

    fn polygon(self) -> Vec<(f64, f64)> {
        match self {
            ShapeKind::Triangle => regular_star(3, 1.0, None),
            ShapeKind::Star => regular_star(5, 1.0, Some(0.45)),
            _ => Vec::new(),
        }
    }

    /// Whether the point `(u, v)` in unit-radius local coordinates (v up) is
    /// inside; `poly` is the shape's [`ShapeKind::polygon`].
    fn contains(self, u: f64, v: f64, poly: &[(f64, f64)]) -> bool {
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95)
            }
            ShapeKind::Triangle | ShapeKind::Star => in_polygon(poly, u, v),
        }
    }
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Solid, Texture::Striped, Texture::Dotted];

    pub fn name(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Striped => "striped",
            Texture::Dotted => "dotted",
        }
    }

    /// Interior intensity at image coordinates `(x, y)`.
    fn value(self, x: f64, y: f64, phase: f64) -> f64 {
        match self {
            Texture::Solid => BRIGHT,
            Texture::Striped => {
                if (y + phase).rem_euclid(STRIPE_PERIOD) < STRIPE_PERIOD / 2.0 {
                    BRIGHT
                } else {
                    DARK
                }
            }
            Texture::Dotted => {
                let half = DOT_PERIOD / 2.0;
                let dx = (x + phase).rem_euclid(DOT_PERIOD) - half;
                let dy = (y + phase).rem_euclid(DOT_PERIOD) - half;
                if dx * dx + dy * dy < DOT_RADIUS * DOT_RADIUS {
                    DARK
                } else {
                    BRIGHT
                }
            }
        }
    }
}

macro_rules! named_enum {
    ($t:ty) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|k| k.name() == s)
                    .ok_or_else(|| Error::UnknownWord(s.to_string()))
            }
        }
    };
}

named_enum!(ShapeKind);
named_enum!(Texture);

/// Vertices of a regular polygon (or star, with an inner radius) pointing up.
fn regular_star(points: usize, outer: f64, inner: Option<f64>) -> Vec<(f64, f64)> {
    let step = std::f64::consts::PI / points as f64;
    let mut out = Vec::new();
    for i in 0..points {
        let a = std::f64::consts::FRAC_PI_2 + 2.0 * step * i as f64;
        out.push((outer * a.cos(), outer * a.sin()));
        if let Some(r) = inner {
            let b = a + step;
            out.push((r * b.cos(), r * b.sin()));
        }
    }
    out
}

/// Even-odd point-in-polygon test.
fn in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub shape: ShapeKind,
    pub texture: Texture,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    /// Rotation in degrees (counter-clockwise).
    pub angle: f64,
    /// Texture offset in pixels.
    pub phase: f64,
}

impl ShapeParams {
    /// Centred, unrotated shape of the default mid-range radius.
    pub fn centered(shape: ShapeKind, texture: Texture, image_size: usize) -> Self {
        let c = image_size as f64 / 2.0;
        Self {
            shape,
            texture,
            cx: c,
            cy: c,
            radius: (RADIUS_RANGE.0 + RADIUS_RANGE.1) / 2.0 * image_size as f64 / 32.0,
            angle: 0.0,
            phase: 0.0,
        }
    }

    fn draw<R: Rng + ?Sized>(shape: ShapeKind, texture: Texture, image_size: usize, rng: &mut R) -> Self {
        let scale = image_size as f64 / 32.0;
        let c = image_size as f64 / 2.0;
        let j = CENTER_JITTER * scale;
        Self {
            shape,
            texture,
            cx: c + rng.gen_range(-j..=j),
            cy: c + rng.gen_range(-j..=j),
            radius: rng.gen_range(RADIUS_RANGE.0..=RADIUS_RANGE.1) * scale,
            angle: rng.gen_range(-ANGLE_RANGE_DEG..=ANGLE_RANGE_DEG),
            phase: rng.gen_range(0.0..DOT_PERIOD.max(STRIPE_PERIOD)),
        }
    }

    fn inside(&self, x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
        let (s, c) = self.angle.to_radians().sin_cos();
        let dx = (x - self.cx) / self.radius;
        let dy = (self.cy - y) / self.radius;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        self.shape.contains(u, v, poly)
    }
}

/// Rasterizes one shape with `SUPERSAMPLE`² samples per pixel. Partially
/// covered pixels blend the bright level with the background, so the outline
/// reads the same for every texture; fully covered pixels carry the texture.
/// Values are rounded through f32 so that stored datasets reload bit-exactly.
pub fn render_shape(p: &ShapeParams, image_size: usize) -> Sample {
    let n = SUPERSAMPLE as f64;
    let poly = p.shape.polygon();
    let mut data = Vec::with_capacity(image_size * image_size);
    for i in 0..image_size {
        for j in 0..image_size {
            let mut covered = 0usize;
            let mut tex = 0.0;
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let y = i as f64 + (a as f64 + 0.5) / n;
                    let x = j as f64 + (b as f64 + 0.5) / n;
                    if p.inside(x, y, &poly) {
                        covered += 1;
                        tex += p.texture.value(x, y, p.phase);
                    }
                }
            }
            let v = if covered == SUPERSAMPLE * SUPERSAMPLE {
                tex / (n * n)
            } else {
                let c = covered as f64 / (n * n);
                BACKGROUND + c * (BRIGHT - BACKGROUND)
            };
            data.push(v as f32 as f64);
        }
    }
    Sample::new(vec![1, image_size, image_size], data).expect("shape matches data")
}

/// The fixed concept vocabulary: every shape word, then every texture word.
pub fn shapes_vocabulary() -> Vocabulary {
    let words: Vec<&str> = ShapeKind::ALL
        .iter()
        .map(|s| s.name())
        .chain(Texture::ALL.iter().map(|t| t.name()))
        .collect();
    Vocabulary::new(&words).expect("static vocabulary is valid")
}

/// The `"<shape> <texture>"` prompt.
pub fn shapes_prompt(vocab: &Vocabulary, shape: ShapeKind, texture: Texture) -> Prompt {
    let ids = [vocab.id(shape.name()), vocab.id(texture.name())];
    Prompt::from_concepts(&ids.map(|i| i.expect("shape words are in the vocabulary")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesSpec {
    pub shapes: Vec<ShapeKind>,
    pub textures: Vec<Texture>,
    pub count_per_class: usize,
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_image_size() -> usize {
    32
}

impl ShapesSpec {
    pub fn full(count_per_class: usize, seed: u64) -> Self {
        Self {
            shapes: ShapeKind::ALL.to_vec(),
            textures: Texture::ALL.to_vec(),
            count_per_class,
            seed,
            image_size: 32,
        }
    }

    pub fn pairs(&self) -> Vec<(ShapeKind, Texture)> {
        self.shapes
            .iter()
            .flat_map(|&s| self.textures.iter().map(move |&t| (s, t)))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.textures.is_empty() || self.count_per_class == 0 {
            return Err(Error::config("shapes spec needs at least one shape, texture and image"));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::config("image_size must be a multiple of 4 and at least 8"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesDataset {
    pub spec: ShapesSpec,
    pub vocabulary: Vocabulary,
    pub images: Vec<Sample>,
    pub prompts: Vec<Prompt>,
    pub params: Vec<ShapeParams>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    generator: ShapesSpec,
    vocabulary: Vocabulary,
    count: usize,
    pairs: Vec<String>,
    images_file: String,
    images_sha256: String,
    prompts_file: String,
}

const IMAGES_FILE: &str = "images.f32";
const PROMPTS_FILE: &str = "prompts.tsv";
const MANIFEST_FILE: &str = "manifest.json";

/// Generates the dataset; image `i` uses its own rng stream, so the result is
/// independent of the execution mode.
pub fn generate_shapes(spec: &ShapesSpec, exec: Execution) -> Result<ShapesDataset> {
    spec.validate()?;
    let vocabulary = shapes_vocabulary();
    let pairs = spec.pairs();
    let n = pairs.len() * spec.count_per_class;
    let rendered = map_indexed(exec, n, |i| {
        let (shape, texture) = pairs[i / spec.count_per_class];
        let mut rng = rng_for(spec.seed, (streams::DATASET << 40) | i as u64);
        let p = ShapeParams::draw(shape, texture, spec.image_size, &mut rng);
        (render_shape(&p, spec.image_size), p)
    });
    let mut images = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    let mut prompts = Vec::with_capacity(n);
    for (img, p) in rendered {
        prompts.push(shapes_prompt(&vocabulary, p.shape, p.texture));
        images.push(img);
        params.push(p);
    }
    Ok(ShapesDataset {
        spec: spec.clone(),
        vocabulary,
        images,
        prompts,
        params,
    })
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn training_set(&self) -> Result<crate::trainer::TrainingSet> {
        crate::trainer::TrainingSet::new(self.vocabulary.clone(), self.images.clone(), self.prompts.clone())
    }

    fn image_bytes(&self) -> Result<Vec<u8>> {
        let s = self.spec.image_size;
        let values: Vec<f32> = self.images.iter().flat_map(|im| im.data().iter().map(|&v| v as f32)).collect();
        super::encode_array(&[self.len(), 1, s, s], &values)
    }

    /// Writes `images.f32`, `prompts.tsv` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let bytes = self.image_bytes()?;
        write_atomic(&dir.join(IMAGES_FILE), &bytes)?;
        let mut tsv = String::from("index\tprompt\tshape\ttexture\tcx\tcy\tradius\tangle\tphase\n");
        for (i, (p, q)) in self.params.iter().zip(&self.prompts).enumerate() {
            tsv.push_str(&format!(
                "{i}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                q.format(&self.vocabulary),
                p.shape,
                p.texture,
                p.cx,
                p.cy,
                p.radius,
                p.angle,
                p.phase
            ));
        }
        write_atomic(&dir.join(PROMPTS_FILE), tsv.as_bytes())?;
        let manifest = DatasetManifest {
            format: "magicmix-shapes".into(),
            generator: self.spec.clone(),
            vocabulary: self.vocabulary.clone(),
            count: self.len(),
            pairs: self.spec.pairs().iter().map(|(s, t)| format!("{s} {t}")).collect(),
            images_file: IMAGES_FILE.into(),
            images_sha256: sha256_hex(&bytes),
            prompts_file: PROMPTS_FILE.into(),
        };
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)
    }

    /// Loads a saved dataset, checking the image hash and the prompt table.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: DatasetManifest =
            serde_json::from_slice(&text).map_err(|e| Error::malformed(&mpath, e.to_string()))?;
        let ipath = dir.join(&m.images_file);
        let bytes = std::fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
        if sha256_hex(&bytes) != m.images_sha256 {
            return Err(Error::malformed(&ipath, "image hash does not match the manifest"));
        }
        let (dims, values) = super::decode_array(&bytes, &ipath)?;
        let s = m.generator.image_size;
        if dims != [m.count, 1, s, s] {
            return Err(Error::malformed(&ipath, format!("unexpected dims {dims:?}")));
        }
        let images = values
            .chunks_exact(s * s)
            .map(|c| Sample::new(vec![1, s, s], c.iter().map(|&v| v as f64).collect()))
            .collect::<Result<Vec<_>>>()?;
        let ppath = dir.join(&m.prompts_file);
        let table = std::fs::read_to_string(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let mut prompts = Vec::with_capacity(m.count);
        let mut params = Vec::with_capacity(m.count);
        for line in table.lines().skip(1).filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::malformed(&ppath, format!("bad row `{line}`"));
            if f.len() != 9 {
                return Err(bad());
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            prompts.push(Prompt::parse(f[1], &m.vocabulary)?);
            params.push(ShapeParams {
                shape: f[2].parse()?,
                texture: f[3].parse()?,
                cx: num(4)?,
                cy: num(5)?,
                radius: num(6)?,
                angle: num(7)?,
                phase: num(8)?,
            });
        }
        if prompts.len() != m.count {
            return Err(Error::malformed(&ppath, "row count does not match the manifest"));
        }
        Ok(Self {
            spec: m.generator,
            vocabulary: m.vocabulary,
            images,
            prompts,
            params,
        })
    }

    /// Regenerates from the stored spec and checks bit-exact agreement.
    pub fn verify_regeneration(&self) -> Result<bool> {
        let again = generate_shapes(&self.spec, Execution::Auto)?;
        Ok(again.image_bytes()? == self.image_bytes()? && again.prompts == self.prompts)
    }
}

/// Reads just the image array of a saved dataset.
pub fn read_images(dir: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    read_array(&dir.join(IMAGES_FILE))
}

/// Writes a subset of samples as a dataset-style array (for layout inputs).
pub fn write_images(path: &Path, images: &[Sample]) -> Result<()> {
    let dims = match images.first() {
        Some(s) => [vec![images.len()], s.shape().to_vec()].concat(),
        None => vec![0],
    };
    let values: Vec<f32> = images.iter().flat_map(|im| im.data().iter().map(|&v| v as f32)).collect();
    write_array(path, &dims, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{iou, silhouette};

    #[test]
    fn deterministic_bytes() {
        let spec = ShapesSpec {
            shapes: vec![ShapeKind::Circle],
            textures: vec![Texture::Solid],
            count_per_class: 1,
            seed: 7,
            image_size: 32,
        };
        let a = generate_shapes(&spec, Execution::Auto).unwrap();
        let b = generate_shapes(&spec, Execution::Sequential).unwrap();
        assert_eq!(a.image_bytes().unwrap(), b.image_bytes().unwrap());
    }

    #[test]
    fn full_spec_counts() {
        let d = generate_shapes(&ShapesSpec::full(500, 1), Execution::Auto).unwrap();
        assert_eq!(d.len(), 7500);
        assert_eq!(d.spec.pairs().len(), 15);
        for p in &d.prompts {
            assert!(p.tokens().iter().all(|t| d.vocabulary.contains(*t)));
        }
        assert!(d.images.iter().all(|im| im.data().iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn empty_spec_rejected() {
        let mut spec = ShapesSpec::full(1, 0);
        spec.shapes.clear();
        assert!(generate_shapes(&spec, Execution::Auto).is_err());
        assert!(generate_shapes(&ShapesSpec::full(0, 0), Execution::Auto).is_err());
    }

    #[test]
    fn circle_silhouette_matches_analytic_disk() {
        let mut rng = rng_for(3, 0);
        for texture in Texture::ALL {
            for _ in 0..10 {
                let p = ShapeParams::draw(ShapeKind::Circle, texture, 32, &mut rng);
                let img = render_shape(&p, 32);
                let disk: Vec<bool> = (0..32 * 32)
                    .map(|k| {
                        let (y, x) = ((k / 32) as f64 + 0.5, (k % 32) as f64 + 0.5);
                        (x - p.cx).powi(2) + (y - p.cy).powi(2) <= p.radius * p.radius
                    })
                    .collect();
                let score = iou(&silhouette(&img), &disk);
                assert!(score >= 0.98, "{texture}: {score}");
            }
        }
    }

    #[test]
    fn save_load_regenerate() {
        let spec = ShapesSpec {
            shapes: vec![ShapeKind::Star, ShapeKind::Cross],
            textures: vec![Texture::Striped, Texture::Dotted],
            count_per_class: 3,
            seed: 5,
            image_size: 32,
        };
        let d = generate_shapes(&spec, Execution::Auto).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = ShapesDataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
        assert!(back.verify_regeneration().unwrap());
        let ipath = dir.path().join(IMAGES_FILE);
        let mut bytes = std::fs::read(&ipath).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&ipath, bytes).unwrap();
        assert!(ShapesDataset::load(dir.path()).is_err());
    }

    #[test]
    fn textures_differ() {
        let v = |t: Texture| render_shape(&ShapeParams::centered(ShapeKind::Square, t, 32), 32);
        let (a, b, c) = (v(Texture::Solid), v(Texture::Striped), v(Texture::Dotted));
        assert!(a.squared_distance(&b) > 10.0);
        assert!(a.squared_distance(&c) > 5.0);
        assert!(iou(&silhouette(&a), &silhouette(&b)) > 0.95);
    }

    #[test]
    fn names_parse() {
        for s in ShapeKind::ALL {
            assert_eq!(s.name().parse::<ShapeKind>().unwrap(), s);
        }
        assert!(matches!("blob".parse::<Texture>(), Err(Error::UnknownWord(_))));
        let v = shapes_vocabulary();
        assert_eq!(v.len(), 11);
        assert_eq!(shapes_prompt(&v, ShapeKind::Circle, Texture::Striped).format(&v), "circle striped");
    }
}
