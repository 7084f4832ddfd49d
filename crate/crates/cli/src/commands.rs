//! Command bodies. Each command resolves its flags into a serializable config,
//! and `execute` runs a config into an output directory. Replaying a run
//! manifest goes through the same `execute`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use magicmix_core::classifier::AttributeClassifier;
use magicmix_core::io::image::{encode_png, montage};
use magicmix_core::io::shapes::{generate_shapes, ShapeKind, ShapesDataset, ShapesSpec, Texture};
use magicmix_core::io::{export_png, sha256_file, write_atomic, write_samples, RunManifest};
use magicmix_core::magicmix::{describe, MixConfig, SweepGrid};
use magicmix_core::model::unet::{UNet, UNetConfig};
use magicmix_core::model::{Denoiser, ModelCheckpoint};
use magicmix_core::oracle::{score_fd_check, MixtureWorld};
use magicmix_core::par::{rng_for, streams, try_map_indexed, Execution};
use magicmix_core::request::{parse_axis, run_mix, run_sweep, LayoutInput, MixMode, MixRequest, SweepRequest};
use magicmix_core::sampler::{sample, StepPlan};
use magicmix_core::schedule::{NoiseSchedule, ScheduleDescriptor, ScheduleFamily};
use magicmix_core::trainer::{evaluate_loss, TrainConfig, Trainer};
use magicmix_core::{Error, Prompt};

use crate::args::*;
use crate::error::{CliError, CliResult};

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Core(Error::InvalidConfig(msg.into()))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

/// Absolute form of a user path, so manifests replay from any directory.
fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    serde_json::from_slice(&bytes).map_err(|e| {
        CliError::Core(Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    })
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(&dir.join(name), &bytes)?;
    Ok(())
}

fn load_model(path: &Path) -> CliResult<(UNet, String)> {
    let ckpt = ModelCheckpoint::load(path)?;
    Ok((ckpt.to_model()?, sha256_file(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub spec: ShapesSpec,
    /// `None` skips fitting the attribute classifier.
    pub classifier_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub data: PathBuf,
    pub arch: Arch,
    pub resume: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval_batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub checkpoint: PathBuf,
    pub prompt: String,
    pub count: usize,
    pub seed: u64,
    pub steps: usize,
    pub eta: f64,
    pub guidance_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixCommandConfig {
    pub checkpoint: PathBuf,
    pub dataset: Option<PathBuf>,
    pub request: MixRequest,
    pub record_trajectory: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCommandConfig {
    pub checkpoint: PathBuf,
    pub dataset: Option<PathBuf>,
    pub request: SweepRequest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectConfig {
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCheckConfig {
    pub world: Option<PathBuf>,
    pub dimensions: Vec<usize>,
    pub probes: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub schedule: ScheduleDescriptor,
    pub step: f64,
}

/// A fully resolved command, as recorded in its run manifest.
#[derive(Clone, Debug, PartialEq)]
pub enum Resolved {
    GenData(GenDataConfig),
    Train(TrainCommandConfig),
    Sample(SampleConfig),
    Mix(&'static str, MixCommandConfig),
    Sweep(SweepCommandConfig),
    Inspect(InspectConfig),
    OracleCheck(OracleCheckConfig),
}

impl Resolved {
    pub fn name(&self) -> &'static str {
        match self {
            Resolved::GenData(_) => "gen-data",
            Resolved::Train(_) => "train",
            Resolved::Sample(_) => "sample",
            Resolved::Mix(name, _) => name,
            Resolved::Sweep(_) => "sweep",
            Resolved::Inspect(_) => "inspect",
            Resolved::OracleCheck(_) => "oracle-check",
        }
    }

    pub fn to_value(&self) -> CliResult<Value> {
        Ok(match self {
            Resolved::GenData(c) => serde_json::to_value(c)?,
            Resolved::Train(c) => serde_json::to_value(c)?,
            Resolved::Sample(c) => serde_json::to_value(c)?,
            Resolved::Mix(_, c) => serde_json::to_value(c)?,
            Resolved::Sweep(c) => serde_json::to_value(c)?,
            Resolved::Inspect(c) => serde_json::to_value(c)?,
            Resolved::OracleCheck(c) => serde_json::to_value(c)?,
        })
    }

    pub fn from_manifest(m: &RunManifest) -> CliResult<Self> {
        let v = m.config.clone();
        Ok(match m.command.as_str() {
            "gen-data" => Resolved::GenData(serde_json::from_value(v)?),
            "train" => Resolved::Train(serde_json::from_value(v)?),
            "sample" => Resolved::Sample(serde_json::from_value(v)?),
            "mix" => Resolved::Mix("mix", serde_json::from_value(v)?),
            "mix-tt" => Resolved::Mix("mix-tt", serde_json::from_value(v)?),
            "remove" => Resolved::Mix("remove", serde_json::from_value(v)?),
            "sweep" => Resolved::Sweep(serde_json::from_value(v)?),
            "inspect" => Resolved::Inspect(serde_json::from_value(v)?),
            "oracle-check" => Resolved::OracleCheck(serde_json::from_value(v)?),
            other => return Err(config_err(format!("manifest names unknown command `{other}`"))),
        })
    }

    fn checkpoint(&self) -> Option<&Path> {
        match self {
            Resolved::Sample(c) => Some(&c.checkpoint),
            Resolved::Mix(_, c) => Some(&c.checkpoint),
            Resolved::Sweep(c) => Some(&c.checkpoint),
            Resolved::Train(c) => c.resume.as_deref(),
            _ => None,
        }
    }
}

/// What a command produced, beyond the files listed in the manifest.
pub struct Outcome {
    pub manifest: RunManifest,
    /// Printed to stdout as JSON.
    pub summary: Value,
    /// Set when the command ran but a check failed.
    pub failure: Option<CliError>,
}

fn finish(
    resolved: &Resolved,
    out: &Path,
    files: &[String],
    seeds: Vec<u64>,
    summary: Value,
) -> CliResult<Outcome> {
    let mut manifest = RunManifest::new(resolved.name(), resolved.to_value()?, seeds, true);
    if let Some(ck) = resolved.checkpoint() {
        manifest.checkpoint_sha256 = Some(sha256_file(ck)?);
    }
    for f in files {
        manifest.add_output(out, f)?;
    }
    manifest.save(out)?;
    Ok(Outcome {
        manifest,
        summary,
        failure: None,
    })
}

pub fn execute(resolved: &Resolved, out: &Path, exec: Execution) -> CliResult<Outcome> {
    create_dir(out)?;
    match resolved {
        Resolved::GenData(c) => gen_data(resolved, c, out, exec),
        Resolved::Train(c) => train(resolved, c, out, exec),
        Resolved::Sample(c) => sample_cmd(resolved, c, out, exec),
        Resolved::Mix(_, c) => mix_cmd(resolved, c, out),
        Resolved::Sweep(c) => sweep_cmd(resolved, c, out, exec),
        Resolved::Inspect(c) => inspect(resolved, c, out),
        Resolved::OracleCheck(c) => oracle_check(resolved, c, out),
    }
}

// ---- resolution from flags ----

pub fn resolve_gen_data(a: &GenDataArgs) -> CliResult<(Resolved, PathBuf)> {
    let mut spec = ShapesSpec::full(a.count_per_class, a.seed);
    spec.image_size = a.image_size;
    if !a.shapes.is_empty() {
        spec.shapes = a.shapes.iter().map(|s| s.parse::<ShapeKind>()).collect::<Result<_, _>>()?;
    }
    if !a.textures.is_empty() {
        spec.textures = a.textures.iter().map(|s| s.parse::<Texture>()).collect::<Result<_, _>>()?;
    }
    let c = GenDataConfig {
        spec,
        classifier_seed: (!a.no_classifier).then_some(a.classifier_seed),
    };
    Ok((Resolved::GenData(c), a.out.clone()))
}

pub fn resolve_train(a: &TrainArgs) -> CliResult<(Resolved, PathBuf)> {
    let mut t: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { t.$f = v; })* };
    }
    set!(steps, batch_size, learning_rate, seed, null_prob, attribute_drop_prob, checkpoint_every, log_every);
    if let Some(d) = a.ema_decay {
        t.ema_decay = (d > 0.0).then_some(d);
    }
    if let Some(f) = &a.schedule {
        t.schedule.family = f.parse::<ScheduleFamily>()?;
    }
    if let Some(n) = a.timesteps {
        t.schedule.steps = n;
    }
    t.validate()?;
    let c = TrainCommandConfig {
        data: absolute(&a.data),
        arch: a.arch,
        resume: a.resume.as_deref().map(absolute),
        train: t,
        eval_batch: a.eval_batch,
    };
    Ok((Resolved::Train(c), a.out.clone()))
}

pub fn resolve_sample(a: &SampleArgs) -> CliResult<(Resolved, PathBuf)> {
    let c = SampleConfig {
        checkpoint: absolute(&a.checkpoint),
        prompt: a.prompt.clone(),
        count: a.count,
        seed: a.seed,
        steps: a.steps,
        eta: a.eta,
        guidance_weight: a.guidance_weight,
    };
    if c.count == 0 {
        return Err(config_err("count must be positive"));
    }
    Ok((Resolved::Sample(c), a.out.clone()))
}

fn apply_mix_flags(cfg: &mut MixConfig, f: &MixConfigFlags) -> CliResult<()> {
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = f.$field { cfg.$field = v; })* };
    }
    set!(k_max_frac, k_min_frac, nu, guidance_weight, steps, eta, seed);
    if let Some(m) = &f.layout_noise_mode {
        cfg.layout_noise_mode = m.parse()?;
    }
    Ok(())
}

fn layout_from_flags(l: &LayoutFlags, current: Option<LayoutInput>) -> CliResult<(Option<LayoutInput>, Option<PathBuf>)> {
    let given = [l.image.is_some(), l.index.is_some(), l.layout.is_some()];
    if given.iter().filter(|&&g| g).count() > 1 {
        return Err(config_err("give only one of --image, --index and --layout"));
    }
    let dataset = l.dataset.as_deref().map(absolute);
    let layout = if let Some(p) = &l.image {
        Some(LayoutInput::ImagePath(absolute(p).to_string_lossy().into_owned()))
    } else if let Some(i) = l.index {
        if dataset.is_none() {
            return Err(config_err("--index needs --dataset"));
        }
        Some(LayoutInput::DatasetIndex(i))
    } else if let Some(p) = &l.layout {
        Some(LayoutInput::Prompt(p.clone()))
    } else {
        current
    };
    Ok((layout, dataset))
}

/// `--image` paths inside a config document are taken relative to the
/// document's directory.
fn absolutize_layout(layout: LayoutInput, base: &Path) -> LayoutInput {
    match layout {
        LayoutInput::ImagePath(p) => LayoutInput::ImagePath(absolute(&base.join(p)).to_string_lossy().into_owned()),
        other => other,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialMixDoc {
    #[serde(default)]
    layout: Option<LayoutInput>,
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    config: MixConfig,
    #[serde(default)]
    grid: SweepGrid,
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    dataset: Option<String>,
    #[serde(default)]
    mode: Option<MixMode>,
}

fn read_doc(path: Option<&Path>) -> CliResult<PartialMixDoc> {
    match path {
        Some(p) => {
            let mut d: PartialMixDoc = read_json(p)?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            d.layout = d.layout.map(|l| absolutize_layout(l, &base));
            Ok(d)
        }
        None => Ok(PartialMixDoc {
            layout: None,
            content: None,
            config: MixConfig::default(),
            grid: SweepGrid::default(),
            model: None,
            dataset: None,
            mode: None,
        }),
    }
}

pub fn resolve_mix(name: &'static str, a: &MixArgs) -> CliResult<(Resolved, PathBuf)> {
    let doc = read_doc(a.config.as_deref())?;
    let mut config = doc.config;
    apply_mix_flags(&mut config, &a.mix)?;
    let (layout, dataset) = layout_from_flags(&a.layout, doc.layout)?;
    let layout = layout.ok_or_else(|| config_err("no layout given (--image, --index or --layout)"))?;
    match (name, &layout) {
        ("mix-tt", LayoutInput::Prompt(_)) => {}
        ("mix-tt", _) => return Err(config_err("mix-tt takes a layout prompt (--layout)")),
        (_, LayoutInput::Prompt(_)) => return Err(config_err(format!("{name} takes a layout image; use mix-tt for prompts"))),
        _ => {}
    }
    let content = a
        .content
        .clone()
        .or(doc.content)
        .ok_or_else(|| config_err("no content prompt given (--content)"))?;
    let mode = if name == "remove" { MixMode::Remove } else { doc.mode.unwrap_or_default() };
    let request = MixRequest {
        model: doc.model,
        dataset: doc.dataset,
        layout,
        content,
        mode,
        config,
    };
    let c = MixCommandConfig {
        checkpoint: absolute(&a.checkpoint),
        dataset,
        request,
        record_trajectory: a.record_trajectory,
    };
    Ok((Resolved::Mix(name, c), a.out.clone()))
}

pub fn resolve_sweep(a: &SweepArgs) -> CliResult<(Resolved, PathBuf)> {
    let doc = read_doc(a.config.as_deref())?;
    let mut config = doc.config;
    let flags = MixConfigFlags {
        guidance_weight: a.guidance_weight,
        steps: a.steps,
        eta: a.eta,
        seed: a.seed,
        layout_noise_mode: a.layout_noise_mode.clone(),
        ..Default::default()
    };
    apply_mix_flags(&mut config, &flags)?;
    let mut grid = doc.grid;
    let axis = |s: &Option<String>| -> CliResult<Option<Vec<f64>>> { Ok(s.as_deref().map(parse_axis).transpose()?) };
    if let Some(v) = axis(&a.nu)? {
        grid.nu = Some(v);
    }
    if let Some(v) = axis(&a.k_min_frac)? {
        grid.k_min_frac = Some(v);
    }
    if let Some(v) = axis(&a.k_max_frac)? {
        grid.k_max_frac = Some(v);
    }
    if let Some(v) = axis(&a.scale)? {
        grid.scale = Some(v);
    }
    let (layout, dataset) = layout_from_flags(&a.layout, doc.layout)?;
    let request = SweepRequest {
        model: doc.model,
        dataset: doc.dataset,
        layout: layout.ok_or_else(|| config_err("no layout given (--image, --index or --layout)"))?,
        content: a
            .content
            .clone()
            .or(doc.content)
            .ok_or_else(|| config_err("no content prompt given (--content)"))?,
        config,
        grid,
    };
    let c = SweepCommandConfig {
        checkpoint: absolute(&a.checkpoint),
        dataset,
        request,
    };
    Ok((Resolved::Sweep(c), a.out.clone()))
}

pub fn resolve_inspect(a: &InspectArgs) -> (Resolved, Option<PathBuf>) {
    (
        Resolved::Inspect(InspectConfig {
            path: absolute(&a.path),
        }),
        a.out.clone(),
    )
}

pub fn resolve_oracle_check(a: &OracleCheckArgs) -> CliResult<(Resolved, Option<PathBuf>)> {
    if a.probes == 0 || a.dimensions.is_empty() {
        return Err(config_err("need at least one probe and one dimension"));
    }
    let c = OracleCheckConfig {
        world: a.world.as_deref().map(absolute),
        dimensions: a.dimensions.clone(),
        probes: a.probes,
        seed: a.seed,
        tolerance: a.tolerance,
        schedule: ScheduleDescriptor {
            family: ScheduleFamily::Cosine,
            steps: 1000,
        },
        step: 1e-4,
    };
    Ok((Resolved::OracleCheck(c), a.out.clone()))
}

// ---- execution ----

fn gen_data(r: &Resolved, c: &GenDataConfig, out: &Path, exec: Execution) -> CliResult<Outcome> {
    let t0 = Instant::now();
    let data = generate_shapes(&c.spec, exec)?;
    data.save(out)?;
    let mut files = vec!["images.f32".to_string(), "prompts.tsv".into(), "manifest.json".into()];
    let mut summary = json!({"images": data.len(), "pairs": c.spec.pairs().len()});
    if let Some(seed) = c.classifier_seed {
        let clf = AttributeClassifier::train(&data, seed, exec)?;
        clf.save(&out.join("classifier.json"))?;
        let (shape_acc, texture_acc) = clf.accuracy(&data, exec);
        summary["classifier"] = json!({"shape_accuracy": shape_acc, "texture_accuracy": texture_acc});
        files.push("classifier.json".into());
    }
    log::info!("gen-data finished in {:.1}s", t0.elapsed().as_secs_f64());
    finish(r, out, &files, vec![c.spec.seed], summary)
}

fn train(r: &Resolved, c: &TrainCommandConfig, out: &Path, exec: Execution) -> CliResult<Outcome> {
    let data = ShapesDataset::load(&c.data)?;
    let set = data.training_set()?;
    let mut trainer = match &c.resume {
        Some(p) => Trainer::resume(&ModelCheckpoint::load(p)?, c.train.clone())?,
        None => {
            let cfg = match c.arch {
                Arch::Shapes => UNetConfig::shapes(data.vocabulary.len()),
                Arch::Tiny => UNetConfig::tiny(data.vocabulary.len(), data.spec.image_size),
            };
            let sched = NoiseSchedule::from_descriptor(c.train.schedule)?;
            let model = UNet::new(&cfg, sched, data.vocabulary.clone(), c.train.seed)?;
            Trainer::new(model, c.train.clone())?
        }
    };
    // A resumed run appends to the log of the run it continues.
    if let Some(p) = &c.resume {
        let old_log = p.parent().map(|d| d.join("train_log.tsv"));
        if let Some(old) = old_log.filter(|o| o.exists() && !out.join("train_log.tsv").exists()) {
            std::fs::copy(&old, out.join("train_log.tsv")).map_err(|e| Error::Io { path: old, source: e })?;
        }
    }
    let log = trainer.run(&set, exec, Some(out))?;
    let mut files = vec!["model.ckpt".to_string()];
    if c.train.checkpoint_every > 0 {
        let mut step = c.train.checkpoint_every;
        while step <= c.train.steps {
            let name = format!("step-{step:06}.ckpt");
            if out.join(&name).exists() {
                files.push(name);
            }
            step += c.train.checkpoint_every;
        }
    }
    let model = trainer.checkpoint().to_model()?;
    let eval = evaluate_loss(&model, &set, c.eval_batch, c.train.seed, exec)?;
    let dim: usize = model.sample_shape().iter().product();
    let final_loss = log.last().map(|l| l.loss);
    write_json(
        out,
        "eval.json",
        &json!({"steps": trainer.step_count(), "eval_loss": eval, "dimension": dim, "eval_loss_per_dim": eval / dim as f64}),
    )?;
    files.push("eval.json".into());
    let summary = json!({"steps": trainer.step_count(), "final_batch_loss": final_loss, "eval_loss": eval, "dimension": dim});
    finish(r, out, &files, vec![c.train.seed], summary)
}

fn sample_cmd(r: &Resolved, c: &SampleConfig, out: &Path, exec: Execution) -> CliResult<Outcome> {
    let (model, _) = load_model(&c.checkpoint)?;
    let prompt = Prompt::parse(&c.prompt, model.vocabulary())?;
    let plan = StepPlan::new(model.schedule(), c.steps, c.eta)?;
    let samples = try_map_indexed(exec, c.count, |i| {
        let mut rng = rng_for(c.seed.wrapping_add(i as u64), streams::SAMPLER);
        sample(&model, &prompt, &plan, c.guidance_weight, &mut rng, false).map(|s| s.0)
    })?;
    write_samples(&out.join("samples.f32"), &samples)?;
    let cols = c.count.min(8);
    let rows = c.count.div_ceil(cols);
    let mut cells = samples.clone();
    let blank = magicmix_core::Sample::filled(samples[0].shape(), -1.0);
    cells.resize(rows * cols, blank);
    let labels: Vec<String> = (0..rows * cols).map(|i| if i < c.count { format!("{i}") } else { String::new() }).collect();
    montage(&cells, &labels, rows, cols)?.save(&out.join("montage.png"))?;
    let mut files = vec!["samples.f32".to_string(), "montage.png".into()];
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample-{i:03}.png");
        export_png(s, &out.join(&name))?;
        files.push(name);
    }
    let summary = json!({"prompt": describe(&prompt, model.vocabulary()), "count": c.count});
    finish(r, out, &files, (0..c.count as u64).map(|i| c.seed.wrapping_add(i)).collect(), summary)
}

fn mix_cmd(r: &Resolved, c: &MixCommandConfig, out: &Path) -> CliResult<Outcome> {
    let (model, _) = load_model(&c.checkpoint)?;
    let dataset = c.dataset.as_deref().map(ShapesDataset::load).transpose()?;
    let t0 = Instant::now();
    let res = run_mix(&model, model.vocabulary(), &c.request, dataset.as_ref(), Path::new("."), c.record_trajectory)?;
    log::info!("{} finished in {:.2}s", r.name(), t0.elapsed().as_secs_f64());
    export_png(&res.x0, &out.join("mix.png"))?;
    write_samples(&out.join("mix.f32"), std::slice::from_ref(&res.x0))?;
    let mut files = vec!["mix.png".to_string(), "mix.f32".into(), "result.json".into()];
    let result = json!({
        "request": c.request,
        "window": {"k_min": res.window.k_min, "k_max": res.window.k_max},
        "content": describe(&Prompt::parse(&c.request.content, model.vocabulary())?, model.vocabulary()),
    });
    write_json(out, "result.json", &result)?;
    if c.record_trajectory {
        let states: Vec<_> = res.trajectory.iter().flat_map(|t| t.steps().iter().map(|(_, x)| x.clone())).collect();
        let steps: Vec<usize> = res.trajectory.iter().flat_map(|t| t.indices()).collect();
        write_samples(&out.join("trajectory.f32"), &states)?;
        let layout: Vec<_> = res.layout.steps().iter().map(|(_, x)| x.clone()).collect();
        write_samples(&out.join("layout.f32"), &layout)?;
        write_json(out, "trajectory.json", &json!({"trajectory_steps": steps, "layout_steps": res.layout.indices()}))?;
        files.extend(["trajectory.f32".into(), "layout.f32".into(), "trajectory.json".into()]);
    }
    let summary = json!({"output": out.join("mix.png"), "window": result["window"], "wall_time_s": res.wall_time_s});
    finish(r, out, &files, vec![c.request.config.seed], summary)
}

fn sweep_cmd(r: &Resolved, c: &SweepCommandConfig, out: &Path, exec: Execution) -> CliResult<Outcome> {
    let (model, _) = load_model(&c.checkpoint)?;
    let dataset = c.dataset.as_deref().map(ShapesDataset::load).transpose()?;
    let res = run_sweep(&model, model.vocabulary(), &c.request, dataset.as_ref(), Path::new("."), exec)?;
    let mut files = vec!["cells.json".to_string(), "sweep.f32".into()];
    if let Some(m) = &res.montage {
        m.save(&out.join("montage.png"))?;
        files.push("montage.png".into());
    }
    let images: Vec<_> = res.results.iter().map(|m| m.x0.clone()).collect();
    write_samples(&out.join("sweep.f32"), &images)?;
    for (i, x) in images.iter().enumerate() {
        let name = format!("cell-{i:03}.png");
        std::fs::write(out.join(&name), encode_png(x)?).map_err(|e| Error::Io {
            path: out.join(&name),
            source: e,
        })?;
        files.push(name);
    }
    let cells: Vec<Value> = res
        .cells
        .iter()
        .zip(&res.results)
        .map(|(cell, m)| {
            json!({
                "cell": cell,
                "row": cell.index / res.cols,
                "col": cell.index % res.cols,
                "window": {"k_min": m.window.k_min, "k_max": m.window.k_max},
            })
        })
        .collect();
    write_json(out, "cells.json", &json!({"rows": res.rows, "cols": res.cols, "cells": cells}))?;
    let seeds = res.cells.iter().map(|c| c.seed).collect();
    let summary = json!({"rows": res.rows, "cols": res.cols, "montage": out.join("montage.png")});
    finish(r, out, &files, seeds, summary)
}

/// JSON description of whatever `path` holds.
pub fn describe_path(path: &Path) -> CliResult<Value> {
    let io = |e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    };
    if path.is_dir() {
        if path.join("manifest.json").exists() && path.join("images.f32").exists() {
            let d = ShapesDataset::load(path)?;
            return Ok(json!({"kind": "dataset", "spec": d.spec, "count": d.len(),
                "vocabulary": d.vocabulary.concepts().map(|(_, w)| w.to_string()).collect::<Vec<_>>()}));
        }
        let m = RunManifest::load(path)?;
        return Ok(json!({"kind": "run-manifest", "manifest": m}));
    }
    let bytes = std::fs::read(path).map_err(io)?;
    if bytes.starts_with(b"MMXCKPT\0") {
        let ck = ModelCheckpoint::from_bytes(&bytes, path)?;
        return Ok(json!({
            "kind": "checkpoint",
            "sha256": sha256_file(path)?,
            "architecture": ck.config,
            "parameters": ck.weights.len(),
            "schedule": ck.schedule,
            "vocabulary": ck.vocabulary.concepts().map(|(_, w)| w.to_string()).collect::<Vec<_>>(),
            "training": ck.training,
            "has_ema": ck.ema.is_some(),
            "optimizer_step": ck.optimizer.as_ref().map(|o| o.step),
        }));
    }
    if bytes.starts_with(b"MMXARRAY") {
        let (dims, values) = magicmix_core::io::decode_array(&bytes, path)?;
        let finite = values.iter().all(|v| v.is_finite());
        let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        return Ok(json!({"kind": "array", "dims": dims, "min": lo, "max": hi, "finite": finite}));
    }
    if let Ok(m) = serde_json::from_slice::<RunManifest>(&bytes) {
        return Ok(json!({"kind": "run-manifest", "manifest": m}));
    }
    if bytes.starts_with(b"\x89PNG") {
        let s = magicmix_core::io::image::decode_png(&bytes, path)?;
        return Ok(json!({"kind": "png", "shape": s.shape()}));
    }
    Err(CliError::Core(Error::Malformed {
        path: path.to_path_buf(),
        reason: "not a checkpoint, dataset, array, png or run manifest".into(),
    }))
}

fn inspect(r: &Resolved, c: &InspectConfig, out: &Path) -> CliResult<Outcome> {
    let summary = describe_path(&c.path)?;
    write_json(out, "summary.json", &summary)?;
    finish(r, out, &["summary.json".to_string()], vec![], summary)
}

fn oracle_check(r: &Resolved, c: &OracleCheckConfig, out: &Path) -> CliResult<Outcome> {
    let sched = NoiseSchedule::from_descriptor(c.schedule)?;
    let worlds: Vec<MixtureWorld> = match &c.world {
        Some(p) => vec![MixtureWorld::load(p)?],
        None => c
            .dimensions
            .iter()
            .map(|&d| MixtureWorld::random(d, 3, 2, &mut rng_for(c.seed, d as u64)))
            .collect(),
    };
    let mut reports = Vec::new();
    for w in &worlds {
        reports.push(score_fd_check(w, &sched, c.probes, c.step, c.seed)?);
    }
    let max = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let pass = max <= c.tolerance;
    let summary = json!({"max_rel_error": max, "tolerance": c.tolerance, "pass": pass, "worlds": reports});
    write_json(out, "report.json", &summary)?;
    let mut outcome = finish(r, out, &["report.json".to_string()], vec![c.seed], summary)?;
    if !pass {
        outcome.failure = Some(CliError::Numerical(format!(
            "max score finite-difference error {max:.3e} exceeds {:.1e}",
            c.tolerance
        )));
    }
    Ok(outcome)
}

/// Re-runs a manifest into `out` and lists outputs whose bytes changed.
pub fn replay(manifest_path: &Path, out: &Path, exec: Execution) -> CliResult<Outcome> {
    let original = RunManifest::load(manifest_path)?;
    if !original.deterministic {
        return Err(config_err("manifest is not marked deterministic"));
    }
    let resolved = Resolved::from_manifest(&original)?;
    if let (Some(ck), Some(want)) = (resolved.checkpoint(), &original.checkpoint_sha256) {
        let have = sha256_file(ck)?;
        if &have != want {
            return Err(CliError::Mismatch(format!("checkpoint {} changed since the run", ck.display())));
        }
    }
    let mut outcome = execute(&resolved, out, exec)?;
    let mismatched = original.mismatches(out);
    outcome.summary = json!({
        "command": original.command,
        "outputs": original.outputs.len(),
        "mismatched": mismatched,
        "identical": mismatched.is_empty(),
    });
    if !mismatched.is_empty() {
        outcome.failure = Some(CliError::Mismatch(format!("outputs differ: {}", mismatched.join(", "))));
    }
    Ok(outcome)
}
