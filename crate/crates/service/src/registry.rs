//! Immutable models and datasets shared by every worker.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};

use magicmix_core::io::shapes::ShapesDataset;
use magicmix_core::io::sha256_file;
use magicmix_core::model::unet::UNet;
use magicmix_core::model::{Denoiser, ModelCheckpoint};
use magicmix_core::prompt::Vocabulary;
use magicmix_core::{Error, Result};

pub struct LoadedModel {
    pub name: String,
    pub sha256: String,
    pub checkpoint: ModelCheckpoint,
    unet: UNet,
}

impl LoadedModel {
    pub fn load(name: &str, path: &Path) -> Result<Self> {
        let checkpoint = ModelCheckpoint::load(path)?.inference_only();
        let unet = checkpoint.to_model()?;
        Ok(Self {
            name: name.to_string(),
            sha256: sha256_file(path)?,
            checkpoint,
            unet,
        })
    }

    pub fn denoiser(&self) -> &dyn Denoiser {
        &self.unet
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        self.unet.vocabulary()
    }

    pub fn info(&self) -> Value {
        json!({
            "name": self.name,
            "sha256": self.sha256,
            "architecture": self.checkpoint.config,
            "parameters": self.checkpoint.weights.len(),
            "schedule": self.checkpoint.schedule,
            "sample_shape": self.unet.sample_shape(),
            "vocabulary": self.vocabulary().concepts().map(|(_, w)| w.to_string()).collect::<Vec<_>>(),
            "training_steps": self.checkpoint.training.steps,
        })
    }
}

pub struct Registry {
    models: BTreeMap<String, Arc<LoadedModel>>,
    datasets: BTreeMap<String, Arc<ShapesDataset>>,
    default_model: Option<String>,
    uploads: PathBuf,
}

impl Registry {
    /// The first model listed is the default; requests that name no dataset
    /// use the alphabetically first one.
    pub fn new(models: Vec<LoadedModel>, datasets: Vec<(String, ShapesDataset)>, uploads: PathBuf) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidConfig("the service needs at least one model".into()));
        }
        std::fs::create_dir_all(&uploads).map_err(|e| Error::Io {
            path: uploads.clone(),
            source: e,
        })?;
        let default_model = models.first().map(|m| m.name.clone());
        Ok(Self {
            models: models.into_iter().map(|m| (m.name.clone(), Arc::new(m))).collect(),
            datasets: datasets.into_iter().map(|(n, d)| (n, Arc::new(d))).collect(),
            default_model,
            uploads,
        })
    }

    pub fn model(&self, name: Option<&str>) -> Result<Arc<LoadedModel>> {
        let name = name.or(self.default_model.as_deref()).unwrap_or_default();
        self.models
            .get(name)
            .cloned()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model `{name}`")))
    }

    pub fn has_model(&self, name: Option<&str>) -> bool {
        name.map_or(true, |n| self.models.contains_key(n))
    }

    pub fn dataset(&self, name: &str) -> Result<Arc<ShapesDataset>> {
        self.datasets
            .get(name)
            .cloned()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown dataset `{name}`")))
    }

    pub fn default_dataset(&self) -> Option<Arc<ShapesDataset>> {
        self.datasets.values().next().cloned()
    }

    pub fn models(&self) -> impl Iterator<Item = &Arc<LoadedModel>> {
        self.models.values()
    }

    pub fn datasets(&self) -> impl Iterator<Item = (&String, &Arc<ShapesDataset>)> {
        self.datasets.iter()
    }

    pub fn uploads_dir(&self) -> &Path {
        &self.uploads
    }
}
