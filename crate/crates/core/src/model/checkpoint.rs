//! Checkpoint files: magic, a little-endian `u64` length, a UTF-8 JSON header,
//! then raw little-endian `f32` blobs in the order the header lists them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{UNet, UNetConfig, UNetLayout};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::prompt::Vocabulary;
use crate::schedule::{NoiseSchedule, ScheduleDescriptor};

const MAGIC: &[u8; 8] = b"MMXCKPT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: u64,
    pub loss: f64,
    /// Echo of the training configuration, if any.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: UNetConfig,
    pub schedule: ScheduleDescriptor,
    pub vocabulary: Vocabulary,
    pub training: TrainingMeta,
    pub weights: Vec<f32>,
    /// Exponential moving average of the weights; used for inference when present.
    pub ema: Option<Vec<f32>>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    architecture: UNetConfig,
    tensors: Vec<TensorEntry>,
    schedule: ScheduleDescriptor,
    vocabulary: Vocabulary,
    training: TrainingMeta,
    blobs: Vec<BlobEntry>,
    #[serde(default)]
    optimizer_step: Option<u64>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &UNet, training: TrainingMeta) -> Self {
        Self {
            config: model.config().clone(),
            schedule: super::Denoiser::schedule(model).descriptor(),
            vocabulary: model.vocabulary().clone(),
            training,
            weights: model.params().to_vec(),
            ema: None,
            optimizer: None,
        }
    }

    /// Inference model; the EMA weights win when present.
    pub fn to_model(&self) -> Result<UNet> {
        let layout = UNetLayout::new(&self.config)?;
        let weights = self.ema.as_ref().unwrap_or(&self.weights).clone();
        UNet::from_parts(
            layout,
            weights,
            NoiseSchedule::from_descriptor(self.schedule)?,
            self.vocabulary.clone(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layout = UNetLayout::new(&self.config)?;
        let n = layout.num_params();
        let mut blobs: Vec<(&str, &[f32])> = vec![("weights", &self.weights)];
        if let Some(e) = &self.ema {
            blobs.push(("ema", e));
        }
        if let Some(o) = &self.optimizer {
            blobs.push(("adam_m", &o.m));
            blobs.push(("adam_v", &o.v));
        }
        for (name, b) in &blobs {
            if b.len() != n {
                return Err(Error::config(format!(
                    "blob `{name}` has {} values, architecture needs {n}",
                    b.len()
                )));
            }
        }
        let header = Header {
            format: "magicmix-checkpoint".into(),
            version: FORMAT_VERSION,
            architecture: self.config.clone(),
            tensors: layout
                .specs()
                .iter()
                .map(|s| TensorEntry {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                })
                .collect(),
            schedule: self.schedule,
            vocabulary: self.vocabulary.clone(),
            training: self.training.clone(),
            blobs: blobs
                .iter()
                .map(|(name, b)| BlobEntry {
                    name: name.to_string(),
                    len: b.len(),
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * n * blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, b) in blobs {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |why: &str| Error::malformed(origin, why.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let layout = UNetLayout::new(&header.architecture)?;
        let specs = layout.specs();
        if specs.len() != header.tensors.len()
            || specs
                .iter()
                .zip(&header.tensors)
                .any(|(s, t)| s.name != t.name || s.shape != t.shape)
        {
            return Err(bad("tensor list does not match the architecture"));
        }
        let mut offset = 16 + hlen;
        let mut take = |len: usize| -> Result<Vec<f32>> {
            let end = offset + 4 * len;
            let raw = bytes.get(offset..end).ok_or_else(|| bad("truncated blob"))?;
            offset = end;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut weights = None;
        let mut ema = None;
        let mut m = None;
        let mut v = None;
        for b in &header.blobs {
            if b.len != layout.num_params() {
                return Err(bad(&format!("blob `{}` size does not match the architecture", b.name)));
            }
            let data = take(b.len)?;
            match b.name.as_str() {
                "weights" => weights = Some(data),
                "ema" => ema = Some(data),
                "adam_m" => m = Some(data),
                "adam_v" => v = Some(data),
                other => return Err(bad(&format!("unknown blob `{other}`"))),
            }
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after last blob"));
        }
        let optimizer = match (m, v, header.optimizer_step) {
            (Some(m), Some(v), Some(step)) => Some(OptimizerState { step, m, v }),
            (None, None, _) => None,
            _ => return Err(bad("incomplete optimizer state")),
        };
        Ok(Self {
            config: header.architecture,
            schedule: header.schedule,
            vocabulary: header.vocabulary,
            training: header.training,
            weights: weights.ok_or_else(|| bad("missing weights blob"))?,
            ema,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Checkpoint with the optimizer state dropped (for distribution).
    pub fn inference_only(&self) -> Self {
        Self {
            optimizer: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::unet::perturbed_params;
    use crate::model::Denoiser;
    use crate::par::rng_for;
    use crate::prompt::Prompt;
    use crate::sample::Sample;
    use crate::schedule::ScheduleFamily;

    fn tiny() -> UNet {
        let vocab = Vocabulary::new(&["circle", "striped"]).unwrap();
        let cfg = UNetConfig::tiny(vocab.len(), 8);
        let layout = UNetLayout::new(&cfg).unwrap();
        let params = perturbed_params(&layout, 4, 0.2);
        UNet::from_parts(layout, params, NoiseSchedule::new(100, ScheduleFamily::Cosine).unwrap(), vocab).unwrap()
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let model = tiny();
        let ck = ModelCheckpoint::from_model(&model, TrainingMeta::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let loaded = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        let m2 = loaded.to_model().unwrap();
        let x = Sample::randn(&[1, 8, 8], &mut rng_for(1, 0));
        let p = Prompt::parse("circle striped", model.vocabulary()).unwrap();
        let a = model.predict_eps(&x, 40, &p).unwrap();
        let b = m2.predict_eps(&x, 40, &p).unwrap();
        assert_eq!(a.bits(), b.bits());
    }

    #[test]
    fn corrupt_files_rejected() {
        let model = tiny();
        let mut ck = ModelCheckpoint::from_model(&model, TrainingMeta::default());
        ck.optimizer = Some(OptimizerState {
            step: 3,
            m: vec![0.5; model.params().len()],
            v: vec![0.25; model.params().len()],
        });
        let bytes = ck.to_bytes().unwrap();
        let p = Path::new("mem");
        assert_eq!(ModelCheckpoint::from_bytes(&bytes, p).unwrap(), ck);
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 4], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelCheckpoint::from_bytes(&extra, p).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(ModelCheckpoint::from_bytes(&magic, p).is_err());
        let mut short = ck.clone();
        short.weights.pop();
        assert!(short.to_bytes().is_err());
    }
}
