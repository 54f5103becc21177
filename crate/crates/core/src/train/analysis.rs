//! Ablation presets and prototype-space analysis.

use std::fmt;
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::dataset::{subsample_frames, DatasetIndex};
use crate::embed::{silhouette, Distance};
use crate::error::{Error, Result};
use crate::model::{DmaNet, ModelConfig, MotionPooling};

/// Named switches reproducing the component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    AppearanceOnly,
    MotionOnly,
    NoAuxObject,
    NoAuxMotion,
    /// Masked motion pooling (the default; kept so runs can pin it).
    MaskPoolMotion,
    /// Unmasked spatial average of the motion volume.
    AveragePoolMotion,
    /// No pixel-prototype similarity prior in the decoder.
    NoPrior,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::AppearanceOnly,
        Ablation::MotionOnly,
        Ablation::NoAuxObject,
        Ablation::NoAuxMotion,
        Ablation::MaskPoolMotion,
        Ablation::AveragePoolMotion,
        Ablation::NoPrior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::AppearanceOnly => "appearance-only",
            Ablation::MotionOnly => "motion-only",
            Ablation::NoAuxObject => "no-aux-object",
            Ablation::NoAuxMotion => "no-aux-motion",
            Ablation::MaskPoolMotion => "mask-pool-motion",
            Ablation::AveragePoolMotion => "average-pool-motion",
            Ablation::NoPrior => "no-prior",
        }
    }

    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig) {
        match self {
            Ablation::AppearanceOnly => model.branches.motion = false,
            Ablation::MotionOnly => model.branches.appearance = false,
            Ablation::NoAuxObject => train.weights.aux_object = 0.0,
            Ablation::NoAuxMotion => train.weights.aux_motion = 0.0,
            Ablation::MaskPoolMotion => model.pooling = MotionPooling::Masked,
            Ablation::AveragePoolMotion => model.pooling = MotionPooling::Average,
            Ablation::NoPrior => model.decoder_prior = false,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// Prototypes of one clip's primary object.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrototypeRow {
    pub clip_id: String,
    pub motion_class: usize,
    pub object_class: usize,
    /// Refined queries, flattened row-major from `(Q, d)`.
    pub dma: Vec<f64>,
    pub cls: Vec<f64>,
}

/// Runs the support branch over each clip with its primary object's mask,
/// on `frames` uniformly spaced frames.
pub fn dump_prototypes(net: &DmaNet, index: &DatasetIndex, clip_ids: &[String], frames: usize) -> Result<Vec<PrototypeRow>> {
    let mut rows = Vec::with_capacity(clip_ids.len());
    for id in clip_ids {
        let entry = index
            .clips
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown clip {id}")))?;
        let (slot, category) = entry
            .objects
            .iter()
            .enumerate()
            .find(|(_, (oid, _))| *oid == 1)
            .map(|(i, (_, c))| (i, *c))
            .ok_or_else(|| Error::InvalidArgument(format!("{id} has no primary object")))?;
        let loaded = index.load_clip(id)?;
        let picks = subsample_frames::<rand_chacha::ChaCha8Rng>(entry.frame_count(), frames, None)?;
        let set = net.support_prototypes(&loaded.clip.select_frames(&picks), &loaded.masks[slot].select_frames(&picks))?;
        let flat = |t: &candle_core::Tensor| -> Result<Vec<f64>> { Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?) };
        rows.push(PrototypeRow {
            clip_id: id.clone(),
            motion_class: category.motion_class,
            object_class: category.object_class,
            dma: flat(&set.dma)?,
            cls: flat(&set.cls)?,
        });
    }
    Ok(rows)
}

/// Which prototype of a [`PrototypeRow`] to analyse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Dma,
    Cls,
}

impl Feature {
    pub fn of(self, row: &PrototypeRow) -> &[f64] {
        match self {
            Feature::Dma => &row.dma,
            Feature::Cls => &row.cls,
        }
    }
}

/// Cosine silhouettes of the rows under motion labels and object labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Silhouettes {
    pub motion: f64,
    pub object: f64,
}

pub fn silhouettes(rows: &[PrototypeRow], feature: Feature) -> Result<Silhouettes> {
    let points: Vec<Vec<f64>> = rows.iter().map(|r| feature.of(r).to_vec()).collect();
    let motion: Vec<usize> = rows.iter().map(|r| r.motion_class).collect();
    let object: Vec<usize> = rows.iter().map(|r| r.object_class).collect();
    Ok(Silhouettes {
        motion: silhouette(&points, &motion, Distance::Cosine)?,
        object: silhouette(&points, &object, Distance::Cosine)?,
    })
}
