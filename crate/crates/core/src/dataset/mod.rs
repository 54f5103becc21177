//! On-disk dataset layout, category folds and episode sampling.
//!
//! Layout of a dataset root:
//!
//! ```text
//! meta.json              vocabularies and per-clip object categories
//! frames/<clip>/<t>.png  RGB frames, 8 bit
//! masks/<clip>/<t>.png   8-bit object-id maps (0 = background)
//! ```
//!
//! `meta.json`:
//!
//! ```json
//! {
//!   "version": 1,
//!   "motion_vocab": [{"id": 0, "name": "linear", "area": "daily"}],
//!   "object_vocab": [{"id": 0, "name": "disk"}],
//!   "clips": [{"id": "o00_m00_000", "frames": 8, "height": 128, "width": 128,
//!              "objects": [{"object_id": 1, "object_class": 0, "motion_class": 0}]}]
//! }
//! ```

mod folds;
mod sampler;

pub use folds::{make_folds, ClassStat, FoldSplit, SplitStrategy};
pub use sampler::{
    sample_episode, subsample_frames, ClipPools, ClipRef, EpisodeConfig, EpisodePlan, Phase,
    Protocol, WayPlan,
};

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{self, render_clip, SyntheticConfig};
use crate::types::{CategoryInfo, MaskSequence, ParentArea, VideoClip};

pub const META_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionEntry {
    pub id: usize,
    pub name: String,
    pub area: ParentArea,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub object_id: u32,
    pub object_class: usize,
    pub motion_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: u32,
    pub motion_vocab: Vec<MotionEntry>,
    pub object_vocab: Vec<ObjectEntry>,
    pub clips: Vec<ClipRecord>,
}

/// One row of the synthetic manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clip_id: String,
    pub object_class: usize,
    pub motion_class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCell {
    pub object_class: usize,
    pub motion_class: usize,
    pub clips: Vec<String>,
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub clips: Vec<ManifestRow>,
    pub cells: Vec<ManifestCell>,
}

/// A clip of the index: file paths plus per-object categories.
#[derive(Debug, Clone)]
pub struct ClipEntry {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub frame_paths: Vec<PathBuf>,
    pub mask_paths: Vec<PathBuf>,
    pub objects: Vec<(u32, CategoryInfo)>,
}

impl ClipEntry {
    pub fn frame_count(&self) -> usize {
        self.frame_paths.len()
    }

    pub fn has_motion(&self, class: usize) -> bool {
        self.objects.iter().any(|(_, c)| c.motion_class == class)
    }

    /// The object annotated with id 1, the primary object of synthetic clips.
    pub fn primary(&self) -> Option<&CategoryInfo> {
        self.objects.iter().find(|(id, _)| *id == 1).map(|(_, c)| c)
    }
}

/// Decoded pixels of a clip: the video plus one mask sequence per object.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub clip: VideoClip,
    pub masks: Vec<MaskSequence>,
}

/// Validated view of a dataset root. Pixels are decoded on demand unless
/// [`DatasetIndex::preload`] was called.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub motion_vocab: Vec<MotionEntry>,
    pub object_vocab: Vec<ObjectEntry>,
    pub clips: BTreeMap<String, ClipEntry>,
    cache: HashMap<String, Arc<LoadedClip>>,
}

fn load_err(clip: &str, reason: impl Into<String>) -> Error {
    Error::Load {
        clip: clip.to_string(),
        reason: reason.into(),
    }
}

fn count_pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
                .count()
        })
        .unwrap_or(0)
}

/// Reads and validates `root/meta.json` and every file it references.
pub fn load_index(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref().to_path_buf();
    let meta_path = root.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| load_err("meta.json", e.to_string()))?;
    let meta: Meta = serde_json::from_str(&text)?;
    if meta.version != META_VERSION {
        return Err(load_err(
            "meta.json",
            format!("unsupported version {}", meta.version),
        ));
    }
    for (i, m) in meta.motion_vocab.iter().enumerate() {
        if m.id != i {
            return Err(load_err(
                "meta.json",
                "motion vocabulary ids must be 0..C_m in order",
            ));
        }
    }
    for (i, o) in meta.object_vocab.iter().enumerate() {
        if o.id != i {
            return Err(load_err(
                "meta.json",
                "object vocabulary ids must be 0..C_o in order",
            ));
        }
    }

    let mut clips = BTreeMap::new();
    for rec in &meta.clips {
        let id = rec.id.as_str();
        if rec.frames < 2 {
            return Err(load_err(id, "clip shorter than 2 frames"));
        }
        let frame_dir = root.join("frames").join(id);
        let mask_dir = root.join("masks").join(id);
        let (n_frames, n_masks) = (count_pngs(&frame_dir), count_pngs(&mask_dir));
        if n_frames != rec.frames || n_masks != rec.frames {
            return Err(load_err(
                id,
                format!(
                    "frame/mask count mismatch: meta says {}, found {n_frames} frames and {n_masks} masks",
                    rec.frames
                ),
            ));
        }
        let mut objects = Vec::with_capacity(rec.objects.len());
        for o in &rec.objects {
            if o.motion_class >= meta.motion_vocab.len() {
                return Err(load_err(
                    id,
                    format!("motion class {} out of range", o.motion_class),
                ));
            }
            if o.object_class >= meta.object_vocab.len() {
                return Err(load_err(
                    id,
                    format!("object class {} out of range", o.object_class),
                ));
            }
            if o.object_id == 0 || o.object_id > 255 {
                return Err(load_err(
                    id,
                    format!("object id {} not in 1..=255", o.object_id),
                ));
            }
            objects.push((
                o.object_id,
                CategoryInfo {
                    motion_class: o.motion_class,
                    object_class: o.object_class,
                    parent_area: meta.motion_vocab[o.motion_class].area,
                },
            ));
        }
        let frame_paths: Vec<PathBuf> = (0..rec.frames)
            .map(|t| frame_dir.join(format!("{t}.png")))
            .collect();
        let mask_paths: Vec<PathBuf> = (0..rec.frames)
            .map(|t| mask_dir.join(format!("{t}.png")))
            .collect();
        for p in frame_paths.iter().chain(&mask_paths) {
            let (w, h) = image::image_dimensions(p)
                .map_err(|e| load_err(id, format!("{}: {e}", p.display())))?;
            if w as usize != rec.width || h as usize != rec.height {
                return Err(load_err(
                    id,
                    format!(
                        "{} is {w}x{h}, meta says {}x{}",
                        p.display(),
                        rec.width,
                        rec.height
                    ),
                ));
            }
        }
        clips.insert(
            rec.id.clone(),
            ClipEntry {
                id: rec.id.clone(),
                height: rec.height,
                width: rec.width,
                frame_paths,
                mask_paths,
                objects,
            },
        );
    }
    Ok(DatasetIndex {
        root,
        motion_vocab: meta.motion_vocab,
        object_vocab: meta.object_vocab,
        clips,
        cache: HashMap::new(),
    })
}

/// Reads an RGB frame into `[0, 1]` floats.
pub fn read_frame(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok((h as usize, w as usize, data))
}

pub fn write_frame(path: &Path, h: usize, w: usize, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Shape("frame buffer size".into()))?
        .save(path)?;
    Ok(())
}

pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

pub fn write_gray(path: &Path, h: usize, w: usize, data: Vec<u8>) -> Result<()> {
    image::GrayImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Shape("mask buffer size".into()))?
        .save(path)?;
    Ok(())
}

impl DatasetIndex {
    pub fn motion_classes(&self) -> usize {
        self.motion_vocab.len()
    }

    pub fn object_classes(&self) -> usize {
        self.object_vocab.len()
    }

    pub fn class_stats(&self) -> Vec<ClassStat> {
        self.motion_vocab
            .iter()
            .map(|m| ClassStat {
                motion_class: m.id,
                area: m.area,
                clips: self.clips.values().filter(|c| c.has_motion(m.id)).count(),
            })
            .collect()
    }

    /// Decodes every clip into memory so later loads are free.
    pub fn preload(&mut self) -> Result<()> {
        let ids: Vec<String> = self.clips.keys().cloned().collect();
        for id in ids {
            if !self.cache.contains_key(&id) {
                let loaded = self.decode(&id)?;
                self.cache.insert(id, Arc::new(loaded));
            }
        }
        Ok(())
    }

    fn decode(&self, id: &str) -> Result<LoadedClip> {
        let entry = self
            .clips
            .get(id)
            .ok_or_else(|| load_err(id, "unknown clip"))?;
        let mut frames = Vec::with_capacity(entry.frame_count());
        for p in &entry.frame_paths {
            let (h, w, data) = read_frame(p).map_err(|e| load_err(id, e.to_string()))?;
            if h != entry.height || w != entry.width {
                return Err(load_err(id, "frame size differs from meta"));
            }
            frames.push(data);
        }
        let mut masks: Vec<MaskSequence> = entry
            .objects
            .iter()
            .map(|(oid, _)| {
                MaskSequence::empty(*oid, entry.frame_count(), entry.height, entry.width)
            })
            .collect();
        for (t, p) in entry.mask_paths.iter().enumerate() {
            let (_, _, ids) = read_gray(p).map_err(|e| load_err(id, e.to_string()))?;
            for (m, (oid, _)) in masks.iter_mut().zip(&entry.objects) {
                for (dst, &v) in m.masks[t].iter_mut().zip(&ids) {
                    *dst = (v as u32 == *oid) as u8;
                }
            }
        }
        Ok(LoadedClip {
            clip: VideoClip {
                source_id: id.to_string(),
                height: entry.height,
                width: entry.width,
                frames,
            },
            masks,
        })
    }

    /// Pixels and per-object masks of a clip.
    pub fn load_clip(&self, id: &str) -> Result<Arc<LoadedClip>> {
        if let Some(c) = self.cache.get(id) {
            return Ok(Arc::clone(c));
        }
        Ok(Arc::new(self.decode(id)?))
    }
}

/// Writes `build` into a fresh temporary directory next to `target` and
/// moves it into place once complete.
pub fn write_atomically<T>(
    target: &Path,
    overwrite: bool,
    build: impl FnOnce(&Path) -> Result<T>,
) -> Result<T> {
    if target.exists() {
        let non_empty = fs::read_dir(target)?.next().is_some();
        if non_empty && !overwrite {
            return Err(Error::OutputExists(target.to_path_buf()));
        }
    }
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let tmp = tempfile::Builder::new()
        .prefix(".partial-")
        .tempdir_in(&parent)?;
    let out = build(tmp.path())?;
    if target.exists() {
        fs::remove_dir_all(target)?;
    }
    let tmp_path = tmp.keep();
    fs::rename(&tmp_path, target)?;
    Ok(out)
}

/// Renders every planned clip of `cfg` and writes the dataset layout,
/// `manifest.json` and a copy of the generation config under `out`.
pub fn build_synthetic_dataset(
    cfg: &SyntheticConfig,
    out: &Path,
    overwrite: bool,
) -> Result<Manifest> {
    let plans = cfg.plan()?;
    write_atomically(out, overwrite, |dir| {
        let mut clips_meta = Vec::with_capacity(plans.len());
        let mut rows = Vec::with_capacity(plans.len());
        for plan in &plans {
            let rendered = render_clip(&plan.request)?;
            let fdir = dir.join("frames").join(&plan.clip_id);
            let mdir = dir.join("masks").join(&plan.clip_id);
            fs::create_dir_all(&fdir)?;
            fs::create_dir_all(&mdir)?;
            let (h, w) = (cfg.height, cfg.width);
            for (t, frame) in rendered.clip.frames.iter().enumerate() {
                write_frame(&fdir.join(format!("{t}.png")), h, w, frame)?;
                let mut ids = vec![0u8; h * w];
                for m in &rendered.masks {
                    for (dst, &v) in ids.iter_mut().zip(&m.masks[t]) {
                        if v == 1 {
                            *dst = m.object_id as u8;
                        }
                    }
                }
                write_gray(&mdir.join(format!("{t}.png")), h, w, ids)?;
            }
            clips_meta.push(ClipRecord {
                id: plan.clip_id.clone(),
                frames: cfg.frames,
                height: cfg.height,
                width: cfg.width,
                objects: rendered
                    .masks
                    .iter()
                    .zip(&rendered.categories)
                    .map(|(m, c)| ObjectRecord {
                        object_id: m.object_id,
                        object_class: c.object_class,
                        motion_class: c.motion_class,
                    })
                    .collect(),
            });
            rows.push(ManifestRow {
                clip_id: plan.clip_id.clone(),
                object_class: plan.object_class,
                motion_class: plan.motion_class,
            });
        }
        let meta = Meta {
            version: META_VERSION,
            motion_vocab: (0..cfg.motion_classes)
                .map(|m| MotionEntry {
                    id: m,
                    name: synth::motion_name(m),
                    area: synth::motion_area(m),
                })
                .collect(),
            object_vocab: (0..cfg.object_classes)
                .map(|o| ObjectEntry {
                    id: o,
                    name: synth::object_name(o),
                })
                .collect(),
            clips: clips_meta,
        };
        let mut cells = Vec::new();
        for o in 0..cfg.object_classes {
            for m in 0..cfg.motion_classes {
                cells.push(ManifestCell {
                    object_class: o,
                    motion_class: m,
                    clips: rows
                        .iter()
                        .filter(|r| r.object_class == o && r.motion_class == m)
                        .map(|r| r.clip_id.clone())
                        .collect(),
                    held_out: cfg.holdout.contains(&(o, m)),
                });
            }
        }
        let manifest = Manifest { clips: rows, cells };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        fs::write(
            dir.join("synthetic.json"),
            serde_json::to_string_pretty(cfg)?,
        )?;
        Ok(manifest)
    })
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(
        root.join("manifest.json"),
    )?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            height: 64,
            width: 64,
            frames: 4,
            clips_per_cell: 2,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generate_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let cfg = small_config();
        let manifest = build_synthetic_dataset(&cfg, &root, false).unwrap();
        assert_eq!(manifest.clips.len(), 4 * 3 * 2);
        assert_eq!(manifest.cells.len(), 12);
        let index = load_index(&root).unwrap();
        assert_eq!(index.clips.len(), 24);

        // masks on disk equal a fresh render
        let plan = cfg.plan_clip(1, 2, 1).unwrap();
        let rendered = render_clip(&plan.request).unwrap();
        let loaded = index.load_clip(&plan.clip_id).unwrap();
        assert_eq!(loaded.masks, rendered.masks);
        for (a, b) in loaded
            .clip
            .frames
            .iter()
            .flatten()
            .zip(rendered.clip.frames.iter().flatten())
        {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn refuses_non_empty_output_without_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        build_synthetic_dataset(&small_config(), &root, false).unwrap();
        assert!(matches!(
            build_synthetic_dataset(&small_config(), &root, false),
            Err(Error::OutputExists(_))
        ));
        build_synthetic_dataset(&small_config(), &root, true).unwrap();
    }

    #[test]
    fn seed_changes_pixels_not_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let a = build_synthetic_dataset(&small_config(), &dir.path().join("a"), false).unwrap();
        let cfg_b = SyntheticConfig {
            seed: 9,
            ..small_config()
        };
        let b = build_synthetic_dataset(&cfg_b, &dir.path().join("b"), false).unwrap();
        assert_eq!(a, b);
        let fa = fs::read(dir.path().join("a/frames/o00_m00_000/0.png")).unwrap();
        let fb = fs::read(dir.path().join("b/frames/o00_m00_000/0.png")).unwrap();
        assert_ne!(fa, fb);
    }

    #[test]
    fn missing_mask_names_clip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        build_synthetic_dataset(&small_config(), &root, false).unwrap();
        fs::remove_file(root.join("masks/o01_m02_000/3.png")).unwrap();
        let err = load_index(&root).unwrap_err().to_string();
        assert!(err.contains("o01_m02_000"), "{err}");
        assert!(err.contains("mismatch"), "{err}");
    }

    #[test]
    fn undecodable_file_names_clip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        build_synthetic_dataset(&small_config(), &root, false).unwrap();
        fs::write(root.join("frames/o02_m01_001/2.png"), b"not a png").unwrap();
        let err = load_index(&root).unwrap_err().to_string();
        assert!(err.contains("o02_m01_001"), "{err}");
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        build_synthetic_dataset(&small_config(), &root, false).unwrap();
        let mut meta: Meta =
            serde_json::from_str(&fs::read_to_string(root.join("meta.json")).unwrap()).unwrap();
        meta.clips[0].objects[0].motion_class = 99;
        fs::write(
            root.join("meta.json"),
            serde_json::to_string(&meta).unwrap(),
        )
        .unwrap();
        let err = load_index(&root).unwrap_err().to_string();
        assert!(err.contains("out of range"), "{err}");
    }
}
