//! Episode dumps: an `episode.json` index next to PNG frames and binary
//! masks, one sub-directory per clip.
//!
//! ```text
//! <dir>/episode.json
//! <dir>/support_w{way}_s{shot}/frame_{t}.png, mask_{t}.png
//! <dir>/query/frame_{t}.png, object{i}_mask_{t}.png
//! ```
//!
//! Masks are written as 0/255 greyscale and binarised at half intensity on
//! load; frames go through 8-bit quantisation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_frame, read_gray, write_atomically, write_frame, write_gray};
use crate::error::{Error, Result};
use crate::types::{
    CategoryInfo, Episode, MaskSequence, QueryObject, QuerySample, SupportShot, VideoClip,
};

pub const EPISODE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ClipDump {
    source_id: String,
    dir: String,
    frames: usize,
    height: usize,
    width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShotDump {
    clip: ClipDump,
    category: CategoryInfo,
    object_id: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectDump {
    object_id: u32,
    category: CategoryInfo,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeDump {
    version: u32,
    target_way: Option<usize>,
    support: Vec<Vec<ShotDump>>,
    query: ClipDump,
    objects: Vec<ObjectDump>,
}

fn write_clip(root: &Path, dir: &str, clip: &VideoClip) -> Result<ClipDump> {
    let d = root.join(dir);
    fs::create_dir_all(&d)?;
    for (t, frame) in clip.frames.iter().enumerate() {
        write_frame(
            &d.join(format!("frame_{t}.png")),
            clip.height,
            clip.width,
            frame,
        )?;
    }
    Ok(ClipDump {
        source_id: clip.source_id.clone(),
        dir: dir.to_string(),
        frames: clip.frame_count(),
        height: clip.height,
        width: clip.width,
    })
}

fn write_masks(root: &Path, dir: &str, prefix: &str, mask: &MaskSequence) -> Result<()> {
    for (t, m) in mask.masks.iter().enumerate() {
        let bytes = m.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
        write_gray(
            &root.join(dir).join(format!("{prefix}_{t}.png")),
            mask.height,
            mask.width,
            bytes,
        )?;
    }
    Ok(())
}

fn read_clip(root: &Path, dump: &ClipDump) -> Result<VideoClip> {
    let mut frames = Vec::with_capacity(dump.frames);
    for t in 0..dump.frames {
        let (h, w, data) = read_frame(&root.join(&dump.dir).join(format!("frame_{t}.png")))?;
        if (h, w) != (dump.height, dump.width) {
            return Err(Error::Shape(format!("{}: frame {t} is {h}x{w}", dump.dir)));
        }
        frames.push(data);
    }
    VideoClip::try_new(dump.source_id.clone(), dump.height, dump.width, frames)
}

fn read_masks(root: &Path, dump: &ClipDump, prefix: &str, object_id: u32) -> Result<MaskSequence> {
    let mut masks = Vec::with_capacity(dump.frames);
    for t in 0..dump.frames {
        let (h, w, data) = read_gray(&root.join(&dump.dir).join(format!("{prefix}_{t}.png")))?;
        if (h, w) != (dump.height, dump.width) {
            return Err(Error::Shape(format!("{}: mask {t} is {h}x{w}", dump.dir)));
        }
        masks.push(data.into_iter().map(|v| u8::from(v >= 128)).collect());
    }
    MaskSequence::try_new(object_id, dump.height, dump.width, masks)
}

/// Writes `ep` under `dir`, refusing to replace a non-empty directory unless
/// `overwrite` is set.
pub fn save_episode(ep: &Episode, dir: &Path, overwrite: bool) -> Result<()> {
    write_atomically(dir, overwrite, |root| {
        let mut support = Vec::with_capacity(ep.ways());
        for (w, shots) in ep.support.iter().enumerate() {
            let mut row = Vec::with_capacity(shots.len());
            for (k, shot) in shots.iter().enumerate() {
                let sub = format!("support_w{w}_s{k}");
                let clip = write_clip(root, &sub, &shot.clip)?;
                write_masks(root, &sub, "mask", &shot.mask)?;
                row.push(ShotDump {
                    clip,
                    category: shot.category,
                    object_id: shot.mask.object_id,
                });
            }
            support.push(row);
        }
        let query = write_clip(root, "query", &ep.query.clip)?;
        let mut objects = Vec::with_capacity(ep.query.objects.len());
        for (i, obj) in ep.query.objects.iter().enumerate() {
            write_masks(root, "query", &format!("object{i}_mask"), &obj.mask)?;
            objects.push(ObjectDump {
                object_id: obj.mask.object_id,
                category: obj.category,
            });
        }
        let dump = EpisodeDump {
            version: EPISODE_VERSION,
            target_way: ep.target_way,
            support,
            query,
            objects,
        };
        fs::write(
            root.join("episode.json"),
            serde_json::to_string_pretty(&dump)?,
        )?;
        Ok(())
    })
}

pub fn load_episode(dir: &Path) -> Result<Episode> {
    let dump: EpisodeDump = serde_json::from_str(&fs::read_to_string(dir.join("episode.json"))?)?;
    if dump.version != EPISODE_VERSION {
        return Err(Error::Config(format!(
            "episode dump version {} is not supported (expected {EPISODE_VERSION})",
            dump.version
        )));
    }
    let mut support = Vec::with_capacity(dump.support.len());
    for row in &dump.support {
        let mut shots = Vec::with_capacity(row.len());
        for shot in row {
            shots.push(SupportShot {
                clip: read_clip(dir, &shot.clip)?,
                mask: read_masks(dir, &shot.clip, "mask", shot.object_id)?,
                category: shot.category,
            });
        }
        support.push(shots);
    }
    let clip = read_clip(dir, &dump.query)?;
    let mut objects = Vec::with_capacity(dump.objects.len());
    for (i, obj) in dump.objects.iter().enumerate() {
        objects.push(QueryObject {
            mask: read_masks(dir, &dump.query, &format!("object{i}_mask"), obj.object_id)?,
            category: obj.category,
        });
    }
    Ok(Episode {
        support,
        query: QuerySample { clip, objects },
        target_way: dump.target_way,
    })
}
