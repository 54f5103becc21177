//! Domain types shared by the data, model and evaluation layers.
//!
//! Types carry public fields so that malformed instances can be built and
//! reported by [`validate_episode`]; the `try_new` constructors reject them
//! up front.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB video clip with pixel values in `[0, 1]`.
///
/// Each frame is stored row-major with interleaved channels (`H * W * 3`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    pub source_id: String,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<f32>>,
}

impl VideoClip {
    pub fn try_new(
        source_id: impl Into<String>,
        height: usize,
        width: usize,
        frames: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let clip = Self {
            source_id: source_id.into(),
            height,
            width,
            frames,
        };
        match clip.violations().first() {
            Some(v) => Err(Error::InvalidArgument(v.to_string())),
            None => Ok(clip),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Pixel `(y, x)` of frame `t` as an RGB triple.
    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        let f = &self.frames[t];
        [f[i], f[i + 1], f[i + 2]]
    }

    /// Keeps only the listed frames, in order.
    pub fn select_frames(&self, indices: &[usize]) -> Self {
        Self {
            source_id: self.source_id.clone(),
            height: self.height,
            width: self.width,
            frames: indices.iter().map(|&t| self.frames[t].clone()).collect(),
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.frames.len() < 2 {
            out.push(Violation::ClipTooShort);
        }
        let expected = self.height * self.width * 3;
        if self.frames.iter().any(|f| f.len() != expected) {
            out.push(Violation::FrameSizeMismatch);
        }
        if self
            .frames
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            out.push(Violation::PixelOutOfRange);
        }
        out
    }
}

/// Binary per-frame masks of one object, aligned with a [`VideoClip`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSequence {
    pub object_id: u32,
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Vec<u8>>,
}

impl MaskSequence {
    pub fn try_new(
        object_id: u32,
        height: usize,
        width: usize,
        masks: Vec<Vec<u8>>,
    ) -> Result<Self> {
        let seq = Self {
            object_id,
            height,
            width,
            masks,
        };
        match seq.violations().first() {
            Some(v) => Err(Error::InvalidArgument(v.to_string())),
            None => Ok(seq),
        }
    }

    pub fn empty(object_id: u32, frames: usize, height: usize, width: usize) -> Self {
        Self {
            object_id,
            height,
            width,
            masks: vec![vec![0; height * width]; frames],
        }
    }

    pub fn frame_count(&self) -> usize {
        self.masks.len()
    }

    pub fn area(&self, t: usize) -> usize {
        self.masks[t].iter().map(|&v| v as usize).sum()
    }

    pub fn is_all_empty(&self) -> bool {
        self.masks.iter().all(|m| m.iter().all(|&v| v == 0))
    }

    pub fn select_frames(&self, indices: &[usize]) -> Self {
        Self {
            object_id: self.object_id,
            height: self.height,
            width: self.width,
            masks: indices.iter().map(|&t| self.masks[t].clone()).collect(),
        }
    }

    /// Pixel-wise union; both sequences must share geometry.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.masks.len() != other.masks.len()
            || self.height != other.height
            || self.width != other.width
        {
            return Err(Error::Shape(
                "cannot union masks of different geometry".into(),
            ));
        }
        let masks = self
            .masks
            .iter()
            .zip(&other.masks)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x | y).collect())
            .collect();
        Ok(Self {
            object_id: self.object_id,
            height: self.height,
            width: self.width,
            masks,
        })
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.height * self.width;
        if self.masks.iter().any(|m| m.len() != n) {
            out.push(Violation::MaskSizeMismatch);
        }
        if self.masks.iter().flatten().any(|&v| v > 1) {
            out.push(Violation::MaskNotBinary);
        }
        out
    }

    fn aligned_with(&self, clip: &VideoClip) -> bool {
        self.masks.len() == clip.frames.len()
            && self.height == clip.height
            && self.width == clip.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParentArea {
    Daily,
    Sports,
    Entertainment,
    Special,
}

impl ParentArea {
    pub const ALL: [ParentArea; 4] = [
        ParentArea::Daily,
        ParentArea::Sports,
        ParentArea::Entertainment,
        ParentArea::Special,
    ];
}

impl fmt::Display for ParentArea {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParentArea::Daily => "daily",
            ParentArea::Sports => "sports",
            ParentArea::Entertainment => "entertainment",
            ParentArea::Special => "special",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CategoryInfo {
    pub motion_class: usize,
    pub object_class: usize,
    pub parent_area: ParentArea,
}

/// One annotated support example: a clip, the mask of the object performing
/// the way's motion, and its categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportShot {
    pub clip: VideoClip,
    pub mask: MaskSequence,
    pub category: CategoryInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryObject {
    pub mask: MaskSequence,
    pub category: CategoryInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub clip: VideoClip,
    pub objects: Vec<QueryObject>,
}

/// An N-way K-shot task. `target_way == None` marks an empty-target episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<Vec<SupportShot>>,
    pub query: QuerySample,
    pub target_way: Option<usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.support.len()
    }

    pub fn shots(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    /// Motion class of each way, taken from its first shot.
    pub fn way_classes(&self) -> Vec<usize> {
        self.support
            .iter()
            .map(|shots| {
                shots
                    .first()
                    .map_or(usize::MAX, |s| s.category.motion_class)
            })
            .collect()
    }

    /// Ground truth of `way` in the query: the union of every query object
    /// carrying the way's motion class (all-zero when absent).
    pub fn way_ground_truth(&self, way: usize) -> MaskSequence {
        let class = self.way_classes()[way];
        let clip = &self.query.clip;
        let mut gt = MaskSequence::empty(way as u32, clip.frame_count(), clip.height, clip.width);
        for obj in self
            .query
            .objects
            .iter()
            .filter(|o| o.category.motion_class == class)
        {
            for (dst, src) in gt.masks.iter_mut().zip(&obj.mask.masks) {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d |= s;
                }
            }
        }
        gt
    }

    /// Union of every annotated query object.
    pub fn query_foreground(&self) -> MaskSequence {
        let clip = &self.query.clip;
        let mut fg = MaskSequence::empty(0, clip.frame_count(), clip.height, clip.width);
        for obj in &self.query.objects {
            for (dst, src) in fg.masks.iter_mut().zip(&obj.mask.masks) {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d |= s;
                }
            }
        }
        fg
    }

    pub fn way_present(&self, way: usize) -> bool {
        let class = self.way_classes()[way];
        self.query
            .objects
            .iter()
            .any(|o| o.category.motion_class == class)
    }
}

/// A single broken invariant found by [`validate_episode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    NoWays,
    UnequalShots,
    EmptyWay,
    DuplicateWayClass,
    ShotClassMismatch,
    DuplicateSourceVideo,
    ClipTooShort,
    FrameSizeMismatch,
    PixelOutOfRange,
    MaskSizeMismatch,
    MaskNotBinary,
    MaskClipMisaligned,
    TargetWayOutOfRange,
    EmptyTargetHasWayClass,
    TargetClassMissing,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Violation::NoWays => "episode has no ways",
            Violation::UnequalShots => "ways have unequal shot counts",
            Violation::EmptyWay => "way without support shots",
            Violation::DuplicateWayClass => "duplicate way motion class",
            Violation::ShotClassMismatch => "support shot class differs from its way",
            Violation::DuplicateSourceVideo => "support clips share a source video",
            Violation::ClipTooShort => "clip shorter than 2 frames",
            Violation::FrameSizeMismatch => "frames differ in size",
            Violation::PixelOutOfRange => "pixel value outside [0,1]",
            Violation::MaskSizeMismatch => "mask size differs from its declared geometry",
            Violation::MaskNotBinary => "mask value not in {0,1}",
            Violation::MaskClipMisaligned => "mask sequence not aligned with its clip",
            Violation::TargetWayOutOfRange => "target way out of range",
            Violation::EmptyTargetHasWayClass => "empty-target query contains a way class",
            Violation::TargetClassMissing => "target way class absent from query",
        };
        f.write_str(s)
    }
}

/// Reports every broken invariant of `ep`; an empty list means it is valid.
///
/// Each violation kind is reported at most once.
pub fn validate_episode(ep: &Episode) -> Vec<Violation> {
    let mut out: Vec<Violation> = Vec::new();
    let push = |v: Violation, out: &mut Vec<Violation>| {
        if !out.contains(&v) {
            out.push(v);
        }
    };

    if ep.support.is_empty() {
        push(Violation::NoWays, &mut out);
    }
    if ep.support.iter().any(Vec::is_empty) {
        push(Violation::EmptyWay, &mut out);
    }
    if ep.support.iter().any(|w| w.len() != ep.shots()) {
        push(Violation::UnequalShots, &mut out);
    }

    let classes = ep.way_classes();
    let distinct: HashSet<_> = classes.iter().collect();
    if distinct.len() != classes.len() {
        push(Violation::DuplicateWayClass, &mut out);
    }

    let mut sources = HashSet::new();
    for (way, shots) in ep.support.iter().enumerate() {
        for shot in shots {
            if shot.category.motion_class != classes[way] {
                push(Violation::ShotClassMismatch, &mut out);
            }
            if !sources.insert(shot.clip.source_id.as_str()) {
                push(Violation::DuplicateSourceVideo, &mut out);
            }
            for v in shot
                .clip
                .violations()
                .into_iter()
                .chain(shot.mask.violations())
            {
                push(v, &mut out);
            }
            if !shot.mask.aligned_with(&shot.clip) {
                push(Violation::MaskClipMisaligned, &mut out);
            }
        }
    }

    for v in ep.query.clip.violations() {
        push(v, &mut out);
    }
    for obj in &ep.query.objects {
        for v in obj.mask.violations() {
            push(v, &mut out);
        }
        if !obj.mask.aligned_with(&ep.query.clip) {
            push(Violation::MaskClipMisaligned, &mut out);
        }
    }

    let query_has = |class: usize| {
        ep.query
            .objects
            .iter()
            .any(|o| o.category.motion_class == class)
    };
    match ep.target_way {
        None => {
            if classes.iter().any(|&c| query_has(c)) {
                push(Violation::EmptyTargetHasWayClass, &mut out);
            }
        }
        Some(w) if w >= ep.support.len() => push(Violation::TargetWayOutOfRange, &mut out),
        Some(w) => {
            if !query_has(classes[w]) {
                push(Violation::TargetClassMissing, &mut out);
            }
        }
    }
    out
}

/// Model output for one way of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WayPrediction {
    /// `T_q` soft masks at input resolution, row-major, values in `[0, 1]`.
    pub soft_masks: Vec<Vec<f32>>,
    /// Cosine similarity of the support and query summary tokens.
    pub match_score: f32,
    pub is_empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub ways: Vec<WayPrediction>,
}

impl Prediction {
    /// Final binary masks per way: soft masks above 0.5, overlaps given to
    /// the most confident way, and ways flagged empty cleared.
    pub fn resolve_masks(&self) -> Vec<MaskSequence> {
        let frames = self.ways.first().map_or(0, |w| w.soft_masks.len());
        let n = self.height * self.width;
        let mut out: Vec<MaskSequence> = (0..self.ways.len())
            .map(|w| MaskSequence::empty(w as u32, frames, self.height, self.width))
            .collect();
        for t in 0..frames {
            for i in 0..n {
                let mut best: Option<(usize, f32)> = None;
                for (w, way) in self.ways.iter().enumerate() {
                    if way.is_empty {
                        continue;
                    }
                    let p = way.soft_masks[t][i];
                    if p >= 0.5 && best.map_or(true, |(_, b)| p > b) {
                        best = Some((w, p));
                    }
                }
                if let Some((w, _)) = best {
                    out[w].masks[t][i] = 1;
                }
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn clip(id: &str, frames: usize, h: usize, w: usize, value: f32) -> VideoClip {
        VideoClip {
            source_id: id.to_string(),
            height: h,
            width: w,
            frames: vec![vec![value; h * w * 3]; frames],
        }
    }

    pub fn block_mask(id: u32, frames: usize, h: usize, w: usize) -> MaskSequence {
        let mut m = MaskSequence::empty(id, frames, h, w);
        for f in &mut m.masks {
            f[0] = 1;
            f[w + 1] = 1;
        }
        m
    }

    pub fn category(motion: usize, object: usize) -> CategoryInfo {
        CategoryInfo {
            motion_class: motion,
            object_class: object,
            parent_area: ParentArea::Daily,
        }
    }

    /// A valid 2-way 1-shot episode whose query contains way 0.
    pub fn two_way_episode() -> Episode {
        sized_episode(3, 4, 4)
    }

    pub fn sized_episode(t: usize, h: usize, w: usize) -> Episode {
        let shot = |id: &str, motion: usize| SupportShot {
            clip: clip(id, t, h, w, 0.5),
            mask: block_mask(1, t, h, w),
            category: category(motion, 0),
        };
        Episode {
            support: vec![vec![shot("a", 3)], vec![shot("b", 7)]],
            query: QuerySample {
                clip: clip("q", t, h, w, 0.25),
                objects: vec![QueryObject {
                    mask: block_mask(1, t, h, w),
                    category: category(3, 1),
                }],
            },
            target_way: Some(0),
        }
    }
}
