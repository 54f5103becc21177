//! Deterministic shapes-performing-motions videos with exact masks.
//!
//! Trajectories are closed-form functions of the frame index, so every mask
//! can be re-derived analytically. Objects are identified by what they do
//! (motion class) independently of what they look like (object class).

use std::f32::consts::{PI, TAU};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    CategoryInfo, Episode, MaskSequence, ParentArea, QueryObject, QuerySample, SupportShot,
    VideoClip,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    /// Constant horizontal velocity.
    Linear,
    /// Vertical sinusoidal back-and-forth.
    Oscillate,
    /// Stationary, size oscillates.
    PulseScale,
    /// Diagonal jitter reversing every frame.
    Shake,
    Circular,
    /// Horizontal drift with a triangle wave in y.
    Zigzag,
    /// Circle with radius growing toward the amplitude.
    Spiral,
    /// Moves along a direction for half a period, then holds.
    DriftAndStop,
}

impl TrajectoryKind {
    /// Class-id order: the first four kinds are distinguishable from a
    /// three-frame window, which keeps small motion vocabularies learnable.
    pub const ALL: [TrajectoryKind; 8] = [
        TrajectoryKind::Linear,
        TrajectoryKind::Oscillate,
        TrajectoryKind::PulseScale,
        TrajectoryKind::Shake,
        TrajectoryKind::Circular,
        TrajectoryKind::Zigzag,
        TrajectoryKind::Spiral,
        TrajectoryKind::DriftAndStop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::Linear => "linear",
            TrajectoryKind::Oscillate => "oscillate",
            TrajectoryKind::PulseScale => "pulse-scale",
            TrajectoryKind::Shake => "shake",
            TrajectoryKind::Circular => "circular",
            TrajectoryKind::Zigzag => "zigzag",
            TrajectoryKind::Spiral => "spiral",
            TrajectoryKind::DriftAndStop => "drift-and-stop",
        }
    }
}

/// A motion class instance: which trajectory, with which parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub motion_class: usize,
    pub kind: TrajectoryKind,
    /// Pixels (meaning depends on the kind: displacement per period, radius,
    /// swing, or size change).
    pub amplitude: f32,
    /// Frames.
    pub period: f32,
    /// Radians; for translating kinds this is also the direction.
    pub phase: f32,
    /// Anchor of the trajectory in pixels, `(x, y)`.
    pub origin: (f32, f32),
}

/// Kind of a motion class. Classes beyond the eight kinds reuse a kind with
/// a disjoint parameter band.
pub fn motion_kind(motion_class: usize) -> TrajectoryKind {
    TrajectoryKind::ALL[motion_class % TrajectoryKind::ALL.len()]
}

pub fn motion_name(motion_class: usize) -> String {
    let band = motion_class / TrajectoryKind::ALL.len();
    if band == 0 {
        motion_kind(motion_class).name().to_string()
    } else {
        format!("{}-{}", motion_kind(motion_class).name(), band + 1)
    }
}

pub fn motion_area(motion_class: usize) -> ParentArea {
    ParentArea::ALL[motion_class % ParentArea::ALL.len()]
}

impl MotionSpec {
    /// Draws parameters for `motion_class` from its fixed range. `scale` is
    /// the canvas side divided by 64.
    pub fn sample<R: Rng>(motion_class: usize, scale: f32, rng: &mut R) -> Self {
        let kind = motion_kind(motion_class);
        let band = (motion_class / TrajectoryKind::ALL.len()) as f32;
        // Higher bands move faster, keeping each class's range disjoint.
        let speed = 1.0 + 0.5 * band;
        let s = scale * speed;
        let (amplitude, period, phase) = match kind {
            TrajectoryKind::Linear => {
                let dir = if rng.gen_bool(0.5) { 0.0 } else { PI };
                (rng.gen_range(8.0..12.0) * s, 8.0, dir)
            }
            TrajectoryKind::Oscillate => (
                rng.gen_range(4.0..6.0) * s,
                rng.gen_range(5.0..7.0),
                rng.gen_range(0.0..TAU),
            ),
            TrajectoryKind::PulseScale => (
                rng.gen_range(4.0..6.0) * s,
                rng.gen_range(4.0..6.0),
                rng.gen_range(0.0..TAU),
            ),
            TrajectoryKind::Shake => {
                let dir = if rng.gen_bool(0.5) {
                    PI / 4.0
                } else {
                    3.0 * PI / 4.0
                };
                (rng.gen_range(1.5..2.5) * s, 2.0, dir)
            }
            TrajectoryKind::Circular => (
                rng.gen_range(5.0..7.0) * s,
                rng.gen_range(7.0..9.0),
                rng.gen_range(0.0..TAU),
            ),
            TrajectoryKind::Zigzag => (
                rng.gen_range(3.0..5.0) * s,
                4.0,
                if rng.gen_bool(0.5) { 0.0 } else { PI },
            ),
            TrajectoryKind::Spiral => (
                rng.gen_range(6.0..9.0) * s,
                rng.gen_range(5.0..7.0),
                rng.gen_range(0.0..TAU),
            ),
            TrajectoryKind::DriftAndStop => (
                rng.gen_range(8.0..12.0) * s,
                rng.gen_range(6.0..8.0),
                rng.gen_range(0.0..TAU),
            ),
        };
        Self {
            motion_class,
            kind,
            amplitude,
            period,
            phase,
            origin: (0.0, 0.0),
        }
    }

    /// Centre displacement from `origin` at frame `t`, `(dx, dy)`.
    pub fn offset(&self, t: usize) -> (f32, f32) {
        let t = t as f32;
        let a = self.amplitude;
        let p = self.period.max(1e-3);
        let w = TAU / p;
        let (c, s) = (self.phase.cos(), self.phase.sin());
        match self.kind {
            TrajectoryKind::Linear => {
                let d = a * t / p;
                (d * c, d * s)
            }
            TrajectoryKind::Oscillate => (0.0, a * (w * t + self.phase).sin()),
            TrajectoryKind::PulseScale => (0.0, 0.0),
            TrajectoryKind::Shake => {
                let d = a * (PI * t).cos();
                (d * c, d * s)
            }
            TrajectoryKind::Circular => {
                let ang = w * t + self.phase;
                (a * ang.cos(), a * ang.sin())
            }
            TrajectoryKind::Zigzag => {
                let dir = if c >= 0.0 { 1.0 } else { -1.0 };
                (dir * a * t / p, a * triangle_wave(t / p))
            }
            TrajectoryKind::Spiral => {
                let r = a * t / (t + p);
                let ang = w * t + self.phase;
                (r * ang.cos(), r * ang.sin())
            }
            TrajectoryKind::DriftAndStop => {
                let d = a * (t / (0.5 * p)).min(1.0);
                (d * c, d * s)
            }
        }
    }

    /// Additive size change at frame `t` (non-zero only for pulse-scale).
    pub fn size_delta(&self, t: usize) -> f32 {
        match self.kind {
            TrajectoryKind::PulseScale => {
                self.amplitude * (TAU / self.period.max(1e-3) * t as f32 + self.phase).sin()
            }
            _ => 0.0,
        }
    }

    pub fn center(&self, t: usize) -> (f32, f32) {
        let (dx, dy) = self.offset(t);
        (self.origin.0 + dx, self.origin.1 + dy)
    }

    /// Bounding box of the displacements and the largest size delta over
    /// `frames`: `(min_dx, max_dx, min_dy, max_dy, max_size_delta)`.
    pub fn extent(&self, frames: usize) -> (f32, f32, f32, f32, f32) {
        let mut e = (f32::MAX, f32::MIN, f32::MAX, f32::MIN, 0.0f32);
        for t in 0..frames {
            let (dx, dy) = self.offset(t);
            e.0 = e.0.min(dx);
            e.1 = e.1.max(dx);
            e.2 = e.2.min(dy);
            e.3 = e.3.max(dy);
            e.4 = e.4.max(self.size_delta(t));
        }
        e
    }
}

/// Triangle wave with period 1 and range `[-1, 1]`, starting at 0 rising.
fn triangle_wave(x: f32) -> f32 {
    let f = x - x.floor();
    if f < 0.25 {
        4.0 * f
    } else if f < 0.75 {
        2.0 - 4.0 * f
    } else {
        4.0 * f - 4.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Disk,
    Square,
    Triangle,
    Star,
    Bar,
}

impl Geometry {
    pub const ALL: [Geometry; 5] = [
        Geometry::Disk,
        Geometry::Square,
        Geometry::Triangle,
        Geometry::Star,
        Geometry::Bar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Geometry::Disk => "disk",
            Geometry::Square => "square",
            Geometry::Triangle => "triangle",
            Geometry::Star => "star",
            Geometry::Bar => "bar",
        }
    }

    /// Whether the point `(dx, dy)` relative to the centre lies inside the
    /// shape of circumradius `r`. Every geometry is centred on its centroid.
    pub fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        if r <= 0.0 {
            return false;
        }
        match self {
            Geometry::Disk => dx * dx + dy * dy <= r * r,
            Geometry::Square => {
                let h = r * std::f32::consts::FRAC_1_SQRT_2;
                dx.abs() <= h && dy.abs() <= h
            }
            Geometry::Triangle => {
                // Equilateral, apex up, inscribed in the circle of radius r.
                let k = 3f32.sqrt() / 2.0;
                let (ax, ay) = (0.0, -r);
                let (bx, by) = (-k * r, 0.5 * r);
                let (cx, cy) = (k * r, 0.5 * r);
                let d1 = (dx - bx) * (ay - by) - (ax - bx) * (dy - by);
                let d2 = (dx - cx) * (by - cy) - (bx - cx) * (dy - cy);
                let d3 = (dx - ax) * (cy - ay) - (cx - ax) * (dy - ay);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            Geometry::Star => {
                let rho = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx) + PI / 2.0;
                rho <= r * (0.65 + 0.35 * (5.0 * theta).cos())
            }
            Geometry::Bar => dx.abs() <= r && dy.abs() <= 0.4 * r,
        }
    }
}

/// An object's look: geometry, size, colour and texture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub object_class: usize,
    pub geometry: Geometry,
    /// Nominal diameter in pixels.
    pub size: f32,
    pub color: [f32; 3],
    pub texture_seed: u64,
}

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.25, 0.20],
    [0.20, 0.55, 0.90],
    [0.25, 0.80, 0.30],
    [0.95, 0.80, 0.20],
    [0.70, 0.30, 0.85],
    [0.20, 0.85, 0.85],
    [0.95, 0.55, 0.15],
    [0.85, 0.85, 0.85],
];

/// A bright, saturated colour of hue `hue` in `[0, 1)`; always far from
/// the grey background and clutter.
pub fn saturated_color(hue: f32) -> [f32; 3] {
    let (s, v) = (0.8f32, 0.95f32);
    let h = (hue.rem_euclid(1.0)) * 6.0;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn object_geometry(object_class: usize) -> Geometry {
    Geometry::ALL[object_class % Geometry::ALL.len()]
}

pub fn object_name(object_class: usize) -> String {
    let g = object_geometry(object_class).name();
    let c = object_class / Geometry::ALL.len();
    if c == 0 {
        g.to_string()
    } else {
        format!("{g}-{}", c + 1)
    }
}

impl ShapeSpec {
    /// The canonical look of `object_class` at a given nominal size.
    pub fn for_class(object_class: usize, size: f32, texture_seed: u64) -> Self {
        Self {
            object_class,
            geometry: object_geometry(object_class),
            size,
            color: PALETTE[object_class % PALETTE.len()],
            texture_seed,
        }
    }
}

/// Background settings: static seeded noise plus static clutter shapes that
/// carry no mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub seed: u64,
    /// Amplitude of the static per-pixel noise.
    pub noise: f32,
    /// Amplitude of the per-frame sensor noise.
    pub frame_noise: f32,
    pub clutter: usize,
}

impl Default for Background {
    fn default() -> Self {
        Self {
            seed: 0,
            noise: 0.06,
            frame_noise: 0.015,
            clutter: 0,
        }
    }
}

/// Everything [`render_clip`] needs. The primary object is drawn first;
/// distractors are drawn on top in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub shape: ShapeSpec,
    pub motion: MotionSpec,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub background: Background,
    pub distractors: Vec<(ShapeSpec, MotionSpec)>,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedClip {
    pub clip: VideoClip,
    /// One mask sequence per object (primary first), ids starting at 1.
    pub masks: Vec<MaskSequence>,
    pub categories: Vec<CategoryInfo>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic value in `[-1, 1)` for a seed and integer coordinates.
fn hash_noise(seed: u64, a: i64, b: i64, c: i64) -> f32 {
    let h = splitmix(
        seed ^ splitmix(a as u64 ^ splitmix(b as u64 ^ splitmix(c as u64).rotate_left(17))),
    );
    (h >> 40) as f32 / (1u64 << 23) as f32 - 1.0
}

/// Radius of an object at frame `t`.
fn radius_at(shape: &ShapeSpec, motion: &MotionSpec, t: usize) -> f32 {
    0.5 * (shape.size + motion.size_delta(t))
}

/// Checks that an object stays fully inside the canvas; returns the first
/// offending frame.
fn first_escape(
    shape: &ShapeSpec,
    motion: &MotionSpec,
    frames: usize,
    h: usize,
    w: usize,
) -> Option<usize> {
    (0..frames).find(|&t| {
        let (cx, cy) = motion.center(t);
        let r = radius_at(shape, motion, t);
        cx - r < 0.0 || cy - r < 0.0 || cx + r > w as f32 || cy + r > h as f32
    })
}

/// Rasterises one frame's footprint of an object: pixel centres inside the
/// shape.
pub fn rasterize(shape: &ShapeSpec, motion: &MotionSpec, t: usize, h: usize, w: usize) -> Vec<u8> {
    let (cx, cy) = motion.center(t);
    let r = radius_at(shape, motion, t);
    let mut out = vec![0u8; h * w];
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil().min(h as f32)) as usize;
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil().min(w as f32)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            if shape.geometry.contains(dx, dy, r) {
                out[y * w + x] = 1;
            }
        }
    }
    out
}

/// Renders a clip and the exact visible-footprint mask of every object.
pub fn render_clip(req: &RenderRequest) -> Result<RenderedClip> {
    let (t_len, h, w) = (req.frames, req.height, req.width);
    if t_len < 2 {
        return Err(Error::InvalidArgument(
            "clip needs at least 2 frames".into(),
        ));
    }
    let objects: Vec<(&ShapeSpec, &MotionSpec)> = std::iter::once((&req.shape, &req.motion))
        .chain(req.distractors.iter().map(|(s, m)| (s, m)))
        .collect();
    for (shape, motion) in &objects {
        if let Some(frame) = first_escape(shape, motion, t_len, h, w) {
            return Err(Error::TrajectoryEscapes {
                frame,
                height: h,
                width: w,
            });
        }
    }

    let bg = req.background;
    let mut base = vec![0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let n = hash_noise(bg.seed, y as i64, x as i64, -1);
            for ch in 0..3 {
                let tint = 0.02 * hash_noise(bg.seed, ch as i64, 0, -2);
                base[(y * w + x) * 3 + ch] = 0.35 + tint + bg.noise * n;
            }
        }
    }
    // Static clutter: dim, desaturated shapes that never move.
    let mut clutter_rng = ChaCha8Rng::seed_from_u64(bg.seed ^ 0xC1u64);
    for _ in 0..bg.clutter {
        let g = Geometry::ALL[clutter_rng.gen_range(0..Geometry::ALL.len())];
        let r = clutter_rng.gen_range(0.06..0.12) * h.min(w) as f32;
        let cx = clutter_rng.gen_range(r..w as f32 - r);
        let cy = clutter_rng.gen_range(r..h as f32 - r);
        let level = clutter_rng.gen_range(0.22..0.5);
        for y in 0..h {
            for x in 0..w {
                if g.contains(x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r) {
                    for ch in 0..3 {
                        base[(y * w + x) * 3 + ch] = level;
                    }
                }
            }
        }
    }

    let mut frames = Vec::with_capacity(t_len);
    let mut masks: Vec<MaskSequence> = (0..objects.len())
        .map(|i| MaskSequence::empty(i as u32 + 1, t_len, h, w))
        .collect();
    for t in 0..t_len {
        let mut frame = base.clone();
        if bg.frame_noise > 0.0 {
            for (i, v) in frame.iter_mut().enumerate() {
                *v += bg.frame_noise * hash_noise(bg.seed, t as i64, i as i64, -3);
            }
        }
        // Topmost object id per pixel (0 = background).
        let mut label = vec![0u32; h * w];
        for (k, (shape, motion)) in objects.iter().enumerate() {
            let (cx, cy) = motion.center(t);
            let footprint = rasterize(shape, motion, t, h, w);
            for (i, &m) in footprint.iter().enumerate() {
                if m == 0 {
                    continue;
                }
                label[i] = k as u32 + 1;
                let (y, x) = (i / w, i % w);
                // Texture moves with the object.
                let tx = (x as f32 + 0.5 - cx).round() as i64;
                let ty = (y as f32 + 0.5 - cy).round() as i64;
                let tex = 1.0 + 0.08 * hash_noise(shape.texture_seed, tx, ty, 7);
                for ch in 0..3 {
                    frame[i * 3 + ch] = shape.color[ch] * tex;
                }
            }
        }
        for (i, &l) in label.iter().enumerate() {
            if l > 0 {
                masks[l as usize - 1].masks[t][i] = 1;
            }
        }
        for v in &mut frame {
            *v = v.clamp(0.0, 1.0);
        }
        frames.push(frame);
    }

    let categories = objects
        .iter()
        .map(|(s, m)| CategoryInfo {
            motion_class: m.motion_class,
            object_class: s.object_class,
            parent_area: motion_area(m.motion_class),
        })
        .collect();
    Ok(RenderedClip {
        clip: VideoClip {
            source_id: req.source_id.clone(),
            height: h,
            width: w,
            frames,
        },
        masks,
        categories,
    })
}

/// Parameters of one synthetic clip: the primary (object, motion) cell and
/// its index within the cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub clip_id: String,
    pub object_class: usize,
    pub motion_class: usize,
    pub request: RenderRequest,
}

/// Generation settings for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub motion_classes: usize,
    pub object_classes: usize,
    pub clips_per_cell: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Moving distractor objects per clip (different shape and motion).
    pub distractors: usize,
    pub clutter: usize,
    /// `(object_class, motion_class)` cells no distractor may occupy, so that
    /// clips of these cells are the only place the combination appears.
    pub holdout: Vec<(usize, usize)>,
    /// Draw every object's colour per clip instead of using its class
    /// colour, leaving geometry as the only cue to the object class.
    #[serde(default)]
    pub random_colors: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            motion_classes: 4,
            object_classes: 3,
            clips_per_cell: 5,
            frames: 8,
            height: 128,
            width: 128,
            seed: 0,
            distractors: 1,
            clutter: 2,
            holdout: Vec::new(),
            random_colors: false,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.motion_classes < 4 || self.object_classes < 3 {
            return Err(Error::Config(
                "need at least 4 motion classes and 3 object classes".into(),
            ));
        }
        if self.frames < 2 {
            return Err(Error::Config("need at least 2 frames".into()));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config("canvas must be at least 32x32".into()));
        }
        if self.distractors + 1 > self.object_classes.min(self.motion_classes) {
            return Err(Error::Config(
                "too many distractors for the vocabularies".into(),
            ));
        }
        Ok(())
    }

    pub fn clip_id(object_class: usize, motion_class: usize, index: usize) -> String {
        format!("o{object_class:02}_m{motion_class:02}_{index:03}")
    }

    /// Plans every clip: cells in (object, motion) order, then index.
    /// Each clip's parameters depend only on the seed and its cell/index.
    pub fn plan(&self) -> Result<Vec<ClipPlan>> {
        self.validate()?;
        let mut plans = Vec::new();
        for o in 0..self.object_classes {
            for m in 0..self.motion_classes {
                for j in 0..self.clips_per_cell {
                    plans.push(self.plan_clip(o, m, j)?);
                }
            }
        }
        Ok(plans)
    }

    pub fn plan_clip(
        &self,
        object_class: usize,
        motion_class: usize,
        index: usize,
    ) -> Result<ClipPlan> {
        let cell_seed = splitmix(
            self.seed
                ^ splitmix(
                    (object_class as u64) << 32 | (motion_class as u64) << 16 | index as u64,
                ),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
        let side = self.height.min(self.width) as f32;
        let scale = side / 64.0;

        // Each object gets its own region of the canvas.
        let n_obj = 1 + self.distractors;
        let horizontal = rng.gen_bool(0.5);
        let mut slots: Vec<usize> = (0..n_obj).collect();
        for i in (1..slots.len()).rev() {
            let j = rng.gen_range(0..=i);
            slots.swap(i, j);
        }

        let mut objects = Vec::with_capacity(n_obj);
        let mut used_o = vec![object_class];
        let mut used_m = vec![motion_class];
        for k in 0..n_obj {
            let (o, m) = if k == 0 {
                (object_class, motion_class)
            } else {
                let mut pick = None;
                for _ in 0..64 {
                    let o = rng.gen_range(0..self.object_classes);
                    let m = rng.gen_range(0..self.motion_classes);
                    if !used_o.contains(&o)
                        && !used_m.contains(&m)
                        && !self.holdout.contains(&(o, m))
                    {
                        pick = Some((o, m));
                        break;
                    }
                }
                pick.ok_or_else(|| {
                    Error::Config("cannot place a distractor outside held-out cells".into())
                })?
            };
            used_o.push(o);
            used_m.push(m);

            let size = rng.gen_range(0.17..0.22) * side;
            let mut shape = ShapeSpec::for_class(o, size, rng.gen());
            if self.random_colors {
                shape.color = saturated_color(rng.gen());
            }
            let mut motion = MotionSpec::sample(m, scale, &mut rng);

            let (rx0, rx1, ry0, ry1) = region(slots[k], n_obj, horizontal, self.width, self.height);
            let (min_dx, max_dx, min_dy, max_dy, grow) = motion.extent(self.frames);
            let r = 0.5 * (size + grow.max(0.0)) + 0.5;
            let lo_x = rx0 + r - min_dx;
            let hi_x = rx1 - r - max_dx;
            let lo_y = ry0 + r - min_dy;
            let hi_y = ry1 - r - max_dy;
            if lo_x > hi_x || lo_y > hi_y {
                return Err(Error::Config(format!(
                    "canvas {}x{} too small for motion class {m}",
                    self.height, self.width
                )));
            }
            motion.origin = (rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y));
            objects.push((shape, motion));
        }

        let (shape, motion) = objects[0];
        let clip_id = Self::clip_id(object_class, motion_class, index);
        let request = RenderRequest {
            shape,
            motion,
            frames: self.frames,
            height: self.height,
            width: self.width,
            background: Background {
                seed: splitmix(cell_seed ^ 0xB6),
                clutter: self.clutter,
                ..Background::default()
            },
            distractors: objects[1..].to_vec(),
            source_id: clip_id.clone(),
        };
        Ok(ClipPlan {
            clip_id,
            object_class,
            motion_class,
            request,
        })
    }
}

/// Builds an episode in memory, without a dataset on disk. Way `w` is
/// supported by clips of motion `ways[w]` performed by object
/// `w % object_classes`; the query shows motion `ways[target]` performed by a
/// different object, or a motion outside `ways` when `target` is `None`.
/// Every object of every clip is annotated.
pub fn synthetic_episode(
    cfg: &SyntheticConfig,
    ways: &[usize],
    shots: usize,
    target: Option<usize>,
    index: usize,
) -> Result<Episode> {
    cfg.validate()?;
    if ways.is_empty() || shots == 0 || ways.iter().any(|&m| m >= cfg.motion_classes) {
        return Err(Error::InvalidArgument(format!(
            "bad way classes {ways:?} or shot count {shots}"
        )));
    }
    let query_motion = match target {
        Some(t) => *ways
            .get(t)
            .ok_or_else(|| Error::InvalidArgument(format!("target way {t} out of range")))?,
        None => (0..cfg.motion_classes)
            .find(|m| !ways.contains(m))
            .ok_or_else(|| {
                Error::InvalidArgument("no motion class left for an empty query".into())
            })?,
    };
    let render = |object: usize, motion: usize, j: usize| -> Result<RenderedClip> {
        render_clip(&cfg.plan_clip(object, motion, j)?.request)
    };
    let mut support = Vec::with_capacity(ways.len());
    for (w, &m) in ways.iter().enumerate() {
        let mut list = Vec::with_capacity(shots);
        for k in 0..shots {
            let r = render(w % cfg.object_classes, m, index * (shots + 1) + k)?;
            list.push(SupportShot {
                clip: r.clip,
                mask: r.masks[0].clone(),
                category: r.categories[0],
            });
        }
        support.push(list);
    }
    let query_object = (target.unwrap_or(0) + 1) % cfg.object_classes;
    // the query must not pick up another way's motion through a
    // distractor, so later clip indices of the same cell are tried in turn
    let base = index * (shots + 1) + shots;
    for j in base..base + 64 {
        let r = render(query_object, query_motion, j)?;
        let present = r.categories[1..]
            .iter()
            .any(|c| ways.contains(&c.motion_class));

        if !present {
            let objects = r
                .masks
                .into_iter()
                .zip(r.categories)
                .map(|(mask, category)| QueryObject { mask, category })
                .collect();
            return Ok(Episode {
                support,
                query: QuerySample {
                    clip: r.clip,
                    objects,
                },
                target_way: target,
            });
        }
    }
    Err(Error::Sampling(
        "every candidate query shows an extra way's motion".into(),
    ))
}

/// Slot `k` of `n` equal strips along one axis: `(x0, x1, y0, y1)`.
fn region(k: usize, n: usize, horizontal: bool, w: usize, h: usize) -> (f32, f32, f32, f32) {
    let (w, h) = (w as f32, h as f32);
    if horizontal {
        let step = w / n as f32;
        (k as f32 * step, (k + 1) as f32 * step, 0.0, h)
    } else {
        let step = h / n as f32;
        (0.0, w, k as f32 * step, (k + 1) as f32 * step)
    }
}
