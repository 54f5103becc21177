//! Browser demo: render a synthetic clip, show its temporal difference, and
//! score a shifted copy of its mask.

use wasm_bindgen::prelude::*;

use dmaseg::metrics::{contour_f, region_j, BoundaryTolerance};
use dmaseg::synth::{motion_name, object_name, render_clip, SyntheticConfig};
use dmaseg::types::MaskSequence;

/// A rendered clip held on the Rust side of the page.
#[wasm_bindgen]
pub struct DemoClip {
    size: usize,
    frames: Vec<Vec<f32>>,
    mask: MaskSequence,
    label: String,
}

#[wasm_bindgen]
impl DemoClip {
    /// Renders object `shape` performing motion `motion` on a `size`×`size`
    /// canvas (a multiple of 32, at least 64).
    #[wasm_bindgen(constructor)]
    pub fn new(shape: usize, motion: usize, size: usize, frames: usize, seed: u64) -> Result<DemoClip, JsError> {
        let cfg = SyntheticConfig {
            motion_classes: 8,
            object_classes: 5,
            clips_per_cell: 1,
            frames,
            height: size,
            width: size,
            seed,
            distractors: 0,
            ..SyntheticConfig::default()
        };
        let plan = cfg.plan_clip(shape, motion, 0)?;
        let r = render_clip(&plan.request)?;
        Ok(DemoClip {
            size,
            frames: r.clip.frames,
            mask: r.masks[0].clone(),
            label: format!("{} doing {}", object_name(shape), motion_name(motion)),
        })
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames.len()
    }

    #[wasm_bindgen(getter)]
    pub fn label(&self) -> String {
        self.label.clone()
    }

    /// RGBA bytes of frame `t` with the object's mask tinted in.
    pub fn frame_rgba(&self, t: usize, show_mask: bool) -> Vec<u8> {
        let Some(frame) = self.frames.get(t) else { return Vec::new() };
        let mask = &self.mask.masks[t];
        let mut out = Vec::with_capacity(self.size * self.size * 4);
        for (i, px) in frame.chunks_exact(3).enumerate() {
            let tint = show_mask && mask[i] == 1;
            for (c, &v) in px.iter().enumerate() {
                let v = if tint { 0.5 * v + if c == 0 { 0.5 } else { 0.0 } } else { v };
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
        out
    }

    /// RGBA heat map of `|frame[t+1] - frame[t]|`, averaged over channels
    /// and scaled so the largest change is white.
    pub fn difference_rgba(&self, t: usize) -> Vec<u8> {
        let diff = difference_magnitude(&self.frames, t);
        let peak = diff.iter().copied().fold(0f32, f32::max).max(1e-6);
        diff.iter()
            .flat_map(|&d| {
                let v = (d / peak * 255.0).round() as u8;
                [v, v, v, 255]
            })
            .collect()
    }

    /// `[J, F, J&F]` of the object's mask shifted by `(dx, dy)` pixels,
    /// scored against the unshifted mask.
    pub fn shifted_scores(&self, dx: i32, dy: i32) -> Result<Vec<f64>, JsError> {
        let shifted = shift(&self.mask, dx, dy);
        let j = region_j(&shifted, &self.mask)?;
        let f = contour_f(&shifted, &self.mask, BoundaryTolerance::default())?;
        Ok(vec![j, f, 0.5 * (j + f)])
    }
}

/// Per-pixel channel-mean absolute difference between frames `t+1` and `t`;
/// zero for the last frame.
pub fn difference_magnitude(frames: &[Vec<f32>], t: usize) -> Vec<f32> {
    let n = frames.first().map_or(0, |f| f.len() / 3);
    if t + 1 >= frames.len() {
        return vec![0.0; n];
    }
    frames[t + 1]
        .chunks_exact(3)
        .zip(frames[t].chunks_exact(3))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f32>() / 3.0)
        .collect()
}

/// Translates every frame of `mask`; pixels shifted in from outside are 0.
pub fn shift(mask: &MaskSequence, dx: i32, dy: i32) -> MaskSequence {
    let (h, w) = (mask.height as i32, mask.width as i32);
    let mut out = MaskSequence::empty(mask.object_id, mask.frame_count(), mask.height, mask.width);
    for (dst, src) in out.masks.iter_mut().zip(&mask.masks) {
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x - dx, y - dy);
                if sx >= 0 && sy >= 0 && sx < w && sy < h {
                    dst[(y * w + x) as usize] = src[(sy * w + sx) as usize];
                }
            }
        }
    }
    out
}
