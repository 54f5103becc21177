//! Region similarity (J), contour accuracy (F), their mean, and the
//! empty-target accuracies T-Acc / N-Acc.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::MaskSequence;

/// Boundary match tolerance, either absolute or relative to the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundaryTolerance {
    Pixels(f64),
    DiagonalFraction(f64),
}

impl Default for BoundaryTolerance {
    fn default() -> Self {
        BoundaryTolerance::DiagonalFraction(0.008)
    }
}

impl BoundaryTolerance {
    pub fn radius(self, height: usize, width: usize) -> f64 {
        match self {
            BoundaryTolerance::Pixels(p) => p,
            BoundaryTolerance::DiagonalFraction(f) => {
                let diag = ((height * height + width * width) as f64).sqrt();
                (f * diag).ceil()
            }
        }
    }
}

fn check_aligned(pred: &MaskSequence, gt: &MaskSequence) -> Result<()> {
    if pred.masks.len() != gt.masks.len() || pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs ground truth {}x{}x{}",
            pred.masks.len(),
            pred.height,
            pred.width,
            gt.masks.len(),
            gt.height,
            gt.width
        )));
    }
    if pred.masks.is_empty() {
        return Err(Error::Shape("empty mask sequence".into()));
    }
    Ok(())
}

/// IoU of one frame; both empty is 1, exactly one empty is 0.
pub fn frame_iou(pred: &[u8], gt: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean per-frame IoU.
pub fn region_j(pred: &MaskSequence, gt: &MaskSequence) -> Result<f64> {
    check_aligned(pred, gt)?;
    let total: f64 = pred
        .masks
        .iter()
        .zip(&gt.masks)
        .map(|(p, g)| frame_iou(p, g))
        .sum();
    Ok(total / pred.masks.len() as f64)
}

/// Foreground pixels with a 4-neighbour outside the mask (the canvas border
/// counts as outside).
pub fn boundary(mask: &[u8], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] == 0 {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || mask[(y - 1) * w + x] == 0
                || mask[(y + 1) * w + x] == 0
                || mask[y * w + x - 1] == 0
                || mask[y * w + x + 1] == 0;
            out[y * w + x] = edge;
        }
    }
    out
}

fn disk_offsets(radius: f64) -> Vec<(isize, isize)> {
    let r = radius.floor() as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= radius * radius {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn dilate(map: &[bool], h: usize, w: usize, offsets: &[(isize, isize)]) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !map[y * w + x] {
                continue;
            }
            for &(dy, dx) in offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure of one frame with matches within `radius` pixels.
pub fn frame_f(pred: &[u8], gt: &[u8], h: usize, w: usize, radius: f64) -> f64 {
    let pb = boundary(pred, h, w);
    let gb = boundary(gt, h, w);
    let n_p = pb.iter().filter(|&&b| b).count();
    let n_g = gb.iter().filter(|&&b| b).count();
    match (n_p, n_g) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let offsets = disk_offsets(radius);
    let gd = dilate(&gb, h, w, &offsets);
    let pd = dilate(&pb, h, w, &offsets);
    let matched_p = pb.iter().zip(&gd).filter(|(&b, &d)| b && d).count();
    let matched_g = gb.iter().zip(&pd).filter(|(&b, &d)| b && d).count();
    let precision = matched_p as f64 / n_p as f64;
    let recall = matched_g as f64 / n_g as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean per-frame boundary F-measure.
pub fn contour_f(
    pred: &MaskSequence,
    gt: &MaskSequence,
    tolerance: BoundaryTolerance,
) -> Result<f64> {
    check_aligned(pred, gt)?;
    let radius = tolerance.radius(gt.height, gt.width);
    let total: f64 = pred
        .masks
        .iter()
        .zip(&gt.masks)
        .map(|(p, g)| frame_f(p, g, gt.height, gt.width, radius))
        .sum();
    Ok(total / pred.masks.len() as f64)
}

/// Scores of one way of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub empty_gt: bool,
    pub empty_pred: bool,
}

impl EvalRecord {
    /// Scores `pred` against `gt`. A way predicted empty is scored as an
    /// all-zero mask.
    pub fn score(
        pred: &MaskSequence,
        gt: &MaskSequence,
        empty_pred: bool,
        tolerance: BoundaryTolerance,
    ) -> Result<Self> {
        let cleared;
        let pred = if empty_pred {
            cleared =
                MaskSequence::empty(pred.object_id, pred.frame_count(), pred.height, pred.width);
            &cleared
        } else {
            pred
        };
        let j = region_j(pred, gt)?;
        let f = contour_f(pred, gt, tolerance)?;
        Ok(Self {
            j,
            f,
            jf: 0.5 * (j + f),
            empty_gt: gt.is_all_empty(),
            empty_pred,
        })
    }
}

/// Aggregate over many ways. J&F is averaged over non-empty-gt ways only;
/// N-Acc is absent when no way had an empty ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub jf: Option<f64>,
    pub j: Option<f64>,
    pub f: Option<f64>,
    pub t_acc: Option<f64>,
    pub n_acc: Option<f64>,
    pub ways: usize,
    pub empty_gt_ways: usize,
}

pub fn accumulate(records: &[EvalRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no evaluation records".into()));
    }
    let target: Vec<&EvalRecord> = records.iter().filter(|r| !r.empty_gt).collect();
    let empty: Vec<&EvalRecord> = records.iter().filter(|r| r.empty_gt).collect();
    let mean = |xs: &[&EvalRecord], f: fn(&EvalRecord) -> f64| {
        (!xs.is_empty()).then(|| xs.iter().map(|r| f(r)).sum::<f64>() / xs.len() as f64)
    };
    Ok(Summary {
        jf: mean(&target, |r| r.jf),
        j: mean(&target, |r| r.j),
        f: mean(&target, |r| r.f),
        t_acc: mean(&target, |r| if r.empty_pred { 0.0 } else { 1.0 }),
        n_acc: mean(&empty, |r| if r.empty_pred { 1.0 } else { 0.0 }),
        ways: records.len(),
        empty_gt_ways: empty.len(),
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Text table in the J&F / T-Acc / N-Acc / per-fold J&F layout. `folds`
/// pairs each test fold with its summary; the leading columns are the mean
/// over folds.
pub fn format_table(label: &str, folds: &[(usize, Summary)]) -> String {
    let avg = |f: fn(&Summary) -> Option<f64>| {
        let vals: Vec<f64> = folds.iter().filter_map(|(_, s)| f(s)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mut header = format!(
        "{:<16} {:>6} {:>6} {:>6}",
        "Method", "J&F", "T-Acc", "N-Acc"
    );
    let mut row = format!(
        "{:<16} {:>6} {:>6} {:>6}",
        label,
        pct(avg(|s| s.jf)),
        pct(avg(|s| s.t_acc)),
        pct(avg(|s| s.n_acc))
    );
    for (fold, s) in folds {
        header.push_str(&format!(" {:>7}", format!("Fold-{fold}")));
        row.push_str(&format!(" {:>7}", pct(s.jf)));
    }
    format!("{header}\n{row}\n")
}
