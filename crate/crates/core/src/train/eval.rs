use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{BoundaryTolerance, EvalRecord};
use crate::model::DmaNet;
use crate::types::{Episode, Prediction};

/// Diagnostic substitutions for the evaluation harness.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Oracle {
    /// Replace every way's masks (and emptiness) with the ground truth.
    pub mask: bool,
    /// Replace the empty decision with the true presence of each way.
    pub motion: bool,
}

/// Scores every way of one episode.
pub fn evaluate_episode(
    net: &DmaNet,
    ep: &Episode,
    oracle: Oracle,
    tolerance: BoundaryTolerance,
) -> Result<(Prediction, Vec<EvalRecord>)> {
    let mut pred = net.predict(ep)?;
    score_prediction(ep, &mut pred, oracle, tolerance).map(|r| (pred, r))
}

/// Applies `oracle` to `pred` in place and scores it against `ep`.
pub fn score_prediction(
    ep: &Episode,
    pred: &mut Prediction,
    oracle: Oracle,
    tolerance: BoundaryTolerance,
) -> Result<Vec<EvalRecord>> {
    let truths: Vec<_> = (0..ep.ways()).map(|w| ep.way_ground_truth(w)).collect();
    if oracle.mask {
        for (way, gt) in pred.ways.iter_mut().zip(&truths) {
            way.soft_masks = gt
                .masks
                .iter()
                .map(|m| m.iter().map(|&v| v as f32).collect())
                .collect();
            way.is_empty = gt.is_all_empty();
        }
    } else if oracle.motion {
        for (w, way) in pred.ways.iter_mut().enumerate() {
            way.is_empty = !ep.way_present(w);
        }
    }
    let resolved = pred.resolve_masks();
    resolved
        .iter()
        .zip(&truths)
        .zip(&pred.ways)
        .map(|((p, gt), way)| EvalRecord::score(p, gt, way.is_empty, tolerance))
        .collect()
}
