use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EpisodeForward;
use crate::types::{Episode, MaskSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mask_ce: f64,
    pub mask_iou: f64,
    pub proposal: f64,
    pub aux_object: f64,
    pub aux_motion: f64,
    pub matching: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mask_ce: 1.0,
            mask_iou: 1.0,
            proposal: 1.0,
            aux_object: 0.5,
            aux_motion: 0.5,
            matching: 1.0,
        }
    }
}

/// Unweighted loss terms of one episode plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub mask_ce: f64,
    pub mask_iou: f64,
    pub proposal: f64,
    pub aux_object: f64,
    pub aux_motion: f64,
    pub matching: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.mask_ce,
            self.mask_iou,
            self.proposal,
            self.aux_object,
            self.aux_motion,
            self.matching,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean binary cross-entropy of logits against targets in `[0, 1]`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((logits.relu()? - (logits * target)?)?
        .add(&softplus)?
        .mean_all()?)
}

/// `1 - soft IoU` with add-one smoothing.
pub fn soft_iou_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    let inter = (probs * target)?.sum_all()?;
    let union = ((probs.sum_all()? + target.sum_all()?)? - &inter)?;
    Ok(((inter + 1.0)? / (union + 1.0)?)?.affine(-1.0, 1.0)?)
}

/// Cross-entropy of `(C,)` logits against a distribution `(C,)`.
pub fn soft_cross_entropy(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok((logp * target)?.sum_all()?.neg()?)
}

fn one_hot(classes: &[usize], n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f32; n];
    for &c in classes {
        if c >= n {
            return Err(Error::Config(format!("class {c} outside a {n}-class head")));
        }
        v[c] += 1.0 / classes.len() as f32;
    }
    Ok(Tensor::from_vec(v, n, device)?.to_dtype(dtype)?)
}

fn mask_sequence_tensor(m: &MaskSequence, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = m.masks.iter().flatten().map(|&v| v as f32).collect();
    Ok(Tensor::from_vec(data, (m.frame_count(), m.height, m.width), device)?.to_dtype(dtype)?)
}

/// Area-fraction downsampling of a mask sequence to `(T, 1, H/s, W/s)`.
fn coverage(m: &MaskSequence, stride: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let t = mask_sequence_tensor(m, dtype, device)?.unsqueeze(1)?;
    Ok(t.avg_pool2d(stride)?)
}

fn mean(terms: &[Tensor], dtype: DType, device: &Device) -> Result<Tensor> {
    if terms.is_empty() {
        return Ok(Tensor::zeros((), dtype, device)?);
    }
    Ok((Tensor::stack(terms, 0)?.sum_all()? / terms.len() as f64)?)
}

/// Episode loss: per-way mask cross-entropy and soft IoU, class-agnostic
/// proposal supervision, auxiliary object/motion classification on both
/// branches, and the match-score objective.
pub fn episode_loss(
    ep: &Episode,
    fwd: &EpisodeForward,
    w: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    let reference = &fwd.proposal_logits;
    let (dtype, device) = (reference.dtype(), reference.device().clone());

    let mut ce = Vec::new();
    let mut iou = Vec::new();
    let mut matching = Vec::new();
    for (way, out) in fwd.ways.iter().enumerate() {
        let gt = mask_sequence_tensor(&ep.way_ground_truth(way), dtype, &device)?;
        ce.push(bce_with_logits(&out.mask_logits, &gt)?);
        iou.push(soft_iou_loss(
            &candle_nn::ops::sigmoid(&out.mask_logits)?,
            &gt,
        )?);
        let present = f64::from(u8::from(ep.way_present(way)));
        let p = ((&out.score + 1.0)? * 0.5)?.clamp(1e-6, 1.0 - 1e-6)?;
        let target = Tensor::full(present, (), &device)?.to_dtype(dtype)?;
        let nll = ((p.log()? * &target)?
            + (p.affine(-1.0, 1.0)?.log()? * target.affine(-1.0, 1.0)?)?)?
        .neg()?;
        matching.push(nll);
    }

    let fg = coverage(&ep.query_foreground(), 8, dtype, &device)?;
    let proposal = (bce_with_logits(&fwd.proposal_logits, &fg)?
        + soft_iou_loss(&candle_nn::ops::sigmoid(&fwd.proposal_logits)?, &fg)?)?;

    let n_obj = fwd.query.object_logits.dims()[0];
    let mut aux_o = Vec::new();
    let mut aux_m = Vec::new();
    for (shots, sets) in ep.support.iter().zip(&fwd.support) {
        for (shot, set) in shots.iter().zip(sets) {
            aux_o.push(soft_cross_entropy(
                &set.object_logits,
                &one_hot(&[shot.category.object_class], n_obj, dtype, &device)?,
            )?);
            if let Some(ml) = &set.motion_logits {
                let n = ml.dims()[0];
                aux_m.push(soft_cross_entropy(
                    ml,
                    &one_hot(&[shot.category.motion_class], n, dtype, &device)?,
                )?);
            }
        }
    }
    // the query may hold several objects: its target is uniform over them
    if !ep.query.objects.is_empty() {
        let objs: Vec<usize> = ep
            .query
            .objects
            .iter()
            .map(|o| o.category.object_class)
            .collect();
        aux_o.push(soft_cross_entropy(
            &fwd.query.object_logits,
            &one_hot(&objs, n_obj, dtype, &device)?,
        )?);
        if let Some(ml) = &fwd.query.motion_logits {
            let motions: Vec<usize> = ep
                .query
                .objects
                .iter()
                .map(|o| o.category.motion_class)
                .collect();
            aux_m.push(soft_cross_entropy(
                ml,
                &one_hot(&motions, ml.dims()[0], dtype, &device)?,
            )?);
        }
    }

    let terms = [
        (mean(&ce, dtype, &device)?, w.mask_ce),
        (mean(&iou, dtype, &device)?, w.mask_iou),
        (proposal, w.proposal),
        (mean(&aux_o, dtype, &device)?, w.aux_object),
        (mean(&aux_m, dtype, &device)?, w.aux_motion),
        (mean(&matching, dtype, &device)?, w.matching),
    ];
    let mut total = Tensor::zeros((), dtype, &device)?;
    for (t, weight) in &terms {
        if *weight != 0.0 {
            total = (total + (t * *weight)?)?;
        }
    }
    let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let report = LossReport {
        total: v(&total)?,
        mask_ce: v(&terms[0].0)?,
        mask_iou: v(&terms[1].0)?,
        proposal: v(&terms[2].0)?,
        aux_object: v(&terms[3].0)?,
        aux_motion: v(&terms[4].0)?,
        matching: v(&terms[5].0)?,
    };
    Ok((total, report))
}
