//! Class-agnostic coarse foreground proposals for the query clip.

use candle_core::Tensor;

use super::encoder::FeaturePyramid;
use super::nn::{join, upsample2, Conv2d, ParamStore};
use crate::error::{Error, Result};

struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(ps, &join(name, "a"), dim, dim, 3, 1, 1, true)?,
            b: Conv2d::new(ps, &join(name, "b"), dim, dim, 3, 1, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.b.forward(&self.a.forward(x)?.relu()?)?)?)
    }
}

/// Three residual blocks at strides 32, 16 and 8 fused by upsampling, then
/// a two-layer head emitting one logit per pixel at stride 8.
pub struct ProposalGenerator {
    blocks: Vec<ResBlock>,
    head: Conv2d,
    out: Conv2d,
}

impl ProposalGenerator {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let blocks = (0..3)
            .map(|i| ResBlock::new(ps, &join(name, &format!("block{i}")), dim))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            head: Conv2d::new(ps, &join(name, "head"), dim, dim / 2, 3, 1, 1, true)?,
            out: Conv2d::new(ps, &join(name, "out"), dim / 2, 1, 1, 1, 0, true)?,
        })
    }

    /// Proposal logits `(T, 1, H/8, W/8)`.
    pub fn logits(&self, pyr: &FeaturePyramid) -> Result<Tensor> {
        let mut x = self.blocks[0].forward(&pyr.levels[3])?;
        x = self.blocks[1].forward(&(upsample2(&x)? + &pyr.levels[2])?)?;
        x = self.blocks[2].forward(&(upsample2(&x)? + &pyr.levels[1])?)?;
        self.out.forward(&self.head.forward(&x)?.relu()?)
    }

    /// Soft proposals in `[0, 1]`.
    pub fn propose(&self, pyr: &FeaturePyramid) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(pyr)?)?)
    }
}

/// Thresholds soft maps; values equal to the threshold count as foreground.
pub fn binarize(maps: &[f32], threshold: f32) -> Result<Vec<u8>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    Ok(maps.iter().map(|&p| u8::from(p >= threshold)).collect())
}

/// Binarised proposals upsampled (nearest) to stride 4: `(T, 1, H/4, W/4)`
/// in the proposal tensor's dtype. Gradients do not flow through.
pub fn proposal_masks(proposals: &Tensor, threshold: f32) -> Result<Tensor> {
    let (t, _, h, w) = proposals.dims4()?;
    let host = proposals
        .detach()
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let bin: Vec<f32> = binarize(&host, threshold)?
        .into_iter()
        .map(f32::from)
        .collect();
    let m = Tensor::from_vec(bin, (t, 1, h, w), proposals.device())?.to_dtype(proposals.dtype())?;
    Ok(m.upsample_nearest2d(2 * h, 2 * w)?)
}
