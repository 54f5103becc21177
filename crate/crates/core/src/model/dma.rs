//! Decoupled motion-appearance prototypes.
//!
//! Appearance prototypes are mask-pooled stride-4 features per frame.
//! Motion prototypes come from temporal differences of the same features,
//! enhanced by a 3x3x3 convolution and pooled spatially. A small
//! transformer then refines learnable queries plus a class token against
//! both prototype sequences.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use super::nn::{join, Attention, Conv2d, FeedForward, Init, LayerNorm, Linear, ParamStore};
use crate::error::{Error, Result};

/// Spatial pooling of the enhanced motion volume. The default is `Masked`:
/// with several moving objects in a clip a whole-frame mean blends
/// their motions and no longer describes the annotated one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MotionPooling {
    /// Plain spatial mean over the whole frame.
    Average,
    /// Spatial maximum.
    Max,
    /// Mean over the union of the masks of frames `t` and `t + 1`.
    #[default]
    Masked,
}

/// What mask pooling does with a frame whose mask is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyMaskPolicy {
    /// Pool the whole frame instead (query side, empty proposals).
    GlobalMean,
    /// Leave a zero prototype (support side).
    Zero,
}

/// Which prototype streams feed the refinement transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub appearance: bool,
    pub motion: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            appearance: true,
            motion: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmaConfig {
    pub dim: usize,
    pub queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub object_classes: usize,
    pub motion_classes: usize,
    pub max_frames: usize,
    pub pooling: MotionPooling,
    /// ReLU after the 3-D convolution.
    pub motion_activation: bool,
    pub branches: Branches,
}

/// Output of one DMA pass over a clip.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// `(T, d)`
    pub appearance: Tensor,
    /// `(T, d)`; absent when the motion branch is disabled.
    pub motion: Option<Tensor>,
    /// Temporal differences `(T, d, h, w)`, last slot zero.
    pub difference: Option<Tensor>,
    /// Enhanced motion volume `(T, d, h, w)`.
    pub motion_map: Option<Tensor>,
    /// `(Q, d)`
    pub dma: Tensor,
    /// `(d,)`
    pub cls: Tensor,
    /// `(C_o,)`
    pub object_logits: Tensor,
    /// `(C_m,)`; absent when the motion branch is disabled.
    pub motion_logits: Option<Tensor>,
    /// Frames whose mask was empty.
    pub empty_frames: Vec<usize>,
}

struct RefineLayer {
    norm_m: LayerNorm,
    attn_m: Attention,
    norm_a: LayerNorm,
    attn_a: Attention,
    norm_s: LayerNorm,
    attn_s: Attention,
    norm_f: LayerNorm,
    ffn: FeedForward,
}

impl RefineLayer {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm_m: LayerNorm::new(ps, &join(name, "norm_m"), dim)?,
            attn_m: Attention::new(ps, &join(name, "attn_m"), dim, heads)?,
            norm_a: LayerNorm::new(ps, &join(name, "norm_a"), dim)?,
            attn_a: Attention::new(ps, &join(name, "attn_a"), dim, heads)?,
            norm_s: LayerNorm::new(ps, &join(name, "norm_s"), dim)?,
            attn_s: Attention::new(ps, &join(name, "attn_s"), dim, heads)?,
            norm_f: LayerNorm::new(ps, &join(name, "norm_f"), dim)?,
            ffn: FeedForward::new(ps, &join(name, "ffn"), dim)?,
        })
    }
}

pub struct Dma {
    cfg: DmaConfig,
    /// One 2-D kernel per temporal tap of the 3x3x3 convolution.
    taps: Vec<Conv2d>,
    tap_bias: Tensor,
    object_head: Linear,
    motion_head: Linear,
    queries: Tensor,
    cls: Tensor,
    time_m: Tensor,
    time_a: Tensor,
    memory_norm_m: LayerNorm,
    memory_norm_a: LayerNorm,
    layers: Vec<RefineLayer>,
    prefix: String,
}

/// Host-side per-frame mask sums of a `(T, 1, h, w)` tensor.
fn frame_sums(mask: &Tensor) -> Result<Vec<f64>> {
    Ok(mask
        .to_dtype(DType::F64)?
        .sum((1, 2, 3))?
        .to_vec1::<f64>()?)
}

/// Weighted spatial mean of `(T, d, h, w)` features under `(T, 1, h, w)`
/// weights. Frames with zero weight follow `policy`.
fn masked_mean(
    features: &Tensor,
    weights: &Tensor,
    policy: EmptyMaskPolicy,
) -> Result<(Tensor, Vec<usize>)> {
    let (t, _, h, w) = features.dims4()?;
    if weights.dims() != [t, 1, h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match features at {t}x{h}x{w}",
            weights.dims()
        )));
    }
    let sums = frame_sums(weights)?;
    let empty: Vec<usize> = (0..t).filter(|&i| sums[i] <= 0.0).collect();
    let weights = if empty.is_empty() || policy == EmptyMaskPolicy::Zero {
        weights.clone()
    } else {
        let fill: Vec<f64> = (0..t)
            .map(|i| if sums[i] <= 0.0 { 1.0 } else { 0.0 })
            .collect();
        let fill =
            Tensor::from_vec(fill, (t, 1, 1, 1), features.device())?.to_dtype(features.dtype())?;
        weights.broadcast_add(&fill)?
    };
    let num = features.broadcast_mul(&weights)?.sum((2, 3))?;
    let den = weights.sum((2, 3))?.clamp(1e-12, f64::INFINITY)?;
    Ok((num.broadcast_div(&den)?, empty))
}

/// Mask-pooled appearance prototypes `(T, d)` from stride-4 features
/// `(T, d, h, w)` and binary masks `(T, 1, h, w)`.
pub fn appearance_prototype(
    features: &Tensor,
    mask: &Tensor,
    policy: EmptyMaskPolicy,
) -> Result<Tensor> {
    Ok(masked_mean(features, mask, policy)?.0)
}

/// Temporal differences `F[t+1] - F[t]` with a zero final slot.
pub fn difference_volume(features: &Tensor) -> Result<Tensor> {
    let t = features.dims()[0];
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "motion needs at least 2 frames, got {t}"
        )));
    }
    let d = (features.narrow(0, 1, t - 1)? - features.narrow(0, 0, t - 1)?)?;
    Ok(d.pad_with_zeros(0, 0, 1)?)
}

impl Dma {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: DmaConfig) -> Result<Self> {
        let d = cfg.dim;
        if cfg.queries == 0 || cfg.max_frames < 2 {
            return Err(Error::Config(
                "DMA needs at least one query and two frames".into(),
            ));
        }
        let taps = (0..3)
            .map(|k| {
                Conv2d::new(
                    ps,
                    &join(name, &format!("conv3d.tap{k}")),
                    d,
                    d,
                    3,
                    1,
                    1,
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        // three taps share the fan-in of a single 3x3x3 kernel
        for k in 0..3 {
            let var = ps
                .get(&join(name, &format!("conv3d.tap{k}.weight")))
                .unwrap();
            var.set(&(var.as_tensor() / 3f64.sqrt())?)?;
        }
        let layers = (0..cfg.layers)
            .map(|i| RefineLayer::new(ps, &join(name, &format!("layer{i}")), d, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            taps,
            tap_bias: ps.param(&join(name, "conv3d.bias"), &[d], Init::Zeros)?,
            object_head: Linear::new(ps, &join(name, "object_head"), d, cfg.object_classes, true)?,
            motion_head: Linear::new(ps, &join(name, "motion_head"), d, cfg.motion_classes, true)?,
            queries: ps.param(&join(name, "queries"), &[cfg.queries, d], Init::Normal(1.0))?,
            cls: ps.param(&join(name, "cls"), &[1, d], Init::Normal(1.0))?,
            time_m: ps.param(
                &join(name, "time_m"),
                &[cfg.max_frames, d],
                Init::Normal(0.1),
            )?,
            time_a: ps.param(
                &join(name, "time_a"),
                &[cfg.max_frames, d],
                Init::Normal(0.1),
            )?,
            memory_norm_m: LayerNorm::new(ps, &join(name, "memory_norm_m"), d)?,
            memory_norm_a: LayerNorm::new(ps, &join(name, "memory_norm_a"), d)?,
            layers,
            cfg,
            prefix: name.to_string(),
        })
    }

    pub fn config(&self) -> &DmaConfig {
        &self.cfg
    }

    /// Sets the 3-D convolution to the identity (centre tap, centre pixel)
    /// with zero bias.
    pub fn set_identity_motion_conv(&self, ps: &ParamStore) -> Result<()> {
        let d = self.cfg.dim;
        for k in 0..3 {
            let mut w = vec![0f64; d * d * 9];
            if k == 1 {
                for i in 0..d {
                    w[((i * d + i) * 3 + 1) * 3 + 1] = 1.0;
                }
            }
            let var = ps
                .get(&join(&self.prefix, &format!("conv3d.tap{k}.weight")))
                .unwrap();
            var.set(&Tensor::from_vec(w, (d, d, 3, 3), var.device())?.to_dtype(var.dtype())?)?;
        }
        let bias = ps.get(&join(&self.prefix, "conv3d.bias")).unwrap();
        bias.set(&bias.zeros_like()?)?;
        Ok(())
    }

    /// Enhanced motion volume from a difference volume.
    pub fn enhance_motion(&self, difference: &Tensor) -> Result<Tensor> {
        let t = difference.dims()[0];
        let padded = difference.pad_with_zeros(0, 1, 1)?;
        let mut acc = self.taps[0].forward(&padded.narrow(0, 0, t)?)?;
        for k in 1..3 {
            acc = (acc + self.taps[k].forward(&padded.narrow(0, k, t)?)?)?;
        }
        let acc = acc.broadcast_add(&self.tap_bias.reshape((1, self.cfg.dim, 1, 1))?)?;
        Ok(if self.cfg.motion_activation {
            acc.relu()?
        } else {
            acc
        })
    }

    /// Difference volume, enhanced motion map and `(T, d)` motion prototypes.
    /// `mask` is only consulted by masked pooling.
    pub fn motion_prototype(
        &self,
        features: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let difference = difference_volume(features)?;
        let map = self.enhance_motion(&difference)?;
        let pooled = match (self.cfg.pooling, mask) {
            (MotionPooling::Average, _) | (MotionPooling::Masked, None) => map.mean((2, 3))?,
            (MotionPooling::Max, _) => map.flatten_from(2)?.max(D::Minus1)?,
            (MotionPooling::Masked, Some(m)) => {
                let t = m.dims()[0];
                let next = Tensor::cat(&[m.narrow(0, 1, t - 1)?, m.narrow(0, t - 1, 1)?], 0)?;
                masked_mean(&map, &m.maximum(&next)?, EmptyMaskPolicy::GlobalMean)?.0
            }
        };
        Ok((difference, map, pooled))
    }

    /// Object and motion logits from temporally averaged prototypes.
    pub fn classify(
        &self,
        appearance: &Tensor,
        motion: Option<&Tensor>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let po = self
            .object_head
            .forward(&appearance.mean_keepdim(0)?)?
            .squeeze(0)?;
        let pm = match motion {
            Some(m) => Some(self.motion_head.forward(&m.mean_keepdim(0)?)?.squeeze(0)?),
            None => None,
        };
        Ok((po, pm))
    }

    /// Refined prototypes `(Q, d)` and class token `(d,)`.
    pub fn refine(&self, appearance: &Tensor, motion: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let t = appearance.dims()[0];
        if t > self.cfg.max_frames {
            return Err(Error::Shape(format!(
                "{t} frames exceed the configured maximum {}",
                self.cfg.max_frames
            )));
        }
        let memory_a = self
            .memory_norm_a
            .forward(&(appearance + self.time_a.narrow(0, 0, t)?)?)?
            .unsqueeze(0)?;
        let memory_m = match motion {
            Some(m) => Some(
                self.memory_norm_m
                    .forward(&(m + self.time_m.narrow(0, 0, t)?)?)?
                    .unsqueeze(0)?,
            ),
            None => None,
        };
        let q = self.cfg.queries;
        let mut x = Tensor::cat(&[&self.queries, &self.cls], 0)?.unsqueeze(0)?;
        for layer in &self.layers {
            if self.cfg.branches.motion {
                if let Some(mm) = &memory_m {
                    x = (&x + layer.attn_m.forward(&layer.norm_m.forward(&x)?, mm)?)?;
                }
            }
            if self.cfg.branches.appearance {
                x = (&x
                    + layer
                        .attn_a
                        .forward(&layer.norm_a.forward(&x)?, &memory_a)?)?;
            }
            let n = layer.norm_s.forward(&x)?;
            x = (&x + layer.attn_s.forward(&n, &n)?)?;
            x = (&x + layer.ffn.forward(&layer.norm_f.forward(&x)?)?)?;
        }
        let x = x.squeeze(0)?;
        Ok((x.narrow(0, 0, q)?, x.get(q)?))
    }

    /// Full pass over stride-4 features `(T, d, h, w)` with masks
    /// `(T, 1, h, w)`.
    pub fn extract(
        &self,
        features: &Tensor,
        mask: &Tensor,
        policy: EmptyMaskPolicy,
    ) -> Result<PrototypeSet> {
        let (appearance, empty_frames) = masked_mean(features, mask, policy)?;
        let (difference, motion_map, motion) = if self.cfg.branches.motion {
            let (d, m, p) = self.motion_prototype(features, Some(mask))?;
            (Some(d), Some(m), Some(p))
        } else {
            (None, None, None)
        };
        let (object_logits, motion_logits) = self.classify(&appearance, motion.as_ref())?;
        let (dma, cls) = self.refine(&appearance, motion.as_ref())?;
        Ok(PrototypeSet {
            appearance,
            motion,
            difference,
            motion_map,
            dma,
            cls,
            object_logits,
            motion_logits,
            empty_frames,
        })
    }
}
