//! The segmentation network and its episode-level forward pass.

pub mod dma;
pub mod encoder;
pub mod fusion;
pub mod nn;
pub mod proposal;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Episode, MaskSequence, Prediction, VideoClip, WayPrediction};
pub use candle_core::DType;
pub use dma::{Branches, MotionPooling, PrototypeSet};
use dma::{Dma, DmaConfig, EmptyMaskPolicy};
use encoder::{clip_tensor, Encoder, FeaturePyramid, TinyConv};
use fusion::{
    match_score, match_score_tensor, similarity_prior, MaskDecoder, PrototypeAttention,
};
use nn::ParamStore;
use proposal::{proposal_masks, ProposalGenerator};

/// How the prototypes of K support clips enter prototype attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShotFusion {
    /// Concatenate along the key axis (K*Q keys).
    #[default]
    Concatenate,
    /// Average the K prototype sets (Q keys).
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Pyramid and prototype width.
    pub dim: usize,
    /// Channels of the first backbone stage.
    pub backbone_width: usize,
    pub backbone_bias: bool,
    pub queries: usize,
    pub layers: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub object_classes: usize,
    pub motion_classes: usize,
    pub max_frames: usize,
    pub pooling: MotionPooling,
    pub motion_activation: bool,
    pub branches: Branches,
    /// Feed the query's motion volume into the mask decoder.
    pub decoder_motion: bool,
    /// Feed the decoder per-pixel cosine similarities of the query to the
    /// support's appearance and motion prototypes.
    pub decoder_prior: bool,
    pub shot_fusion: ShotFusion,
    pub proposal_threshold: f32,
    /// A way is empty when `(S + 1) / 2` falls below this.
    pub empty_threshold: f32,
    /// ...or when its mean binarised area per frame is below this fraction
    /// of the frame.
    pub min_area_fraction: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            backbone_width: 16,
            backbone_bias: true,
            queries: 8,
            layers: 3,
            fusion_layers: 2,
            heads: 4,
            object_classes: 3,
            motion_classes: 4,
            max_frames: 16,
            pooling: MotionPooling::default(),
            motion_activation: true,
            branches: Branches::default(),
            decoder_motion: true,
            decoder_prior: true,
            shot_fusion: ShotFusion::Concatenate,
            proposal_threshold: 0.5,
            empty_threshold: 0.5,
            min_area_fraction: 0.001,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % self.heads.max(1) != 0 || self.heads == 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim < 2 || self.backbone_width == 0 || self.queries == 0 {
            return Err(Error::Config(
                "dim, backbone_width and queries must be positive".into(),
            ));
        }
        if !self.branches.appearance && !self.branches.motion {
            return Err(Error::Config(
                "at least one prototype branch must be enabled".into(),
            ));
        }
        if self.object_classes == 0 || self.motion_classes == 0 {
            return Err(Error::Config("class counts must be positive".into()));
        }
        for (name, v) in [
            ("proposal_threshold", self.proposal_threshold),
            ("empty_threshold", self.empty_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    /// Two channels (max and mean similarity) per enabled branch.
    fn prior_channels(&self) -> usize {
        if !self.decoder_prior {
            return 0;
        }
        2 * (usize::from(self.branches.appearance) + usize::from(self.branches.motion))
    }

    fn dma(&self) -> DmaConfig {
        DmaConfig {
            dim: self.dim,
            queries: self.queries,
            layers: self.layers,
            heads: self.heads,
            object_classes: self.object_classes,
            motion_classes: self.motion_classes,
            max_frames: self.max_frames,
            pooling: self.pooling,
            motion_activation: self.motion_activation,
            branches: self.branches,
        }
    }
}

/// One way's differentiable outputs.
#[derive(Debug, Clone)]
pub struct WayOutput {
    /// `(T, H, W)`
    pub mask_logits: Tensor,
    /// Scalar cosine similarity.
    pub score: Tensor,
    /// Averaged support class token `(d,)`.
    pub support_cls: Tensor,
}

#[derive(Debug, Clone)]
pub struct EpisodeForward {
    pub ways: Vec<WayOutput>,
    /// `(T, 1, H/8, W/8)`
    pub proposal_logits: Tensor,
    pub query: PrototypeSet,
    pub support: Vec<Vec<PrototypeSet>>,
}

/// Where the query's DMA pooling masks come from.
#[derive(Debug, Clone, Copy)]
pub enum QueryMasks<'a> {
    Proposals,
    Given(&'a MaskSequence),
}

pub struct DmaNet {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    proposals: ProposalGenerator,
    dma: Dma,
    fusion: PrototypeAttention,
    decoder: MaskDecoder,
}

/// Binary `(T, 1, H/s, W/s)` mask: a cell is set when at least half of it is
/// covered, or, for frames that would otherwise come out empty, when any of
/// it is.
pub fn mask_tensor(
    mask: &MaskSequence,
    stride: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (h, w) = (mask.height / stride, mask.width / stride);
    let mut data = Vec::with_capacity(mask.frame_count() * h * w);
    for m in &mask.masks {
        let mut frac = vec![0f32; h * w];
        for y in 0..h * stride {
            for x in 0..w * stride {
                frac[(y / stride) * w + x / stride] += m[y * mask.width + x] as f32;
            }
        }
        let cell = (stride * stride) as f32;
        let majority: Vec<f32> = frac
            .iter()
            .map(|&c| f32::from(u8::from(c / cell >= 0.5)))
            .collect();
        if majority.iter().any(|&v| v > 0.0) {
            data.extend(majority);
        } else {
            data.extend(frac.iter().map(|&c| f32::from(u8::from(c > 0.0))));
        }
    }
    Ok(Tensor::from_vec(data, (mask.frame_count(), 1, h, w), device)?.to_dtype(dtype)?)
}

impl DmaNet {
    pub fn new(cfg: ModelConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(cfg.seed, dtype);
        let backbone = TinyConv::new(&mut ps, "backbone", cfg.backbone_width, cfg.backbone_bias)?;
        let encoder = Encoder::new(&mut ps, "encoder", Box::new(backbone), cfg.dim)?;
        let proposals = ProposalGenerator::new(&mut ps, "proposal", cfg.dim)?;
        let dma = Dma::new(&mut ps, "dma", cfg.dma())?;
        let fusion =
            PrototypeAttention::new(&mut ps, "fusion", cfg.dim, cfg.heads, cfg.fusion_layers)?;
        let decoder = MaskDecoder::new(
            &mut ps,
            "decoder",
            cfg.dim,
            cfg.heads,
            cfg.decoder_motion && cfg.branches.motion,
            cfg.prior_channels(),
        )?;
        Ok(Self {
            cfg,
            store: ps,
            encoder,
            proposals,
            dma,
            fusion,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn dma(&self) -> &Dma {
        &self.dma
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<FeaturePyramid> {
        self.encoder
            .forward(&clip_tensor(clip, self.dtype(), self.store.device())?)
    }

    /// Prototypes of one annotated clip.
    pub fn support_prototypes(
        &self,
        clip: &VideoClip,
        mask: &MaskSequence,
    ) -> Result<PrototypeSet> {
        let pyr = self.encode(clip)?;
        self.support_from_pyramid(&pyr, mask)
    }

    fn support_from_pyramid(
        &self,
        pyr: &FeaturePyramid,
        mask: &MaskSequence,
    ) -> Result<PrototypeSet> {
        let m = mask_tensor(mask, 4, self.dtype(), self.store.device())?;
        self.dma.extract(&pyr.levels[0], &m, EmptyMaskPolicy::Zero)
    }

    pub fn forward_episode(
        &self,
        ep: &Episode,
        query_masks: QueryMasks<'_>,
    ) -> Result<EpisodeForward> {
        let clip = &ep.query.clip;
        let (h, w) = (clip.height, clip.width);
        let pyr = self.encode(clip)?;
        let proposal_logits = self.proposals.logits(&pyr)?;
        let qmask = match query_masks {
            QueryMasks::Proposals => proposal_masks(
                &candle_nn::ops::sigmoid(&proposal_logits)?,
                self.cfg.proposal_threshold,
            )?,
            QueryMasks::Given(m) => mask_tensor(m, 4, self.dtype(), self.store.device())?,
        };
        let query = self
            .dma
            .extract(&pyr.levels[0], &qmask, EmptyMaskPolicy::GlobalMean)?;
        let motion_map = if self.cfg.decoder_motion {
            query.motion_map.as_ref()
        } else {
            None
        };

        let mut ways = Vec::with_capacity(ep.ways());
        let mut support = Vec::with_capacity(ep.ways());
        for shots in &ep.support {
            if shots.is_empty() {
                return Err(Error::InvalidArgument("way without support shots".into()));
            }
            let sets: Vec<PrototypeSet> = shots
                .iter()
                .map(|s| self.support_prototypes(&s.clip, &s.mask))
                .collect::<Result<_>>()?;
            let protos: Vec<&Tensor> = sets.iter().map(|s| &s.dma).collect();
            let keys = match self.cfg.shot_fusion {
                ShotFusion::Concatenate => Tensor::cat(&protos, 0)?,
                ShotFusion::Average => Tensor::stack(&protos, 0)?.mean(0)?,
            };
            let cls: Vec<&Tensor> = sets.iter().map(|s| &s.cls).collect();
            let support_cls = Tensor::stack(&cls, 0)?.mean(0)?;
            let fused = self.fusion.forward(&query.dma, &keys)?;
            let prior = self.similarity_priors(&pyr, &query, &sets)?;
            let mask_logits =
                self.decoder
                    .forward(&pyr, &fused, motion_map, prior.as_ref(), h, w)?;
            let score = match_score_tensor(&support_cls, &query.cls)?;
            ways.push(WayOutput {
                mask_logits,
                score,
                support_cls,
            });
            support.push(sets);
        }
        Ok(EpisodeForward {
            ways,
            proposal_logits,
            query,
            support,
        })
    }

    /// Similarity of the query's stride-4 features and motion volume to one
    /// way's support prototypes, `(T, C, h, w)`.
    fn similarity_priors(
        &self,
        pyr: &FeaturePyramid,
        query: &PrototypeSet,
        shots: &[PrototypeSet],
    ) -> Result<Option<Tensor>> {
        if self.cfg.prior_channels() == 0 {
            return Ok(None);
        }
        let mut maps = Vec::with_capacity(2);
        if self.cfg.branches.appearance {
            let rows: Vec<&Tensor> = shots.iter().map(|s| &s.appearance).collect();
            maps.push(similarity_prior(&pyr.levels[0], &Tensor::cat(&rows, 0)?)?);
        }
        if let Some(map) = &query.motion_map {
            let rows: Vec<&Tensor> = shots.iter().filter_map(|s| s.motion.as_ref()).collect();
            maps.push(similarity_prior(map, &Tensor::cat(&rows, 0)?)?);
        }
        Ok(Some(Tensor::cat(&maps, 1)?))
    }

    /// Turns a forward pass into per-way soft masks, scores and empty flags.
    pub fn prediction(
        &self,
        fwd: &EpisodeForward,
        height: usize,
        width: usize,
    ) -> Result<Prediction> {
        let query_cls = fwd.query.cls.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        let mut ways = Vec::with_capacity(fwd.ways.len());
        for way in &fwd.ways {
            let probs = candle_nn::ops::sigmoid(&way.mask_logits.detach())?.to_dtype(DType::F32)?;
            let soft_masks = probs.flatten_from(1)?.to_vec2::<f32>()?;
            let s = match_score(
                &way.support_cls.to_dtype(DType::F32)?.to_vec1::<f32>()?,
                &query_cls,
            );
            let frames = soft_masks.len().max(1);
            let area =
                soft_masks.iter().flatten().filter(|&&p| p >= 0.5).count() as f32 / frames as f32;
            let is_empty = (s + 1.0) / 2.0 < self.cfg.empty_threshold
                || area < self.cfg.min_area_fraction * (height * width) as f32;
            ways.push(WayPrediction {
                soft_masks,
                match_score: s,
                is_empty,
            });
        }
        Ok(Prediction {
            height,
            width,
            ways,
        })
    }

    /// Binarised class-agnostic proposals of `clip`, upsampled to the input
    /// resolution by nearest neighbour.
    pub fn foreground(&self, clip: &VideoClip) -> Result<MaskSequence> {
        let pyr = self.encode(clip)?;
        let probs = candle_nn::ops::sigmoid(&self.proposals.logits(&pyr)?)?;
        let (t, _, h, w) = probs.dims4()?;
        let stride = clip.height / h;
        let v = probs
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let mut out = MaskSequence::empty(0, t, clip.height, clip.width);
        for (f, mask) in out.masks.iter_mut().enumerate() {
            for y in 0..clip.height {
                for x in 0..clip.width {
                    let p = v[(f * h + y / stride) * w + x / stride];
                    mask[y * clip.width + x] = u8::from(p >= self.cfg.proposal_threshold);
                }
            }
        }
        Ok(out)
    }

    pub fn predict(&self, ep: &Episode) -> Result<Prediction> {
        let fwd = self.forward_episode(ep, QueryMasks::Proposals)?;
        self.prediction(&fwd, ep.query.clip.height, ep.query.clip.width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::fixtures::sized_episode;

    fn two_way_episode() -> Episode {
        sized_episode(3, 32, 32)
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 8,
            backbone_width: 4,
            queries: 2,
            layers: 1,
            fusion_layers: 1,
            heads: 2,
            object_classes: 3,
            motion_classes: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn mask_tensor_majority_and_fallback() {
        let mut m = MaskSequence::empty(1, 2, 8, 8);
        for y in 0..4 {
            for x in 0..2 {
                m.masks[0][y * 8 + x] = 1; // half of the top-left 4x4 cell
            }
        }
        m.masks[1][63] = 1; // a single pixel
        let t = mask_tensor(&m, 4, DType::F32, &Device::Cpu).unwrap();
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { heads: 3, ..tiny() }.validate().is_err());
        let none = Branches {
            appearance: false,
            motion: false,
        };
        assert!(ModelConfig {
            branches: none,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            empty_threshold: 1.0,
            ..tiny()
        }
        .validate()
        .is_err());
        tiny().validate().unwrap();
    }

    #[test]
    fn predicts_one_entry_per_way() {
        let ep = two_way_episode();
        let net = DmaNet::new(tiny(), DType::F32).unwrap();
        let pred = net.predict(&ep).unwrap();
        assert_eq!(pred.ways.len(), 2);
        let t = ep.query.clip.frame_count();
        assert_eq!(pred.ways[0].soft_masks.len(), t);
        assert_eq!(
            pred.ways[0].soft_masks[0].len(),
            ep.query.clip.height * ep.query.clip.width
        );
    }

    #[test]
    fn duplicated_support_matches_itself() {
        let mut ep = two_way_episode();
        let shot = ep.support[0][0].clone();
        ep.query.clip = shot.clip.clone();
        let net = DmaNet::new(tiny(), DType::F32).unwrap();
        let fwd = net
            .forward_episode(&ep, QueryMasks::Given(&shot.mask))
            .unwrap();
        let pred = net
            .prediction(&fwd, shot.clip.height, shot.clip.width)
            .unwrap();
        assert!((pred.ways[0].match_score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn foreground_is_full_resolution() {
        let ep = two_way_episode();
        let net = DmaNet::new(tiny(), DType::F32).unwrap();
        let fg = net.foreground(&ep.query.clip).unwrap();
        let clip = &ep.query.clip;
        assert_eq!(
            (fg.frame_count(), fg.height, fg.width),
            (clip.frame_count(), clip.height, clip.width)
        );
        // constant over each 8x8 proposal cell
        assert!(fg.masks[0].chunks(8).all(|c| c.iter().all(|&v| v == c[0])));
    }

    #[test]
    fn ways_do_not_interact() {
        let ep = two_way_episode();
        let net = DmaNet::new(tiny(), DType::F32).unwrap();
        let a = net.predict(&ep).unwrap();
        let mut other = ep.clone();
        for f in other.support[1][0].clip.frames.iter_mut() {
            for v in f.iter_mut() {
                *v = 1.0 - *v;
            }
        }
        let b = net.predict(&other).unwrap();
        assert_eq!(a.ways[0], b.ways[0]);
    }
}
