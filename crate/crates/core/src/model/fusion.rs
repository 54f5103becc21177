//! Support-query prototype attention, prototype-conditioned mask decoding
//! and class-token matching.

use candle_core::{Tensor, D};

use super::encoder::FeaturePyramid;
use super::nn::{
    join, resize_bilinear, upsample2, Attention, Conv2d, FeedForward, LayerNorm, Linear, ParamStore,
};
use crate::error::Result;

struct FusionLayer {
    norm_c: LayerNorm,
    cross: Attention,
    norm_s: LayerNorm,
    attn_s: Attention,
    norm_f: LayerNorm,
    ffn: FeedForward,
}

/// Query prototypes attend to the concatenated support prototypes, then to
/// themselves.
pub struct PrototypeAttention {
    memory_norm: LayerNorm,
    layers: Vec<FusionLayer>,
}

impl PrototypeAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| {
                let n = join(name, &format!("layer{i}"));
                Ok(FusionLayer {
                    norm_c: LayerNorm::new(ps, &join(&n, "norm_c"), dim)?,
                    cross: Attention::new(ps, &join(&n, "cross"), dim, heads)?,
                    norm_s: LayerNorm::new(ps, &join(&n, "norm_s"), dim)?,
                    attn_s: Attention::new(ps, &join(&n, "attn_s"), dim, heads)?,
                    norm_f: LayerNorm::new(ps, &join(&n, "norm_f"), dim)?,
                    ffn: FeedForward::new(ps, &join(&n, "ffn"), dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            memory_norm: LayerNorm::new(ps, &join(name, "memory_norm"), dim)?,
            layers,
        })
    }

    /// `query` is `(Q, d)`, `support` is `(K*Q, d)`; returns `(Q, d)`.
    pub fn forward(&self, query: &Tensor, support: &Tensor) -> Result<Tensor> {
        let memory = self.memory_norm.forward(support)?.unsqueeze(0)?;
        let mut x = query.unsqueeze(0)?;
        for l in &self.layers {
            x = (&x + l.cross.forward(&l.norm_c.forward(&x)?, &memory)?)?;
            let n = l.norm_s.forward(&x)?;
            x = (&x + l.attn_s.forward(&n, &n)?)?;
            x = (&x + l.ffn.forward(&l.norm_f.forward(&x)?)?)?;
        }
        Ok(x.squeeze(0)?)
    }
}

struct LevelEnhancer {
    norm: LayerNorm,
    attn: Attention,
    film: Linear,
    motion: Option<Conv2d>,
    prior: Option<Conv2d>,
}

/// Enhances every pyramid level with the fused prototypes and decodes a
/// mask top-down from stride 32 to stride 4, then resizes to the input.
pub struct MaskDecoder {
    levels: Vec<LevelEnhancer>,
    fuse: Vec<Conv2d>,
    head: Conv2d,
    out: Conv2d,
    dim: usize,
}

impl MaskDecoder {
    /// With `motion_input`, the query's enhanced motion volume is projected
    /// into every level before prototype attention; likewise a
    /// `prior_channels`-channel similarity prior when that is non-zero.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        motion_input: bool,
        prior_channels: usize,
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(4);
        for l in 0..4 {
            let n = join(name, &format!("level{}", l + 1));
            levels.push(LevelEnhancer {
                norm: LayerNorm::new(ps, &join(&n, "norm"), dim)?,
                attn: Attention::new(ps, &join(&n, "attn"), dim, heads)?,
                film: Linear::new(ps, &join(&n, "film"), dim, 2 * dim, true)?,
                motion: if motion_input {
                    Some(Conv2d::new(
                        ps,
                        &join(&n, "motion"),
                        dim,
                        dim,
                        1,
                        1,
                        0,
                        true,
                    )?)
                } else {
                    None
                },
                prior: if prior_channels > 0 {
                    Some(Conv2d::new(
                        ps,
                        &join(&n, "prior"),
                        prior_channels,
                        dim,
                        1,
                        1,
                        0,
                        true,
                    )?)
                } else {
                    None
                },
            });
        }
        // film starts close to the identity modulation
        for l in 0..4 {
            let w = ps
                .get(&join(name, &format!("level{}.film.weight", l + 1)))
                .unwrap();
            w.set(&(w.as_tensor() * 0.1)?)?;
        }
        let fuse = (0..3)
            .map(|l| {
                Conv2d::new(
                    ps,
                    &join(name, &format!("fuse{}", l + 1)),
                    dim,
                    dim,
                    3,
                    1,
                    1,
                    true,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            levels,
            fuse,
            head: Conv2d::new(ps, &join(name, "head"), dim, dim / 2, 3, 1, 1, true)?,
            out: Conv2d::new(ps, &join(name, "out"), dim / 2, 1, 1, 1, 0, true)?,
            dim,
        })
    }

    fn enhance(
        &self,
        level: usize,
        features: &Tensor,
        prototypes: &Tensor,
        motion: Option<&Tensor>,
        prior: Option<&Tensor>,
    ) -> Result<Tensor> {
        let e = &self.levels[level];
        let (t, d, h, w) = features.dims4()?;
        let at_level = |x: &Tensor| -> Result<Tensor> {
            Ok(if level == 0 {
                x.clone()
            } else {
                x.avg_pool2d(1 << level)?
            })
        };
        let mut f = features.clone();
        if let (Some(proj), Some(m)) = (&e.motion, motion) {
            f = (f + proj.forward(&at_level(m)?)?)?;
        }
        if let (Some(proj), Some(p)) = (&e.prior, prior) {
            f = (f + proj.forward(&at_level(p)?)?)?;
        }
        let tokens = f.permute((0, 2, 3, 1))?.reshape((t, h * w, d))?;
        let q = prototypes.dims()[0];
        let context = prototypes
            .unsqueeze(0)?
            .broadcast_as((t, q, d))?
            .contiguous()?;
        let x = (&tokens + e.attn.forward(&e.norm.forward(&tokens)?, &context)?)?;
        let film = e.film.forward(&prototypes.mean_keepdim(0)?)?;
        let gamma = (film.narrow(1, 0, d)? + 1.0)?;
        let beta = film.narrow(1, d, d)?;
        let x = x.broadcast_mul(&gamma)?.broadcast_add(&beta)?;
        Ok(x.reshape((t, h, w, d))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    /// Mask logits `(T, H, W)`. `motion_map` and `prior` are at stride 4.
    pub fn forward(
        &self,
        pyr: &FeaturePyramid,
        prototypes: &Tensor,
        motion_map: Option<&Tensor>,
        prior: Option<&Tensor>,
        height: usize,
        width: usize,
    ) -> Result<Tensor> {
        debug_assert_eq!(pyr.width(), self.dim);
        let mut x = self.enhance(3, &pyr.levels[3], prototypes, motion_map, prior)?;
        for l in (0..3).rev() {
            let e = self.enhance(l, &pyr.levels[l], prototypes, motion_map, prior)?;
            x = self.fuse[l].forward(&(e + upsample2(&x)?)?)?.relu()?;
        }
        let logits = self.out.forward(&self.head.forward(&x)?.relu()?)?;
        Ok(resize_bilinear(&logits, height, width)?.squeeze(1)?)
    }
}

/// Cosine similarity of every pixel of `features` `(T, d, h, w)` to each
/// row of `prototypes` `(M, d)`, reduced to the maximum and the mean over
/// the rows: `(T, 2, h, w)`. Norms are softened so that all-zero pixels
/// score 0 with bounded gradients.
pub fn similarity_prior(features: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    let (t, d, h, w) = features.dims4()?;
    let f = features.reshape((t, d, h * w))?;
    let f = f.broadcast_div(&(f.sqr()?.sum_keepdim(1)? + PRIOR_EPS)?.sqrt()?)?;
    let p = prototypes.broadcast_div(&(prototypes.sqr()?.sum_keepdim(1)? + PRIOR_EPS)?.sqrt()?)?;
    let sim = p.unsqueeze(0)?.broadcast_matmul(&f)?;
    let max = sim.max_keepdim(1)?;
    let mean = sim.mean_keepdim(1)?;
    Ok(Tensor::cat(&[max, mean], 1)?.reshape((t, 2, h, w))?)
}

const PRIOR_EPS: f64 = 1e-4;

/// Cosine similarity of two class tokens, clamped to `[-1, 1]`. A zero
/// vector scores 0.
pub fn match_score(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0) as f32
}

/// Differentiable cosine similarity of two `(d,)` tensors.
pub fn match_score_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?;
    let nb = b.sqr()?.sum(D::Minus1)?;
    let denom = ((na * nb)? + 1e-12)?.sqrt()?;
    Ok((dot / denom)?)
}
