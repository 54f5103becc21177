//! Per-frame feature pyramid: a small convolutional backbone followed by
//! top-down lateral fusion to a common width.

use candle_core::{DType, Device, Tensor};

use super::nn::{join, upsample2, Conv2d, ParamStore};
use crate::error::{Error, Result};
use crate::types::VideoClip;

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Anything that maps `(T, 3, H, W)` frames to four stages at strides
/// 4, 8, 16 and 32. Frames must be processed independently.
pub trait Backbone {
    fn channels(&self) -> [usize; 4];
    fn strides(&self) -> [usize; 4];
    fn forward(&self, frames: &Tensor) -> Result<[Tensor; 4]>;
}

/// Four conv stages trained from scratch. Each stage is a strided
/// patchifying convolution followed by a 3x3 convolution.
pub struct TinyConv {
    stages: Vec<(Conv2d, Conv2d)>,
    channels: [usize; 4],
}

impl TinyConv {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, bias: bool) -> Result<Self> {
        let channels = [width, 2 * width, 4 * width, 4 * width];
        let mut stages = Vec::with_capacity(4);
        let mut input = 3;
        for (i, &c) in channels.iter().enumerate() {
            let k = if i == 0 { 4 } else { 2 };
            let prefix = join(name, &format!("stage{}", i + 1));
            stages.push((
                Conv2d::new(ps, &join(&prefix, "down"), input, c, k, k, 0, bias)?,
                Conv2d::new(ps, &join(&prefix, "conv"), c, c, 3, 1, 1, bias)?,
            ));
            input = c;
        }
        Ok(Self { stages, channels })
    }
}

impl Backbone for TinyConv {
    fn channels(&self) -> [usize; 4] {
        self.channels
    }

    fn strides(&self) -> [usize; 4] {
        STRIDES
    }

    fn forward(&self, frames: &Tensor) -> Result<[Tensor; 4]> {
        let mut x = frames.clone();
        let mut out = Vec::with_capacity(4);
        for (down, conv) in &self.stages {
            x = down.forward(&x)?.relu()?;
            x = conv.forward(&x)?.relu()?;
            out.push(x.clone());
        }
        Ok(out.try_into().expect("four stages"))
    }
}

/// Features of every frame at strides 4, 8, 16, 32, each `(T, d, h, w)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn frames(&self) -> usize {
        self.levels[0].dims()[0]
    }

    pub fn width(&self) -> usize {
        self.levels[0].dims()[1]
    }
}

pub struct Encoder {
    backbone: Box<dyn Backbone>,
    lateral: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    dim: usize,
}

impl Encoder {
    /// Wires `backbone` into a pyramid of width `dim`. Backbones that do
    /// not emit four stages at the expected strides are rejected.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        backbone: Box<dyn Backbone>,
        dim: usize,
    ) -> Result<Self> {
        if backbone.strides() != STRIDES {
            return Err(Error::Config(format!(
                "backbone strides {:?} must be {STRIDES:?}",
                backbone.strides()
            )));
        }
        let mut lateral = Vec::with_capacity(4);
        let mut smooth = Vec::with_capacity(4);
        for (i, &c) in backbone.channels().iter().enumerate() {
            lateral.push(Conv2d::new(
                ps,
                &join(name, &format!("lateral{}", i + 1)),
                c,
                dim,
                1,
                1,
                0,
                true,
            )?);
            smooth.push(Conv2d::new(
                ps,
                &join(name, &format!("smooth{}", i + 1)),
                dim,
                dim,
                3,
                1,
                1,
                true,
            )?);
        }
        Ok(Self {
            backbone,
            lateral,
            smooth,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Encodes `(T, 3, H, W)` frames; H and W must be multiples of 32.
    pub fn forward(&self, frames: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = frames.dims4()?;
        if c != 3 || h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "encoder input must be (T, 3, H, W) with H, W multiples of 32, got ({c}, {h}, {w})"
            )));
        }
        let raw = self.backbone.forward(&((frames - 0.5)? * 4.0)?)?;
        for (i, r) in raw.iter().enumerate() {
            let (_, _, rh, rw) = r.dims4()?;
            if (rh, rw) != (h / STRIDES[i], w / STRIDES[i]) {
                return Err(Error::Config(format!(
                    "backbone stage {} emitted {rh}x{rw}, expected {}x{}",
                    i + 1,
                    h / STRIDES[i],
                    w / STRIDES[i]
                )));
            }
        }
        let mut top = self.lateral[3].forward(&raw[3])?;
        let mut merged = vec![top.clone()];
        for i in (0..3).rev() {
            top = (self.lateral[i].forward(&raw[i])? + upsample2(&top)?)?;
            merged.push(top.clone());
        }
        merged.reverse();
        let levels: Vec<Tensor> = merged
            .iter()
            .zip(&self.smooth)
            .map(|(m, s)| s.forward(m))
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid {
            levels: levels.try_into().expect("four levels"),
        })
    }
}

/// `(T, 3, H, W)` tensor of a clip's frames.
pub fn clip_tensor(clip: &VideoClip, dtype: DType, device: &Device) -> Result<Tensor> {
    let (t, h, w) = (clip.frame_count(), clip.height, clip.width);
    let data: Vec<f32> = clip.frames.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(data, (t, h, w, 3), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct WrongStrides;

    impl Backbone for WrongStrides {
        fn channels(&self) -> [usize; 4] {
            [4; 4]
        }
        fn strides(&self) -> [usize; 4] {
            [2, 4, 8, 16]
        }
        fn forward(&self, _: &Tensor) -> Result<[Tensor; 4]> {
            unreachable!()
        }
    }

    fn encoder(dim: usize, bias: bool) -> Encoder {
        let mut ps = ParamStore::new(0, DType::F32);
        let bb = TinyConv::new(&mut ps, "bb", 8, bias).unwrap();
        Encoder::new(&mut ps, "enc", Box::new(bb), dim).unwrap()
    }

    fn random_frames(t: usize, h: usize, w: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..t * 3 * h * w).map(|_| rng.gen()).collect();
        Tensor::from_vec(v, (t, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn pyramid_shapes_for_128() {
        let pyr = encoder(16, true)
            .forward(&random_frames(2, 128, 128, 0))
            .unwrap();
        let sizes: Vec<Vec<usize>> = pyr.levels.iter().map(|l| l.dims().to_vec()).collect();
        assert_eq!(
            sizes,
            vec![
                vec![2, 16, 32, 32],
                vec![2, 16, 16, 16],
                vec![2, 16, 8, 8],
                vec![2, 16, 4, 4]
            ]
        );
    }

    #[test]
    fn wrong_strides_are_a_config_error() {
        let mut ps = ParamStore::new(0, DType::F32);
        assert!(matches!(
            Encoder::new(&mut ps, "e", Box::new(WrongStrides), 8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        assert!(encoder(8, true)
            .forward(&random_frames(2, 40, 64, 0))
            .is_err());
    }

    #[test]
    fn frames_are_encoded_independently_and_deterministically() {
        let enc = encoder(8, true);
        let x = random_frames(3, 64, 64, 1);
        let a = enc.forward(&x).unwrap();
        let b = enc.forward(&x).unwrap();
        let pair =
            Tensor::cat(&[x.narrow(0, 2, 1).unwrap(), x.narrow(0, 0, 1).unwrap()], 0).unwrap();
        let c = enc.forward(&pair).unwrap();
        for l in 0..4 {
            let la = a.levels[l].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(
                la,
                b.levels[l].flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
            let a2 = a.levels[l]
                .narrow(0, 2, 1)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap();
            let c0 = c.levels[l]
                .narrow(0, 0, 1)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap();
            assert_eq!(a2, c0, "level {l}");
        }
    }

    #[test]
    fn constant_clip_gives_constant_backbone_interior_without_bias() {
        let mut ps = ParamStore::new(0, DType::F32);
        let bb = TinyConv::new(&mut ps, "bb", 4, false).unwrap();
        let stages = bb
            .forward(&Tensor::full(0.8f32, (1, 3, 256, 256), &Device::Cpu).unwrap())
            .unwrap();
        // padding effects reach at most two cells inwards at every stage
        for (l, lvl) in stages.iter().enumerate() {
            let (_, d, h, w) = lvl.dims4().unwrap();
            let crop = lvl
                .narrow(2, 2, h - 4)
                .unwrap()
                .narrow(3, 2, w - 4)
                .unwrap();
            let v = crop
                .squeeze(0)
                .unwrap()
                .reshape((d, ()))
                .unwrap()
                .to_vec2::<f32>()
                .unwrap();
            for row in v {
                let mean = row.iter().sum::<f32>() / row.len() as f32;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / row.len() as f32;
                assert!(var < 1e-6, "stage {l} variance {var}");
            }
        }
    }
}
