//! Frozen toy image encoder: a strided convolution stack with replicate
//! padding (constant inputs stay spatially constant), seeded once.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet};
use crate::tensor::{ArrD, PadMode, Tape};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Dense feature map plus pooled vector from the image encoder.
#[derive(Clone, Debug)]
pub struct ImageEmbedding {
    /// `[d, ceil(H/stride), ceil(W/stride)]`
    pub feature_map: ArrD,
    /// `[d]` global average.
    pub pooled: ArrD,
}

#[derive(Clone, Debug)]
pub struct ImageEncoderConfig {
    /// Total downsampling; must be a power of two.
    pub stride: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub seed: u64,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            stride: 8,
            hidden: 32,
            out_dim: 64,
            seed: 1,
        }
    }
}

pub struct ImageEncoder {
    params: ParamSet,
    convs: Vec<Conv2d>,
    pub cfg: ImageEncoderConfig,
}

impl ImageEncoder {
    pub fn new(cfg: ImageEncoderConfig) -> Self {
        assert!(cfg.stride.is_power_of_two() && cfg.stride >= 2);
        let stages = cfg.stride.trailing_zeros() as usize;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x01ab_5e0f);
        let mut convs = Vec::new();
        let mut cin = 3;
        for s in 0..stages {
            let cout = if s + 1 == stages { cfg.out_dim } else { cfg.hidden };
            let mut conv = Conv2d::new(
                &mut ps,
                &format!("image.conv{s}"),
                cin,
                cout,
                3,
                2,
                1,
                false,
                &mut rng,
            );
            conv.mode = PadMode::Replicate;
            convs.push(conv);
            cin = cout;
        }
        ImageEncoder { params: ps, convs, cfg }
    }

    /// Encode an image `[3, H, W]` with pixel values in `[0, 1]`.
    pub fn encode(&self, image: &ArrD) -> Result<ImageEmbedding> {
        let sh = image.shape();
        if sh.len() != 3 || sh[0] != 3 {
            return Err(Error::shape(format!(
                "image must be [3, H, W], got {sh:?}"
            )));
        }
        if sh[1] == 0 || sh[2] == 0 {
            return Err(Error::invalid("image height/width must be positive"));
        }
        let t = Tape::new();
        let bind = self.params.bind_frozen(&t);
        let mut x = t.constant(
            image
                .clone()
                .into_shape_with_order(IxDyn(&[1, 3, sh[1], sh[2]]))
                .unwrap(),
        );
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&t, &bind, x);
            if i + 1 < self.convs.len() {
                x = t.silu(x);
            }
        }
        let val = t.value(x);
        let (d, h, w) = (val.shape()[1], val.shape()[2], val.shape()[3]);
        let feature_map = val
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(&[d, h, w]))
            .unwrap();
        let mut pooled = ArrD::zeros(IxDyn(&[d]));
        let plane = (h * w) as f64;
        for c in 0..d {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += feature_map[[c, y, xx]];
                }
            }
            pooled[[c]] = acc / plane;
        }
        Ok(ImageEmbedding {
            feature_map,
            pooled,
        })
    }

    pub fn param_snapshot(&self) -> Vec<(String, ArrD)> {
        self.params
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shape_follows_stride() {
        let enc = ImageEncoder::new(ImageEncoderConfig::default());
        let img = ArrD::zeros(IxDyn(&[3, 64, 64]));
        let e = enc.encode(&img).unwrap();
        assert_eq!(e.feature_map.shape(), &[64, 8, 8]);
        assert_eq!(e.pooled.shape(), &[64]);
        // ceil division on odd sizes
        let img = ArrD::zeros(IxDyn(&[3, 33, 17]));
        let e = enc.encode(&img).unwrap();
        assert_eq!(e.feature_map.shape(), &[64, 5, 3]);
    }

    #[test]
    fn constant_image_gives_spatially_constant_features() {
        let enc = ImageEncoder::new(ImageEncoderConfig::default());
        let img = ArrD::from_elem(IxDyn(&[3, 32, 32]), 0.42);
        let e = enc.encode(&img).unwrap();
        let (d, h, w) = (e.feature_map.shape()[0], e.feature_map.shape()[1], e.feature_map.shape()[2]);
        for c in 0..d {
            let v0 = e.feature_map[[c, 0, 0]];
            for y in 0..h {
                for x in 0..w {
                    assert!((e.feature_map[[c, y, x]] - v0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_rejects_bad_shapes() {
        let enc = ImageEncoder::new(ImageEncoderConfig::default());
        let img = ArrD::from_elem(IxDyn(&[3, 16, 16]), 0.3);
        let a = enc.encode(&img).unwrap();
        let b = enc.encode(&img).unwrap();
        assert_eq!(a.feature_map, b.feature_map);
        assert!(enc.encode(&ArrD::zeros(IxDyn(&[1, 8, 8]))).is_err());
        assert!(enc.encode(&ArrD::zeros(IxDyn(&[3, 0, 8]))).is_err());
    }
}
