//! Per-frame spatial feature extractor: a three-level pyramid, each level a
//! stride-1 conv followed by a stride-2 conv, for a total downsampling of 8.

use rand::Rng;

use crate::blocks::{Act, Conv};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Total spatial downsampling of the extractor.
pub const STRIDE: usize = 8;

/// One normalised single-channel frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// `C × H × W`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub index: usize,
}

impl Frame {
    pub fn new(pixels: Tensor, index: usize) -> Result<Self> {
        let (_, h, w) = pixels.chw();
        check_divisible(h, w)?;
        Ok(Frame { pixels, index })
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.pixels.chw();
        (h, w)
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
        return Err(Error::input(format!(
            "frame size {h}×{w} must be a positive multiple of {STRIDE} in both dimensions"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub convs: Vec<Conv>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, rng: &mut R, name: &str, cfg: &ModelConfig) -> Self {
        let mut convs = Vec::with_capacity(6);
        let mut cin = cfg.in_channels;
        for level in 0..3 {
            for (j, stride) in [1usize, 2].into_iter().enumerate() {
                let last = level == 2 && j == 1;
                let cout = if last { cfg.feat } else { cfg.backbone_width };
                convs.push(Conv::new(
                    ps,
                    rng,
                    &format!("{name}.l{level}.s{stride}"),
                    cin,
                    cout,
                    3,
                    stride,
                    Act::Relu,
                ));
                cin = cout;
            }
        }
        Backbone {
            convs,
            in_channels: cfg.in_channels,
            out_channels: cfg.feat,
        }
    }

    /// `C × H × W` frame → `c × H/8 × W/8` feature.
    pub fn forward(&self, g: &mut Graph<'_>, frame: Var) -> Result<Var> {
        let (c, h, w) = g.value(frame).chw();
        check_divisible(h, w)?;
        if c != self.in_channels {
            return Err(Error::input(format!(
                "frame has {c} channels, extractor expects {}",
                self.in_channels
            )));
        }
        let mut x = frame;
        for conv in &self.convs {
            x = conv.forward(g, x)?;
        }
        Ok(x)
    }

    /// Forward pass on a standalone frame.
    pub fn extract_features(&self, ps: &ParamSet, frame: &Frame) -> Result<Tensor> {
        let mut g = Graph::new(ps);
        let x = g.input(frame.pixels.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn build(cfg: &ModelConfig) -> (ParamSet, Backbone) {
        let mut ps = ParamSet::new();
        let bb = Backbone::new(&mut ps, &mut ChaCha8Rng::seed_from_u64(3), "backbone", cfg);
        (ps, bb)
    }

    #[test]
    fn downsamples_by_eight_with_published_widths() {
        let (ps, bb) = build(&ModelConfig::default());
        assert_eq!(bb.convs.len(), 6);
        assert!(bb.convs[..5].iter().all(|c| c.cout == 48));
        assert_eq!(bb.convs[5].cout, 64);
        let frame = Frame::new(Tensor::full(&[1, 64, 64], 0.3), 0).unwrap();
        let f = bb.extract_features(&ps, &frame).unwrap();
        assert_eq!(f.shape(), &[64, 8, 8]);
        assert!(f.all_finite());
    }

    #[test]
    fn zero_frame_with_zero_biases_gives_zero_feature() {
        let (ps, bb) = build(&ModelConfig::desk());
        let frame = Frame::new(Tensor::zeros(&[1, 32, 32]), 0).unwrap();
        assert_eq!(bb.extract_features(&ps, &frame).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn rejects_sizes_not_divisible_by_eight() {
        let (ps, bb) = build(&ModelConfig::desk());
        let err = Frame::new(Tensor::zeros(&[1, 60, 64]), 0).unwrap_err();
        assert!(err.to_string().contains("multiple of 8"));
        let frame = Frame {
            pixels: Tensor::zeros(&[1, 64, 12]),
            index: 0,
        };
        assert!(matches!(bb.extract_features(&ps, &frame), Err(Error::Input(_))));
    }
}
