//! Fusion heads: channel concatenation of radar and (resized) camera features
//! followed by detection or free-space segmentation layers.

use candle_core::Tensor;

use super::layers::{bilinear_resize, BasicBlock, Conv2d, ConvBn, ConvSpec, ParamStore, Phase};
use crate::error::{Error, Result};

/// Probabilities are kept strictly inside `(0, 1)`: `p = P_MIN + (1 - 2 P_MIN) * sigmoid(x)`.
pub const P_MIN: f64 = 1e-7;

pub(crate) fn bounded_sigmoid(x: &Tensor) -> Result<Tensor> {
    // sigmoid(x) = (1 + tanh(x / 2)) / 2, finite gradient for any logit
    let t = (x * 0.5)?.tanh()?;
    Ok(t.affine(0.5 * (1.0 - 2.0 * P_MIN), 0.5)?)
}

fn fuse(radar: &Tensor, camera: &Tensor, expected_channels: usize) -> Result<Tensor> {
    let (_, _, h, w) = radar.dims4()?;
    let camera = bilinear_resize(camera, h, w)?;
    let x = Tensor::cat(&[radar, &camera], 1)?;
    if x.dim(1)? != expected_channels {
        return Err(Error::shape(format!(
            "fused features have {} channels, head expects {expected_channels}",
            x.dim(1)?
        )));
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct DetectionHead {
    trunk: Vec<ConvBn>,
    cls: Conv2d,
    reg: Conv2d,
    in_channels: usize,
}

/// Filter counts of the four conv-BN stages.
pub const DETECTION_FILTERS: [usize; 4] = [144, 96, 96, 96];

impl DetectionHead {
    pub fn new(store: &mut ParamStore, in_channels: usize) -> Result<Self> {
        let mut trunk = Vec::new();
        let mut c = in_channels;
        for (i, &f) in DETECTION_FILTERS.iter().enumerate() {
            trunk.push(ConvBn::new(store, &format!("det.conv{i}"), c, f, ConvSpec::k3(), true)?);
            c = f;
        }
        Ok(Self {
            trunk,
            cls: Conv2d::new(store, "det.cls", c, 1, ConvSpec::k3().with_bias())?,
            reg: Conv2d::new(store, "det.reg", c, 2, ConvSpec::k3().with_bias())?,
            in_channels,
        })
    }

    /// Returns `(cls, reg)`: `(B, 1, R, A)` probabilities and `(B, 2, R, A)` offsets.
    pub fn forward(&self, ra_latent: &Tensor, cam: &Tensor, phase: Phase) -> Result<(Tensor, Tensor)> {
        let mut x = fuse(ra_latent, cam, self.in_channels)?;
        for stage in &self.trunk {
            x = stage.forward(&x, phase)?;
        }
        Ok((bounded_sigmoid(&self.cls.forward(&x)?)?, self.reg.forward(&x)?))
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationHead {
    blocks: [BasicBlock; 2],
    out: Conv2d,
    in_channels: usize,
}

/// Output widths of the two basic blocks.
pub const SEGMENTATION_WIDTHS: [usize; 2] = [64, 32];

impl SegmentationHead {
    pub fn new(store: &mut ParamStore, in_channels: usize) -> Result<Self> {
        let [w1, w2] = SEGMENTATION_WIDTHS;
        Ok(Self {
            blocks: [
                BasicBlock::new(store, "seg.block1", in_channels, w1)?,
                BasicBlock::new(store, "seg.block2", w1, w2)?,
            ],
            out: Conv2d::new(store, "seg.out", w2, 1, ConvSpec::k1().with_bias())?,
            in_channels,
        })
    }

    /// Returns `(B, 1, 2R, A)` drivable-area probabilities.
    pub fn forward(&self, ra_highres: &Tensor, cam: &Tensor, phase: Phase) -> Result<Tensor> {
        let x = fuse(ra_highres, cam, self.in_channels)?;
        let x = self.blocks[1].forward(&self.blocks[0].forward(&x, phase)?, phase)?;
        bounded_sigmoid(&self.out.forward(&x)?)
    }
}
