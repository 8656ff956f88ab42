//! Camera branch: a variational encoder-decoder that maps the front-view image
//! into BEV-polar features.

use candle_core::{DType, Device, Tensor, D};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{
    swap_channel_height, swap_channel_width, BasicBlock, Conv2d, ConvBn, ConvSpec, EncoderBlock, LayerKind, Linear,
    ParamStore, Phase, Upsample2x,
};
use super::{CameraWidths, Geometry, ENCODER_DEPTHS};
use crate::datamodel::CameraFrame;
use crate::error::{Error, Result};

/// Mean and log-variance of the latent Gaussian, each `(B, latent_dim)`.
#[derive(Debug, Clone)]
pub struct LatentDistribution {
    pub mu: Tensor,
    pub log_var: Tensor,
}

/// How the latent code is drawn from its distribution.
pub enum LatentSampling<'a> {
    /// `z = mu`.
    Mean,
    /// `z = mu + exp(0.5 * log_var) * eps` with `eps` drawn from `rng`.
    Sample(&'a mut dyn RngCore),
    /// `z = mu + exp(0.5 * log_var) * eps` with the given `eps`.
    Noise(Tensor),
}

/// Reparameterized latent sample; differentiable in `mu` and `log_var`.
pub fn reparameterize(dist: &LatentDistribution, sampling: LatentSampling<'_>) -> Result<Tensor> {
    for t in [&dist.mu, &dist.log_var] {
        let finite = t
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("latent distribution has non-finite entries".into()));
        }
    }
    let eps = match sampling {
        LatentSampling::Mean => return Ok(dist.mu.clone()),
        LatentSampling::Noise(eps) => eps,
        LatentSampling::Sample(rng) => {
            let n = dist.mu.elem_count();
            let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            Tensor::from_vec(values, dist.mu.shape(), dist.mu.device())?.to_dtype(dist.mu.dtype())?
        }
    };
    let sigma = (&dist.log_var * 0.5)?.exp()?;
    Ok((&dist.mu + sigma.mul(&eps)?)?)
}

/// Reshapes an encoder level onto the decoder grid with two
/// swap/conv/swap passes: the first resamples the width axis (convolving
/// over columns as channels), the second the height axis. The feature
/// channel count is preserved.
#[derive(Debug, Clone)]
pub struct SkipAlign {
    across_width: Conv2d,
    across_height: Conv2d,
}

impl SkipAlign {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        source_hw: (usize, usize),
        target_hw: (usize, usize),
    ) -> Result<Self> {
        let spec = ConvSpec::k3().with_bias();
        Ok(Self {
            across_width: Conv2d::new(store, &format!("{name}.width"), source_hw.1, target_hw.1, spec)?,
            across_height: Conv2d::new(store, &format!("{name}.height"), source_hw.0, target_hw.0, spec)?,
        })
    }

    /// Builds the aligner for pyramid level 2 or 3.
    pub fn for_level(store: &mut ParamStore, geometry: &Geometry, level: usize) -> Result<Self> {
        let source = geometry.camera_level_hw(level);
        let target = match level {
            2 => geometry.camera_out_side(),
            3 => geometry.camera_out_side() / 2,
            _ => return Err(Error::config(format!("no skip connection from camera level x{level}"))),
        };
        Self::new(store, &format!("camera.align{level}"), source, (target, target))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // (B, C, H, W) -> (B, W, H, C) -> (B, W', H, C) -> (B, C, H, W')
        let y = swap_channel_width(&self.across_width.forward(&swap_channel_width(x)?)?)?;
        // (B, C, H, W') -> (B, H, C, W') -> (B, H', C, W') -> (B, C, H', W')
        swap_channel_height(&self.across_height.forward(&swap_channel_height(&y)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct CameraPyramid {
    pub x0: Tensor,
    pub x1: Tensor,
    pub x2: Tensor,
    pub x3: Tensor,
    pub x4: Tensor,
}

#[derive(Debug, Clone)]
pub struct CameraOutputs {
    pub pyramid: CameraPyramid,
    pub latent: LatentDistribution,
    pub z: Tensor,
    /// `(B, C_out, S, S)` in range-by-azimuth orientation.
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct CameraNet {
    pre: ConvBn,
    blocks: Vec<EncoderBlock>,
    latent_conv: ConvBn,
    mu: Linear,
    log_var: Linear,
    seed_lift: ConvBn,
    up1: Upsample2x,
    up2: Upsample2x,
    align3: SkipAlign,
    fuse3: BasicBlock,
    up3: Upsample2x,
    align2: SkipAlign,
    fuse2: BasicBlock,
    out: Conv2d,
    geometry: Geometry,
    variational: bool,
}

impl CameraNet {
    pub fn new(store: &mut ParamStore, geometry: &Geometry, widths: &CameraWidths, variational: bool) -> Result<Self> {
        geometry.validate()?;
        let pre = ConvBn::new(store, "camera.pre", 3, widths.pre, ConvSpec::k3(), true)?;
        let mut blocks = Vec::new();
        let mut c_in = widths.pre;
        for (i, (&c, &depth)) in widths.blocks.iter().zip(ENCODER_DEPTHS.iter()).enumerate() {
            blocks.push(EncoderBlock::new(
                store,
                &format!("camera.block{}", i + 1),
                c_in,
                c,
                depth,
                LayerKind::Bottleneck,
            )?);
            c_in = c;
        }
        let [_, c2, c3, c4] = widths.blocks;
        let latent = geometry.latent_dim;
        let side = geometry.seed_side;
        let seed_channels = latent / (side * side);
        let dec = widths.decoder;
        Ok(Self {
            pre,
            blocks,
            latent_conv: ConvBn::new(store, "camera.latent_conv", c4, widths.latent_hidden, ConvSpec::k3(), true)?,
            mu: Linear::new(store, "camera.mu", widths.latent_hidden, latent)?,
            log_var: Linear::new(store, "camera.log_var", widths.latent_hidden, latent)?,
            seed_lift: ConvBn::new(store, "camera.seed", seed_channels, widths.seed, ConvSpec::k3(), true)?,
            up1: Upsample2x::new(store, "camera.up1", widths.seed, dec[0])?,
            up2: Upsample2x::new(store, "camera.up2", dec[0], dec[0])?,
            align3: SkipAlign::for_level(store, geometry, 3)?,
            fuse3: BasicBlock::new(store, "camera.fuse3", dec[0] + c3, dec[1])?,
            up3: Upsample2x::new(store, "camera.up3", dec[1], dec[1])?,
            align2: SkipAlign::for_level(store, geometry, 2)?,
            fuse2: BasicBlock::new(store, "camera.fuse2", dec[1] + c2, dec[2])?,
            out: Conv2d::new(store, "camera.out", dec[2], widths.out, ConvSpec::k1().with_bias())?,
            geometry: geometry.clone(),
            variational,
        })
    }

    /// The skip aligner fed by pyramid level 2 or 3.
    pub fn skip_align(&self, level: usize) -> Option<&SkipAlign> {
        match level {
            2 => Some(&self.align2),
            3 => Some(&self.align3),
            _ => None,
        }
    }

    pub fn encode(&self, img: &Tensor, phase: Phase) -> Result<(CameraPyramid, LatentDistribution)> {
        let (_, c, h, w) = img.dims4()?;
        if (c, h, w) != (3, self.geometry.image_height, self.geometry.image_width) {
            return Err(Error::shape(format!(
                "camera input is {c}x{h}x{w}, expected 3x{}x{}",
                self.geometry.image_height, self.geometry.image_width
            )));
        }
        let x0 = self.pre.forward(img, phase)?;
        let x1 = self.blocks[0].forward(&x0, phase)?;
        let x2 = self.blocks[1].forward(&x1, phase)?;
        let x3 = self.blocks[2].forward(&x2, phase)?;
        let x4 = self.blocks[3].forward(&x3, phase)?;
        let pooled = self.latent_conv.forward(&x4, phase)?.mean(D::Minus1)?.mean(D::Minus1)?;
        let latent = LatentDistribution {
            mu: self.mu.forward(&pooled)?,
            log_var: self.log_var.forward(&pooled)?,
        };
        Ok((CameraPyramid { x0, x1, x2, x3, x4 }, latent))
    }

    pub fn decode(&self, z: &Tensor, pyramid: &CameraPyramid, phase: Phase) -> Result<Tensor> {
        let b = z.dim(0)?;
        let side = self.geometry.seed_side;
        let seed = z.reshape((b, self.geometry.latent_dim / (side * side), side, side))?;
        let s = self.seed_lift.forward(&seed, phase)?;
        let s = self.up2.forward(&self.up1.forward(&s)?)?;
        let s = Tensor::cat(&[&s, &self.align3.forward(&pyramid.x3)?], 1)?;
        let s = self.fuse3.forward(&s, phase)?;
        let s = self.up3.forward(&s)?;
        let s = Tensor::cat(&[&s, &self.align2.forward(&pyramid.x2)?], 1)?;
        let s = self.fuse2.forward(&s, phase)?;
        self.out.forward(&s)
    }

    /// Samples the latent only in training with the variational path enabled;
    /// otherwise `z = mu`.
    pub fn forward(&self, img: &Tensor, phase: Phase, rng: Option<&mut dyn RngCore>) -> Result<CameraOutputs> {
        let (pyramid, latent) = self.encode(img, phase)?;
        let sampling = match (phase, self.variational, rng) {
            (Phase::Train, true, Some(rng)) => LatentSampling::Sample(rng),
            (Phase::Train, true, None) => {
                return Err(Error::config("variational training needs a noise source"));
            }
            _ => LatentSampling::Mean,
        };
        let z = reparameterize(&latent, sampling)?;
        let features = self.decode(&z, &pyramid, phase)?;
        Ok(CameraOutputs {
            pyramid,
            latent,
            z,
            features,
        })
    }
}

/// Batches camera rasters into `(B, 3, H, W)`.
pub fn image_batch(frames: &[&CameraFrame], dtype: DType) -> Result<Tensor> {
    let (c, h, w) = frames.first().map(|f| f.dims()).unwrap_or((3, 0, 0));
    let mut data = Vec::with_capacity(frames.len() * c * h * w);
    for f in frames {
        if f.dims() != (c, h, w) {
            return Err(Error::shape("camera frames in a batch differ in size"));
        }
        data.extend(f.image.iter().copied());
    }
    Ok(Tensor::from_vec(data, (frames.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(mu: f64, log_var: f64) -> LatentDistribution {
        let t = |v| Tensor::new(&[[v]], &Device::Cpu).unwrap();
        LatentDistribution {
            mu: t(mu),
            log_var: t(log_var),
        }
    }

    fn scalar(t: Tensor) -> f64 {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn reparameterize_examples() {
        let eps = |v: f64| Tensor::new(&[[v]], &Device::Cpu).unwrap();
        assert_eq!(scalar(reparameterize(&dist(0.0, 0.0), LatentSampling::Noise(eps(1.0))).unwrap()), 1.0);
        let z = scalar(reparameterize(&dist(2.0, 2.0 * 2f64.ln()), LatentSampling::Noise(eps(-0.5))).unwrap());
        assert!((z - 1.0).abs() < 1e-12);
        assert_eq!(scalar(reparameterize(&dist(0.7, 3.0), LatentSampling::Mean).unwrap()), 0.7);
    }

    #[test]
    fn non_finite_latent_rejected() {
        let r = reparameterize(&dist(f64::NAN, 0.0), LatentSampling::Mean);
        assert!(matches!(r, Err(Error::Numeric(_))));
        let r = reparameterize(&dist(0.0, f64::INFINITY), LatentSampling::Mean);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn skip_align_rejects_other_levels() {
        let g = Geometry::canonical();
        let mut store = ParamStore::new(DType::F32, 0);
        assert!(matches!(SkipAlign::for_level(&mut store, &g, 1), Err(Error::Config(_))));
        assert!(matches!(SkipAlign::for_level(&mut store, &g, 4), Err(Error::Config(_))));
    }

    #[test]
    fn skip_align_dimension_chain() {
        let g = Geometry::canonical();
        let mut store = ParamStore::new(DType::F32, 0);
        let align = SkipAlign::for_level(&mut store, &g, 3).unwrap();
        let x = Tensor::zeros((1, 128, 34, 60), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(align.forward(&x).unwrap().dims(), &[1, 128, 32, 32]);
        let align = SkipAlign::for_level(&mut store, &g, 2).unwrap();
        let x = Tensor::zeros((1, 64, 68, 120), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(align.forward(&x).unwrap().dims(), &[1, 64, 64, 64]);
    }

    #[test]
    fn skip_align_zero_weights_give_zero() {
        let mut store = ParamStore::new(DType::F64, 0);
        let align = SkipAlign::new(&mut store, "a", (5, 6), (4, 3)).unwrap();
        for (name, var) in store.params() {
            store.assign(name, &var.zeros_like().unwrap()).unwrap();
        }
        let x = Tensor::randn(0f64, 1.0, (2, 7, 5, 6), &Device::Cpu).unwrap();
        let y = align.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 7, 4, 3]);
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }
}
