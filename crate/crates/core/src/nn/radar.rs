//! Radar branch: complex-to-real rearrangement, MIMO pre-encoder, residual
//! encoder pyramid and the range-azimuth decoder.

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use num_complex::Complex32;

use super::layers::{
    swap_channel_width, BasicBlock, BatchNorm, Conv2d, ConvSpec, EncoderBlock, LayerKind, ParamStore, Phase,
    RangeUpsample,
};
use super::{Geometry, RadarWidths, ENCODER_DEPTHS};
use crate::datamodel::ComplexRdTensor;
use crate::error::{Error, Result};

/// Stacks real parts (channels `0..C`) on top of imaginary parts (`C..2C`).
pub fn rearrange_complex(rd: &ComplexRdTensor, expected: (usize, usize, usize)) -> Result<Array3<f32>> {
    if rd.dims() != expected {
        return Err(Error::shape(format!(
            "range-Doppler tensor is {:?}, expected {:?}",
            rd.dims(),
            expected
        )));
    }
    let (c, r, d) = expected;
    let mut out = Array3::<f32>::zeros((2 * c, r, d));
    for ((ch, i, j), z) in rd.data.indexed_iter() {
        out[[ch, i, j]] = z.re;
        out[[ch + c, i, j]] = z.im;
    }
    Ok(out)
}

/// Inverse of [`rearrange_complex`].
pub fn restore_complex(real: &Array3<f32>) -> Result<ComplexRdTensor> {
    let (c2, r, d) = real.dim();
    if c2 % 2 != 0 {
        return Err(Error::shape(format!("expected an even channel count, got {c2}")));
    }
    let c = c2 / 2;
    let data = Array3::from_shape_fn((c, r, d), |(ch, i, j)| {
        Complex32::new(real[[ch, i, j]], real[[ch + c, i, j]])
    });
    Ok(ComplexRdTensor { data })
}

/// Batches rearranged cubes into a `(B, 2C, R, D)` tensor.
pub fn rd_batch(frames: &[&ComplexRdTensor], geometry: &Geometry, dtype: DType) -> Result<Tensor> {
    let expected = (geometry.rx_channels, geometry.range_bins, geometry.doppler_bins);
    let mut data = Vec::with_capacity(frames.len() * 2 * expected.0 * expected.1 * expected.2);
    for rd in frames {
        if rd.data.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::Numeric("non-finite range-Doppler input".into()));
        }
        data.extend(rearrange_complex(rd, expected)?.iter().copied());
    }
    let t = Tensor::from_vec(
        data,
        (frames.len(), 2 * expected.0, expected.1, expected.2),
        &Device::Cpu,
    )?;
    Ok(t.to_dtype(dtype)?)
}

/// Dilated convolution along Doppler that gathers the `n_tx` shifted copies
/// of each target into aligned channels, with circular padding on Doppler.
///
/// Output at Doppler bin `d` sees input bins `d + k * delta (mod D)` for
/// `k = 1..=n_tx`.
#[derive(Debug, Clone)]
pub struct MimoPreEncoder {
    conv: Conv2d,
    bn: BatchNorm,
    delta: usize,
    n_tx: usize,
}

impl MimoPreEncoder {
    pub fn new(store: &mut ParamStore, name: &str, geometry: &Geometry, c_out: usize) -> Result<Self> {
        let (n_tx, delta, d) = (geometry.n_tx, geometry.delta, geometry.doppler_bins);
        if delta == 0 || n_tx == 0 || n_tx * delta > d {
            return Err(Error::config(format!(
                "delta {delta} with {n_tx} transmitters does not fit {d} Doppler bins"
            )));
        }
        let spec = ConvSpec {
            kernel: (1, n_tx),
            padding: 0,
            stride: 1,
            dilation: delta,
            bias: false,
        };
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), 2 * geometry.rx_channels, c_out, spec)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out)?,
            delta,
            n_tx,
        })
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let d = x.dim(3)?;
        if d < self.n_tx * self.delta {
            return Err(Error::config(format!("{d} Doppler bins cannot hold the MIMO kernel")));
        }
        let rolled = Tensor::cat(&[x.narrow(3, self.delta, d - self.delta)?, x.narrow(3, 0, self.delta)?], 3)?;
        let extra = (self.n_tx - 1) * self.delta;
        let padded = Tensor::cat(&[&rolled, &rolled.narrow(3, 0, extra)?], 3)?;
        self.bn.forward(&self.conv.forward(&padded)?, phase)
    }
}

/// Pre-encoder output and the four encoder levels.
#[derive(Debug, Clone)]
pub struct RadarPyramid {
    pub x0: Tensor,
    pub x1: Tensor,
    pub x2: Tensor,
    pub x3: Tensor,
    pub x4: Tensor,
}

#[derive(Debug, Clone)]
pub struct RadarOutputs {
    /// `(B, C_det, R/4, A)`
    pub ra_latent: Tensor,
    /// `(B, C_seg, R/2, A)`
    pub ra_highres: Tensor,
}

#[derive(Debug, Clone)]
pub struct RadarNet {
    pre: MimoPreEncoder,
    blocks: Vec<EncoderBlock>,
    /// 1x1 projections of x1..x4 onto the azimuth width
    lift: Vec<Conv2d>,
    up4: RangeUpsample,
    fuse4: BasicBlock,
    up3: RangeUpsample,
    fuse3: BasicBlock,
    up2: RangeUpsample,
    fuse2: BasicBlock,
}

impl RadarNet {
    pub fn new(store: &mut ParamStore, geometry: &Geometry, widths: &RadarWidths) -> Result<Self> {
        geometry.validate()?;
        let pre = MimoPreEncoder::new(store, "radar.pre", geometry, widths.pre)?;
        let mut blocks = Vec::new();
        let mut c_in = widths.pre;
        for (i, (&c, &depth)) in widths.blocks.iter().zip(ENCODER_DEPTHS.iter()).enumerate() {
            blocks.push(EncoderBlock::new(store, &format!("radar.block{}", i + 1), c_in, c, depth, LayerKind::Basic)?);
            c_in = c;
        }
        let a = geometry.azimuth_bins;
        let lift = widths
            .blocks
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("radar.lift{}", i + 1), c, a, ConvSpec::k1().with_bias()))
            .collect::<Result<Vec<_>>>()?;
        // after the swap the channel axis carries the downsampled Doppler extent
        let d = geometry.doppler_bins;
        let (d1, d2, d3, d4) = (d / 2, d / 4, d / 8, d / 16);
        let mid = widths.det;
        Ok(Self {
            pre,
            blocks,
            lift,
            up4: RangeUpsample::new(store, "radar.up4", d4, d4)?,
            fuse4: BasicBlock::new(store, "radar.fuse4", d4 + d3, mid)?,
            up3: RangeUpsample::new(store, "radar.up3", mid, mid)?,
            fuse3: BasicBlock::new(store, "radar.fuse3", mid + d2, widths.det)?,
            up2: RangeUpsample::new(store, "radar.up2", widths.det, widths.seg)?,
            fuse2: BasicBlock::new(store, "radar.fuse2", widths.seg + d1, widths.seg)?,
        })
    }

    pub fn encode(&self, x: &Tensor, phase: Phase) -> Result<RadarPyramid> {
        let x0 = self.pre.forward(x, phase)?;
        let x1 = self.blocks[0].forward(&x0, phase)?;
        let x2 = self.blocks[1].forward(&x1, phase)?;
        let x3 = self.blocks[2].forward(&x2, phase)?;
        let x4 = self.blocks[3].forward(&x3, phase)?;
        Ok(RadarPyramid { x0, x1, x2, x3, x4 })
    }

    pub fn decode(&self, p: &RadarPyramid, phase: Phase) -> Result<RadarOutputs> {
        // (B, C, R, D) -> lift C to azimuth -> swap -> (B, D, R, A)
        let ra = |i: usize, x: &Tensor| swap_channel_width(&self.lift[i].forward(x)?);
        let t4 = ra(3, &p.x4)?;
        let t3 = ra(2, &p.x3)?;
        let t2 = ra(1, &p.x2)?;
        let t1 = ra(0, &p.x1)?;
        let s = Tensor::cat(&[&self.up4.forward(&t4)?, &t3], 1)?;
        let s = self.fuse4.forward(&s, phase)?;
        let s = Tensor::cat(&[&self.up3.forward(&s)?, &t2], 1)?;
        let ra_latent = self.fuse3.forward(&s, phase)?;
        let s = Tensor::cat(&[&self.up2.forward(&ra_latent)?, &t1], 1)?;
        let ra_highres = self.fuse2.forward(&s, phase)?;
        Ok(RadarOutputs { ra_latent, ra_highres })
    }

    /// `x`: rearranged real input `(B, 2C, R, D)`.
    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<(RadarPyramid, RadarOutputs)> {
        let pyramid = self.encode(x, phase)?;
        let out = self.decode(&pyramid, phase)?;
        Ok((pyramid, out))
    }
}
