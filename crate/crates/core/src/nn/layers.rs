//! Parameter storage and the handful of layer types the networks are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Whether batch statistics are used (and running statistics updated).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

impl Phase {
    pub fn is_train(self) -> bool {
        self == Phase::Train
    }
}

/// Named tensors of a model. Trainable parameters and normalization buffers
/// are kept apart so the optimizer and the parameter count only see the former.
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize], buffer: bool) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let map = if buffer { &mut self.buffers } else { &mut self.params };
        if map.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let tensor = var.as_tensor().clone();
        map.insert(name, var);
        Ok(tensor)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) * sqrt(6)-scaled He init.
    pub fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape, false)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape, false)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape, false)
    }

    fn buffer(&mut self, name: String, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name.clone(), vec![value; n], shape, true)?;
        Ok(self.buffers[&name].clone())
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a stored tensor (parameter or buffer) in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::format(format!("unknown tensor {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!(
                "{name}: stored {:?}, given {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
    stride: usize,
    dilation: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub padding: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn k3() -> Self {
        Self {
            kernel: (3, 3),
            padding: 1,
            stride: 1,
            dilation: 1,
            bias: false,
        }
    }

    pub fn k1() -> Self {
        Self {
            kernel: (1, 1),
            padding: 0,
            ..Self::k3()
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let (kh, kw) = spec.kernel;
        let fan_in = c_in * kh * kw;
        let weight = store.kaiming(format!("{name}.weight"), &[c_out, c_in, kh, kw], fan_in)?;
        let bias = if spec.bias {
            Some(store.uniform(format!("{name}.bias"), &[c_out], 1.0 / (fan_in as f64).sqrt())?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            padding: spec.padding,
            stride: spec.stride,
            dilation: spec.dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // Pad each spatial axis to exactly the extent the windows read, so
        // the input gradient has the padded input's shape.
        let (kh, kw) = (self.weight.dim(2)?, self.weight.dim(3)?);
        let x = self.fit_axis(x, 2, kh)?;
        let x = self.fit_axis(&x, 3, kw)?;
        let y = super::conv::conv2d(&x, &self.weight, self.stride, self.dilation)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    fn fit_axis(&self, x: &Tensor, dim: usize, k: usize) -> Result<Tensor> {
        let n = x.dim(dim)?;
        let span = self.dilation * (k - 1) + 1;
        let padded = n + 2 * self.padding;
        if padded < span {
            return Err(Error::shape(format!("axis of {n} is smaller than the kernel span {span}")));
        }
        let out = (padded - span) / self.stride + 1;
        let needed = (out - 1) * self.stride + span;
        let x = x.pad_with_zeros(dim, self.padding, needed.saturating_sub(n + self.padding))?;
        Ok(if x.dim(dim)? > needed { x.narrow(dim, 0, needed)? } else { x })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[d_out, d_in], bound)?,
            bias: store.uniform(format!("{name}.bias"), &[d_out], bound)?,
        })
    }

    /// `x`: (batch, d_in)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Spatial batch normalization over (batch, height, width).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(format!("{name}.weight"), &[channels], 1.0)?,
            bias: store.constant(format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: store.buffer(format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(format!("{name}.running_var"), &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        if phase.is_train() {
            let (mean, var) = super::norm::batch_stats(x)?;
            let (b, _, h, w) = x.dims4()?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { (&var * (n / (n - 1.0)))? } else { var };
            let m = self.momentum;
            self.running_mean
                .set(&((self.running_mean.as_tensor() * (1.0 - m))? + (mean * m)?)?)?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            return super::norm::batch_norm_train(x, &self.weight, &self.bias, self.eps);
        }
        let (mean, var) = (
            self.running_mean.as_tensor().clone(),
            self.running_var.as_tensor().clone(),
        );
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let scale = (inv * &self.weight)?.reshape(shape)?;
        let shift = self.bias.reshape(shape)?;
        Ok(x.broadcast_sub(&mean.reshape(shape)?)?
            .broadcast_mul(&scale)?
            .broadcast_add(&shift)?)
    }
}

/// Convolution followed by batch normalization and, optionally, a rectifier.
#[derive(Debug, Clone)]
pub struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
    relu: bool,
}

impl ConvBn {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, spec: ConvSpec, relu: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, spec)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out)?,
            relu,
        })
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, phase)?;
        Ok(if self.relu { y.relu()? } else { y })
    }
}

/// Two 3x3 conv-BN stages with an identity shortcut.
#[derive(Debug, Clone)]
pub struct ResidualLayer {
    a: ConvBn,
    b: ConvBn,
}

impl ResidualLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            a: ConvBn::new(store, &format!("{name}.a"), channels, channels, ConvSpec::k3(), true)?,
            b: ConvBn::new(store, &format!("{name}.b"), channels, channels, ConvSpec::k3(), false)?,
        })
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let y = self.b.forward(&self.a.forward(x, phase)?, phase)?;
        Ok((y + x)?.relu()?)
    }
}

/// 1x1 reduce, 3x3, 1x1 expand, with an identity shortcut.
#[derive(Debug, Clone)]
pub struct BottleneckLayer {
    reduce: ConvBn,
    mid: ConvBn,
    expand: ConvBn,
}

impl BottleneckLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let inner = (channels / 4).max(1);
        Ok(Self {
            reduce: ConvBn::new(store, &format!("{name}.reduce"), channels, inner, ConvSpec::k1(), true)?,
            mid: ConvBn::new(store, &format!("{name}.mid"), inner, inner, ConvSpec::k3(), true)?,
            expand: ConvBn::new(store, &format!("{name}.expand"), inner, channels, ConvSpec::k1(), false)?,
        })
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let y = self.reduce.forward(x, phase)?;
        let y = self.mid.forward(&y, phase)?;
        let y = self.expand.forward(&y, phase)?;
        Ok((y + x)?.relu()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone)]
enum AnyLayer {
    Basic(ResidualLayer),
    Bottleneck(BottleneckLayer),
}

/// Encoder stage: strided 3x3 conv-BN-ReLU halving both spatial axes (ceil),
/// then a stack of residual layers.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    down: ConvBn,
    layers: Vec<AnyLayer>,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        depth: usize,
        kind: LayerKind,
    ) -> Result<Self> {
        let down = ConvBn::new(store, &format!("{name}.down"), c_in, c_out, ConvSpec::k3().stride(2), true)?;
        let layers = (0..depth)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                Ok(match kind {
                    LayerKind::Basic => AnyLayer::Basic(ResidualLayer::new(store, &n, c_out)?),
                    LayerKind::Bottleneck => AnyLayer::Bottleneck(BottleneckLayer::new(store, &n, c_out)?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { down, layers })
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let mut y = self.down.forward(x, phase)?;
        for layer in &self.layers {
            y = match layer {
                AnyLayer::Basic(l) => l.forward(&y, phase)?,
                AnyLayer::Bottleneck(l) => l.forward(&y, phase)?,
            };
        }
        Ok(y)
    }
}

/// Conv-BN-ReLU applied twice.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
}

impl BasicBlock {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            a: ConvBn::new(store, &format!("{name}.a"), c_in, c_out, ConvSpec::k3(), true)?,
            b: ConvBn::new(store, &format!("{name}.b"), c_out, c_out, ConvSpec::k3(), true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        self.b.forward(&self.a.forward(x, phase)?, phase)
    }
}

/// Transposed convolution with kernel (2, 1) and stride (2, 1): doubles the
/// height (range) axis and leaves the width untouched.
#[derive(Debug, Clone)]
pub struct RangeUpsample {
    conv: Conv2d,
    channels: usize,
}

impl RangeUpsample {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, name, c_in, 2 * c_out, ConvSpec::k1().with_bias())?,
            channels: c_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        // output channel o*2+i feeds output row 2h+i
        let y = self.conv.forward(x)?.reshape((b, self.channels, 2, h, w))?;
        Ok(y.permute((0, 1, 3, 2, 4))?.reshape((b, self.channels, 2 * h, w))?)
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2.
#[derive(Debug, Clone)]
pub struct Upsample2x {
    weight: Tensor,
    bias: Tensor,
}

impl Upsample2x {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let fan_in = c_in * 4;
        Ok(Self {
            weight: store.kaiming(format!("{name}.weight"), &[c_in, c_out, 2, 2], fan_in)?,
            bias: store.uniform(format!("{name}.bias"), &[c_out], 1.0 / (fan_in as f64).sqrt())?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 0, 0, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?)?)
    }
}

/// Exchanges the channel axis with the width axis: `(B, C, H, W) -> (B, W, H, C)`.
pub fn swap_channel_width(x: &Tensor) -> Result<Tensor> {
    Ok(x.transpose(1, 3)?.contiguous()?)
}

/// Exchanges the channel axis with the height axis: `(B, C, H, W) -> (B, H, C, W)`.
pub fn swap_channel_height(x: &Tensor) -> Result<Tensor> {
    Ok(x.transpose(1, 2)?.contiguous()?)
}

/// Half-pixel-center bilinear resize of `(B, C, H, W)` to `(B, C, out_h, out_w)`.
///
/// Source coordinate `s = (d + 0.5) * src / dst - 0.5`, clamped to
/// `[0, src - 1]`. Implemented as two small interpolation matrices so the
/// operation is differentiable.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let rows = interp_matrix(h, out_h, x.dtype(), x.device())?; // (out_h, h)
    let cols = interp_matrix(w, out_w, x.dtype(), x.device())?; // (out_w, w)
    // (b*c, h, w) x (w, out_w) -> (b*c, h, out_w)
    let y = x.reshape((b * c, h, w))?.broadcast_matmul(&cols.t()?)?;
    // (out_h, h) x (b*c, h, out_w) -> (b*c, out_h, out_w)
    let y = rows.broadcast_matmul(&y)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// Row `d` holds the bilinear weights of output index `d` over the source axis.
pub fn interp_matrix(src: usize, dst: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; dst * src];
    let scale = src as f64 / dst as f64;
    for d in 0..dst {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        let f = s - i0 as f64;
        m[d * src + i0] += 1.0 - f;
        m[d * src + i1] += f;
    }
    Ok(Tensor::from_vec(m, (dst, src), device)?.to_dtype(dtype)?)
}
