//! 2-D convolution with an explicit backward pass.
//!
//! The input is padded by the caller, so the op itself is an unpadded
//! correlation. The weight gradient is itself a convolution; the input
//! gradient is one GEMM per sample followed by a col2im scatter.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Storage, Tensor, WithDType};

use crate::error::Result;

struct Conv2dOp {
    stride: usize,
    dilation: usize,
}

fn to_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv operand must be contiguous".into()))?;
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(&v[start..end], l.shape(), &candle_core::Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(&v[start..end], l.shape(), &candle_core::Device::Cpu),
        _ => Err(candle_core::Error::Msg("conv supports f32 and f64 only".into())),
    }
}

/// `dL/dx` as col2im of `W^T G`, one batch element at a time.
fn input_grad(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, dilation: usize) -> candle_core::Result<Tensor> {
    match x.dtype() {
        DType::F32 => input_grad_typed::<f32>(x, w, g, stride, dilation),
        DType::F64 => input_grad_typed::<f64>(x, w, g, stride, dilation),
        dt => Err(candle_core::Error::Msg(format!("conv gradient does not support {dt:?}"))),
    }
}

fn input_grad_typed<T: WithDType + AddAssign>(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    dilation: usize,
) -> candle_core::Result<Tensor> {
    let (b, c_in, h, wid) = x.dims4()?;
    let (c_out, _, kh, kw) = w.dims4()?;
    let (_, _, ho, wo) = g.dims4()?;
    // (C_in * kh * kw, C_out)
    let wt = w.reshape((c_out, c_in * kh * kw))?.t()?.contiguous()?;
    let mut out = vec![T::zero(); b * c_in * h * wid];
    for n in 0..b {
        let cols = wt.matmul(&g.get(n)?.reshape((c_out, ho * wo))?)?;
        let cols = cols.flatten_all()?.to_vec1::<T>()?;
        let dst = &mut out[n * c_in * h * wid..(n + 1) * c_in * h * wid];
        for i in 0..c_in {
            for p in 0..kh {
                for q in 0..kw {
                    let row = &cols[((i * kh + p) * kw + q) * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let y = oy * stride + p * dilation;
                        let base = (i * h + y) * wid + q * dilation;
                        let src = &row[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            for (d, &v) in dst[base..base + wo].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (ox, &v) in src.iter().enumerate() {
                                dst[base + ox * stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out, (b, c_in, h, wid), x.device())
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-explicit-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = to_tensor(s1, l1)?;
        let w = to_tensor(s2, l2)?;
        let y = x.conv2d(&w, 0, self.stride, self.dilation, 1)?;
        let shape = y.shape().clone();
        let (storage, layout) = y.storage_and_layout();
        match &*storage {
            Storage::Cpu(cpu) if layout.is_contiguous() && layout.start_offset() == 0 => Ok((cpu.clone(), shape)),
            _ => Err(candle_core::Error::Msg("unexpected conv output layout".into())),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _y: &Tensor,
        g: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, kh, kw) = w.dims4()?;
        let d = self.dilation;

        // dL/dw[o, i, p, q] = sum_b,h,w x[b, i, h*s + p*d, w*s + q*d] g[b, o, h, w]
        let gw = x
            .transpose(0, 1)?
            .contiguous()?
            .conv2d(&g.transpose(0, 1)?.contiguous()?, 0, d, self.stride, 1)?
            .transpose(0, 1)?
            .narrow(2, 0, kh)?
            .narrow(3, 0, kw)?
            .contiguous()?;

        let gx = input_grad(x, w, g, self.stride, d)?;
        Ok((Some(gx), Some(gw)))
    }
}

/// Unpadded convolution of `x` `(B, C, H, W)` with `w` `(O, C, kh, kw)`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, dilation: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, Conv2dOp { stride, dilation })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn grads_both(stride: usize, dilation: usize, x_shape: (usize, usize, usize, usize), k: (usize, usize)) {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, x_shape, &dev).unwrap();
        let w = Var::randn(0f64, 1.0, (3, x_shape.1, k.0, k.1), &dev).unwrap();
        let ours = conv2d(&x, &w, stride, dilation).unwrap();
        let reference = x.conv2d(&w, 0, stride, dilation, 1).unwrap();
        assert_eq!(ours.dims(), reference.dims());
        let probe = Tensor::randn(0f64, 1.0, ours.dims(), &dev).unwrap();
        let diff: f64 = (&ours - &reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-10);

        let g = ours.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap();
        let gw = g.get(&w).unwrap();
        // central differences on a handful of coordinates
        let eps = 1e-6;
        let loss = |xv: &Tensor, wv: &Tensor| -> f64 {
            xv.conv2d(wv, 0, stride, dilation, 1)
                .unwrap()
                .mul(&probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar()
                .unwrap()
        };
        let xs: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let gxs: Vec<f64> = gx.flatten_all().unwrap().to_vec1().unwrap();
        for i in (0..xs.len()).step_by(7) {
            let mut p = xs.clone();
            p[i] += eps;
            let mut m = xs.clone();
            m[i] -= eps;
            let tp = Tensor::from_vec(p, x.shape(), &dev).unwrap();
            let tm = Tensor::from_vec(m, x.shape(), &dev).unwrap();
            let fd = (loss(&tp, &w) - loss(&tm, &w)) / (2.0 * eps);
            assert!((fd - gxs[i]).abs() < 1e-6 * (1.0 + fd.abs()), "x[{i}] {fd} vs {}", gxs[i]);
        }
        let ws: Vec<f64> = w.flatten_all().unwrap().to_vec1().unwrap();
        let gws: Vec<f64> = gw.flatten_all().unwrap().to_vec1().unwrap();
        for i in (0..ws.len()).step_by(3) {
            let mut p = ws.clone();
            p[i] += eps;
            let mut m = ws.clone();
            m[i] -= eps;
            let tp = Tensor::from_vec(p, w.shape(), &dev).unwrap();
            let tm = Tensor::from_vec(m, w.shape(), &dev).unwrap();
            let fd = (loss(&x, &tp) - loss(&x, &tm)) / (2.0 * eps);
            assert!((fd - gws[i]).abs() < 1e-6 * (1.0 + fd.abs()), "w[{i}] {fd} vs {}", gws[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        grads_both(1, 1, (2, 2, 5, 6), (3, 3));
        grads_both(2, 1, (2, 2, 7, 8), (3, 3));
        grads_both(2, 1, (1, 3, 6, 9), (3, 3));
        grads_both(1, 3, (1, 2, 3, 20), (1, 4));
        grads_both(1, 1, (2, 4, 4, 4), (1, 1));
    }
}
