//! Batch normalization with batch statistics and a closed-form backward pass.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

struct BatchNormTrain {
    eps: f64,
}

fn slice<'a, T: WithDType>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("batch norm operand must be contiguous".into()))?;
    Ok(&v[start..end])
}

/// Per-channel mean and biased variance of a `(B, C, HW)` buffer, accumulated in f64.
fn stats<T: WithDType>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * hw) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for ch in 0..c {
        let mut s = 0f64;
        for bi in 0..b {
            s += x[(bi * c + ch) * hw..][..hw].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let m = s / n;
        let mut q = 0f64;
        for bi in 0..b {
            q += x[(bi * c + ch) * hw..][..hw]
                .iter()
                .map(|v| {
                    let d = v.to_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / n;
    }
    (mean, var)
}

fn forward_typed<T: WithDType>(x: &[T], w: &[T], bias: &[T], dims: &[usize], eps: f64) -> Vec<T> {
    let (b, c, hw) = (dims[0], dims[1], dims[2..].iter().product());
    let (mean, var) = stats(x, b, c, hw);
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for ch in 0..c {
            let scale = w[ch].to_f64() / (var[ch] + eps).sqrt();
            let shift = bias[ch].to_f64() - mean[ch] * scale;
            out.extend(x[(bi * c + ch) * hw..][..hw].iter().map(|v| T::from_f64(v.to_f64() * scale + shift)));
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
fn backward_typed<T: WithDType>(x: &[T], w: &[T], g: &[T], dims: &[usize], eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, hw) = (dims[0], dims[1], dims[2..].iter().product::<usize>());
    let n = (b * hw) as f64;
    let (mean, var) = stats(x, b, c, hw);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = Vec::with_capacity(c);
    let mut db = Vec::with_capacity(c);
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let (mut sg, mut sgx) = (0f64, 0f64);
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for (xv, gv) in x[off..off + hw].iter().zip(&g[off..off + hw]) {
                let gv = gv.to_f64();
                sg += gv;
                sgx += gv * (xv.to_f64() - mean[ch]) * inv;
            }
        }
        db.push(T::from_f64(sg));
        dw.push(T::from_f64(sgx));
        let k = w[ch].to_f64() * inv;
        let (mg, mgx) = (sg / n, sgx / n);
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                let xhat = (x[i].to_f64() - mean[ch]) * inv;
                dx[i] = T::from_f64(k * (g[i].to_f64() - mg - xhat * mgx));
            }
        }
    }
    (dx, dw, db)
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims();
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(forward_typed(
                slice(x, l1)?,
                slice(w, l2)?,
                slice(b, l3)?,
                dims,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(forward_typed(
                slice(x, l1)?,
                slice(w, l2)?,
                slice(b, l3)?,
                dims,
                self.eps,
            )),
            _ => return Err(candle_core::Error::Msg("batch norm supports f32 and f64 only".into())),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _bias: &Tensor,
        _y: &Tensor,
        g: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims().to_vec();
        let c = dims[1];
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let (dx, dw, db) = backward_typed::<$t>(
                    &x.flatten_all()?.to_vec1()?,
                    &w.to_vec1()?,
                    &g.flatten_all()?.to_vec1()?,
                    &dims,
                    self.eps,
                );
                (
                    Tensor::from_vec(dx, dims.as_slice(), dev)?,
                    Tensor::from_vec(dw, c, dev)?,
                    Tensor::from_vec(db, c, dev)?,
                )
            }};
        }
        let (dx, dw, db) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => return Err(candle_core::Error::Msg(format!("batch norm does not support {dt:?}"))),
        };
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

/// Normalizes `x` `(B, C, ...)` with its own per-channel statistics, then
/// applies the affine `weight` and `bias`.
pub fn batch_norm_train(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, BatchNormTrain { eps })?)
}

/// Per-channel batch mean and biased variance, detached from the graph.
pub fn batch_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let dims = x.dims();
    let (b, c, hw) = (dims[0], dims[1], dims[2..].iter().product::<usize>());
    let (mean, var) = match x.dtype() {
        DType::F32 => stats(&x.flatten_all()?.to_vec1::<f32>()?, b, c, hw),
        _ => stats(&x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?, b, c, hw),
    };
    let to = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, c, x.device())?.to_dtype(x.dtype())?) };
    Ok((to(mean)?, to(var)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    /// Batch normalization written with differentiable tensor primitives.
    fn reference(x: &Tensor, w: &Tensor, b: &Tensor, eps: f64) -> Tensor {
        let c = x.dim(1).unwrap();
        let flat = x.transpose(0, 1).unwrap().flatten_from(1).unwrap();
        let mean = flat.mean_keepdim(D::Minus1).unwrap();
        let var = flat.broadcast_sub(&mean).unwrap().sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let shape = (1, c, 1, 1);
        let scale = (var + eps).unwrap().sqrt().unwrap().recip().unwrap().flatten_all().unwrap();
        let scale = (scale * w).unwrap().reshape(shape).unwrap();
        x.broadcast_sub(&mean.reshape(shape).unwrap())
            .unwrap()
            .broadcast_mul(&scale)
            .unwrap()
            .broadcast_add(&b.reshape(shape).unwrap())
            .unwrap()
    }

    #[test]
    fn matches_primitive_composition() {
        let dev = Device::Cpu;
        let x = Var::randn(0.5f64, 2.0, (3, 4, 5, 6), &dev).unwrap();
        let w = Var::randn(1f64, 0.3, 4, &dev).unwrap();
        let b = Var::randn(0f64, 0.3, 4, &dev).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (3, 4, 5, 6), &dev).unwrap();
        let ours = batch_norm_train(&x, &w, &b, 1e-5).unwrap();
        let theirs = reference(&x, &w, &b, 1e-5);
        let diff = |a: &Tensor, b: &Tensor| -> f64 {
            (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
        };
        assert!(diff(&ours, &theirs) < 1e-12);
        let g1 = ours.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = theirs.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w, &b] {
            assert!(diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-10);
        }
        let (m, v) = batch_stats(&x).unwrap();
        assert_eq!(m.dims(), &[4]);
        assert!(v.to_vec1::<f64>().unwrap().iter().all(|&v| v > 0.0));
    }
}
