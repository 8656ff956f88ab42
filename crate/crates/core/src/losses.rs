//! Detection, segmentation and multitask losses on probability maps.
//!
//! All functions take `(B, C, H, W)` tensors and return a scalar tensor, so
//! they participate in autodiff. Per-sample terms are averaged over the batch
//! (or summed with [`Reduction::Sum`]).

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tasks;

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before any log.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    /// Sums over pixels, positive cells and the batch.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the regression term in the detection loss.
    pub alpha: f64,
    /// Weight of the segmentation loss in the multitask loss.
    pub beta: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    #[serde(default)]
    pub reduction: Reduction,
    /// Optional KL(q(z|x) || N(0, I)) weight; zero disables it.
    #[serde(default)]
    pub kl_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 100.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            reduction: Reduction::Mean,
            kl_weight: 0.0,
        }
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.rank() != 4 {
        return Err(Error::shape(format!("{what}: expected (B, C, H, W), got {:?}", a.dims())));
    }
    Ok(())
}

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.maximum(P_CLAMP)?.minimum(1.0 - P_CLAMP)?)
}

/// Reduces a per-element map to a scalar: per-sample mean then batch mean,
/// or a plain sum.
fn reduce(per_elem: &Tensor, reduction: Reduction) -> Result<Tensor> {
    Ok(match reduction {
        Reduction::Mean => per_elem.flatten_from(1)?.mean(1)?.mean(0)?,
        Reduction::Sum => per_elem.sum_all()?,
    })
}

/// Focal loss `-a_t (1 - p_t)^gamma ln p_t`, with `p_t = p` on positives and
/// `1 - p` on negatives, `a_t = alpha` on positives and `1 - alpha` on negatives.
pub fn focal_loss(pred: &Tensor, target: &Tensor, gamma: f64, alpha: f64, reduction: Reduction) -> Result<Tensor> {
    check_same(pred, target, "focal loss")?;
    let p = clamp_prob(pred)?;
    let one_minus_t = target.affine(-1.0, 1.0)?;
    // p_t = t p + (1 - t)(1 - p)
    let p_t = (target.mul(&p)? + one_minus_t.mul(&p.affine(-1.0, 1.0)?)?)?;
    let alpha_t = target.affine(2.0 * alpha - 1.0, 1.0 - alpha)?;
    let modulator = if gamma == 0.0 {
        p_t.ones_like()?
    } else if gamma == 2.0 {
        p_t.affine(-1.0, 1.0)?.sqr()?
    } else {
        p_t.affine(-1.0, 1.0)?.powf(gamma)?
    };
    let per_elem = alpha_t.mul(&modulator)?.mul(&p_t.log()?)?.neg()?;
    reduce(&per_elem, reduction)
}

/// Smooth-L1 with transition at 1, summed over regression channels and
/// averaged over positive cells of each sample (zero without positives).
///
/// `positives`: `(B, 1, H, W)` map, nonzero marks a positive cell.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, positives: &Tensor, reduction: Reduction) -> Result<Tensor> {
    check_same(pred, target, "smooth-L1")?;
    let (b, _, h, w) = pred.dims4()?;
    if positives.dims() != [b, 1, h, w] {
        return Err(Error::shape(format!("positive mask {:?} vs regression {:?}", positives.dims(), pred.dims())));
    }
    let mask = positives.ne(0.0)?.to_dtype(pred.dtype())?;
    let ax = (pred - target)?.abs()?;
    let inner = ax.minimum(1.0)?;
    // 0.5 x^2 below 1, |x| - 0.5 above
    let per_elem = ((inner.sqr()? * 0.5)? + (ax - 1.0)?.maximum(0.0)?)?;
    let per_cell = per_elem.sum_keepdim(1)?.mul(&mask)?;
    let sums = per_cell.flatten_from(1)?.sum(1)?; // (B,)
    Ok(match reduction {
        Reduction::Sum => sums.sum_all()?,
        Reduction::Mean => {
            let counts = mask.flatten_from(1)?.sum(1)?.maximum(1.0)?;
            sums.div(&counts)?.mean(0)?
        }
    })
}

/// Pixelwise binary cross-entropy.
pub fn bce_loss(pred: &Tensor, target: &Tensor, reduction: Reduction) -> Result<Tensor> {
    check_same(pred, target, "BCE")?;
    let p = clamp_prob(pred)?;
    let pos = target.mul(&p.log()?)?;
    let neg = target.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    reduce(&(pos + neg)?.neg()?, reduction)
}

/// `focal(cls) + alpha * smooth_l1(reg)` on the cells where the target is positive.
pub fn detection_loss(
    cls: &Tensor,
    reg: &Tensor,
    target_cls: &Tensor,
    target_reg: &Tensor,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let focal = focal_loss(cls, target_cls, cfg.focal_gamma, cfg.focal_alpha, cfg.reduction)?;
    let l1 = smooth_l1(reg, target_reg, target_cls, cfg.reduction)?;
    Ok((focal + (l1 * cfg.alpha)?)?)
}

pub fn segmentation_loss(seg: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    bce_loss(seg, target, cfg.reduction)
}

/// KL divergence of `N(mu, exp(log_var))` from the standard normal, summed
/// over latent dimensions and averaged over the batch.
pub fn kl_divergence(mu: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    let per = ((log_var.exp()? + mu.sqr()?)? - log_var)?.affine(0.5, -0.5)?;
    Ok(per.sum(1)?.mean(0)?)
}

/// Tensor form of the multitask loss; an absent term counts as zero.
pub fn mtl_tensor(l_det: Option<&Tensor>, l_seg: Option<&Tensor>, beta: f64) -> Result<Tensor> {
    match (l_det, l_seg) {
        (Some(d), Some(s)) => Ok((d + (s * beta)?)?),
        (Some(d), None) => Ok(d.clone()),
        (None, Some(s)) => Ok((s * beta)?),
        (None, None) => Err(Error::config("no task enabled")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_seg: f64,
    pub l_mtl: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `l_mtl = l_det + beta * l_seg`, with the inactive term forced to zero.
pub fn mtl_loss(l_det: f64, l_seg: f64, beta: f64, alpha: f64, tasks: Tasks) -> Result<LossBreakdown> {
    if !(l_det >= 0.0 && l_seg >= 0.0 && beta >= 0.0) {
        return Err(Error::Numeric(format!("losses must be non-negative, got {l_det}, {l_seg}")));
    }
    let l_det = if tasks.detection() { l_det } else { 0.0 };
    let l_seg = if tasks.segmentation() { l_seg } else { 0.0 };
    Ok(LossBreakdown {
        l_det,
        l_seg,
        l_mtl: l_det + beta * l_seg,
        alpha,
        beta,
    })
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
