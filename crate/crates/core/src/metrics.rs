//! Height-estimation and segmentation metrics.
//!
//! All accumulation happens in f64 regardless of input precision. SI-RMSE is
//! implemented exactly as printed in its source formula — the population
//! variance of the residuals, in squared meters, with no square root.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};

fn check_shapes(pred: &ArrayView2<f32>, gt: &ArrayView2<f32>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "pred {:?} vs gt {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

fn residuals_iter<'a>(
    pred: &'a ArrayView2<'a, f32>,
    gt: &'a ArrayView2<'a, f32>,
    valid: Option<&'a Array2<bool>>,
) -> impl Iterator<Item = f64> + 'a {
    gt.indexed_iter().filter_map(move |((y, x), &g)| {
        if valid.map(|m| m[[y, x]]).unwrap_or(true) {
            Some(g as f64 - pred[[y, x]] as f64)
        } else {
            None
        }
    })
}

/// Mean absolute error in meters.
pub fn mae(pred: ArrayView2<f32>, gt: ArrayView2<f32>, valid: Option<&Array2<bool>>) -> Result<f64> {
    check_shapes(&pred, &gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in residuals_iter(&pred, &gt, valid) {
        sum += r.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate("no valid pixels for mae".into()));
    }
    Ok(sum / n as f64)
}

/// Root mean squared error in meters.
pub fn rmse(pred: ArrayView2<f32>, gt: ArrayView2<f32>, valid: Option<&Array2<bool>>) -> Result<f64> {
    check_shapes(&pred, &gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in residuals_iter(&pred, &gt, valid) {
        sum += r * r;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate("no valid pixels for rmse".into()));
    }
    Ok((sum / n as f64).sqrt())
}

/// Scale-invariant residual statistic: (1/n) ΣR² − (1/n²) (ΣR)².
/// This is the population variance of the residuals (squared meters).
pub fn si_rmse(
    pred: ArrayView2<f32>,
    gt: ArrayView2<f32>,
    valid: Option<&Array2<bool>>,
) -> Result<f64> {
    check_shapes(&pred, &gt)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for r in residuals_iter(&pred, &gt, valid) {
        sum += r;
        sum_sq += r * r;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate("no valid pixels for si_rmse".into()));
    }
    let n = n as f64;
    Ok(sum_sq / n - (sum / n).powi(2))
}

fn avg_pool2(map: &Array2<f64>) -> Array2<f64> {
    let (h, w) = map.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| {
        0.25 * (map[[2 * y, 2 * x]]
            + map[[2 * y, 2 * x + 1]]
            + map[[2 * y + 1, 2 * x]]
            + map[[2 * y + 1, 2 * x + 1]])
    })
}

/// Multi-scale gradient error: forward-difference residual gradients summed
/// over an average-pooled pyramid, normalized by the total pixel count over
/// all scales.
pub fn msge(pred: ArrayView2<f32>, gt: ArrayView2<f32>, num_scales: usize) -> Result<f64> {
    check_shapes(&pred, &gt)?;
    if num_scales == 0 {
        return Err(Error::Domain("num_scales must be >= 1".into()));
    }
    let (h, w) = pred.dim();
    let div = 1usize << (num_scales - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::Domain(format!(
            "{h}x{w} map must halve cleanly {} times (divisible by {div})",
            num_scales - 1
        )));
    }
    let mut residual =
        Array2::from_shape_fn((h, w), |(y, x)| gt[[y, x]] as f64 - pred[[y, x]] as f64);
    let mut grad_sum = 0.0;
    let mut total_pixels = 0usize;
    for k in 0..num_scales {
        if k > 0 {
            residual = avg_pool2(&residual);
        }
        let (sh, sw) = residual.dim();
        total_pixels += sh * sw;
        for y in 0..sh {
            for x in 0..sw {
                if x + 1 < sw {
                    grad_sum += (residual[[y, x + 1]] - residual[[y, x]]).abs();
                }
                if y + 1 < sh {
                    grad_sum += (residual[[y + 1, x]] - residual[[y, x]]).abs();
                }
            }
        }
    }
    Ok(grad_sum / total_pixels as f64)
}

/// Intersection-over-union of two binary masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouValue {
    pub value: f64,
    /// Both masks empty; value defined as 1.0.
    pub empty_union: bool,
}

pub fn iou(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<IouValue> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(IouValue {
            value: 1.0,
            empty_union: true,
        });
    }
    Ok(IouValue {
        value: inter as f64 / union as f64,
        empty_union: false,
    })
}

pub fn miou(values: &[IouValue]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Degenerate("miou of zero classes".into()));
    }
    Ok(values.iter().map(|v| v.value).sum::<f64>() / values.len() as f64)
}
