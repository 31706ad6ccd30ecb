//! Local pixel-level attribution: integrated gradients of a window-sum
//! height target along the straight path from an all-black baseline.
//!
//! The path integral is approximated with a right-endpoint Riemann sum,
//!   IG_i = (x_i − x'_i)/m · Σ_{k=1..m} ∂D(x' + (k/m)(x − x'))/∂x_i,
//! and the completeness gap |Σ IG − (D(x) − D(x'))| is reported with every
//! map.

use crate::error::{Error, Result};
use crate::io::{Report, ReportKind};
use crate::toymodel::{build_model, image_to_input, Checkpoint};
use heightlens_autodiff::{Element, Graph};
use ndarray::{Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};

/// Window target D: sum of predicted heights over an n-by-n window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTarget {
    pub px: usize,
    pub py: usize,
    pub n: usize,
    /// D(x) in meter-pixels.
    pub value: f64,
}

/// Sum of predicted heights in the window with top-left (px, py).
pub fn local_target(height_pred: &Array2<f32>, px: usize, py: usize, n: usize) -> Result<LocalTarget> {
    let (h, w) = height_pred.dim();
    if n == 0 {
        return Err(Error::Domain("window size must be >= 1".into()));
    }
    if py + n > h || px + n > w {
        return Err(Error::Domain(format!(
            "window {n}x{n} at ({px}, {py}) exceeds {h}x{w} map"
        )));
    }
    let mut value = 0.0f64;
    for y in py..py + n {
        for x in px..px + n {
            value += height_pred[[y, x]] as f64;
        }
    }
    Ok(LocalTarget { px, py, n, value })
}

/// A scalar function of an image with exact gradients, evaluated on batches
/// of (C, H, W) inputs.
pub trait PathTarget<F: Element> {
    /// Returns (D(x), dD/dx) for each input.
    fn value_and_grad(&self, inputs: &[ArrayD<F>]) -> Vec<(f64, ArrayD<F>)>;
}

/// D through a model checkpoint: window sum of the predicted height map.
pub struct ModelWindowTarget<'a> {
    pub checkpoint: &'a Checkpoint,
    pub px: usize,
    pub py: usize,
    pub n: usize,
    /// Path points evaluated per graph; bounds peak memory.
    pub micro_batch: usize,
}

impl<'a> ModelWindowTarget<'a> {
    pub fn new(checkpoint: &'a Checkpoint, target: &LocalTarget) -> Self {
        ModelWindowTarget {
            checkpoint,
            px: target.px,
            py: target.py,
            n: target.n,
            micro_batch: 16,
        }
    }
}

impl PathTarget<f32> for ModelWindowTarget<'_> {
    fn value_and_grad(&self, inputs: &[ArrayD<f32>]) -> Vec<(f64, ArrayD<f32>)> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.micro_batch.max(1)) {
            let shape = chunk[0].shape();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let mut x = ArrayD::<f32>::zeros(vec![chunk.len(), c, h, w]);
            for (i, img) in chunk.iter().enumerate() {
                let mut view = x.index_axis_mut(ndarray::Axis(0), i);
                view.assign(img);
            }
            let mut g: Graph<f32> = Graph::new();
            let xid = g.leaf(x, true);
            let built = build_model(&mut g, &self.checkpoint.spec, &self.checkpoint.params, xid, false);
            // per-element window sums: evaluate jointly, split gradients after
            let total = g.sum_window(built.height, self.py, self.px, self.n);
            let grads = g.backward(total);
            let dx = grads.get(xid).expect("input gradient");
            let height = g.value(built.height);
            for (i, _) in chunk.iter().enumerate() {
                let mut d = 0.0f64;
                for y in self.py..self.py + self.n {
                    for xx in self.px..self.px + self.n {
                        d += height[[i, 0, y, xx]] as f64;
                    }
                }
                let gi = dx
                    .index_axis(ndarray::Axis(0), i)
                    .to_owned()
                    .into_dyn();
                out.push((d, gi));
            }
        }
        out
    }
}

/// Result of one integrated-gradients run.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    /// (H, W, 3) per-channel contributions.
    pub ig: Array3<f32>,
    pub target: LocalTarget,
    pub baseline_kind: String,
    pub steps: usize,
    pub completeness_gap: f64,
}

/// Core Riemann-sum IG over any differentiable target. Baseline defaults to
/// zeros ("black") when `baseline` is None.
pub fn integrate<F: Element, T: PathTarget<F>>(
    target: &T,
    x: &ArrayD<F>,
    baseline: Option<&ArrayD<F>>,
    m: usize,
) -> Result<(ArrayD<F>, f64)> {
    if m == 0 {
        return Err(Error::Domain("step count m must be >= 1".into()));
    }
    let zero;
    let x0: &ArrayD<F> = match baseline {
        Some(b) => {
            if b.shape() != x.shape() {
                return Err(Error::Shape("baseline shape differs from input".into()));
            }
            b
        }
        None => {
            zero = ArrayD::zeros(x.raw_dim());
            &zero
        }
    };
    let delta = x - x0;
    let points: Vec<ArrayD<F>> = (1..=m)
        .map(|k| {
            let alpha = F::from_f64(k as f64 / m as f64);
            x0 + &delta.mapv(|v| v * alpha)
        })
        .collect();
    let evals = target.value_and_grad(&points);
    debug_assert_eq!(evals.len(), m);

    let mut grad_sum = ArrayD::<F>::zeros(x.raw_dim());
    for (_, gi) in &evals {
        grad_sum += gi;
    }
    let inv_m = F::from_f64(1.0 / m as f64);
    let ig = &delta * &grad_sum.mapv(|v| v * inv_m);

    let d_x = evals.last().unwrap().0; // alpha = 1 is exactly x
    let d_base = target.value_and_grad(&[x0.clone()])[0].0;
    let ig_total: f64 = ig.iter().map(|v| v.to_f64()).sum();
    let gap = (ig_total - (d_x - d_base)).abs();
    Ok((ig, gap))
}

/// Integrated gradients of a local window target through a checkpoint, from
/// the all-black baseline.
pub fn integrated_gradients(
    checkpoint: &Checkpoint,
    image: &Array3<f32>,
    target: &LocalTarget,
    m: usize,
) -> Result<AttributionMap> {
    let (h, w, _) = image.dim();
    if target.py + target.n > h || target.px + target.n > w {
        return Err(Error::Domain("target window exceeds image bounds".into()));
    }
    let x = image_to_input(image)
        .index_axis_move(ndarray::Axis(0), 0)
        .into_dyn(); // (3, H, W)
    let model_target = ModelWindowTarget::new(checkpoint, target);
    let (ig_chw, gap) = integrate(&model_target, &x, None, m)?;
    let mut ig = Array3::<f32>::zeros((h, w, 3));
    for c in 0..3 {
        for y in 0..h {
            for xx in 0..w {
                ig[[y, xx, c]] = ig_chw[[c, y, xx]];
            }
        }
    }
    Ok(AttributionMap {
        ig,
        target: *target,
        baseline_kind: "black".to_string(),
        steps: m,
        completeness_gap: gap,
    })
}

/// Fraction of total |IG| mass inside the object mask dilated by a 4-px
/// disk. Errors on an all-zero attribution.
pub fn attribution_compactness(map: &AttributionMap, object_mask: &Array2<bool>) -> Result<f64> {
    let (h, w, _) = map.ig.dim();
    if object_mask.dim() != (h, w) {
        return Err(Error::Shape("mask shape differs from attribution".into()));
    }
    if !object_mask.iter().any(|&b| b) {
        return Err(Error::Domain("object mask is empty".into()));
    }
    let dilated = dilate_disk(object_mask, 4);
    let mut inside = 0.0f64;
    let mut total = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let mass: f64 = (0..3).map(|c| map.ig[[y, x, c]].abs() as f64).sum();
            total += mass;
            if dilated[[y, x]] {
                inside += mass;
            }
        }
    }
    if total == 0.0 {
        return Err(Error::Undefined("attribution map is identically zero".into()));
    }
    Ok(inside / total)
}

fn dilate_disk(mask: &Array2<bool>, radius: i64) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut offsets = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dy * dy + dx * dx <= radius * radius {
                offsets.push((dy, dx));
            }
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for ((y, x), &b) in mask.indexed_iter() {
        if !b {
            continue;
        }
        for &(dy, dx) in &offsets {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                out[[ny as usize, nx as usize]] = true;
            }
        }
    }
    out
}

pub fn attribution_report(
    map: &AttributionMap,
    compactness: Option<f64>,
    config_digest: &str,
) -> Report {
    Report::new(
        ReportKind::Attribution,
        config_digest,
        serde_json::json!({
            "target": map.target,
            "baseline": map.baseline_kind,
            "steps": map.steps,
            "completeness_gap": map.completeness_gap,
            "compactness": compactness,
        }),
    )
}
