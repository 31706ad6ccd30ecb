//! Unit-level dissection: per-class and per-height-range average responses,
//! class/height selectivity scores, and the variance-based anomaly map.
//!
//! Responses follow
//!   CR^c_k = Σ_i S(F_k(x_i) ⊙ M^c_i) / Σ_i S(M^c_i)
//! with S the elementwise sum; the selectivity of a response row is
//!   |r_max − mean(r_rest)| / |r_max + mean(r_rest)|.

use crate::error::{Error, Result};
use crate::io::{Report, ReportKind};
use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Class,
    HeightRange,
}

/// Disjoint per-category masks for one image.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub kind: MaskKind,
    pub masks: Vec<Array2<bool>>,
    /// Interior edges in meters (height kind only).
    pub bin_edges: Option<Vec<f64>>,
}

impl MaskSet {
    /// Every pixel must land in exactly one mask.
    pub fn validate(&self) -> Result<()> {
        if self.masks.is_empty() {
            return Err(Error::Domain("mask set has no categories".into()));
        }
        let dim = self.masks[0].dim();
        let mut count = Array2::<u8>::zeros(dim);
        for m in &self.masks {
            if m.dim() != dim {
                return Err(Error::Shape("masks disagree on image size".into()));
            }
            for (c, &b) in count.iter_mut().zip(m.iter()) {
                *c += b as u8;
            }
        }
        if count.iter().any(|&c| c != 1) {
            return Err(Error::Domain(
                "masks must partition the image (disjoint, covering)".into(),
            ));
        }
        Ok(())
    }
}

/// One mask per class index.
pub fn class_masks(semantic: &ArrayView2<u8>, num_classes: usize) -> MaskSet {
    let masks = (0..num_classes)
        .map(|c| semantic.mapv(|v| v as usize == c))
        .collect();
    MaskSet {
        kind: MaskKind::Class,
        masks,
        bin_edges: None,
    }
}

/// Height discretization: a dedicated zero bin plus quantile bins of the
/// positive-height distribution over the evaluation set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeightBins {
    /// Interior edges between positive bins, strictly increasing.
    pub edges: Vec<f64>,
}

impl HeightBins {
    pub fn num_bins(&self) -> usize {
        self.edges.len() + 2
    }

    /// Bin index for a height value: 0 is the zero bin.
    pub fn bin_of(&self, h: f64) -> usize {
        if h <= 0.0 {
            return 0;
        }
        let mut b = 1;
        for &e in &self.edges {
            if h > e {
                b += 1;
            } else {
                break;
            }
        }
        b
    }

    pub fn mask_set(&self, height: &ArrayView2<f32>) -> MaskSet {
        let masks = (0..self.num_bins())
            .map(|b| height.mapv(|h| self.bin_of(h as f64) == b))
            .collect();
        MaskSet {
            kind: MaskKind::HeightRange,
            masks,
            bin_edges: Some(self.edges.clone()),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out = vec!["h=0".to_string()];
        let mut lo = 0.0;
        for &e in &self.edges {
            out.push(format!("{lo:.1}-{e:.1}m"));
            lo = e;
        }
        out.push(format!(">{lo:.1}m"));
        out
    }
}

/// Empirical quantile (linear interpolation) of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let idx = p * (n - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let w = idx - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi.min(n - 1)] * w
}

/// Choose bin edges from the positive-height pixels of an evaluation set.
/// `num_bins` counts the zero bin, so `num_bins - 1` positive bins.
pub fn discretize_height(height_maps: &[ArrayView2<f32>], num_bins: usize) -> Result<HeightBins> {
    if num_bins < 2 {
        return Err(Error::Domain(format!(
            "num_bins must be >= 2 (zero bin + positive bins), got {num_bins}"
        )));
    }
    let mut positive: Vec<f64> = height_maps
        .iter()
        .flat_map(|m| m.iter().filter(|&&h| h > 0.0).map(|&h| h as f64))
        .collect();
    if positive.is_empty() {
        return Err(Error::Degenerate(
            "all heights are zero; cannot discretize positive range".into(),
        ));
    }
    positive.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos_bins = num_bins - 1;
    let mut edges = Vec::with_capacity(pos_bins.saturating_sub(1));
    for j in 1..pos_bins {
        let e = quantile(&positive, j as f64 / pos_bins as f64);
        edges.push(e);
    }
    edges.dedup_by(|a, b| a == b);
    Ok(HeightBins { edges })
}

/// Average-response matrix over a dataset, (units x categories), plus a
/// defined flag per category (false when the category never occurs).
#[derive(Debug, Clone)]
pub struct ResponseMatrix {
    pub values: Array2<f64>,
    pub defined: Vec<bool>,
}

/// Accumulate Eq.-style responses over (features, masks) pairs. Features are
/// clamped at zero; accumulation is f64 in a fixed order.
pub fn responses<'a, I>(pairs: I) -> Result<ResponseMatrix>
where
    I: IntoIterator<Item = (ArrayView3<'a, f32>, &'a MaskSet)>,
{
    let mut num: Option<Array2<f64>> = None;
    let mut den: Vec<f64> = Vec::new();
    for (features, mask_set) in pairs {
        let (k, h, w) = features.dim();
        let c = mask_set.masks.len();
        if num.is_none() {
            num = Some(Array2::zeros((k, c)));
            den = vec![0.0; c];
        }
        let num = num.as_mut().unwrap();
        if num.dim() != (k, c) {
            return Err(Error::Shape("feature/unit count changed mid-dataset".into()));
        }
        for (ci, mask) in mask_set.masks.iter().enumerate() {
            if mask.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "mask {:?} vs features {:?}",
                    mask.dim(),
                    (h, w)
                )));
            }
            let mut area = 0.0;
            for &b in mask.iter() {
                if b {
                    area += 1.0;
                }
            }
            den[ci] += area;
            if area == 0.0 {
                continue;
            }
            for ki in 0..k {
                let mut s = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        if mask[[y, x]] {
                            s += features[[ki, y, x]].max(0.0) as f64;
                        }
                    }
                }
                num[[ki, ci]] += s;
            }
        }
    }
    let num = num.ok_or_else(|| Error::Degenerate("responses over empty dataset".into()))?;
    let defined: Vec<bool> = den.iter().map(|&d| d > 0.0).collect();
    let mut values = num;
    for ((_, ci), v) in values.indexed_iter_mut() {
        if defined[ci] {
            *v /= den[ci];
        } else {
            *v = 0.0;
        }
    }
    Ok(ResponseMatrix { values, defined })
}

/// Selectivity of one response row: 0 when the max equals the mean of the
/// rest, approaching 1 for a single-category unit. `None` with fewer than
/// two defined entries.
pub fn selectivity(row: &[f64], defined: &[bool]) -> Option<f64> {
    let vals: Vec<f64> = row
        .iter()
        .zip(defined.iter())
        .filter(|(_, &d)| d)
        .map(|(&v, _)| v)
        .collect();
    if vals.len() < 2 {
        return None;
    }
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_idx = vals.iter().position(|&v| v == max).unwrap();
    let rest: Vec<f64> = vals
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != max_idx)
        .map(|(_, &v)| v)
        .collect();
    let rest_mean = rest.iter().sum::<f64>() / rest.len() as f64;
    let denom = (max + rest_mean).abs();
    if denom == 0.0 {
        // all-zero row: indifferent unit
        return Some(0.0);
    }
    Some((max - rest_mean).abs() / denom)
}

/// Full dissection result: class and height responses plus selectivity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub classes: Vec<String>,
    pub height_labels: Vec<String>,
    pub bin_edges: Vec<f64>,
    /// (units x classes)
    pub cr: Vec<Vec<f64>>,
    pub cr_defined: Vec<bool>,
    /// (units x height bins)
    pub hr: Vec<Vec<f64>>,
    pub hr_defined: Vec<bool>,
    pub cs: Vec<Option<f64>>,
    pub hs: Vec<Option<f64>>,
}

impl SelectivityReport {
    pub fn build(
        classes: Vec<String>,
        class_responses: &ResponseMatrix,
        bins: &HeightBins,
        height_responses: &ResponseMatrix,
    ) -> SelectivityReport {
        let cs = class_responses
            .values
            .rows()
            .into_iter()
            .map(|r| selectivity(r.as_slice().unwrap(), &class_responses.defined))
            .collect();
        let hs = height_responses
            .values
            .rows()
            .into_iter()
            .map(|r| selectivity(r.as_slice().unwrap(), &height_responses.defined))
            .collect();
        SelectivityReport {
            classes,
            height_labels: bins.labels(),
            bin_edges: bins.edges.clone(),
            cr: matrix_rows(&class_responses.values),
            cr_defined: class_responses.defined.clone(),
            hr: matrix_rows(&height_responses.values),
            hr_defined: height_responses.defined.clone(),
            cs,
            hs,
        }
    }

    pub fn num_units(&self) -> usize {
        self.cr.len()
    }

    /// Highest class selectivity among units whose preferred class is `c`.
    pub fn max_cs_for_class(&self, c: usize) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (row, cs) in self.cr.iter().zip(self.cs.iter()) {
            let Some(cs) = cs else { continue };
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i);
            if argmax == Some(c) {
                best = Some(best.map_or(*cs, |b: f64| b.max(*cs)));
            }
        }
        best
    }

    pub fn to_report(&self, config_digest: &str) -> Report {
        Report::new(
            ReportKind::Selectivity,
            config_digest,
            serde_json::json!({
                "classes": self.classes,
                "height_labels": self.height_labels,
                "bin_edges": self.bin_edges,
                "cr": self.cr,
                "cr_defined": self.cr_defined,
                "hr": self.hr,
                "hr_defined": self.hr_defined,
                "cs": self.cs,
                "hs": self.hs,
            }),
        )
    }
}

fn matrix_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Units ordered by response to one category, descending; ties broken by
/// unit index ascending.
pub fn rank_units(matrix: &ResponseMatrix, category: usize) -> Result<Vec<usize>> {
    if category >= matrix.values.ncols() {
        return Err(Error::Domain(format!(
            "category {category} out of range ({} categories)",
            matrix.values.ncols()
        )));
    }
    if !matrix.defined[category] {
        return Err(Error::Undefined(format!(
            "category {category} absent from the dataset"
        )));
    }
    let mut units: Vec<usize> = (0..matrix.values.nrows()).collect();
    units.sort_by(|&a, &b| {
        matrix.values[[b, category]]
            .partial_cmp(&matrix.values[[a, category]])
            .unwrap()
            .then(a.cmp(&b))
    });
    Ok(units)
}

/// Anomaly response map: 1 − population variance over channel-normalized
/// features. Pixels whose channel sum is nonpositive are flagged undefined
/// (their value is set to 1: nothing claims them).
#[derive(Debug, Clone)]
pub struct AnomalyMap {
    pub values: Array2<f32>,
    pub defined: Array2<bool>,
}

pub fn anomaly_map(features: &ArrayView3<f32>) -> AnomalyMap {
    let (k, h, w) = features.dim();
    let mut values = Array2::<f32>::zeros((h, w));
    let mut defined = Array2::<bool>::from_elem((h, w), true);
    let kf = k as f64;
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0f64;
            for ki in 0..k {
                sum += features[[ki, y, x]].max(0.0) as f64;
            }
            if sum <= 0.0 {
                values[[y, x]] = 1.0;
                defined[[y, x]] = false;
                continue;
            }
            let mean = 1.0 / kf;
            let mut var = 0.0f64;
            for ki in 0..k {
                let d = features[[ki, y, x]].max(0.0) as f64 / sum - mean;
                var += d * d;
            }
            var /= kf;
            values[[y, x]] = (1.0 - var) as f32;
        }
    }
    AnomalyMap { values, defined }
}

/// Mean anomaly over an optional region (defined pixels only).
pub fn mean_anomaly(map: &AnomalyMap, region: Option<&Array2<bool>>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((y, x), &v) in map.values.indexed_iter() {
        if !map.defined[[y, x]] {
            continue;
        }
        if region.map(|r| r[[y, x]]).unwrap_or(true) {
            sum += v as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("no defined pixels in region".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array3};

    #[test]
    fn height_bins_partition_binary_case() {
        let h = array![[0.0f32, 10.0], [10.0, 0.0]];
        let bins = discretize_height(&[h.view()], 2).unwrap();
        assert!(bins.edges.is_empty());
        let ms = bins.mask_set(&h.view());
        ms.validate().unwrap();
        assert_eq!(ms.masks.len(), 2);
        assert!(ms.masks[0][[0, 0]]);
        assert!(ms.masks[1][[0, 1]]);
    }

    #[test]
    fn height_bins_uniform_quantiles() {
        // uniform 0..30 positive heights, 3 positive bins -> edges near 10, 20
        let vals: Vec<f32> = (1..=3000).map(|i| i as f32 * 0.01).collect();
        let map = Array2::from_shape_vec((50, 60), vals).unwrap();
        let bins = discretize_height(&[map.view()], 4).unwrap();
        assert_eq!(bins.edges.len(), 2);
        assert_relative_eq!(bins.edges[0], 10.0, max_relative = 0.01);
        assert_relative_eq!(bins.edges[1], 20.0, max_relative = 0.01);
    }

    #[test]
    fn height_bins_guards() {
        let h = array![[0.0f32, 1.0]];
        assert!(matches!(
            discretize_height(&[h.view()], 1),
            Err(Error::Domain(_))
        ));
        let z = array![[0.0f32, 0.0]];
        assert!(matches!(
            discretize_height(&[z.view()], 3),
            Err(Error::Degenerate(_))
        ));
    }

    fn unit_masks_4x4() -> MaskSet {
        // two disjoint masks covering a 4x4 image
        let m0 = Array2::from_shape_fn((4, 4), |(y, _)| y < 2);
        let m1 = Array2::from_shape_fn((4, 4), |(y, _)| y >= 2);
        MaskSet {
            kind: MaskKind::Class,
            masks: vec![m0, m1],
            bin_edges: None,
        }
    }

    #[test]
    fn response_of_mask_equal_unit_is_one() {
        let ms = unit_masks_4x4();
        // F_0 equals mask 0, F_1 is constant 0.5
        let mut f = Array3::<f32>::zeros((2, 4, 4));
        for y in 0..2 {
            for x in 0..4 {
                f[[0, y, x]] = 1.0;
            }
        }
        f.slice_mut(ndarray::s![1, .., ..]).fill(0.5);
        let r = responses([(f.view(), &ms)]).unwrap();
        assert_relative_eq!(r.values[[0, 0]], 1.0);
        assert_relative_eq!(r.values[[0, 1]], 0.0);
        // constant unit responds equally everywhere
        assert_relative_eq!(r.values[[1, 0]], 0.5);
        assert_relative_eq!(r.values[[1, 1]], 0.5);
        let cs0 = selectivity(&[r.values[[0, 0]], r.values[[0, 1]]], &r.defined).unwrap();
        let cs1 = selectivity(&[r.values[[1, 0]], r.values[[1, 1]]], &r.defined).unwrap();
        assert_relative_eq!(cs0, 1.0);
        assert_relative_eq!(cs1, 0.0);
    }

    #[test]
    fn responses_match_hand_sums_on_two_images() {
        // hand-built 2-image, 4x4, 2-unit, 2-class fixture
        let ms = unit_masks_4x4();
        let f1 = Array3::from_shape_fn((2, 4, 4), |(k, y, x)| (k + 1) as f32 * (y * 4 + x) as f32);
        let f2 = Array3::from_shape_fn((2, 4, 4), |(k, y, x)| (k as f32) + (y + x) as f32 * 0.5);
        let r = responses([(f1.view(), &ms), (f2.view(), &ms)]).unwrap();
        // brute force
        for k in 0..2 {
            for c in 0..2 {
                let mut num = 0.0;
                let mut den = 0.0;
                for (f, _) in [(&f1, 0), (&f2, 1)] {
                    for y in 0..4 {
                        for x in 0..4 {
                            if ms.masks[c][[y, x]] {
                                num += f[[k, y, x]].max(0.0) as f64;
                            }
                        }
                    }
                }
                for _ in 0..2 {
                    den += ms.masks[c].iter().filter(|&&b| b).count() as f64;
                }
                assert_relative_eq!(r.values[[k, c]], num / den, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn selectivity_examples() {
        let d = vec![true; 4];
        assert_relative_eq!(selectivity(&[1.0, 0.0, 0.0, 0.0], &d).unwrap(), 1.0);
        assert_relative_eq!(selectivity(&[0.3, 0.3, 0.3], &[true; 3]).unwrap(), 0.0);
        assert!(selectivity(&[0.5], &[true]).is_none());
        // scale invariance
        let row = [0.9, 0.1, 0.2, 0.05];
        let a = selectivity(&row, &d).unwrap();
        let scaled: Vec<f64> = row.iter().map(|v| v * 7.5).collect();
        let b = selectivity(&scaled, &d).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn rank_units_orders_and_breaks_ties() {
        let values = array![[1.0, 0.0], [0.5, 0.5], [1.0, 0.2]];
        let m = ResponseMatrix {
            values,
            defined: vec![true, true],
        };
        // units 0 and 2 tie on category 0 -> index ascending
        assert_eq!(rank_units(&m, 0).unwrap(), vec![0, 2, 1]);
        assert_eq!(rank_units(&m, 1).unwrap(), vec![1, 2, 0]);
        assert!(rank_units(&m, 5).is_err());
    }

    #[test]
    fn anomaly_map_uniform_and_onehot() {
        // uniform channels -> variance 0 -> R_ood = 1
        let f = Array3::<f32>::from_elem((16, 2, 2), 0.3);
        let a = anomaly_map(&f.view());
        assert_relative_eq!(a.values[[0, 0]], 1.0);
        // one-hot over 16 channels -> 1 - 15/256 = 241/256
        let mut f = Array3::<f32>::zeros((16, 1, 1));
        f[[3, 0, 0]] = 2.7;
        let a = anomaly_map(&f.view());
        assert_relative_eq!(a.values[[0, 0]] as f64, 241.0 / 256.0, epsilon = 1e-6);
        assert!(a.defined[[0, 0]]);
        // all-zero pixel flagged undefined
        let z = Array3::<f32>::zeros((4, 1, 1));
        let a = anomaly_map(&z.view());
        assert!(!a.defined[[0, 0]]);
    }

    #[test]
    fn anomaly_map_is_permutation_invariant() {
        let f = Array3::from_shape_fn((6, 3, 3), |(k, y, x)| ((k * 31 + y * 7 + x) % 5) as f32);
        let a = anomaly_map(&f.view());
        // reverse channel order
        let mut rev = Array3::<f32>::zeros((6, 3, 3));
        for k in 0..6 {
            rev.slice_mut(ndarray::s![k, .., ..])
                .assign(&f.slice(ndarray::s![5 - k, .., ..]));
        }
        let b = anomaly_map(&rev.view());
        assert_eq!(a.values, b.values);
    }
}
