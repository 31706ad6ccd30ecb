//! Instance-level experiments against a frozen checkpoint: class
//! replacement, object scale sweeps and shadow-scale sweeps, following the
//! paste-template-then-forward protocol.

use crate::error::{Error, Result};
use crate::io::{Report, ReportKind};
use crate::scenegen::{
    self, make_template, paste_object, ObjectTemplate, SceneConfig, ScenePatch, BUILDING, GROUND,
    ROAD, TREE,
};
use crate::toymodel::Checkpoint;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    ClassSwap,
    ScaleSweep,
    ShadowSweep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseResult {
    pub label: String,
    pub location: (usize, usize),
    pub mean_pred_height: f64,
    pub mean_gt_height: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbResult {
    pub experiment: Experiment,
    pub per_case: Vec<CaseResult>,
    /// Mean per-scene Spearman rank correlation (sweeps only).
    pub trend: Option<f64>,
    pub scenes_used: usize,
    pub scenes_skipped: usize,
}

impl PerturbResult {
    pub fn to_report(&self, config_digest: &str) -> Report {
        Report::new(
            ReportKind::Perturb,
            config_digest,
            serde_json::json!({
                "experiment": self.experiment,
                "per_case": self.per_case,
                "trend": self.trend,
                "scenes_used": self.scenes_used,
                "scenes_skipped": self.scenes_skipped,
            }),
        )
    }

    /// Mean predicted height per case label (averaged over scenes).
    pub fn mean_by_label(&self, label_suffix: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .per_case
            .iter()
            .filter(|c| c.label.ends_with(label_suffix))
            .map(|c| c.mean_pred_height)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Arithmetic mean of a map inside a mask.
pub fn masked_mean_height(height_map: &Array2<f32>, mask: &Array2<bool>) -> Result<f64> {
    if height_map.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "map {:?} vs mask {:?}",
            height_map.dim(),
            mask.dim()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&v, &b) in height_map.iter().zip(mask.iter()) {
        if b {
            sum += v as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Domain("empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Default location policy: center of the largest connected ground region,
/// clamped so a `th x tw` template fits.
pub fn center_of_largest_ground_region(
    semantic: &Array2<u8>,
    th: usize,
    tw: usize,
) -> Option<(usize, usize)> {
    let (h, w) = semantic.dim();
    if th > h || tw > w {
        return None;
    }
    let mut visited = Array2::from_elem((h, w), false);
    let mut best: Option<(usize, (f64, f64))> = None;
    for sy in 0..h {
        for sx in 0..w {
            if visited[[sy, sx]] || semantic[[sy, sx]] != GROUND {
                continue;
            }
            // BFS over the 4-connected component
            let mut queue = std::collections::VecDeque::new();
            queue.push_back((sy, sx));
            visited[[sy, sx]] = true;
            let mut count = 0usize;
            let (mut cy, mut cx) = (0.0f64, 0.0f64);
            while let Some((y, x)) = queue.pop_front() {
                count += 1;
                cy += y as f64;
                cx += x as f64;
                let neighbors = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w && !visited[[ny, nx]] && semantic[[ny, nx]] == GROUND {
                        visited[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            if best.map(|(c, _)| count > c).unwrap_or(true) {
                best = Some((count, (cy / count as f64, cx / count as f64)));
            }
        }
    }
    let (_, (cy, cx)) = best?;
    let py = ((cy - th as f64 / 2.0).round().max(0.0) as usize).min(h - th);
    let px = ((cx - tw as f64 / 2.0).round().max(0.0) as usize).min(w - tw);
    Some((px, py))
}

fn template_mask_at(template: &ObjectTemplate, loc: (usize, usize), dim: (usize, usize)) -> Array2<bool> {
    let (px, py) = loc;
    let mut mask = Array2::from_elem(dim, false);
    for ((y, x), &m) in template.mask.indexed_iter() {
        if m {
            mask[[py + y, px + x]] = true;
        }
    }
    mask
}

fn case_for(
    checkpoint: &Checkpoint,
    patch: &ScenePatch,
    template: &ObjectTemplate,
    loc: (usize, usize),
    label: String,
) -> Result<CaseResult> {
    let pasted = paste_object(patch, template, loc)?;
    let fwd = checkpoint.forward(&pasted.image)?;
    let mask = template_mask_at(template, loc, patch.semantic.dim());
    Ok(CaseResult {
        label,
        location: loc,
        mean_pred_height: masked_mean_height(&fwd.height_pred, &mask)?,
        mean_gt_height: masked_mean_height(&pasted.height, &mask)?,
    })
}

/// Paste the base-scale template of each class at a policy-chosen location
/// and record masked mean predictions.
pub fn class_swap(
    checkpoint: &Checkpoint,
    scenes: &[ScenePatch],
    config: &SceneConfig,
) -> Result<PerturbResult> {
    let mut per_case = Vec::new();
    let mut used = 0;
    let mut skipped = 0;
    for patch in scenes {
        let templates: Vec<ObjectTemplate> = [ROAD, TREE, BUILDING]
            .iter()
            .map(|&c| make_template(c, 1.0, config))
            .collect::<Result<_>>()?;
        let (mh, mw) = templates
            .iter()
            .fold((0, 0), |(a, b), t| (a.max(t.shape().0), b.max(t.shape().1)));
        let Some(loc) = center_of_largest_ground_region(&patch.semantic, mh, mw) else {
            skipped += 1;
            continue;
        };
        used += 1;
        for t in &templates {
            let name = scenegen::CLASS_NAMES[t.class as usize];
            per_case.push(case_for(
                checkpoint,
                patch,
                t,
                loc,
                format!("{}:{}", patch.id, name),
            )?);
        }
    }
    Ok(PerturbResult {
        experiment: Experiment::ClassSwap,
        per_case,
        trend: None,
        scenes_used: used,
        scenes_skipped: skipped,
    })
}

/// Sweep the template through the five scales at a single location per
/// scene; the trend is the mean per-scene Spearman of scale vs prediction.
pub fn scale_sweep(
    checkpoint: &Checkpoint,
    scenes: &[ScenePatch],
    class: u8,
    config: &SceneConfig,
) -> Result<PerturbResult> {
    if class != TREE && class != BUILDING {
        return Err(Error::Domain(
            "scale sweeps are defined for tree and building only".into(),
        ));
    }
    let templates: Vec<ObjectTemplate> = scenegen::TEMPLATE_SCALES
        .iter()
        .map(|&s| make_template(class, s, config))
        .collect::<Result<_>>()?;
    let (mh, mw) = templates.last().map(|t| t.shape()).unwrap();

    let mut per_case = Vec::new();
    let mut trends = Vec::new();
    let mut used = 0;
    let mut skipped = 0;
    for patch in scenes {
        // anchor every scale on the center chosen for the largest template
        let Some((px, py)) = center_of_largest_ground_region(&patch.semantic, mh, mw) else {
            skipped += 1;
            continue;
        };
        let (cy, cx) = (py + mh / 2, px + mw / 2);
        used += 1;
        let mut preds = Vec::with_capacity(templates.len());
        for t in &templates {
            let (th, tw) = t.shape();
            let loc = (cx.saturating_sub(tw / 2), cy.saturating_sub(th / 2));
            let case = case_for(
                checkpoint,
                patch,
                t,
                loc,
                format!("{}:s{}", patch.id, t.scale_factor),
            )?;
            preds.push(case.mean_pred_height);
            per_case.push(case);
        }
        if let Some(r) = spearman(&scenegen::TEMPLATE_SCALES, &preds) {
            trends.push(r);
        }
    }
    let trend = if trends.is_empty() {
        None
    } else {
        Some(trends.iter().sum::<f64>() / trends.len() as f64)
    };
    Ok(PerturbResult {
        experiment: Experiment::ScaleSweep,
        per_case,
        trend,
        scenes_used: used,
        scenes_skipped: skipped,
    })
}

/// Fix the object at base scale and sweep the shadow footprint through the
/// five factors. Ground-truth heights are constant across cases.
pub fn shadow_sweep(
    checkpoint: &Checkpoint,
    scenes: &[ScenePatch],
    class: u8,
    config: &SceneConfig,
) -> Result<PerturbResult> {
    if class != TREE && class != BUILDING {
        return Err(Error::Domain(
            "shadow sweeps are defined for tree and building only".into(),
        ));
    }
    if !config.shadow_on {
        return Err(Error::Domain("shadow rendering is disabled in config".into()));
    }
    let template = make_template(class, 1.0, config)?;
    let (th, tw) = template.shape();

    let mut per_case = Vec::new();
    let mut trends = Vec::new();
    let mut used = 0;
    let mut skipped = 0;
    for patch in scenes {
        let Some(loc) = center_of_largest_ground_region(&patch.semantic, th, tw) else {
            skipped += 1;
            continue;
        };
        used += 1;
        let pasted = paste_object(patch, &template, loc)?;
        let mask = template_mask_at(&template, loc, patch.semantic.dim());
        let mask_px: Vec<(usize, usize)> = mask
            .indexed_iter()
            .filter(|(_, &b)| b)
            .map(|((y, x), _)| (y, x))
            .collect();
        let mut preds = Vec::new();
        for &s in &scenegen::TEMPLATE_SCALES {
            let mut shadowed = pasted.clone();
            scenegen::render_shadow(
                &mut shadowed,
                &mask_px,
                template.height_value as f64,
                config.shadow_direction,
                s,
            );
            let fwd = checkpoint.forward(&shadowed.image)?;
            let case = CaseResult {
                label: format!("{}:shadow{}", patch.id, s),
                location: loc,
                mean_pred_height: masked_mean_height(&fwd.height_pred, &mask)?,
                mean_gt_height: masked_mean_height(&shadowed.height, &mask)?,
            };
            preds.push(case.mean_pred_height);
            per_case.push(case);
        }
        if let Some(r) = spearman(&scenegen::TEMPLATE_SCALES, &preds) {
            trends.push(r);
        }
    }
    let trend = if trends.is_empty() {
        None
    } else {
        Some(trends.iter().sum::<f64>() / trends.len() as f64)
    };
    Ok(PerturbResult {
        experiment: Experiment::ShadowSweep,
        per_case,
        trend,
        scenes_used: used,
        scenes_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, CorpusCounts};
    use crate::toymodel::{Checkpoint, ModelSpec, Variant};
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn masked_mean_cases() {
        let m = Array2::from_elem((2, 2), 7.2f32);
        let all = Array2::from_elem((2, 2), true);
        assert_relative_eq!(masked_mean_height(&m, &all).unwrap(), 7.2, epsilon = 1e-6);
        let half = array![[0.0f32, 0.0], [10.0, 10.0]];
        assert_relative_eq!(masked_mean_height(&half, &all).unwrap(), 5.0);
        let none = Array2::from_elem((2, 2), false);
        assert!(masked_mean_height(&m, &none).is_err());
        // random 4x4 vs hand sum
        let r = Array2::from_shape_fn((4, 4), |(y, x)| (3 * y + x) as f32 * 0.7);
        let mask = Array2::from_shape_fn((4, 4), |(y, x)| (y + x) % 2 == 0);
        let mut sum = 0.0;
        let mut n = 0;
        for ((y, x), &b) in mask.indexed_iter() {
            if b {
                sum += r[[y, x]] as f64;
                n += 1;
            }
        }
        assert_relative_eq!(masked_mean_height(&r, &mask).unwrap(), sum / n as f64);
    }

    #[test]
    fn spearman_basics() {
        assert_relative_eq!(
            spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0
        );
        assert_relative_eq!(
            spearman(&[1.0, 2.0, 3.0], &[5.0, 3.0, 1.0]).unwrap(),
            -1.0
        );
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_none()); // zero variance in x ranks
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!(r > 0.0 && r < 1.0);
    }

    #[test]
    fn ground_center_policy_fits() {
        let cfg = SceneConfig {
            image_size: 64,
            seed: 5,
            ..SceneConfig::default()
        };
        let patch = generate_scene(&cfg, 0).unwrap();
        let (px, py) = center_of_largest_ground_region(&patch.semantic, 16, 16).unwrap();
        assert!(px + 16 <= 64 && py + 16 <= 64);
    }

    fn random_ckpt() -> Checkpoint {
        Checkpoint::init(ModelSpec {
            variant: Variant::Conv,
            final_units: 8,
            depth: 2,
            attention_heads: 1,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn sweeps_are_structurally_sound_on_untrained_model() {
        let cfg = SceneConfig {
            image_size: 64,
            seed: 3,
            ..SceneConfig::default()
        };
        let scenes: Vec<_> = (0..2).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        let ckpt = random_ckpt();

        let swap = class_swap(&ckpt, &scenes, &cfg).unwrap();
        assert_eq!(swap.per_case.len(), swap.scenes_used * 3);
        assert!(swap.trend.is_none());

        let sweep = scale_sweep(&ckpt, &scenes, BUILDING, &cfg).unwrap();
        assert_eq!(sweep.per_case.len(), sweep.scenes_used * 5);
        if let Some(t) = sweep.trend {
            assert!((-1.0..=1.0).contains(&t));
        }
        // GT means follow the generator height rule exactly
        for (i, &s) in scenegen::TEMPLATE_SCALES.iter().enumerate() {
            let t = make_template(BUILDING, s, &cfg).unwrap();
            let expected = cfg.height_rule.building_height(t.mask_area() as f64);
            for scene_cases in sweep.per_case.chunks(5) {
                if scene_cases.len() == 5 {
                    assert_relative_eq!(
                        scene_cases[i].mean_gt_height,
                        expected,
                        max_relative = 1e-5
                    );
                }
            }
        }

        let shadows = shadow_sweep(&ckpt, &scenes, BUILDING, &cfg).unwrap();
        assert_eq!(shadows.per_case.len(), shadows.scenes_used * 5);
        // object mask identical across cases -> constant GT mean per scene
        for scene_cases in shadows.per_case.chunks(5) {
            for c in scene_cases {
                assert_relative_eq!(c.mean_gt_height, scene_cases[0].mean_gt_height);
            }
        }

        // determinism
        let swap2 = class_swap(&ckpt, &scenes, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&swap.per_case).unwrap(),
            serde_json::to_string(&swap2.per_case).unwrap()
        );
    }

    #[test]
    fn scale_sweep_rejects_road() {
        let cfg = SceneConfig::default();
        let ckpt = random_ckpt();
        assert!(matches!(
            scale_sweep(&ckpt, &[], ROAD, &cfg),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn corpus_counts_default_sizes() {
        let c = CorpusCounts::default();
        assert_eq!((c.train, c.val, c.test), (2000, 400, 200));
    }
}
