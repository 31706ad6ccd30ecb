//! Procedural synthetic city scenes: RGB image, per-pixel semantic labels and
//! per-pixel height in meters, plus pasteable object templates.
//!
//! Everything here is a pure function of (config, index), so corpora can be
//! regenerated bit-identically and patches can be generated in parallel.

use crate::error::{Error, Result};
use crate::io;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const GROUND: u8 = 0;
pub const ROAD: u8 = 1;
pub const TREE: u8 = 2;
pub const BUILDING: u8 = 3;
pub const WATER: u8 = 4;

pub const CLASS_NAMES: [&str; 5] = ["ground", "road", "tree", "building", "water"];

/// The five template scale factors.
pub const TEMPLATE_SCALES: [f64; 5] = [0.3, 1.0, 1.5, 2.5, 3.0];

const BUILDING_BASE_SIDE: usize = 16; // base template 16x16 at image_size 128
const TREE_BASE_RADIUS: f64 = 8.0;
const SHADOW_DARKEN: f32 = 0.45;
const SHADOW_PX_PER_METER: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 100;

/// Heights assigned per class. Ground, road and water are always 0 m;
/// buildings grow with footprint area; scene trees draw uniformly from
/// `tree_range` while templates use its midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeightRule {
    pub building_base: f64,
    pub building_per_area: f64,
    pub tree_range: [f64; 2],
}

impl Default for HeightRule {
    fn default() -> Self {
        HeightRule {
            building_base: 10.0,
            building_per_area: 0.02,
            tree_range: [5.0, 15.0],
        }
    }
}

impl HeightRule {
    pub fn building_height(&self, footprint_area: f64) -> f64 {
        self.building_base + self.building_per_area * footprint_area
    }

    /// Deterministic height for templates.
    pub fn template_height(&self, class: u8, footprint_area: f64) -> f64 {
        match class {
            BUILDING => self.building_height(footprint_area),
            TREE => 0.5 * (self.tree_range[0] + self.tree_range[1]),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub class_set: Vec<String>,
    pub building_count_range: [usize; 2],
    pub tree_count_range: [usize; 2],
    pub road_count_range: [usize; 2],
    pub water_count_range: [usize; 2],
    pub height_rule: HeightRule,
    pub shadow_direction: [f64; 2],
    pub shadow_on: bool,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 128,
            class_set: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            building_count_range: [2, 5],
            tree_count_range: [3, 8],
            road_count_range: [1, 2],
            water_count_range: [0, 1],
            height_rule: HeightRule::default(),
            shadow_direction: [0.7071067811865476, 0.7071067811865476],
            shadow_on: true,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Domain(format!(
                "image_size must be >= 32, got {}",
                self.image_size
            )));
        }
        if self.class_set.is_empty() || self.class_set[0] != "ground" {
            return Err(Error::Domain(
                "class_set must be nonempty with ground at index 0".into(),
            ));
        }
        if self.height_rule.building_base <= 0.0
            || self.height_rule.building_per_area < 0.0
            || self.height_rule.tree_range[0] <= 0.0
            || self.height_rule.tree_range[1] < self.height_rule.tree_range[0]
        {
            return Err(Error::Domain(
                "height_rule must give strictly positive tree/building heights".into(),
            ));
        }
        for r in [
            self.building_count_range,
            self.tree_count_range,
            self.road_count_range,
            self.water_count_range,
        ] {
            if r[0] > r[1] {
                return Err(Error::Domain(format!("invalid count range {r:?}")));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_std) {
            return Err(Error::Domain("noise_std must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_set.len()
    }
}

/// One labeled sample: image in [0,1], class indices and height in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePatch {
    pub id: String,
    /// (H, W, 3)
    pub image: Array3<f32>,
    /// (H, W)
    pub semantic: Array2<u8>,
    /// (H, W), meters, >= 0
    pub height: Array2<f32>,
}

impl ScenePatch {
    pub fn size(&self) -> (usize, usize) {
        (self.semantic.nrows(), self.semantic.ncols())
    }
}

/// A pasteable object patch at one of the five scales.
#[derive(Debug, Clone)]
pub struct ObjectTemplate {
    pub class: u8,
    pub scale_factor: f64,
    /// (h, w, 3)
    pub pixels: Array3<f32>,
    /// (h, w)
    pub mask: Array2<bool>,
    pub height_value: f32,
}

impl ObjectTemplate {
    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.mask.nrows(), self.mask.ncols())
    }
}

fn mix64(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed) ^ mix64(index.wrapping_add(0x5ce9e)))
}

struct PlacedObject {
    mask: Vec<(usize, usize)>,
    height: f64,
}

fn class_base_color(class: u8, rng: &mut ChaCha8Rng) -> [f32; 3] {
    match class {
        GROUND => [0.36, 0.33, 0.24],
        ROAD => [0.28, 0.28, 0.30],
        TREE => [0.10, 0.32, 0.12],
        BUILDING => {
            let palette = [
                [0.62, 0.60, 0.58],
                [0.55, 0.35, 0.30],
                [0.45, 0.50, 0.58],
                [0.68, 0.64, 0.52],
            ];
            palette[rng.random_range(0..palette.len())]
        }
        WATER => [0.15, 0.28, 0.45],
        _ => [0.5, 0.5, 0.5],
    }
}

fn class_jitter(class: u8) -> f32 {
    match class {
        TREE => 0.06,
        BUILDING => 0.03,
        WATER => 0.02,
        ROAD => 0.02,
        _ => 0.03,
    }
}

fn paint_pixel(image: &mut Array3<f32>, y: usize, x: usize, base: [f32; 3], jitter: f32, rng: &mut ChaCha8Rng) {
    let j: f32 = rng.random_range(-jitter..=jitter);
    for c in 0..3 {
        image[[y, x, c]] = (base[c] + j).clamp(0.0, 1.0);
    }
}

/// Deterministic scene synthesis. Same (config.seed, index) gives a
/// byte-identical patch.
pub fn generate_scene(config: &SceneConfig, index: u64) -> Result<ScenePatch> {
    config.validate()?;
    let s = config.image_size;
    let mut rng = scene_rng(config.seed, index);
    let mut image = Array3::<f32>::zeros((s, s, 3));
    let mut semantic = Array2::<u8>::zeros((s, s));
    let mut height = Array2::<f32>::zeros((s, s));
    let mut placed: Vec<PlacedObject> = Vec::new();

    // ground everywhere
    let gbase = class_base_color(GROUND, &mut rng);
    for y in 0..s {
        for x in 0..s {
            paint_pixel(&mut image, y, x, gbase, class_jitter(GROUND), &mut rng);
        }
    }

    // roads: straight full-span bands
    let n_roads = rng.random_range(config.road_count_range[0]..=config.road_count_range[1]);
    for _ in 0..n_roads {
        let vertical = rng.random_bool(0.5);
        let width = rng.random_range(4..=8usize).min(s / 4);
        let pos = rng.random_range(0..s.saturating_sub(width).max(1));
        let rbase = class_base_color(ROAD, &mut rng);
        for along in 0..s {
            for across in pos..pos + width {
                let (y, x) = if vertical { (along, across) } else { (across, along) };
                paint_pixel(&mut image, y, x, rbase, class_jitter(ROAD), &mut rng);
                semantic[[y, x]] = ROAD;
            }
        }
    }

    // water ponds (ellipses), then buildings (rectangles), then trees (ellipses)
    let n_water = rng.random_range(config.water_count_range[0]..=config.water_count_range[1]);
    for i in 0..n_water {
        let pixels = place_ellipse(s, 6, 14, &semantic, &mut rng).ok_or_else(|| {
            Error::Placement(format!(
                "could not place water {i} after {PLACEMENT_ATTEMPTS} attempts on a {s}x{s} scene"
            ))
        })?;
        let base = class_base_color(WATER, &mut rng);
        for &(y, x) in &pixels {
            paint_pixel(&mut image, y, x, base, class_jitter(WATER), &mut rng);
            semantic[[y, x]] = WATER;
        }
    }

    let n_buildings =
        rng.random_range(config.building_count_range[0]..=config.building_count_range[1]);
    for i in 0..n_buildings {
        let max_side = (s / 4).clamp(8, 24);
        let (w, h, y0, x0) = match place_rect(s, 8, max_side, &semantic, &mut rng) {
            Some(r) => r,
            None => {
                return Err(Error::Placement(format!(
                    "could not place building {i} after {PLACEMENT_ATTEMPTS} attempts on a {s}x{s} scene"
                )))
            }
        };
        let area = (w * h) as f64;
        let h_m = config.height_rule.building_height(area);
        let base = class_base_color(BUILDING, &mut rng);
        let mut mask = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                paint_pixel(&mut image, y, x, base, class_jitter(BUILDING), &mut rng);
                semantic[[y, x]] = BUILDING;
                height[[y, x]] = h_m as f32;
                mask.push((y, x));
            }
        }
        placed.push(PlacedObject { mask, height: h_m });
    }

    let n_trees = rng.random_range(config.tree_count_range[0]..=config.tree_count_range[1]);
    for i in 0..n_trees {
        let pixels = place_ellipse(s, 4, 9, &semantic, &mut rng).ok_or_else(|| {
            Error::Placement(format!(
                "could not place tree {i} after {PLACEMENT_ATTEMPTS} attempts on a {s}x{s} scene"
            ))
        })?;
        let h_m = rng.random_range(config.height_rule.tree_range[0]..=config.height_rule.tree_range[1]);
        let base = class_base_color(TREE, &mut rng);
        for &(y, x) in &pixels {
            paint_pixel(&mut image, y, x, base, class_jitter(TREE), &mut rng);
            semantic[[y, x]] = TREE;
            height[[y, x]] = h_m as f32;
        }
        placed.push(PlacedObject {
            mask: pixels,
            height: h_m,
        });
    }

    // shadows: darkened smears on ground, label and height untouched
    if config.shadow_on {
        let mut shadow = Array2::<bool>::from_elem((s, s), false);
        for obj in &placed {
            mark_shadow(
                &mut shadow,
                &obj.mask,
                obj.height,
                config.shadow_direction,
                1.0,
            );
        }
        for y in 0..s {
            for x in 0..s {
                if shadow[[y, x]] && semantic[[y, x]] == GROUND {
                    for c in 0..3 {
                        image[[y, x, c]] *= SHADOW_DARKEN;
                    }
                }
            }
        }
    }

    // sensor noise
    if config.noise_std > 0.0 {
        let std = config.noise_std as f32;
        for v in image.iter_mut() {
            let n: f32 = gaussian(&mut rng) * std;
            *v = (*v + n).clamp(0.0, 1.0);
        }
    }

    Ok(ScenePatch {
        id: format!("scene_{index:06}"),
        image,
        semantic,
        height,
    })
}

/// Box-Muller; two uniforms per draw keeps the stream layout simple.
fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

fn region_is_ground(semantic: &Array2<u8>, pixels: &[(usize, usize)]) -> bool {
    pixels.iter().all(|&(y, x)| semantic[[y, x]] == GROUND)
}

fn place_rect(
    s: usize,
    min_side: usize,
    max_side: usize,
    semantic: &Array2<u8>,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize, usize, usize)> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let w = rng.random_range(min_side..=max_side);
        let h = rng.random_range(min_side..=max_side);
        if w >= s || h >= s {
            continue;
        }
        let y0 = rng.random_range(0..s - h);
        let x0 = rng.random_range(0..s - w);
        let mut ok = true;
        'scan: for y in y0..y0 + h {
            for x in x0..x0 + w {
                if semantic[[y, x]] != GROUND {
                    ok = false;
                    break 'scan;
                }
            }
        }
        if ok {
            return Some((w, h, y0, x0));
        }
    }
    None
}

fn ellipse_pixels(cy: f64, cx: f64, ry: f64, rx: f64, s: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let y_lo = (cy - ry).floor().max(0.0) as usize;
    let y_hi = ((cy + ry).ceil() as usize).min(s.saturating_sub(1));
    let x_lo = (cx - rx).floor().max(0.0) as usize;
    let x_hi = ((cx + rx).ceil() as usize).min(s.saturating_sub(1));
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                out.push((y, x));
            }
        }
    }
    out
}

fn place_ellipse(
    s: usize,
    min_r: usize,
    max_r: usize,
    semantic: &Array2<u8>,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(usize, usize)>> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let ry = rng.random_range(min_r..=max_r) as f64;
        let rx = rng.random_range(min_r..=max_r) as f64;
        let margin_y = ry.ceil() as usize + 1;
        let margin_x = rx.ceil() as usize + 1;
        if 2 * margin_y >= s || 2 * margin_x >= s {
            continue;
        }
        let cy = rng.random_range(margin_y..s - margin_y) as f64;
        let cx = rng.random_range(margin_x..s - margin_x) as f64;
        let pixels = ellipse_pixels(cy, cx, ry, rx, s);
        if !pixels.is_empty() && region_is_ground(semantic, &pixels) {
            return Some(pixels);
        }
    }
    None
}

fn mark_shadow(
    shadow: &mut Array2<bool>,
    mask: &[(usize, usize)],
    height_m: f64,
    direction: [f64; 2],
    scale: f64,
) {
    let s = shadow.nrows();
    let norm = (direction[0] * direction[0] + direction[1] * direction[1]).sqrt();
    if norm == 0.0 {
        return;
    }
    let (dx, dy) = (direction[0] / norm, direction[1] / norm);
    let len = ((height_m * SHADOW_PX_PER_METER * scale).round() as i64).max(1);
    for k in 1..=len {
        let oy = (k as f64 * dy).round() as i64;
        let ox = (k as f64 * dx).round() as i64;
        for &(y, x) in mask {
            let (ny, nx) = (y as i64 + oy, x as i64 + ox);
            if ny >= 0 && nx >= 0 && (ny as usize) < s && (nx as usize) < s {
                shadow[[ny as usize, nx as usize]] = true;
            }
        }
    }
}

/// Darken the image along an object's shadow smear; labels and heights are
/// untouched. `scale` stretches the shadow footprint (used by shadow sweeps).
pub fn render_shadow(
    patch: &mut ScenePatch,
    object_mask: &[(usize, usize)],
    height_m: f64,
    direction: [f64; 2],
    scale: f64,
) {
    let s = patch.semantic.nrows();
    let mut shadow = Array2::<bool>::from_elem((s, s), false);
    mark_shadow(&mut shadow, object_mask, height_m, direction, scale);
    for y in 0..s {
        for x in 0..s {
            if shadow[[y, x]] && patch.semantic[[y, x]] == GROUND {
                for c in 0..3 {
                    patch.image[[y, x, c]] *= SHADOW_DARKEN;
                }
            }
        }
    }
}

fn template_rng(config: &SceneConfig, class: u8, scale_idx: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        mix64(config.seed) ^ mix64(0x7e41 ^ ((class as u64) << 8) ^ scale_idx as u64),
    )
}

fn scale_index(scale_factor: f64) -> Option<usize> {
    TEMPLATE_SCALES
        .iter()
        .position(|&s| (s - scale_factor).abs() < 1e-9)
}

fn tree_base_area() -> usize {
    disk_area(TREE_BASE_RADIUS)
}

fn disk_area(r: f64) -> usize {
    let rr = r.ceil() as i64 + 1;
    let mut count = 0;
    for y in -rr..=rr {
        for x in -rr..=rr {
            if (y * y + x * x) as f64 <= r * r {
                count += 1;
            }
        }
    }
    count
}

/// Best near-square rectangle with area as close as possible to target.
fn best_rect(target: usize) -> (usize, usize) {
    let mut best = (1usize, target.max(1));
    let mut best_key = (usize::MAX, usize::MAX);
    for w in 1..=target.max(1) {
        for h in [target / w, target / w + 1] {
            if h == 0 {
                continue;
            }
            let area = w * h;
            let key = (area.abs_diff(target), w.abs_diff(h));
            if key < best_key {
                best_key = key;
                best = (w.min(h), w.max(h));
            }
        }
    }
    best
}

/// Build the class template at one of the five scales, textured with the
/// same model as `generate_scene`.
pub fn make_template(class: u8, scale_factor: f64, config: &SceneConfig) -> Result<ObjectTemplate> {
    if ![ROAD, TREE, BUILDING].contains(&class) {
        return Err(Error::Domain(format!(
            "templates exist for road/tree/building, got class {class}"
        )));
    }
    let idx = scale_index(scale_factor).ok_or_else(|| {
        Error::Domain(format!(
            "scale_factor {scale_factor} not in {TEMPLATE_SCALES:?}"
        ))
    })?;
    let mut rng = template_rng(config, class, idx);
    let (mask, th, tw) = match class {
        TREE => {
            let target = (scale_factor * tree_base_area() as f64).round() as usize;
            let r = TREE_BASE_RADIUS * scale_factor.sqrt();
            let side = 2 * (r.ceil() as usize) + 3;
            let c = side as f64 / 2.0 - 0.5;
            // take exactly `target` pixels closest to the center
            let mut cand: Vec<(i64, usize, usize)> = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    let dy = y as f64 - c;
                    let dx = x as f64 - c;
                    let d2 = ((dy * dy + dx * dx) * 4096.0) as i64;
                    cand.push((d2, y, x));
                }
            }
            cand.sort();
            let mut mask = Array2::from_elem((side, side), false);
            for &(_, y, x) in cand.iter().take(target) {
                mask[[y, x]] = true;
            }
            (mask, side, side)
        }
        _ => {
            let base = BUILDING_BASE_SIDE * BUILDING_BASE_SIDE;
            let target = (scale_factor * base as f64).round() as usize;
            let (a, b) = best_rect(target);
            let mask = Array2::from_elem((a, b), true);
            (mask, a, b)
        }
    };
    let area = mask.iter().filter(|&&m| m).count();
    let base_color = class_base_color(class, &mut rng);
    let mut pixels = Array3::<f32>::zeros((th, tw, 3));
    for y in 0..th {
        for x in 0..tw {
            if mask[[y, x]] {
                paint_pixel(&mut pixels, y, x, base_color, class_jitter(class), &mut rng);
            }
        }
    }
    Ok(ObjectTemplate {
        class,
        scale_factor,
        pixels,
        mask,
        height_value: config.height_rule.template_height(class, area as f64) as f32,
    })
}

/// Paste a template; inside the mask the image, label and height are
/// replaced, outside nothing changes. Returns a new patch.
pub fn paste_object(
    scene: &ScenePatch,
    template: &ObjectTemplate,
    location: (usize, usize),
) -> Result<ScenePatch> {
    let (px, py) = location;
    let (th, tw) = template.shape();
    let (sh, sw) = scene.size();
    if py + th > sh || px + tw > sw {
        return Err(Error::Placement(format!(
            "template {th}x{tw} at ({px}, {py}) exceeds scene {sh}x{sw}"
        )));
    }
    let mut out = scene.clone();
    for y in 0..th {
        for x in 0..tw {
            if template.mask[[y, x]] {
                let (sy, sx) = (py + y, px + x);
                for c in 0..3 {
                    out.image[[sy, sx, c]] = template.pixels[[y, x, c]];
                }
                out.semantic[[sy, sx]] = template.class;
                out.height[[sy, sx]] = template.height_value;
            }
        }
    }
    Ok(out)
}

/// Replace image pixels only (labels and heights untouched); used to insert
/// out-of-distribution content whose ground truth is intentionally stale.
pub fn paste_image_only(
    scene: &ScenePatch,
    pixels: &Array3<f32>,
    location: (usize, usize),
) -> Result<ScenePatch> {
    let (px, py) = location;
    let (th, tw) = (pixels.shape()[0], pixels.shape()[1]);
    let (sh, sw) = scene.size();
    if py + th > sh || px + tw > sw {
        return Err(Error::Placement(format!(
            "patch {th}x{tw} at ({px}, {py}) exceeds scene {sh}x{sw}"
        )));
    }
    let mut out = scene.clone();
    for y in 0..th {
        for x in 0..tw {
            for c in 0..3 {
                out.image[[py + y, px + x, c]] = pixels[[y, x, c]];
            }
        }
    }
    Ok(out)
}

/// High-contrast checkerboard patch, unlike anything in the training set.
pub fn checkerboard(side: usize, cell: usize) -> Array3<f32> {
    let mut p = Array3::<f32>::zeros((side, side, 3));
    for y in 0..side {
        for x in 0..side {
            let on = ((y / cell) + (x / cell)) % 2 == 0;
            let v = if on { 0.95 } else { 0.05 };
            for c in 0..3 {
                p[[y, x, c]] = v;
            }
        }
    }
    p
}

// ---------------------------------------------------------------------------
// corpus on disk
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CorpusCounts {
    fn default() -> Self {
        CorpusCounts {
            train: 2000,
            val: 400,
            test: 200,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: SceneConfig,
    pub counts: CorpusCounts,
    pub splits: BTreeMap<String, Vec<String>>,
}

fn split_ranges(counts: &CorpusCounts) -> [(&'static str, u64, u64); 3] {
    let t = counts.train as u64;
    let v = counts.val as u64;
    let e = counts.test as u64;
    [
        ("train", 0, t),
        ("val", t, t + v),
        ("test", t + v, t + v + e),
    ]
}

/// Generate and persist a corpus under `root` with the layout
/// `<root>/<split>/<id>.{image.png,semantic.png,height.rawf}` plus
/// `manifest.json`.
pub fn generate_corpus(root: impl AsRef<Path>, config: &SceneConfig, counts: &CorpusCounts) -> Result<Manifest> {
    config.validate()?;
    let root = root.as_ref();
    let mut splits = BTreeMap::new();
    for (split, lo, hi) in split_ranges(counts) {
        let dir = root.join(split);
        fs::create_dir_all(&dir)?;
        let indices: Vec<u64> = (lo..hi).collect();
        let results: Vec<Result<String>> = indices
            .par_iter()
            .map(|&i| {
                let patch = generate_scene(config, i)?;
                save_patch(&dir, &patch)?;
                Ok(patch.id)
            })
            .collect();
        let mut ids = Vec::with_capacity(results.len());
        for r in results {
            ids.push(r?);
        }
        splits.insert(split.to_string(), ids);
    }
    let manifest = Manifest {
        config: config.clone(),
        counts: *counts,
        splits,
    };
    let value = serde_json::to_value(&manifest)?;
    let mut text = io::canonical_json(&value);
    text.push('\n');
    fs::write(root.join("manifest.json"), text)?;
    Ok(manifest)
}

pub fn save_patch(dir: impl AsRef<Path>, patch: &ScenePatch) -> Result<()> {
    let dir = dir.as_ref();
    let (h, w) = patch.size();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (patch.image[[y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (patch.image[[y, x, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (patch.image[[y, x, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    rgb.save(dir.join(format!("{}.image.png", patch.id)))?;

    let mut gray = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            gray.put_pixel(x as u32, y as u32, image::Luma([patch.semantic[[y, x]]]));
        }
    }
    gray.save(dir.join(format!("{}.semantic.png", patch.id)))?;

    io::write_array(
        dir.join(format!("{}.height.rawf", patch.id)),
        &patch.height.clone().into_dyn(),
    )?;
    Ok(())
}

pub fn load_patch(dir: impl AsRef<Path>, id: &str) -> Result<ScenePatch> {
    let dir = dir.as_ref();
    let rgb = image::open(dir.join(format!("{id}.image.png")))?.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let p = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                img[[y, x, c]] = p[c] as f32 / 255.0;
            }
        }
    }
    let gray = image::open(dir.join(format!("{id}.semantic.png")))?.into_luma8();
    let mut sem = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            sem[[y, x]] = gray.get_pixel(x as u32, y as u32)[0];
        }
    }
    let height = io::read_array(dir.join(format!("{id}.height.rawf")))?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::Shape(format!("height map for {id}: {e}")))?;
    Ok(ScenePatch {
        id: id.to_string(),
        image: img,
        semantic: sem,
        height,
    })
}

/// Read access to a corpus directory.
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Corpus {
    pub fn open(root: impl AsRef<Path>) -> Result<Corpus> {
        let root = root.as_ref().to_path_buf();
        let text = fs::read_to_string(root.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        Ok(Corpus { root, manifest })
    }

    pub fn ids(&self, split: &str) -> Result<&[String]> {
        self.manifest
            .splits
            .get(split)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Domain(format!("unknown split '{split}'")))
    }

    pub fn load(&self, split: &str, id: &str) -> Result<ScenePatch> {
        load_patch(self.root.join(split), id)
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<ScenePatch>> {
        let ids = self.ids(split)?.to_vec();
        ids.iter().map(|id| self.load(split, id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_config() -> SceneConfig {
        SceneConfig {
            image_size: 64,
            building_count_range: [1, 3],
            tree_count_range: [1, 3],
            water_count_range: [0, 1],
            seed: 42,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn empty_scene_has_zero_height_and_flat_labels() {
        let config = SceneConfig {
            building_count_range: [0, 0],
            tree_count_range: [0, 0],
            water_count_range: [0, 0],
            seed: 1,
            ..test_config()
        };
        let patch = generate_scene(&config, 0).unwrap();
        assert!(patch.height.iter().all(|&h| h == 0.0));
        assert!(patch
            .semantic
            .iter()
            .all(|&c| c == GROUND || c == ROAD));
    }

    #[test]
    fn generation_is_deterministic() {
        let config = test_config();
        let a = generate_scene(&config, 7).unwrap();
        let b = generate_scene(&config, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&config, 8).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn height_rule_on_forty_square_building() {
        let rule = HeightRule::default();
        assert_eq!(rule.building_height(1600.0), 42.0);
        // paste a hand-built 40x40 building and check the rule end-to-end
        let config = SceneConfig {
            building_count_range: [0, 0],
            tree_count_range: [0, 0],
            water_count_range: [0, 0],
            road_count_range: [0, 0],
            image_size: 64,
            seed: 3,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&config, 0).unwrap();
        let template = ObjectTemplate {
            class: BUILDING,
            scale_factor: 1.0,
            pixels: Array3::from_elem((40, 40, 3), 0.6),
            mask: Array2::from_elem((40, 40), true),
            height_value: rule.building_height(1600.0) as f32,
        };
        let pasted = paste_object(&scene, &template, (10, 10)).unwrap();
        let max = pasted.height.iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(max, 42.0);
    }

    #[test]
    fn label_height_consistency() {
        let config = test_config();
        for idx in 0..6 {
            let p = generate_scene(&config, idx).unwrap();
            for ((y, x), &h) in p.height.indexed_iter() {
                let class = p.semantic[[y, x]];
                if h > 0.0 {
                    assert!(class == TREE || class == BUILDING, "h>0 on class {class}");
                } else {
                    assert!(
                        class == GROUND || class == ROAD || class == WATER,
                        "h=0 on class {class}"
                    );
                }
            }
        }
    }

    #[test]
    fn template_scale_law_within_one_pixel() {
        let config = SceneConfig::default();
        for &class in &[BUILDING, TREE] {
            let base = make_template(class, 1.0, &config).unwrap().mask_area() as f64;
            for &s in &TEMPLATE_SCALES {
                let t = make_template(class, s, &config).unwrap();
                let expected = (s * base).round();
                assert!(
                    (t.mask_area() as f64 - expected).abs() <= 1.0,
                    "class {class} scale {s}: area {} vs {expected}",
                    t.mask_area()
                );
            }
        }
    }

    #[test]
    fn template_rejects_unknown_scale() {
        let config = SceneConfig::default();
        assert!(matches!(
            make_template(BUILDING, 2.0, &config),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            make_template(WATER, 1.0, &config),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn paste_changes_exactly_mask_pixels() {
        let config = test_config();
        let scene = generate_scene(&config, 0).unwrap();
        let template = make_template(BUILDING, 1.0, &config).unwrap();
        let out = paste_object(&scene, &template, (5, 9)).unwrap();
        let changed = scene
            .semantic
            .iter()
            .zip(out.semantic.iter())
            .filter(|(a, b)| a != b)
            .count();
        let already_building = {
            let (th, tw) = template.shape();
            let mut n = 0;
            for y in 0..th {
                for x in 0..tw {
                    if template.mask[[y, x]] && scene.semantic[[9 + y, 5 + x]] == BUILDING {
                        n += 1;
                    }
                }
            }
            n
        };
        assert_eq!(changed + already_building, template.mask_area());
        // direct write of the height value
        let t12 = ObjectTemplate {
            height_value: 12.0,
            ..template.clone()
        };
        let out = paste_object(&scene, &t12, (5, 9)).unwrap();
        assert_eq!(out.height[[9, 5]], 12.0);
    }

    #[test]
    fn paste_is_idempotent() {
        let config = test_config();
        let scene = generate_scene(&config, 1).unwrap();
        let template = make_template(TREE, 1.5, &config).unwrap();
        let once = paste_object(&scene, &template, (20, 20)).unwrap();
        let twice = paste_object(&once, &template, (20, 20)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn paste_out_of_bounds_is_rejected() {
        let config = test_config();
        let scene = generate_scene(&config, 2).unwrap();
        let template = make_template(BUILDING, 3.0, &config).unwrap();
        assert!(matches!(
            paste_object(&scene, &template, (60, 60)),
            Err(Error::Placement(_))
        ));
    }

    #[test]
    fn corpus_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let config = test_config();
        let counts = CorpusCounts {
            train: 3,
            val: 2,
            test: 1,
        };
        let m1 = generate_corpus(dir.path().join("a"), &config, &counts).unwrap();
        let _m2 = generate_corpus(dir.path().join("b"), &config, &counts).unwrap();
        assert_eq!(m1.splits["train"].len(), 3);
        // byte-identical regeneration
        for split in SPLITS {
            for id in &m1.splits[split] {
                for ext in ["image.png", "semantic.png", "height.rawf"] {
                    let fa = fs::read(dir.path().join("a").join(split).join(format!("{id}.{ext}"))).unwrap();
                    let fb = fs::read(dir.path().join("b").join(split).join(format!("{id}.{ext}"))).unwrap();
                    assert_eq!(fa, fb, "{split}/{id}.{ext}");
                }
            }
        }
        assert_eq!(
            fs::read(dir.path().join("a/manifest.json")).unwrap(),
            fs::read(dir.path().join("b/manifest.json")).unwrap()
        );
        // loader round-trip picks up the quantized image
        let corpus = Corpus::open(dir.path().join("a")).unwrap();
        let id = &corpus.ids("val").unwrap()[0].clone();
        let patch = corpus.load("val", id).unwrap();
        let original = generate_scene(&config, 3).unwrap();
        assert_eq!(patch.semantic, original.semantic);
        assert_eq!(patch.height, original.height);
    }
}
