//! Synthetic scene generator. Scenes are sets of boxed, classed objects whose
//! relations follow deterministic geometric rules, so every label can be
//! re-derived from the boxes alone and audited exactly.
//!
//! Generation draws a per-scene predicate script first and then realizes it
//! as independent object pairs: each pair is a fresh anchor plus a partner
//! placed so the rule oracle reports exactly the intended predicate
//! (optionally two compatible ones) for that pair and nothing against the
//! rest of the scene; odd object counts add one lone, relation-free object.
//! Geometry failures retry the same script, so accepted label frequencies
//! follow the draw distribution exactly. The stored relation tensor is the
//! oracle's output over all ordered pairs, so labels and geometry cannot
//! drift apart. Long-tail skew comes from the intended-predicate draw, not
//! from dropping labels.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BoundingBox, Entity, RelTensor, SceneGraph, Vocab};

/// Predicate order fixes both the vocabulary ids and the long-tail ranking:
/// lower index means more frequent under a positive tail exponent.
pub const PREDICATES: [&str; 10] = [
    "left-of",
    "right-of",
    "above",
    "below",
    "overlapping",
    "contains",
    "inside",
    "near",
    "larger-than",
    "smaller-than",
];

const CLASS_NAMES: [&str; 12] =
    ["cube", "sphere", "cone", "cylinder", "ring", "slab", "wedge", "disk", "bar", "knob", "tile", "rod"];

/// Maximum edge gap for the directional predicates.
pub const GAP_MAX: f64 = 0.09;
/// Directional predicates require this fraction of the smaller extent to
/// overlap on the perpendicular axis.
pub const ALIGN_FRAC: f64 = 0.5;
/// Boundary distance threshold for `near` (boxes must be disjoint).
pub const NEAR_GAP: f64 = 0.035;
/// Size comparisons only apply to objects whose centers are this close.
pub const SIZE_PROX: f64 = 0.20;
/// Area ratio for larger-than / smaller-than.
pub const SIZE_RATIO: f64 = 2.0;
/// Strict containment margin per side.
pub const CONTAIN_MARGIN: f64 = 0.008;

/// Robustness margin used by the placement samplers so satisfied rules hold
/// with slack rather than at their boundaries.
const M_EPS: f64 = 0.008;

const LEFT_OF: usize = 0;
const RIGHT_OF: usize = 1;
const ABOVE: usize = 2;
const BELOW: usize = 3;
const OVERLAPPING: usize = 4;
const CONTAINS: usize = 5;
const INSIDE: usize = 6;
const NEAR: usize = 7;
const LARGER_THAN: usize = 8;
const SMALLER_THAN: usize = 9;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub n_test_scenes: usize,
    /// Inclusive [min, max] objects per scene.
    pub objects_per_scene: [usize; 2],
    pub n_classes: usize,
    /// Power-law skew of the intended-predicate draw: weight of predicate r
    /// is (r+1)^(-tail_exponent). 0 means uniform.
    pub tail_exponent: f64,
    /// Probability that an intended pair carries a second, geometrically
    /// compatible predicate.
    pub multi_rel_prob: f64,
    /// Standard deviation of the noise added to the one-hot class block by
    /// `featurize`.
    pub feature_noise_sigma: f64,
    /// Pure-noise tokens appended to every featurized scene.
    pub n_distractors: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_scenes: 200,
            n_test_scenes: 50,
            objects_per_scene: [3, 8],
            n_classes: 6,
            tail_exponent: 1.0,
            multi_rel_prob: 0.15,
            feature_noise_sigma: 0.1,
            n_distractors: 2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.objects_per_scene;
        if self.n_scenes == 0 {
            return Err(Error::Config("n_scenes must be positive".into()));
        }
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("objects_per_scene [{lo}, {hi}] must satisfy 1 <= min <= max")));
        }
        if hi > 12 {
            return Err(Error::Config(format!("objects_per_scene max {hi} exceeds 12; denser scenes cannot keep unrelated pairs separated")));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        if self.tail_exponent < 0.0 || !self.tail_exponent.is_finite() {
            return Err(Error::Config(format!("tail_exponent {} must be finite and >= 0", self.tail_exponent)));
        }
        if !(0.0..=1.0).contains(&self.multi_rel_prob) {
            return Err(Error::Config(format!("multi_rel_prob {} must be in [0, 1]", self.multi_rel_prob)));
        }
        if self.feature_noise_sigma < 0.0 || !self.feature_noise_sigma.is_finite() {
            return Err(Error::Config(format!("feature_noise_sigma {} must be finite and >= 0", self.feature_noise_sigma)));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        let classes: Vec<String> = (0..self.n_classes)
            .map(|i| if i < CLASS_NAMES.len() { CLASS_NAMES[i].to_string() } else { format!("object-{i}") })
            .collect();
        let predicates: Vec<String> = PREDICATES.iter().map(|p| p.to_string()).collect();
        Vocab::new(classes, predicates).expect("built-in vocab is valid")
    }
}

/// Train/test scene lists plus the triplet combos held out of train (empty
/// until `holdout_zero_shot` runs).
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub vocab: Vocab,
    pub train: Vec<SceneGraph>,
    pub test: Vec<SceneGraph>,
    /// (subject class, predicate, object class) combos absent from train.
    pub zero_shot_combos: Vec<[usize; 3]>,
}

// Rule oracle

fn corners(b: &BoundingBox) -> (f64, f64, f64, f64) {
    b.corners()
}

fn overlap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    a1.min(b1) - a0.max(b0)
}

fn contains_rule(a: &BoundingBox, b: &BoundingBox) -> bool {
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    bx0 >= ax0 + CONTAIN_MARGIN && bx1 <= ax1 - CONTAIN_MARGIN && by0 >= ay0 + CONTAIN_MARGIN && by1 <= ay1 - CONTAIN_MARGIN
}

/// Boundary distance between two boxes: 0 when they intersect, otherwise the
/// Euclidean gap between their closest edges or corners.
fn boundary_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let dx = (-overlap_1d(ax0, ax1, bx0, bx1)).max(0.0);
    let dy = (-overlap_1d(ay0, ay1, by0, by1)).max(0.0);
    (dx * dx + dy * dy).sqrt()
}

fn center_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt()
}

/// Sorted predicate ids the geometric rules assign to the ordered pair
/// (a, b). The y axis grows downward, so `above` means a smaller cy.
pub fn predicate_rules(a: &BoundingBox, b: &BoundingBox) -> Vec<usize> {
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let ox = overlap_1d(ax0, ax1, bx0, bx1);
    let oy = overlap_1d(ay0, ay1, by0, by1);
    let mut out = Vec::new();

    let gap_right = bx0 - ax1;
    if gap_right > 0.0 && gap_right <= GAP_MAX && oy >= ALIGN_FRAC * a.h.min(b.h) {
        out.push(LEFT_OF);
    }
    let gap_left = ax0 - bx1;
    if gap_left > 0.0 && gap_left <= GAP_MAX && oy >= ALIGN_FRAC * a.h.min(b.h) {
        out.push(RIGHT_OF);
    }
    let gap_down = by0 - ay1;
    if gap_down > 0.0 && gap_down <= GAP_MAX && ox >= ALIGN_FRAC * a.w.min(b.w) {
        out.push(ABOVE);
    }
    let gap_up = ay0 - by1;
    if gap_up > 0.0 && gap_up <= GAP_MAX && ox >= ALIGN_FRAC * a.w.min(b.w) {
        out.push(BELOW);
    }

    let a_contains_b = contains_rule(a, b);
    let b_contains_a = contains_rule(b, a);
    if ox > 0.0 && oy > 0.0 && !a_contains_b && !b_contains_a {
        out.push(OVERLAPPING);
    }
    if a_contains_b {
        out.push(CONTAINS);
    }
    if b_contains_a {
        out.push(INSIDE);
    }

    let dist = boundary_distance(a, b);
    if dist > 0.0 && dist <= NEAR_GAP {
        out.push(NEAR);
    }

    if center_distance(a, b) <= SIZE_PROX {
        if a.area() >= SIZE_RATIO * b.area() {
            out.push(LARGER_THAN);
        }
        if b.area() >= SIZE_RATIO * a.area() {
            out.push(SMALLER_THAN);
        }
    }
    out
}

/// The predicate labeling the swapped pair whenever `p` labels (a, b).
pub fn converse(p: usize) -> usize {
    match p {
        LEFT_OF => RIGHT_OF,
        RIGHT_OF => LEFT_OF,
        ABOVE => BELOW,
        BELOW => ABOVE,
        CONTAINS => INSIDE,
        INSIDE => CONTAINS,
        LARGER_THAN => SMALLER_THAN,
        SMALLER_THAN => LARGER_THAN,
        other => other, // overlapping and near are symmetric
    }
}

/// Geometrically co-satisfiable secondary predicates per primary.
fn compatible_secondaries(p: usize) -> &'static [usize] {
    match p {
        LEFT_OF | RIGHT_OF | ABOVE | BELOW => &[NEAR],
        OVERLAPPING => &[LARGER_THAN, SMALLER_THAN],
        CONTAINS => &[LARGER_THAN],
        INSIDE => &[SMALLER_THAN],
        NEAR => &[LARGER_THAN, SMALLER_THAN],
        LARGER_THAN | SMALLER_THAN => &[NEAR],
        _ => &[],
    }
}

// Placement samplers

// The size floor keeps snug containment (additive margins, area ratio < 2)
// feasible for every anchor, and the narrow free range makes incidental
// size relations rare unless a box was deliberately scaled; the ceiling
// keeps disjoint 2:1-area pairs placeable within the size gate.
const SIZE_MIN: f64 = 0.08;
const SIZE_MAX: f64 = 0.13;
const FRAME_PAD: f64 = 0.01;

fn in_frame(b: &BoundingBox) -> bool {
    let (x0, y0, x1, y1) = b.corners();
    x0 >= FRAME_PAD && y0 >= FRAME_PAD && x1 <= 1.0 - FRAME_PAD && y1 <= 1.0 - FRAME_PAD && b.w >= 0.035 && b.h >= 0.035
}

fn free_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let w = rng.gen_range(SIZE_MIN..SIZE_MAX);
    let h = rng.gen_range(SIZE_MIN..SIZE_MAX);
    let cx = rng.gen_range(FRAME_PAD + w / 2.0..1.0 - FRAME_PAD - w / 2.0);
    let cy = rng.gen_range(FRAME_PAD + h / 2.0..1.0 - FRAME_PAD - h / 2.0);
    BoundingBox { cx, cy, w, h }
}

/// Dimensions with the given area factor relative to the anchor, random
/// aspect, rejected when out of bounds.
fn dims_with_area_factor(anchor: &BoundingBox, factor: f64, rng: &mut ChaCha8Rng) -> Option<(f64, f64)> {
    let area = factor * anchor.area();
    let aspect = rng.gen_range(0.7..1.4);
    let w = (area * aspect).sqrt();
    let h = area / w;
    if !(0.035..=0.46).contains(&w) || !(0.035..=0.46).contains(&h) {
        return None;
    }
    Some((w, h))
}

/// Area factor that avoids the size predicates by a safety margin.
fn neutral_factor(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0.62..1.6)
}

/// Place the new box axis-separated from the anchor: `horizontal` picks the
/// x axis, `before` puts the new box on the low-coordinate side.
fn place_directional(
    anchor: &BoundingBox,
    w: f64,
    h: f64,
    horizontal: bool,
    before: bool,
    gap: f64,
    rng: &mut ChaCha8Rng,
) -> Option<BoundingBox> {
    let (anchor_main_c, anchor_main_e, anchor_cross_c, anchor_cross_e, main_e, cross_e) = if horizontal {
        (anchor.cx, anchor.w, anchor.cy, anchor.h, w, h)
    } else {
        (anchor.cy, anchor.h, anchor.cx, anchor.w, h, w)
    };
    let main_c = if before {
        anchor_main_c - anchor_main_e / 2.0 - gap - main_e / 2.0
    } else {
        anchor_main_c + anchor_main_e / 2.0 + gap + main_e / 2.0
    };
    let slack = (cross_e + anchor_cross_e) / 2.0 - ALIGN_FRAC * cross_e.min(anchor_cross_e) - M_EPS;
    if slack <= 0.0 {
        return None;
    }
    let cross_c = anchor_cross_c + rng.gen_range(-slack..slack);
    let b = if horizontal {
        BoundingBox { cx: main_c, cy: cross_c, w, h }
    } else {
        BoundingBox { cx: cross_c, cy: main_c, w, h }
    };
    in_frame(&b).then_some(b)
}

/// Place the new box diagonally off one of the anchor's corners so both axes
/// are disjoint and the boundary distance is `dist`.
fn place_diagonal(anchor: &BoundingBox, w: f64, h: f64, dist: f64, rng: &mut ChaCha8Rng) -> Option<BoundingBox> {
    let theta = rng.gen_range(0.35..std::f64::consts::FRAC_PI_2 - 0.35);
    let dx = dist * theta.cos();
    let dy = dist * theta.sin();
    let sx: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let sy: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let cx = anchor.cx + sx * ((anchor.w + w) / 2.0 + dx);
    let cy = anchor.cy + sy * ((anchor.h + h) / 2.0 + dy);
    let b = BoundingBox { cx, cy, w, h };
    in_frame(&b).then_some(b)
}

/// Place the new box overlapping one of the anchor's corners, penetrating a
/// fraction of each extent so neither box contains the other.
fn place_overlapping(anchor: &BoundingBox, w: f64, h: f64, rng: &mut ChaCha8Rng) -> Option<BoundingBox> {
    let px = rng.gen_range(0.25..0.7) * w.min(anchor.w);
    let py = rng.gen_range(0.25..0.7) * h.min(anchor.h);
    let sx: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let sy: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let cx = anchor.cx + sx * ((anchor.w + w) / 2.0 - px);
    let cy = anchor.cy + sy * ((anchor.h + h) / 2.0 - py);
    let b = BoundingBox { cx, cy, w, h };
    in_frame(&b).then_some(b)
}

/// Place a container or containee of the given dims centered on the anchor,
/// jittered within whatever slack the containment margin leaves.
fn place_concentric(anchor: &BoundingBox, w: f64, h: f64, rng: &mut ChaCha8Rng) -> Option<BoundingBox> {
    let slack_x = (w - anchor.w).abs() / 2.0 - CONTAIN_MARGIN - 0.001;
    let slack_y = (h - anchor.h).abs() / 2.0 - CONTAIN_MARGIN - 0.001;
    if slack_x <= 0.0 || slack_y <= 0.0 {
        return None;
    }
    let cx = anchor.cx + rng.gen_range(-slack_x..slack_x);
    let cy = anchor.cy + rng.gen_range(-slack_y..slack_y);
    let b = BoundingBox { cx, cy, w, h };
    in_frame(&b).then_some(b)
}

/// Place the new box axis-disjoint on one axis with the cross-axis overlap
/// held strictly below the directional alignment threshold, so only the
/// size predicates (and optionally `near`) can fire.
fn place_side_misaligned(anchor: &BoundingBox, w: f64, h: f64, gap: f64, rng: &mut ChaCha8Rng) -> Option<BoundingBox> {
    let horizontal = rng.gen_bool(0.5);
    let before = rng.gen_bool(0.5);
    let (anchor_main_c, anchor_main_e, anchor_cross_c, anchor_cross_e, main_e, cross_e) = if horizontal {
        (anchor.cx, anchor.w, anchor.cy, anchor.h, w, h)
    } else {
        (anchor.cy, anchor.h, anchor.cx, anchor.w, h, w)
    };
    let main_c = if before {
        anchor_main_c - anchor_main_e / 2.0 - gap - main_e / 2.0
    } else {
        anchor_main_c + anchor_main_e / 2.0 + gap + main_e / 2.0
    };
    let min_cross = cross_e.min(anchor_cross_e);
    let ov = rng.gen_range(0.08..ALIGN_FRAC - 0.08) * min_cross;
    let delta = (cross_e + anchor_cross_e) / 2.0 - ov;
    let cross_c = if rng.gen_bool(0.5) { anchor_cross_c + delta } else { anchor_cross_c - delta };
    let b = if horizontal {
        BoundingBox { cx: main_c, cy: cross_c, w, h }
    } else {
        BoundingBox { cx: cross_c, cy: main_c, w, h }
    };
    in_frame(&b).then_some(b)
}

/// Propose a box realizing `primary` (and `secondary`, when given) for the
/// ordered pair (new, anchor). The caller re-checks with the rule oracle.
fn propose(
    primary: usize,
    secondary: Option<usize>,
    anchor: &BoundingBox,
    rng: &mut ChaCha8Rng,
) -> Option<BoundingBox> {
    let with_near = secondary == Some(NEAR);
    let size_factor = match secondary {
        Some(LARGER_THAN) => rng.gen_range(2.3..3.2),
        Some(SMALLER_THAN) => 1.0 / rng.gen_range(2.3..3.2),
        _ => neutral_factor(rng),
    };
    match primary {
        LEFT_OF | RIGHT_OF | ABOVE | BELOW => {
            let (w, h) = dims_with_area_factor(anchor, size_factor, rng)?;
            let gap = if with_near {
                rng.gen_range(M_EPS..NEAR_GAP - M_EPS)
            } else {
                rng.gen_range(NEAR_GAP + M_EPS..GAP_MAX - M_EPS)
            };
            let horizontal = primary == LEFT_OF || primary == RIGHT_OF;
            let before = primary == LEFT_OF || primary == ABOVE;
            place_directional(anchor, w, h, horizontal, before, gap, rng)
        }
        OVERLAPPING => {
            let (w, h) = dims_with_area_factor(anchor, size_factor, rng)?;
            place_overlapping(anchor, w, h, rng)
        }
        CONTAINS => {
            let (w, h) = if secondary == Some(LARGER_THAN) {
                let s = rng.gen_range(2.3_f64..3.0).sqrt();
                (anchor.w * s, anchor.h * s)
            } else {
                // Snug container: additive per-side margins keep the area
                // ratio below the size threshold for any anchor at or above
                // the free-box size floor.
                (anchor.w + 2.0 * rng.gen_range(0.0095..0.0105), anchor.h + 2.0 * rng.gen_range(0.0095..0.0105))
            };
            place_concentric(anchor, w, h, rng)
        }
        INSIDE => {
            let (w, h) = if secondary == Some(SMALLER_THAN) {
                let s = rng.gen_range(2.3_f64..3.0).sqrt();
                (anchor.w / s, anchor.h / s)
            } else {
                (anchor.w - 2.0 * rng.gen_range(0.0095..0.0105), anchor.h - 2.0 * rng.gen_range(0.0095..0.0105))
            };
            place_concentric(anchor, w, h, rng)
        }
        NEAR => {
            let (w, h) = dims_with_area_factor(anchor, size_factor, rng)?;
            let dist = rng.gen_range(M_EPS + 0.004..NEAR_GAP - M_EPS);
            place_diagonal(anchor, w, h, dist, rng)
        }
        LARGER_THAN | SMALLER_THAN => {
            // Callers canonicalize to smaller-than; the modest area factor
            // keeps the pair's centers inside the proximity gate even for
            // the largest anchors.
            let factor = 1.0 / rng.gen_range(2.3..2.9);
            let (w, h) = dims_with_area_factor(anchor, factor, rng)?;
            let gap = if with_near {
                rng.gen_range(M_EPS + 0.004..NEAR_GAP - M_EPS)
            } else {
                rng.gen_range(NEAR_GAP + M_EPS..NEAR_GAP + 0.035)
            };
            if rng.gen_bool(0.5) {
                place_side_misaligned(anchor, w, h, gap, rng)
            } else {
                place_diagonal(anchor, w, h, gap, rng)
            }
        }
        _ => None,
    }
}

// Scene assembly

fn tail_weights(exponent: f64) -> Vec<f64> {
    (0..PREDICATES.len()).map(|r| ((r + 1) as f64).powf(-exponent)).collect()
}

fn draw_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        x -= w;
        if x <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Generate one scene. `forced_first` pins the intended primary predicate of
/// the first placed pair, used to guarantee predicate coverage.
/// True when `b` holds no relation with any box in `others`.
fn relation_free(b: &BoundingBox, others: &[BoundingBox]) -> bool {
    others.iter().all(|o| predicate_rules(b, o).is_empty() && predicate_rules(o, b).is_empty())
}

fn gen_scene(cfg: &GenConfig, seed: u64, forced_first: Option<usize>) -> Result<SceneGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = tail_weights(cfg.tail_exponent);
    let [lo, hi] = cfg.objects_per_scene;
    let p = PREDICATES.len();

    // The object count and the full predicate script are drawn before any
    // geometry. Placement failures below retry geometry for the same script,
    // so acceptance never conditions on the draws and label frequencies stay
    // exactly multinomial.
    let m = rng.gen_range(lo..=hi);
    let n_pairs = m / 2;
    let script: Vec<(usize, Option<usize>)> = (0..n_pairs)
        .map(|k| {
            let drawn = match (k, forced_first) {
                (0, Some(f)) => f,
                _ => draw_weighted(&weights, &mut rng),
            };
            let drawn_secondary = if rng.gen_bool(cfg.multi_rel_prob) {
                let options = compatible_secondaries(drawn);
                if options.is_empty() { None } else { Some(options[rng.gen_range(0..options.len())]) }
            } else {
                None
            };
            // Disjoint size pairs always place the new box on the small side:
            // a partner twice the area of a large anchor cannot stay inside
            // the proximity gate. The converse closure emits one larger-than
            // and one smaller-than label per pair either way, so flipping the
            // direction leaves label frequencies untouched.
            let primary = if drawn == LARGER_THAN { SMALLER_THAN } else { drawn };
            let secondary = match drawn_secondary {
                Some(LARGER_THAN) if primary == NEAR || primary == OVERLAPPING => Some(SMALLER_THAN),
                s => s,
            };
            (primary, secondary)
        })
        .collect();

    // Scenes are unions of independent related pairs plus one lone object
    // when the count is odd. Each pair is placed atomically around a fresh
    // anchor, so containment and size predicates never have to coexist with
    // an anchor's earlier neighbors.
    'scene: for _ in 0..200 {
        let mut boxes: Vec<BoundingBox> = Vec::new();
        for &(primary, secondary) in &script {
            let mut placed = false;
            'attempt: for _ in 0..300 {
                let anchor = free_box(&mut rng);
                let Some(candidate) = propose(primary, secondary, &anchor, &mut rng) else {
                    continue 'attempt;
                };
                let mut intended = vec![primary];
                if let Some(s) = secondary {
                    intended.push(s);
                }
                let intended = sorted(intended);
                let conv = sorted(intended.iter().map(|&q| converse(q)).collect());
                if predicate_rules(&candidate, &anchor) != intended || predicate_rules(&anchor, &candidate) != conv {
                    continue 'attempt;
                }
                if !relation_free(&anchor, &boxes) || !relation_free(&candidate, &boxes) {
                    continue 'attempt;
                }
                boxes.push(anchor);
                boxes.push(candidate);
                placed = true;
                break;
            }
            if !placed {
                continue 'scene;
            }
        }
        if m % 2 == 1 {
            let mut placed = false;
            for _ in 0..300 {
                let lone = free_box(&mut rng);
                if relation_free(&lone, &boxes) {
                    boxes.push(lone);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'scene;
            }
        }
        // The stored tensor is the oracle's verdict over all ordered pairs;
        // the placement checks above guarantee it matches the intended edges.
        let mut rel = RelTensor::zeros(m, m, p);
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                for pred in predicate_rules(&boxes[i], &boxes[j]) {
                    rel.set(i, j, pred, 1.0);
                }
            }
        }
        let entities: Vec<Entity> =
            boxes.into_iter().map(|bbox| Entity { class_id: rng.gen_range(0..cfg.n_classes), bbox }).collect();
        return SceneGraph::new(entities, rel);
    }
    Err(Error::Config("scene generation failed after 200 attempts; the config may be geometrically infeasible".into()))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix2(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

fn predicate_counts(scenes: &[SceneGraph], p: usize) -> Vec<usize> {
    let mut counts = vec![0usize; p];
    for s in scenes {
        for t in s.to_triplets() {
            counts[t.predicate_id] += 1;
        }
    }
    counts
}

/// Generate a train/test split. Deterministic given the config; scenes use
/// per-index derived seeds so regenerating any one scene is independent of
/// the others. Every predicate is guaranteed at least one train instance by
/// regenerating trailing scenes with a forced first predicate.
pub fn generate(cfg: &GenConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let vocab = cfg.vocab();
    let mut train = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes {
        train.push(gen_scene(cfg, mix2(cfg.seed, i as u64), None)?);
    }
    let mut test = Vec::with_capacity(cfg.n_test_scenes);
    for i in 0..cfg.n_test_scenes {
        test.push(gen_scene(cfg, mix2(cfg.seed, (1 << 32) | i as u64), None)?);
    }

    let missing: Vec<usize> =
        predicate_counts(&train, PREDICATES.len()).iter().enumerate().filter(|(_, c)| **c == 0).map(|(p, _)| p).collect();
    if missing.len() > cfg.n_scenes {
        return Err(Error::Config(format!("{} scenes cannot cover {} missing predicates", cfg.n_scenes, missing.len())));
    }
    if cfg.objects_per_scene[1] < 2 && !missing.is_empty() {
        return Err(Error::Config("single-object scenes cannot realize every predicate".into()));
    }
    for (slot, pred) in missing.into_iter().enumerate() {
        let idx = cfg.n_scenes - 1 - slot;
        train[idx] = gen_scene(cfg, mix2(cfg.seed, 0xF0CC_0000 | idx as u64), Some(pred))?;
    }

    Ok(DatasetSplit { vocab, train, test, zero_shot_combos: Vec::new() })
}

fn scene_combos(scene: &SceneGraph) -> Vec<[usize; 3]> {
    scene
        .to_triplets()
        .iter()
        .map(|t| [scene.entities[t.subject_idx].class_id, t.predicate_id, scene.entities[t.object_idx].class_id])
        .collect()
}

/// Hold combos out of train by edge deletion: pick `k_combos` distinct
/// (subject class, predicate, object class) combos occurring in test, then
/// clear every train relation bit realizing one of them. Scenes are kept;
/// only labels disappear, mimicking incomplete annotation.
pub fn holdout_zero_shot(split: &DatasetSplit, k_combos: usize, seed: u64) -> Result<DatasetSplit> {
    let mut distinct: Vec<[usize; 3]> = Vec::new();
    for s in &split.test {
        for combo in scene_combos(s) {
            if !distinct.contains(&combo) {
                distinct.push(combo);
            }
        }
    }
    distinct.sort_unstable();
    if k_combos > distinct.len() {
        return Err(Error::InvalidInput(format!(
            "cannot hold out {k_combos} combos; test only contains {} distinct combos",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = distinct;
    for i in (1..pool.len()).rev() {
        let j = rng.gen_range(0..=i);
        pool.swap(i, j);
    }
    let mut chosen: Vec<[usize; 3]> = pool.into_iter().take(k_combos).collect();
    chosen.sort_unstable();

    let mut train = Vec::with_capacity(split.train.len());
    for scene in &split.train {
        let m = scene.n_entities();
        let p = scene.n_predicates();
        let mut rel = scene.relations.clone();
        for i in 0..m {
            for j in 0..m {
                for q in 0..p {
                    if rel.get(i, j, q) != 0.0 {
                        let combo = [scene.entities[i].class_id, q, scene.entities[j].class_id];
                        if chosen.binary_search(&combo).is_ok() {
                            rel.set(i, j, q, 0.0);
                        }
                    }
                }
            }
        }
        train.push(SceneGraph::new(scene.entities.clone(), rel)?);
    }
    Ok(DatasetSplit { vocab: split.vocab.clone(), train, test: split.test.clone(), zero_shot_combos: chosen })
}

// Featurization

/// Sinusoidal frequencies per box coordinate; each contributes a sin and a
/// cos, so the box block is 4 * 2 * BOX_ENC_FREQS wide.
pub const BOX_ENC_FREQS: usize = 6;

/// Token width produced by `featurize` for a given class count.
pub fn feature_width(n_classes: usize) -> usize {
    n_classes + 8 * BOX_ENC_FREQS
}

/// One input token per object (class block then box block), then
/// `cfg.n_distractors` pure-noise tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    pub tokens: Vec<Vec<f64>>,
}

fn object_hash(e: &Entity) -> u64 {
    let mut h = splitmix64(e.class_id as u64);
    for v in [e.bbox.cx, e.bbox.cy, e.bbox.w, e.bbox.h] {
        h = mix2(h, v.to_bits());
    }
    h
}

/// Standard normal via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn box_encoding(b: &BoundingBox, out: &mut Vec<f64>) {
    for v in [b.cx, b.cy, b.w, b.h] {
        for k in 0..BOX_ENC_FREQS {
            let arg = std::f64::consts::PI * (1 << k) as f64 * v;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
}

/// Featurize a scene: noisy one-hot class block plus sinusoidal box encoding
/// per object, then distractor tokens of pure noise. Noise is keyed by the
/// config seed and the object's own class and box, never its index, so
/// reordering objects permutes the object tokens and leaves the distractors
/// unchanged.
pub fn featurize(scene: &SceneGraph, cfg: &GenConfig) -> Result<SceneFeatures> {
    let c = cfg.n_classes;
    let width = feature_width(c);
    let mut tokens = Vec::with_capacity(scene.n_entities() + cfg.n_distractors);
    for e in &scene.entities {
        if e.class_id >= c {
            return Err(Error::InvalidInput(format!("entity class {} out of range for {} classes", e.class_id, c)));
        }
        let mut tok = vec![0.0; c];
        tok[e.class_id] = 1.0;
        if cfg.feature_noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix2(cfg.seed, object_hash(e)));
            for slot in tok.iter_mut() {
                *slot += cfg.feature_noise_sigma * normal(&mut rng);
            }
        }
        box_encoding(&e.bbox, &mut tok);
        debug_assert_eq!(tok.len(), width);
        tokens.push(tok);
    }
    let scene_hash = scene.entities.iter().fold(0u64, |acc, e| acc ^ object_hash(e));
    for d in 0..cfg.n_distractors {
        let mut rng = ChaCha8Rng::seed_from_u64(mix2(mix2(cfg.seed, 0xD157_0000 | d as u64), scene_hash));
        tokens.push((0..width).map(|_| normal(&mut rng)).collect());
    }
    Ok(SceneFeatures { tokens })
}
