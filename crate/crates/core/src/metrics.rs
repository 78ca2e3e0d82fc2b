//! Ranked-retrieval metrics over scene graphs: recall at K under greedy
//! one-to-one triplet matching, predicate-balanced mean recall, their
//! average, zero-shot recall over held-out combos, and subset breakdowns.
//! A maximum-bipartite oracle audits how much the greedy convention leaves
//! on the table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BoundingBox, SceneGraph};
use crate::infer::{rank_order, ImagePredictions, RankedTriplet};

/// Evaluation knobs. `predicate_counts` are training-set instance counts per
/// predicate; they gate the low-frequency subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub iou_threshold: f64,
    /// Held-out (subject class, predicate, object class) combos.
    pub zero_shot_combos: Option<Vec<[usize; 3]>>,
    pub predicate_counts: Option<Vec<usize>>,
    /// Predicates with strictly fewer training instances than this count as
    /// low-frequency; defaults to the median count, which selects nothing
    /// when frequencies are uniform.
    pub low_frequency_threshold: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![20, 50, 100],
            iou_threshold: 0.5,
            zero_shot_combos: None,
            predicate_counts: None,
            low_frequency_threshold: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() {
            return Err(Error::Config("ks must be nonempty".into()));
        }
        if self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("ks must be positive and strictly ascending: {:?}", self.ks)));
        }
        if !self.iou_threshold.is_finite() || self.iou_threshold <= 0.0 || self.iou_threshold > 1.0 {
            return Err(Error::Config(format!("iou_threshold {} must lie in (0, 1]", self.iou_threshold)));
        }
        if matches!(&self.zero_shot_combos, Some(c) if c.is_empty()) {
            return Err(Error::Config("zero_shot_combos must be nonempty when present".into()));
        }
        if matches!(&self.predicate_counts, Some(c) if c.is_empty()) {
            return Err(Error::Config("predicate_counts must be nonempty when present".into()));
        }
        Ok(())
    }
}

/// Ground-truth triplet with its endpoint classes and boxes resolved, so it
/// compares directly against a prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtTriplet {
    pub s_class: usize,
    pub o_class: usize,
    pub p: usize,
    pub s_box: BoundingBox,
    pub o_box: BoundingBox,
}

impl GtTriplet {
    fn combo(&self) -> [usize; 3] {
        [self.s_class, self.p, self.o_class]
    }
}

/// All ground-truth triplets of a scene in (subject, object, predicate)
/// order.
pub fn gt_triplets(scene: &SceneGraph) -> Vec<GtTriplet> {
    scene
        .to_triplets()
        .iter()
        .map(|t| GtTriplet {
            s_class: scene.entities[t.subject_idx].class_id,
            o_class: scene.entities[t.object_idx].class_id,
            p: t.predicate_id,
            s_box: scene.entities[t.subject_idx].bbox,
            o_box: scene.entities[t.object_idx].bbox,
        })
        .collect()
}

/// Match convention: subject classes equal, object classes equal, predicate
/// equal, and both endpoint IoUs at or above the threshold (inclusive).
pub fn triplet_hit(pred: &RankedTriplet, gt: &GtTriplet, iou_threshold: f64) -> bool {
    pred.s_class == gt.s_class
        && pred.o_class == gt.o_class
        && pred.p == gt.p
        && pred.s_box.iou(&gt.s_box) >= iou_threshold
        && pred.o_box.iou(&gt.o_box) >= iou_threshold
}

/// Metric row for a single cutoff K. `zero_shot_recall` and per-predicate
/// entries are `None` where the restriction leaves no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KReport {
    pub k: usize,
    pub recall: f64,
    pub mean_recall: f64,
    pub mean_at_k: f64,
    pub zero_shot_recall: Option<f64>,
    pub per_predicate_recall: Vec<Option<f64>>,
}

/// Images where greedy matching fell short of the bipartite optimum at the
/// largest K, and by how many triplets in total. Shipped numbers stay
/// greedy; this is audit output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchingDiscrepancy {
    pub images: usize,
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<KReport>,
    /// Restricted to images with at least one ordered pair carrying two or
    /// more predicates; `None` when no image qualifies.
    pub overlap: Option<Box<EvalReport>>,
    /// Restricted to low-frequency predicates; `None` without counts or
    /// when no predicate qualifies.
    pub low_frequency: Option<Box<EvalReport>>,
    pub discrepancy: MatchingDiscrepancy,
}

impl EvalReport {
    /// Plain-text table of the per-K rows, one section per subset.
    pub fn table(&self) -> String {
        let mut out = String::new();
        Self::section(&mut out, "all", &self.ks);
        if let Some(r) = &self.overlap {
            Self::section(&mut out, "overlap", &r.ks);
        }
        if let Some(r) = &self.low_frequency {
            Self::section(&mut out, "low_frequency", &r.ks);
        }
        out
    }

    fn section(out: &mut String, name: &str, rows: &[KReport]) {
        writeln!(out, "[{name}]").unwrap();
        writeln!(out, "{:>6} {:>8} {:>8} {:>8} {:>8}", "K", "R", "mR", "M", "zR").unwrap();
        for r in rows {
            let zs = r.zero_shot_recall.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            writeln!(out, "{:>6} {:>8.4} {:>8.4} {:>8.4} {:>8}", r.k, r.recall, r.mean_recall, r.mean_at_k, zs)
                .unwrap();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Overlap,
    LowFrequency,
}

type ImagePair = (Vec<RankedTriplet>, Vec<GtTriplet>);

fn dataset_predicates(gts: &[SceneGraph]) -> Result<usize> {
    let first = gts.first().ok_or_else(|| Error::InvalidInput("evaluation needs at least one scene".into()))?;
    let p = first.n_predicates();
    if let Some(bad) = gts.iter().find(|s| s.n_predicates() != p) {
        return Err(Error::shape("evaluate", format!("scenes disagree on predicate count: {p} vs {}", bad.n_predicates())));
    }
    Ok(p)
}

/// Align predictions with scenes by image id and force the canonical rank
/// order, so metric values cannot depend on storage order among ties.
fn pair_images(preds: &[ImagePredictions], gts: &[SceneGraph]) -> Result<Vec<ImagePair>> {
    let mut slots: Vec<Vec<RankedTriplet>> = vec![Vec::new(); gts.len()];
    let mut seen = vec![false; gts.len()];
    for ip in preds {
        if ip.image_id >= gts.len() {
            return Err(Error::InvalidInput(format!(
                "image_id {} outside dataset of {} scenes",
                ip.image_id,
                gts.len()
            )));
        }
        if seen[ip.image_id] {
            return Err(Error::InvalidInput(format!("duplicate predictions for image {}", ip.image_id)));
        }
        seen[ip.image_id] = true;
        let mut sorted = ip.triplets.clone();
        sorted.sort_by(rank_order);
        slots[ip.image_id] = sorted;
    }
    Ok(gts.iter().map(gt_triplets).zip(slots).map(|(g, s)| (s, g)).collect())
}

/// Greedy one-to-one matching in score order: each of the top-K predictions
/// claims the first unmatched ground truth it hits. Returns per-GT flags.
fn greedy_flags(preds: &[RankedTriplet], k: usize, gts: &[GtTriplet], iou_t: f64) -> Vec<bool> {
    let mut matched = vec![false; gts.len()];
    for pred in preds.iter().take(k) {
        if let Some(g) = (0..gts.len()).find(|&g| !matched[g] && triplet_hit(pred, &gts[g], iou_t)) {
            matched[g] = true;
        }
    }
    matched
}

/// Maximum one-to-one matching size between the top-K predictions and the
/// ground truth, via augmenting paths. Upper-bounds any greedy order.
pub fn optimal_match_count(preds: &[RankedTriplet], k: usize, gts: &[GtTriplet], iou_t: f64) -> usize {
    let hits: Vec<Vec<usize>> = preds
        .iter()
        .take(k)
        .map(|pr| (0..gts.len()).filter(|&g| triplet_hit(pr, &gts[g], iou_t)).collect())
        .collect();

    fn augment(u: usize, hits: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &g in &hits[u] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            let free = match owner[g] {
                None => true,
                Some(prev) => augment(prev, hits, owner, seen),
            };
            if free {
                owner[g] = Some(u);
                return true;
            }
        }
        false
    }

    let mut owner: Vec<Option<usize>> = vec![None; gts.len()];
    let mut size = 0;
    for u in 0..hits.len() {
        let mut seen = vec![false; gts.len()];
        if augment(u, &hits, &mut owner, &mut seen) {
            size += 1;
        }
    }
    size
}

/// Compare the shipped greedy matching against the bipartite optimum at one
/// cutoff across the dataset.
pub fn matching_discrepancy(
    preds: &[ImagePredictions],
    gts: &[SceneGraph],
    k: usize,
    iou_threshold: f64,
) -> Result<MatchingDiscrepancy> {
    let pairs = pair_images(preds, gts)?;
    Ok(discrepancy_at_k(&pairs, k, iou_threshold))
}

fn discrepancy_at_k(pairs: &[ImagePair], k: usize, iou_t: f64) -> MatchingDiscrepancy {
    let mut out = MatchingDiscrepancy::default();
    for (preds, gts) in pairs {
        if gts.is_empty() {
            continue;
        }
        let greedy = greedy_flags(preds, k, gts, iou_t).iter().filter(|m| **m).count();
        let optimal = optimal_match_count(preds, k, gts, iou_t);
        if optimal > greedy {
            out.images += 1;
            out.shortfall += optimal - greedy;
        }
    }
    out
}

struct RawMetrics {
    recall: f64,
    mean_recall: f64,
    per_predicate: Vec<Option<f64>>,
}

/// One matching pass per image; per-predicate recalls reuse the same flags,
/// then average over images containing the predicate, then over predicates
/// present in the ground truth. `None` when no image has ground truth.
fn metrics_at_k(pairs: &[ImagePair], k: usize, iou_t: f64, n_predicates: usize) -> Option<RawMetrics> {
    let mut recall_sum = 0.0;
    let mut n_images = 0usize;
    let mut pred_sum = vec![0.0; n_predicates];
    let mut pred_images = vec![0usize; n_predicates];
    for (preds, gts) in pairs {
        if gts.is_empty() {
            continue;
        }
        n_images += 1;
        let flags = greedy_flags(preds, k, gts, iou_t);
        let hit = flags.iter().filter(|m| **m).count();
        recall_sum += hit as f64 / gts.len() as f64;
        for p in 0..n_predicates {
            let total = gts.iter().filter(|g| g.p == p).count();
            if total == 0 {
                continue;
            }
            let hit_p = flags.iter().zip(gts).filter(|(m, g)| **m && g.p == p).count();
            pred_sum[p] += hit_p as f64 / total as f64;
            pred_images[p] += 1;
        }
    }
    if n_images == 0 {
        return None;
    }
    let per_predicate: Vec<Option<f64>> =
        (0..n_predicates).map(|p| (pred_images[p] > 0).then(|| pred_sum[p] / pred_images[p] as f64)).collect();
    let present: Vec<f64> = per_predicate.iter().flatten().copied().collect();
    Some(RawMetrics {
        recall: recall_sum / n_images as f64,
        mean_recall: present.iter().sum::<f64>() / present.len() as f64,
        per_predicate,
    })
}

fn restrict_gts(pairs: &[ImagePair], keep: impl Fn(&GtTriplet) -> bool) -> Vec<ImagePair> {
    pairs
        .iter()
        .map(|(preds, gts)| (preds.clone(), gts.iter().filter(|g| keep(g)).copied().collect()))
        .collect()
}

/// Predicates strictly below the threshold count; the default threshold is
/// the median, so a uniform frequency profile selects nothing.
fn low_frequency_set(counts: &[usize], threshold: Option<usize>) -> Vec<usize> {
    let cut = match threshold {
        Some(t) => t as f64,
        None => {
            let mut sorted = counts.to_vec();
            sorted.sort_unstable();
            let mid = sorted.len() / 2;
            if sorted.len() % 2 == 1 {
                sorted[mid] as f64
            } else {
                (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
            }
        }
    };
    (0..counts.len()).filter(|&p| (counts[p] as f64) < cut).collect()
}

fn has_multi_predicate_pair(scene: &SceneGraph) -> bool {
    let (m, _, _) = scene.relations.shape();
    (0..m).any(|i| {
        (0..m).any(|j| i != j && scene.relations.pair(i, j).iter().filter(|v| **v == 1.0).count() >= 2)
    })
}

/// Rows and discrepancy for one pair set; `None` when no image carries
/// ground truth (the restriction emptied the dataset).
fn eval_pairs(pairs: &[ImagePair], cfg: &EvalConfig, n_predicates: usize) -> Option<EvalReport> {
    if pairs.iter().all(|(_, g)| g.is_empty()) {
        return None;
    }
    let zs_pairs = cfg
        .zero_shot_combos
        .as_ref()
        .map(|combos| restrict_gts(pairs, |g| combos.contains(&g.combo())));
    let ks = cfg
        .ks
        .iter()
        .map(|&k| {
            let m = metrics_at_k(pairs, k, cfg.iou_threshold, n_predicates)
                .expect("pair set was checked to carry ground truth");
            let zero_shot_recall = zs_pairs
                .as_ref()
                .and_then(|zp| metrics_at_k(zp, k, cfg.iou_threshold, n_predicates).map(|zm| zm.recall));
            KReport {
                k,
                recall: m.recall,
                mean_recall: m.mean_recall,
                mean_at_k: (m.recall + m.mean_recall) / 2.0,
                zero_shot_recall,
                per_predicate_recall: m.per_predicate,
            }
        })
        .collect::<Vec<_>>();
    let top_k = *cfg.ks.last().expect("validated nonempty");
    Some(EvalReport {
        ks,
        overlap: None,
        low_frequency: None,
        discrepancy: discrepancy_at_k(pairs, top_k, cfg.iou_threshold),
    })
}

fn subset_pairs(pairs: &[ImagePair], gts: &[SceneGraph], cfg: &EvalConfig, subset: Subset) -> Result<Option<Vec<ImagePair>>> {
    match subset {
        Subset::Overlap => {
            let kept: Vec<ImagePair> = pairs
                .iter()
                .zip(gts)
                .filter(|(_, scene)| has_multi_predicate_pair(scene))
                .map(|(pair, _)| pair.clone())
                .collect();
            Ok((!kept.is_empty()).then_some(kept))
        }
        Subset::LowFrequency => {
            let counts = cfg
                .predicate_counts
                .as_ref()
                .ok_or_else(|| Error::Config("low-frequency subset needs predicate_counts".into()))?;
            let set = low_frequency_set(counts, cfg.low_frequency_threshold);
            if set.is_empty() {
                return Ok(None);
            }
            Ok(Some(restrict_gts(pairs, |g| set.contains(&g.p))))
        }
    }
}

/// Dataset recall per K: greedy matched fraction per image, averaged over
/// images with ground truth.
pub fn recall_at_k(preds: &[ImagePredictions], gts: &[SceneGraph], cfg: &EvalConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n_predicates = dataset_predicates(gts)?;
    let pairs = pair_images(preds, gts)?;
    cfg.ks
        .iter()
        .map(|&k| {
            metrics_at_k(&pairs, k, cfg.iou_threshold, n_predicates)
                .map(|m| m.recall)
                .ok_or_else(|| Error::InvalidInput("evaluation needs at least one ground-truth triplet".into()))
        })
        .collect()
}

/// Predicate-balanced recall per K: every predicate present in the ground
/// truth weighs the same regardless of frequency.
pub fn mean_recall_at_k(preds: &[ImagePredictions], gts: &[SceneGraph], cfg: &EvalConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n_predicates = dataset_predicates(gts)?;
    let pairs = pair_images(preds, gts)?;
    cfg.ks
        .iter()
        .map(|&k| {
            metrics_at_k(&pairs, k, cfg.iou_threshold, n_predicates)
                .map(|m| m.mean_recall)
                .ok_or_else(|| Error::InvalidInput("evaluation needs at least one ground-truth triplet".into()))
        })
        .collect()
}

/// Recall per K restricted to ground truth whose combo is held out; `None`
/// entries mean the restriction left no ground truth (undefined, not zero).
pub fn zero_shot_recall(
    preds: &[ImagePredictions],
    gts: &[SceneGraph],
    combos: &[[usize; 3]],
    cfg: &EvalConfig,
) -> Result<Vec<Option<f64>>> {
    cfg.validate()?;
    if combos.is_empty() {
        return Err(Error::InvalidInput("zero-shot evaluation needs at least one combo".into()));
    }
    let n_predicates = dataset_predicates(gts)?;
    let pairs = pair_images(preds, gts)?;
    let restricted = restrict_gts(&pairs, |g| combos.contains(&g.combo()));
    Ok(cfg
        .ks
        .iter()
        .map(|&k| metrics_at_k(&restricted, k, cfg.iou_threshold, n_predicates).map(|m| m.recall))
        .collect())
}

/// Evaluate one analysis subset on its own; `None` when the subset is empty.
pub fn subset_eval(
    preds: &[ImagePredictions],
    gts: &[SceneGraph],
    cfg: &EvalConfig,
    subset: Subset,
) -> Result<Option<EvalReport>> {
    cfg.validate()?;
    let n_predicates = dataset_predicates(gts)?;
    check_counts(cfg, n_predicates)?;
    let pairs = pair_images(preds, gts)?;
    match subset_pairs(&pairs, gts, cfg, subset)? {
        Some(kept) => Ok(eval_pairs(&kept, cfg, n_predicates)),
        None => Ok(None),
    }
}

fn check_counts(cfg: &EvalConfig, n_predicates: usize) -> Result<()> {
    if let Some(c) = &cfg.predicate_counts {
        if c.len() != n_predicates {
            return Err(Error::shape(
                "evaluate",
                format!("predicate_counts covers {} predicates, scenes have {n_predicates}", c.len()),
            ));
        }
    }
    Ok(())
}

/// Full report: main rows plus the overlap subset and, when counts are
/// provided, the low-frequency subset.
pub fn evaluate(preds: &[ImagePredictions], gts: &[SceneGraph], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let n_predicates = dataset_predicates(gts)?;
    check_counts(cfg, n_predicates)?;
    let pairs = pair_images(preds, gts)?;
    let mut report = eval_pairs(&pairs, cfg, n_predicates)
        .ok_or_else(|| Error::InvalidInput("evaluation needs at least one ground-truth triplet".into()))?;
    // Subsets drop the zero-shot column; mixing both restrictions at once
    // would not answer either question.
    let sub_cfg = EvalConfig { zero_shot_combos: None, ..cfg.clone() };
    if let Some(kept) = subset_pairs(&pairs, gts, &sub_cfg, Subset::Overlap)? {
        report.overlap = eval_pairs(&kept, &sub_cfg, n_predicates).map(Box::new);
    }
    if cfg.predicate_counts.is_some() {
        if let Some(kept) = subset_pairs(&pairs, gts, &sub_cfg, Subset::LowFrequency)? {
            report.low_frequency = eval_pairs(&kept, &sub_cfg, n_predicates).map(Box::new);
        }
    }
    Ok(report)
}

/// Ground truth echoed back as predictions with strictly descending scores:
/// the evaluation fixed point.
pub fn echo_predictions(gts: &[SceneGraph]) -> Vec<ImagePredictions> {
    gts.iter()
        .enumerate()
        .map(|(image_id, scene)| {
            let records = gt_triplets(scene);
            let n = records.len().max(1) as f64;
            let triplets = scene
                .to_triplets()
                .iter()
                .zip(&records)
                .enumerate()
                .map(|(rank, (t, r))| RankedTriplet {
                    s: t.subject_idx,
                    o: t.object_idx,
                    p: t.predicate_id,
                    score: (n - rank as f64) / n,
                    s_box: r.s_box,
                    o_box: r.o_box,
                    s_class: r.s_class,
                    o_class: r.o_class,
                })
                .collect();
            ImagePredictions { image_id, triplets }
        })
        .collect()
}
